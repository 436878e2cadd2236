#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "crnet/model.hpp"
#include "crnet/presets.hpp"
#include "crnet/residual_analysis.hpp"
#include "crnet/svd.hpp"

using namespace crnet;

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed, double sd = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, sd);
    Matrix m(rows, cols);
    for (double& v : m.data) v = dist(rng);
    return m;
}

Matrix eye(std::size_t n, double v) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = v;
    return m;
}

}  // namespace

TEST_CASE("relative error against hand values") {
    Matrix truth(2, 2);
    truth.at(0, 0) = 1.0;
    truth.at(1, 1) = 1.0;
    Matrix approx = truth;
    CHECK(relative_error(approx, truth) == 0.0);
    approx.at(0, 0) = 1.1;
    CHECK(relative_error(approx, truth) == doctest::Approx(0.1 / std::sqrt(2.0)).epsilon(1e-12));
    CHECK_THROWS_AS(relative_error(approx, Matrix(2, 2)), std::invalid_argument);
}

TEST_CASE("cosine similarity fixtures") {
    Matrix a(2, 2), b(2, 2);
    a.at(0, 0) = 1.0;
    b.at(1, 1) = 1.0;
    CHECK(cosine_sim(a, b) == 0.0);
    CHECK(cosine_sim(a, a) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(cosine_sim(a, scale(a, -3.0)) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(cosine_sim(a, scale(a, 7.5)) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK_THROWS_AS(cosine_sim(a, Matrix(2, 2)), std::invalid_argument);
}

TEST_CASE("estimate_cross at beta0 = 0 is plain truncation") {
    Matrix y_prev = gaussian(12, 9, 1);
    Matrix y_curr = gaussian(12, 9, 2);
    Matrix est = estimate_cross(y_prev, y_curr, 0.0, 3);
    Matrix direct = low_rank_approx(y_curr, 3);
    REQUIRE(est.same_shape(direct));
    for (std::size_t i = 0; i < est.size(); ++i) CHECK(est.data[i] == direct.data[i]);

    CHECK_THROWS_AS(estimate_cross(gaussian(3, 3, 1), gaussian(4, 4, 2), 0.5, 1),
                    std::invalid_argument);
}

TEST_CASE("estimate_cross recovers an exactly low-rank perturbation") {
    const std::size_t n = 20, r = 3;
    Matrix y_prev = gaussian(n, n, 3);
    Matrix bump = matmul(gaussian(n, r, 4), gaussian(r, n, 5));
    Matrix y_curr = scale(y_prev, 0.7);
    add_inplace(y_curr, bump);
    // with beta0 at the true mixing weight the residual is rank 3 exactly
    Matrix est = estimate_cross(y_prev, y_curr, 0.7, r);
    CHECK(relative_error(est, y_curr) <= 1e-9);
    // an underestimated rank cannot represent it
    CHECK(relative_error(estimate_cross(y_prev, y_curr, 0.7, 1), y_curr) > 1e-3);
}

TEST_CASE("beta0 sweep agrees with a brute-force scan") {
    Matrix y_prev = gaussian(10, 10, 6);
    Matrix y_curr = scale(y_prev, 0.8);
    axpy_inplace(y_curr, 0.3, gaussian(10, 10, 7));

    std::vector<double> grid = {0.0, 0.4, 0.8, 1.2};
    SweepResult sweep = beta0_sweep(y_prev, y_curr, 2, grid);
    REQUIRE(sweep.grid.size() == grid.size());
    double best_err = 0.0, best_b = 0.0;
    bool first = true;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        double err = relative_error(estimate_cross(y_prev, y_curr, grid[i], 2), y_curr);
        CHECK(sweep.grid[i].first == grid[i]);
        CHECK(sweep.grid[i].second == err);
        if (first || err < best_err) {
            best_err = err;
            best_b = grid[i];
            first = false;
        }
    }
    CHECK(sweep.beta0 == best_b);
    CHECK(sweep.rel_err == best_err);
    // the construction mixes at 0.8, so that grid point should win
    CHECK(sweep.beta0 == 0.8);

    CHECK_THROWS_AS(beta0_sweep(y_prev, y_curr, 2, {}), std::invalid_argument);
}

TEST_CASE("default grid is the documented nine-point ladder") {
    const std::vector<double> want = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 2.0, 3.0, 5.0};
    CHECK(default_beta0_grid() == want);
}

TEST_CASE("rank threshold and beta_star closed forms") {
    Matrix y_prev = eye(6, 3.0);  // stable rank exactly 6
    CHECK(r0_threshold(y_prev, 0.1) == doctest::Approx(0.81 * 6.0).epsilon(1e-12));
    CHECK_THROWS_AS(r0_threshold(y_prev, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(r0_threshold(y_prev, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(r0_threshold(y_prev, -0.2), std::invalid_argument);

    // y_prev = 2 I_4: spectral 2, frob^2 16, stable rank 4. y_curr with unit
    // frobenius norm makes the closed form easy to evaluate by hand:
    // beta* = ((1 - eps) sqrt(4) - sqrt(r)) * 2 / (16 + 4 r)
    Matrix p2 = eye(4, 2.0);
    Matrix ones(4, 4);
    for (double& v : ones.data) v = 0.25;
    CHECK(beta_star(p2, ones, 0.1, 1) == doctest::Approx((0.9 * 2.0 - 1.0) * 2.0 / 20.0)
                                             .epsilon(1e-12));
}

TEST_CASE("correlated pair generator hits the target cosine") {
    for (double target : {0.9, 0.95, 0.98}) {
        auto [prev, curr] = make_correlated_pair(48, target, 11);
        CHECK(std::fabs(cosine_sim(prev, curr) - target) <= 1e-3);
        CHECK(prev.rows == 48);
        CHECK(curr.rows == 48);
    }
    // the scaled variant keeps the same cosine target
    auto [p, c] = make_correlated_pair(32, 0.95, 12, 2.5);
    CHECK(std::fabs(cosine_sim(p, c) - 0.95) <= 1e-3);

    CHECK_THROWS_AS(make_correlated_pair(16, 1.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(make_correlated_pair(16, 0.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(make_correlated_pair(16, 0.9, 1, 0.0), std::invalid_argument);
}

TEST_CASE("the estimator bound holds across seeds") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        TheoremCheckResult res = theorem_check(64, 0.05, seed);
        INFO("seed ", seed);
        REQUIRE(res.in_hypothesis);
        CHECK(res.holds);
        CHECK(res.lhs <= res.rhs + 1e-9 * std::max(res.rhs, 1.0));
        CHECK(res.r == static_cast<std::size_t>(res.r0 / 2.0));
        // gaussian stable rank concentrates near n/4 (sigma_max ~ 2 sqrt(n))
        CHECK(res.r0 == doctest::Approx((1.0 - res.eps_used) * (1.0 - res.eps_used) * 16.0)
                            .epsilon(0.35));
        CHECK(res.eps_used == doctest::Approx(0.05).epsilon(0.05));
        CHECK(res.beta > 0.0);
    }
}

TEST_CASE("oversized rank leaves the hypothesis and makes no claim") {
    TheoremCheckResult res = theorem_check(32, 0.05, 1, 1.0, 400);
    CHECK_FALSE(res.in_hypothesis);
    CHECK_FALSE(res.holds);
    CHECK(res.lhs == 0.0);
    CHECK(res.rhs == 0.0);
}

TEST_CASE("activation analysis scores every late layer and position") {
    ModelConfig cfg = model_preset("toy");
    CrNetParams params = random_params(cfg, 9, 0.5, 1.5, true, 0.05);
    std::vector<int> sample(cfg.s);
    for (std::size_t i = 0; i < sample.size(); ++i)
        sample[i] = static_cast<int>((i * 11 + 5) % cfg.vocab);

    AnalysisReport rep = analyze_model_activations(params, sample, 0.25);
    REQUIRE(rep.rows.size() == (cfg.L - 1) * 7);

    double sum_direct = 0.0, sum_cross = 0.0;
    for (const LayerPosStat& st : rep.rows) {
        CHECK(st.layer >= 2);
        CHECK(st.layer <= cfg.L);
        CHECK(st.r == 16);  // floor(0.25 * 64)
        CHECK(st.rel_err_direct >= 0.0);
        // the grid contains beta0 = 0, so the sweep can never lose to direct
        CHECK(st.rel_err_cross <= st.rel_err_direct + 1e-15);
        CHECK(st.stable_rank_prev >= 1.0);
        CHECK(std::fabs(st.cosine) <= 1.0 + 1e-12);
        sum_direct += st.rel_err_direct;
        sum_cross += st.rel_err_cross;
    }
    CHECK(rep.mean_direct == doctest::Approx(sum_direct / 21.0).epsilon(1e-12));
    CHECK(rep.mean_cross == doctest::Approx(sum_cross / 21.0).epsilon(1e-12));
    CHECK(rep.mean_cross <= rep.mean_direct + 1e-15);
    // a single shared beta0 cannot beat per-row argmins, but still beats beta0=0
    CHECK(rep.best_global_mean >= rep.mean_cross - 1e-15);
    CHECK(rep.best_global_mean <= rep.mean_direct + 1e-15);

    std::istringstream in(analysis_csv(rep));
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "layer,position,r,beta0,rel_err_direct,rel_err_cross,cosine_sim,"
                  "stable_rank_prev");
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == rep.rows.size());
}

TEST_CASE("activation analysis validates its inputs") {
    ModelConfig cfg = model_preset("toy");
    CrNetParams params = random_params(cfg, 10, 0.5, 1.5, true, 0.05);
    CHECK_THROWS_AS(analyze_model_activations(params, {}, 0.25), std::invalid_argument);
    CHECK_THROWS_AS(analyze_model_activations(params, {0, 1}, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(analyze_model_activations(params, {0, 1}, -0.5), std::invalid_argument);

    ModelConfig shallow;
    shallow.L = 1;
    shallow.h = 8;
    shallow.h_ff = 16;
    shallow.heads = 1;
    shallow.vocab = 16;
    shallow.s = 4;
    CrNetParams sp = random_params(shallow, 11);
    CHECK_THROWS_AS(analyze_model_activations(sp, {0, 1}, 0.25), std::invalid_argument);
}
