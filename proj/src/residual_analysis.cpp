#include "crnet/residual_analysis.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <stdexcept>

namespace crnet {

double relative_error(const Matrix& approx, const Matrix& truth) {
    const double den = frob_norm(truth);
    if (den == 0.0) throw std::invalid_argument("relative_error: zero reference matrix");
    return frob_norm(sub(approx, truth)) / den;
}

double cosine_sim(const Matrix& a, const Matrix& b) {
    const double na = frob_norm(a), nb = frob_norm(b);
    if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_sim: zero matrix");
    return frob_inner(a, b) / (na * nb);
}

Matrix estimate_cross(const Matrix& y_prev, const Matrix& y_curr, double beta0, std::size_t r) {
    if (!y_prev.same_shape(y_curr))
        throw std::invalid_argument("estimate_cross: shape mismatch");
    Matrix resid = y_curr;
    axpy_inplace(resid, -beta0, y_prev);
    Matrix est = low_rank_approx(resid, r);
    axpy_inplace(est, beta0, y_prev);
    return est;
}

const std::vector<double>& default_beta0_grid() {
    static const std::vector<double> grid = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 2.0, 3.0, 5.0};
    return grid;
}

SweepResult beta0_sweep(const Matrix& y_prev, const Matrix& y_curr, std::size_t r,
                        const std::vector<double>& grid) {
    if (grid.empty()) throw std::invalid_argument("beta0_sweep: empty grid");
    SweepResult out;
    bool first = true;
    for (double b : grid) {
        const double err = relative_error(estimate_cross(y_prev, y_curr, b, r), y_curr);
        out.grid.push_back({b, err});
        if (first || err < out.rel_err) {
            out.rel_err = err;
            out.beta0 = b;
            first = false;
        }
    }
    return out;
}

double r0_threshold(const Matrix& y_prev, double eps_cos) {
    if (!(eps_cos > 0.0) || eps_cos >= 1.0)
        throw std::invalid_argument("r0_threshold: eps must be in (0, 1)");
    return (1.0 - eps_cos) * (1.0 - eps_cos) * stable_rank(y_prev);
}

double beta_star(const Matrix& y_prev, const Matrix& y_curr, double eps_cos, std::size_t r) {
    const double phi = stable_rank(y_prev);
    const double s2 = spectral_norm(y_prev);
    const double fp2 = frob_norm_sq(y_prev);
    const double fc = frob_norm(y_curr);
    const double num = ((1.0 - eps_cos) * std::sqrt(phi) - std::sqrt(static_cast<double>(r))) *
                       s2 * fc;
    const double den = fp2 + static_cast<double>(r) * s2 * s2;
    return num / den;
}

std::pair<Matrix, Matrix> make_correlated_pair(std::size_t n, double target_cos,
                                               std::uint64_t seed, double c) {
    if (!(target_cos > 0.0) || target_cos >= 1.0)
        throw std::invalid_argument("make_correlated_pair: target cosine must be in (0, 1)");
    if (!(c > 0.0)) throw std::invalid_argument("make_correlated_pair: c must be positive");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix prev(n, n), g(n, n);
    for (double& v : prev.data) v = dist(rng);
    for (double& v : g.data) v = dist(rng);

    auto curr_at = [&](double eta) {
        Matrix y = scale(prev, c);
        axpy_inplace(y, eta, g);
        return y;
    };
    // cosine(prev, c*prev + eta*g) decreases from 1 toward cos(prev, g);
    // bracket then bisect eta.
    double lo = 0.0, hi = 1.0;
    while (cosine_sim(prev, curr_at(hi)) > target_cos) {
        hi *= 2.0;
        if (hi > 1e12)
            throw std::runtime_error("make_correlated_pair: cannot reach target cosine " +
                                     std::to_string(target_cos));
    }
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (cosine_sim(prev, curr_at(mid)) > target_cos)
            lo = mid;
        else
            hi = mid;
        if (std::fabs(cosine_sim(prev, curr_at(mid)) - target_cos) <= 1e-4) break;
    }
    const double eta = 0.5 * (lo + hi);
    return {std::move(prev), curr_at(eta)};
}

TheoremCheckResult theorem_check(std::size_t n, double eps_cos, std::uint64_t seed, double c,
                                 std::size_t r_override) {
    auto [prev, curr] = make_correlated_pair(n, 1.0 - eps_cos, seed, c);
    TheoremCheckResult res;
    res.cos_sim = cosine_sim(prev, curr);
    // use the measured similarity, so Assumption "cos >= 1 - eps" holds exactly
    res.eps_used = std::min(std::max(1.0 - res.cos_sim, 1e-12), 1.0 - 1e-12);
    res.r0 = r0_threshold(prev, res.eps_used);
    res.r = r_override > 0 ? r_override
                           : std::max<std::size_t>(1, static_cast<std::size_t>(res.r0 / 2.0));
    res.in_hypothesis = static_cast<double>(res.r) < res.r0 && res.r >= 1 &&
                        res.r <= std::min(prev.rows, prev.cols);
    if (!res.in_hypothesis) return res;  // flagged, no claim made

    res.beta = beta_star(prev, curr, res.eps_used, res.r);
    const Matrix est = estimate_cross(prev, curr, res.beta, res.r);
    res.lhs = frob_norm_sq(sub(curr, est));
    res.rhs = frob_norm_sq(sub(curr, low_rank_approx(curr, res.r)));
    res.holds = res.lhs <= res.rhs + 1e-9 * std::max(res.rhs, 1.0);
    return res;
}

AnalysisReport analyze_model_activations(const CrNetParams& params,
                                         const std::vector<int>& sample, double r_fraction) {
    const ModelConfig& cfg = params.cfg;
    if (cfg.L < 2)
        throw std::invalid_argument("analyze_model_activations: needs L >= 2");
    if (sample.empty())
        throw std::invalid_argument("analyze_model_activations: empty sample");
    if (!(r_fraction > 0.0))
        throw std::invalid_argument("analyze_model_activations: r_fraction must be positive");

    ActivationCache cache = forward(params, sample, CacheMode::Full);
    const auto& grid = default_beta0_grid();
    AnalysisReport rep;
    std::vector<double> grid_sums(grid.size(), 0.0);
    for (std::size_t l = 2; l <= cfg.L; ++l) {
        for (Position p : kPositions) {
            const int i = static_cast<int>(p);
            const Matrix& y_prev = cache.layers[l - 2].y[i];
            const Matrix& y_curr = cache.layers[l - 1].y[i];
            LayerPosStat st;
            st.layer = l;
            st.pos = p;
            std::size_t r = std::max<std::size_t>(
                1, static_cast<std::size_t>(r_fraction * static_cast<double>(cfg.h)));
            r = std::min(r, std::min(y_curr.rows, y_curr.cols));
            st.r = r;
            st.rel_err_direct = relative_error(low_rank_approx(y_curr, r), y_curr);
            SweepResult sweep = beta0_sweep(y_prev, y_curr, r, grid);
            st.beta0 = sweep.beta0;
            st.rel_err_cross = sweep.rel_err;
            st.cosine = cosine_sim(y_prev, y_curr);
            st.stable_rank_prev = stable_rank(y_prev);
            for (std::size_t gi = 0; gi < grid.size(); ++gi)
                grid_sums[gi] += sweep.grid[gi].second;
            rep.mean_direct += st.rel_err_direct;
            rep.mean_cross += st.rel_err_cross;
            rep.rows.push_back(st);
        }
    }
    const double denom = static_cast<double>(rep.rows.size());
    rep.mean_direct /= denom;
    rep.mean_cross /= denom;
    std::size_t best = 0;
    for (std::size_t gi = 1; gi < grid.size(); ++gi)
        if (grid_sums[gi] < grid_sums[best]) best = gi;
    rep.best_global_beta0 = grid[best];
    rep.best_global_mean = grid_sums[best] / denom;
    return rep;
}

std::string analysis_csv(const AnalysisReport& rep) {
    std::string out =
        "layer,position,r,beta0,rel_err_direct,rel_err_cross,cosine_sim,stable_rank_prev\n";
    char buf[256];
    for (const LayerPosStat& s : rep.rows) {
        std::snprintf(buf, sizeof(buf), "%zu,%s,%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", s.layer,
                      position_name(s.pos), s.r, s.beta0, s.rel_err_direct, s.rel_err_cross,
                      s.cosine, s.stable_rank_prev);
        out += buf;
    }
    return out;
}

}  // namespace crnet
