#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "crnet/model.hpp"
#include "crnet/svd.hpp"

namespace crnet {

// ||approx - truth||_F / ||truth||_F. Rejects a zero truth matrix.
double relative_error(const Matrix& approx, const Matrix& truth);

// Frobenius cosine similarity <a, b> / (||a|| ||b||).
double cosine_sim(const Matrix& a, const Matrix& b);

// Cross-layer estimator: beta0 * y_prev + best rank-r approximation of the
// residual (y_curr - beta0 * y_prev).
Matrix estimate_cross(const Matrix& y_prev, const Matrix& y_curr, double beta0, std::size_t r);

const std::vector<double>& default_beta0_grid();  // {0, 0.2, 0.4, 0.6, 0.8, 1, 2, 3, 5}

struct SweepResult {
    double beta0 = 0.0;    // grid argmin
    double rel_err = 0.0;  // error at the argmin
    std::vector<std::pair<double, double>> grid;  // (beta0, rel_err) per grid point
};
SweepResult beta0_sweep(const Matrix& y_prev, const Matrix& y_curr, std::size_t r,
                        const std::vector<double>& grid = default_beta0_grid());

// Rank threshold r0 = (1 - eps)^2 * stable_rank(y_prev).
double r0_threshold(const Matrix& y_prev, double eps_cos);

// Closed-form residual scale that beats plain truncation whenever the
// cosine-similarity hypothesis holds and r < r0.
double beta_star(const Matrix& y_prev, const Matrix& y_curr, double eps_cos, std::size_t r);

// y_prev is n x n Gaussian; y_curr = c * y_prev + eta * G with eta bisected
// until cosine similarity hits target_cos within 1e-3.
std::pair<Matrix, Matrix> make_correlated_pair(std::size_t n, double target_cos,
                                               std::uint64_t seed, double c = 1.0);

struct TheoremCheckResult {
    bool in_hypothesis = false;  // r < r0 held for the generated pair
    bool holds = false;          // lhs <= rhs (1e-9 relative slack); false when out of hypothesis
    double lhs = 0.0;            // squared error of the cross-layer estimator at beta_star
    double rhs = 0.0;            // squared error of direct rank-r truncation
    double beta = 0.0;
    double r0 = 0.0;
    double eps_used = 0.0;  // 1 - measured cosine, so the hypothesis is exact
    double cos_sim = 0.0;
    std::size_t r = 0;
};

// Generates a correlated pair targeting cosine 1 - eps_cos and verifies the
// estimator bound at r = floor(r0 / 2) (or r_override when nonzero).
TheoremCheckResult theorem_check(std::size_t n, double eps_cos, std::uint64_t seed,
                                 double c = 1.0, std::size_t r_override = 0);

struct LayerPosStat {
    std::size_t layer = 0;
    Position pos = Position::Q;
    std::size_t r = 0;
    double beta0 = 0.0;
    double rel_err_direct = 0.0;
    double rel_err_cross = 0.0;
    double cosine = 0.0;
    double stable_rank_prev = 0.0;
};

struct AnalysisReport {
    std::vector<LayerPosStat> rows;  // (L-1) * 7 rows, layers 2..L
    double mean_direct = 0.0;
    double mean_cross = 0.0;
    double best_global_beta0 = 0.0;  // single grid value minimizing the mean error
    double best_global_mean = 0.0;
};

// Runs a forward pass on the sample and scores, per layer and position, the
// direct rank-r truncation of Y_l against the best cross-layer estimate from
// Y_{l-1} over the beta0 grid. r = max(1, floor(r_fraction * h)), clamped to
// the matrix dimensions.
AnalysisReport analyze_model_activations(const CrNetParams& params,
                                         const std::vector<int>& sample, double r_fraction);
std::string analysis_csv(const AnalysisReport& rep);

}  // namespace crnet
