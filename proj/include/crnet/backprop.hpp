#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "crnet/model.hpp"

namespace crnet {

struct LossGrad {
    double loss = 0.0;
    Matrix d_logits;  // (softmax - onehot) / n, n = number of positions
};

// Mean cross-entropy over positions, natural log.
LossGrad loss_and_grad(const Matrix& logits, const std::vector<int>& targets);
double loss_only(const Matrix& logits, const std::vector<int>& targets);

// Test hook: replaces the tau(beta_l^P) factor applied when dY_l^P is
// propagated to dY_{l-1}^P along the cross-layer stream.
struct BackwardHooks {
    std::function<double(std::size_t l, Position p, double tau_val)> stream_tau;
};

// Hand-derived backward over a full activation cache. Returns gradients in
// the parameter layout.
Gradients backward(const CrNetParams& params, const ActivationCache& cache,
                   const Matrix& d_logits, const BackwardHooks* hooks = nullptr);

struct GradCheckReport {
    std::map<std::string, double> max_rel_err;
    std::map<std::string, std::size_t> coords_tested;
    double overall = 0.0;
    double fd_step = 0.0;
};

// Central finite differences of the scalar loss against backward() on a
// randomized model (random B, |beta| in [0.5, 1.5]). Relative error uses
// denominator max(|analytic|, |numeric|, 1e-8). max_coords_per_group = 0
// sweeps every coordinate; otherwise a seeded subsample of at least 200
// coordinates per group is used.
GradCheckReport grad_check(const ModelConfig& cfg, std::uint64_t seed, double fd_step = 1e-5,
                           std::size_t max_coords_per_group = 0);
std::string grad_check_json(const GradCheckReport& r);

}  // namespace crnet
