#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crnet/backprop.hpp"
#include "crnet/model.hpp"

namespace crnet {

// k checkpoint layers spread evenly over [2, L], always ending in L and never
// containing layer 1 (layer 1 is dense and recomputed from its input).
// Requires 1 <= k <= L-1.
std::vector<std::size_t> select_checkpoints(std::size_t L, std::size_t k);

// Inverts the cross-layer recurrence of layer l: given Y_l^P and the stored
// low-rank product X_l^P A_l^P, returns Y_{l-1}^P = (Y_l - (X A) B) / tau.
Matrix reconstruct_prev(const LayerParams& lp, Position p, const Matrix& y_next,
                        const Matrix& low_rank_next, double eps);

// Backward over a selective cache. Non-checkpoint Y are rebuilt layer by
// layer through reconstruct_prev during the sweep; attention probabilities
// are always recomputed, never stored.
Gradients backward_recompute(const CrNetParams& params, const ActivationCache& cache,
                             const Matrix& d_logits, const BackwardHooks* hooks = nullptr);

struct ReconEntry {
    std::size_t layer;
    Position pos;
    double rel_err;  // Frobenius, against the full-cache forward
};

// Runs the reconstruction sweep of backward_recompute without gradients and
// compares every materialized Y against a full forward.
std::vector<ReconEntry> reconstruction_error_profile(const CrNetParams& params,
                                                     const std::vector<int>& tokens,
                                                     const std::vector<std::size_t>& checkpoints);
double max_recon_error(const std::vector<ReconEntry>& entries);
std::string recon_profile_csv(const std::vector<ReconEntry>& entries);

}  // namespace crnet
