#pragma once

// Layer-level backward shared by the full-cache and recompute drivers. Both
// feed the same LayerWork shape so their gradient arithmetic is identical.

#include "crnet/backprop.hpp"

namespace crnet::detail {

struct LayerWork {
    Matrix x;                        // layer input X_l
    std::array<Matrix, 7> y;         // projection outputs
    std::array<Matrix, 7> low_rank;  // X^P A^P (low-rank layers)
    std::vector<Matrix> probs;       // per-head attention probabilities
    Matrix heads;                    // concatenated head outputs
    Matrix att_out;                  // Y^O + X_l
    Matrix gate_silu;                // silu(Y^gate)
    Matrix ffn_act;                  // gate_silu * Y^up
};

LayerWork work_from_full_cache(const CrNetParams& params, std::size_t l,
                               const ActivationCache& cache);
LayerWork work_from_parts(const CrNetParams& params, std::size_t l, Matrix x,
                          std::array<Matrix, 7> y, std::array<Matrix, 7> low_rank);
// Recomputes layer 1 from its input; the first layer is dense and cheap, so
// the recompute driver never reconstructs it through the residual inverse.
LayerWork forward_layer1_work(const CrNetParams& params, Matrix x1);

struct StreamState {
    Matrix dx_next;               // dL/dX_{l+1}
    std::array<Matrix, 7> dy;     // tau(beta_{l+1}^P) dY_{l+1}^P; empty above layer L
};

// Consumes the stream for layer l and emits the stream for layer l-1.
// y_prev is required for low-rank layers (beta gradient and nothing else).
void backward_layer(const CrNetParams& params, std::size_t l, const LayerWork& w,
                    const std::array<Matrix, 7>* y_prev, StreamState& st, Gradients& g,
                    const BackwardHooks* hooks);

Gradients backward_prologue(const CrNetParams& params, const Matrix& hidden,
                            const Matrix& d_logits, StreamState& st);
void backward_epilogue(const std::vector<int>& tokens, const StreamState& st, Gradients& g);

}  // namespace crnet::detail
