#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "crnet/matrix.hpp"

namespace crnet {

// Projection positions of one transformer layer, in canonical order. The
// order fixes parameter iteration, serialization and RNG draw order.
enum class Position : int { Q = 0, K, V, O, Gate, Up, Down };

constexpr std::array<Position, 7> kPositions = {Position::Q,    Position::K,  Position::V,
                                                Position::O,    Position::Gate, Position::Up,
                                                Position::Down};
constexpr int kNumPositions = 7;

const char* position_name(Position p);
Position position_from_name(const std::string& name);

enum class Arch { CrNet, FullRank };

struct ModelConfig {
    std::size_t L = 3;
    std::size_t h = 8;
    std::size_t h_ff = 16;
    std::size_t heads = 1;
    std::size_t vocab = 16;
    std::size_t s = 5;                     // maximum sequence length
    std::vector<std::size_t> r_schedule;   // ranks for layers 2..L (size L-1, crnet only)
    double epsilon = 1e-6;
    Arch arch = Arch::CrNet;
    bool causal = true;
    std::uint64_t seed = 1;

    std::size_t rank_at(std::size_t l) const;  // l in [2, L]
    std::size_t in_dim(Position p) const;      // h except Down which reads h_ff
    std::size_t out_dim(Position p) const;     // h except Gate/Up which emit h_ff
    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

// sign(beta) * (|beta| + eps) with sign(0) = +1. Keeps the cross-layer factor
// away from zero so reconstruction can divide by it.
double tau(double beta, double eps);

// One layer's parameters. Layer 1 and every full-rank layer populate w;
// deeper crnet layers populate a, b, beta instead.
struct LayerParams {
    bool low_rank = false;
    std::array<Matrix, 7> w;
    std::array<Matrix, 7> a;
    std::array<Matrix, 7> b;
    std::array<double, 7> beta{};
};

struct CrNetParams {
    ModelConfig cfg;
    Matrix embed;    // vocab x h
    Matrix lm_head;  // h x vocab
    std::vector<LayerParams> layers;
};

// Gradients share the parameter layout exactly.
using Gradients = CrNetParams;
Gradients zero_like(const CrNetParams& p);

// Training init: W, A ~ N(0, 1/sqrt(fan_in)), B = 0, beta = 1, embeddings and
// lm_head ~ N(0, 0.02). Draws happen in canonical parameter order.
CrNetParams init_params(const ModelConfig& cfg);

// Fully random variant for gradient and reconstruction tests: B ~ N(0,
// 1/sqrt(r)), |beta| uniform in [beta_lo, beta_hi] with random sign, and
// embeddings at embed_scale. The training init's B = 0 would make A gradients
// vanish identically, and its 0.02 embedding scale starves the score path, so
// both would hide finite-difference bugs. Unit scale suits shallow nets; the
// SwiGLU product roughly squares magnitudes once they pass 1, so deep
// fixtures need a smaller scale (0.05 keeps nine layers well conditioned).
CrNetParams random_params(const ModelConfig& cfg, std::uint64_t seed, double beta_lo = 0.5,
                          double beta_hi = 1.5, bool signed_beta = true,
                          double embed_scale = 1.0);

// Canonical flattened view over all trainable scalars: embed, layer-1 W in
// position order, per layer A, B, beta per position, lm_head. Full-rank models
// list each layer's W instead. Used by the optimizer, clipping, checkpoints
// and gradient checks.
enum class ParamGroup { FullWeight, LowRankA, LowRankB, Beta, Embed, LmHead };
const char* param_group_name(ParamGroup g);
struct ParamSpan {
    std::string name;
    ParamGroup group;
    double* data;
    std::size_t n;
};
std::vector<ParamSpan> param_spans(CrNetParams& p);

enum class CacheMode { Full, Selective };

struct LayerCache {
    std::array<Matrix, 7> y;         // projection outputs (selective: checkpoints only)
    std::array<Matrix, 7> low_rank;  // X^P A^P per position (low-rank layers)
    std::vector<Matrix> att_probs;   // per-head post-softmax scores (full mode)
    Matrix att_heads;                // concatenated head outputs (full mode)
    Matrix ffn_gate_silu;            // silu(Y^gate) (full mode)
};

struct ActivationCache {
    CacheMode mode = CacheMode::Full;
    std::vector<std::size_t> checkpoints;  // ascending, contains L, excludes 1
    std::vector<int> tokens;
    std::vector<Matrix> x;       // X_1..X_L
    std::vector<LayerCache> layers;
    Matrix hidden;               // X_{L+1} (full mode only; selective rebuilds it)
    Matrix logits;

    bool is_checkpoint(std::size_t l) const;
    // Doubles retained for the backward pass (x, y, low_rank, attention
    // extras, hidden). Logits are the loss interface and are not counted.
    std::size_t stored_elements() const;
};

// y = u W (dense) or tau(beta) y_prev + (u a) b (cross-layer low-rank). The
// low-rank product u a is written to *low_rank_out when requested.
Matrix linear_cross(const LayerParams& lp, Position p, const Matrix& u, const Matrix* y_prev,
                    double eps, Matrix* low_rank_out);

struct AttentionWork {
    std::vector<Matrix> probs;  // per head
    Matrix heads;               // s x h
};
AttentionWork attention_forward(const ModelConfig& cfg, const Matrix& yq, const Matrix& yk,
                                const Matrix& yv);

ActivationCache forward(const CrNetParams& params, const std::vector<int>& tokens,
                        CacheMode mode = CacheMode::Full,
                        const std::vector<std::size_t>& checkpoints = {});

// Same contract restricted to full-rank models.
ActivationCache forward_full_rank(const CrNetParams& params, const std::vector<int>& tokens);

}  // namespace crnet
