#include "crnet/recompute.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "layer_backward.hpp"

namespace crnet {

std::vector<std::size_t> select_checkpoints(std::size_t L, std::size_t k) {
    if (L < 2) throw std::invalid_argument("select_checkpoints: L must be >= 2");
    if (k < 1 || k > L - 1)
        throw std::invalid_argument("select_checkpoints: k = " + std::to_string(k) +
                                    " outside [1, " + std::to_string(L - 1) + "]");
    std::vector<std::size_t> cps(k);
    for (std::size_t i = 1; i <= k; ++i) {
        const double back = static_cast<double>((k - i) * (L - 1)) / static_cast<double>(k);
        cps[i - 1] = L - static_cast<std::size_t>(std::llround(back));
    }
    return cps;
}

Matrix reconstruct_prev(const LayerParams& lp, Position p, const Matrix& y_next,
                        const Matrix& low_rank_next, double eps) {
    if (!lp.low_rank)
        throw std::invalid_argument("reconstruct_prev: layer is dense, nothing to invert");
    const int i = static_cast<int>(p);
    Matrix y = matmul(low_rank_next, lp.b[i]);  // (X A) B
    const double t = tau(lp.beta[i], eps);
    Matrix out(y_next.rows, y_next.cols);
    for (std::size_t e = 0; e < out.size(); ++e)
        out.data[e] = (y_next.data[e] - y.data[e]) / t;
    return out;
}

namespace {

using detail::LayerWork;
using detail::StreamState;

void check_selective(const CrNetParams& params, const ActivationCache& cache) {
    const ModelConfig& cfg = params.cfg;
    if (cache.mode != CacheMode::Selective)
        throw std::invalid_argument("backward_recompute: needs a selective cache");
    if (cfg.arch != Arch::CrNet)
        throw std::invalid_argument("backward_recompute: needs the crnet arch");
    if (cache.layers.size() != cfg.L || cache.x.size() != cfg.L)
        throw std::invalid_argument("backward_recompute: cache/params layer count mismatch");
    if (cache.checkpoints.empty() || cache.checkpoints.back() != cfg.L)
        throw std::invalid_argument("backward_recompute: checkpoint set must contain layer " +
                                    std::to_string(cfg.L));
    for (std::size_t l = 1; l <= cfg.L; ++l) {
        const bool have_y = !cache.layers[l - 1].y[0].empty();
        if (cache.is_checkpoint(l) != have_y)
            throw std::invalid_argument("backward_recompute: cache Y presence violates the "
                                        "checkpoint plan at layer " + std::to_string(l));
        if (l >= 2 && cache.layers[l - 1].low_rank[0].empty())
            throw std::invalid_argument("backward_recompute: missing low-rank products at layer " +
                                        std::to_string(l));
    }
}

// Shared sweep: materializes each layer's work struct for the backward pass
// in descending order and hands it to `visit(l, work, y_prev)`.
template <typename Visit>
void recompute_sweep(const CrNetParams& params, const ActivationCache& cache, Visit&& visit) {
    const ModelConfig& cfg = params.cfg;
    const double eps = cfg.epsilon;
    std::array<Matrix, 7> cur_y = cache.layers[cfg.L - 1].y;
    LayerWork l1_work;
    bool have_l1 = false;
    for (std::size_t l = cfg.L; l > 0; --l) {
        LayerWork w = (l == 1 && have_l1)
                          ? std::move(l1_work)
                          : detail::work_from_parts(params, l, cache.x[l - 1], std::move(cur_y),
                                                    cache.layers[l - 1].low_rank);
        std::array<Matrix, 7> prev_y{};
        if (l >= 2) {
            if (cache.is_checkpoint(l - 1)) {
                prev_y = cache.layers[l - 2].y;
            } else if (l - 1 == 1) {
                l1_work = detail::forward_layer1_work(params, cache.x[0]);
                have_l1 = true;
                prev_y = l1_work.y;
            } else {
                const LayerParams& lp = params.layers[l - 1];
                for (Position p : kPositions) {
                    const int i = static_cast<int>(p);
                    prev_y[i] = reconstruct_prev(lp, p, w.y[i], w.low_rank[i], eps);
                }
            }
        }
        visit(l, w, prev_y);
        cur_y = std::move(prev_y);
    }
}

}  // namespace

Gradients backward_recompute(const CrNetParams& params, const ActivationCache& cache,
                             const Matrix& d_logits, const BackwardHooks* hooks) {
    check_selective(params, cache);
    const ModelConfig& cfg = params.cfg;
    if (!d_logits.same_shape(cache.logits))
        throw std::invalid_argument("backward_recompute: d_logits shape mismatch");

    // X_{L+1} = Y_L^down + (Y_L^O + X_L)
    const std::array<Matrix, 7>& yl = cache.layers[cfg.L - 1].y;
    Matrix hidden = add(yl[static_cast<int>(Position::Down)],
                        add(yl[static_cast<int>(Position::O)], cache.x[cfg.L - 1]));

    StreamState st;
    Gradients g = detail::backward_prologue(params, hidden, d_logits, st);
    recompute_sweep(params, cache,
                    [&](std::size_t l, const LayerWork& w, const std::array<Matrix, 7>& prev_y) {
                        const std::array<Matrix, 7>* yp = l >= 2 ? &prev_y : nullptr;
                        detail::backward_layer(params, l, w, yp, st, g, hooks);
                    });
    detail::backward_epilogue(cache.tokens, st, g);
    return g;
}

std::vector<ReconEntry> reconstruction_error_profile(const CrNetParams& params,
                                                     const std::vector<int>& tokens,
                                                     const std::vector<std::size_t>& checkpoints) {
    ActivationCache truth = forward(params, tokens, CacheMode::Full);
    ActivationCache sel = forward(params, tokens, CacheMode::Selective, checkpoints);
    std::vector<ReconEntry> entries;
    recompute_sweep(params, sel,
                    [&](std::size_t l, const LayerWork& w, const std::array<Matrix, 7>&) {
                        for (Position p : kPositions) {
                            const int i = static_cast<int>(p);
                            const Matrix& exact = truth.layers[l - 1].y[i];
                            const double den = std::max(frob_norm(exact), 1e-300);
                            entries.push_back({l, p, frob_norm(sub(w.y[i], exact)) / den});
                        }
                    });
    return entries;
}

double max_recon_error(const std::vector<ReconEntry>& entries) {
    double m = 0.0;
    for (const ReconEntry& e : entries) m = std::max(m, e.rel_err);
    return m;
}

std::string recon_profile_csv(const std::vector<ReconEntry>& entries) {
    std::string out = "layer,position,rel_error\n";
    char buf[64];
    for (const ReconEntry& e : entries) {
        std::snprintf(buf, sizeof(buf), "%zu,%s,%.17g\n", e.layer, position_name(e.pos),
                      e.rel_err);
        out += buf;
    }
    return out;
}

}  // namespace crnet
