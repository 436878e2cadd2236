#include "crnet/backprop.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <random>
#include <stdexcept>

#include "json.hpp"

#include "layer_backward.hpp"

namespace crnet {

LossGrad loss_and_grad(const Matrix& logits, const std::vector<int>& targets) {
    if (targets.size() != logits.rows)
        throw std::invalid_argument("loss: " + std::to_string(targets.size()) +
                                    " targets for " + std::to_string(logits.rows) + " positions");
    const std::size_t n = logits.rows, v = logits.cols;
    LossGrad out;
    out.d_logits = Matrix(n, v);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
            throw std::invalid_argument("loss: target " + std::to_string(targets[i]) +
                                        " at position " + std::to_string(i) + " outside vocab " +
                                        std::to_string(v));
        const double* row = logits.row(i);
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        const double lse = mx + std::log(z);
        out.loss += (lse - row[targets[i]]) * inv_n;
        double* drow = out.d_logits.row(i);
        for (std::size_t j = 0; j < v; ++j) drow[j] = std::exp(row[j] - lse) * inv_n;
        drow[targets[i]] -= inv_n;
    }
    return out;
}

double loss_only(const Matrix& logits, const std::vector<int>& targets) {
    if (targets.size() != logits.rows)
        throw std::invalid_argument("loss: targets/positions mismatch");
    const std::size_t n = logits.rows, v = logits.cols;
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.row(i);
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        loss += mx + std::log(z) - row[targets[i]];
    }
    return loss / static_cast<double>(n);
}

namespace detail {

namespace {
constexpr int iQ = 0, iK = 1, iV = 2, iO = 3, iGate = 4, iUp = 5, iDown = 6;
}

LayerWork work_from_full_cache(const CrNetParams& params, std::size_t l,
                               const ActivationCache& cache) {
    const LayerCache& lc = cache.layers[l - 1];
    LayerWork w;
    w.x = cache.x[l - 1];
    w.y = lc.y;
    w.low_rank = lc.low_rank;
    w.probs = lc.att_probs;
    w.heads = lc.att_heads;
    w.gate_silu = lc.ffn_gate_silu;
    w.att_out = add(w.y[iO], w.x);
    w.ffn_act = hadamard(w.gate_silu, w.y[iUp]);
    (void)params;
    return w;
}

LayerWork work_from_parts(const CrNetParams& params, std::size_t l, Matrix x,
                          std::array<Matrix, 7> y, std::array<Matrix, 7> low_rank) {
    (void)l;
    LayerWork w;
    w.x = std::move(x);
    w.y = std::move(y);
    w.low_rank = std::move(low_rank);
    AttentionWork att = attention_forward(params.cfg, w.y[iQ], w.y[iK], w.y[iV]);
    w.probs = std::move(att.probs);
    w.heads = std::move(att.heads);
    w.att_out = add(w.y[iO], w.x);
    w.gate_silu = silu(w.y[iGate]);
    w.ffn_act = hadamard(w.gate_silu, w.y[iUp]);
    return w;
}

LayerWork forward_layer1_work(const CrNetParams& params, Matrix x1) {
    const LayerParams& lp = params.layers[0];
    const double eps = params.cfg.epsilon;
    std::array<Matrix, 7> y;
    y[iQ] = linear_cross(lp, Position::Q, x1, nullptr, eps, nullptr);
    y[iK] = linear_cross(lp, Position::K, x1, nullptr, eps, nullptr);
    y[iV] = linear_cross(lp, Position::V, x1, nullptr, eps, nullptr);
    AttentionWork att = attention_forward(params.cfg, y[iQ], y[iK], y[iV]);
    y[iO] = linear_cross(lp, Position::O, att.heads, nullptr, eps, nullptr);
    Matrix att_out = add(y[iO], x1);
    y[iGate] = linear_cross(lp, Position::Gate, att_out, nullptr, eps, nullptr);
    y[iUp] = linear_cross(lp, Position::Up, att_out, nullptr, eps, nullptr);
    Matrix gate_silu = silu(y[iGate]);
    Matrix ffn_act = hadamard(gate_silu, y[iUp]);
    y[iDown] = linear_cross(lp, Position::Down, ffn_act, nullptr, eps, nullptr);

    LayerWork w;
    w.x = std::move(x1);
    w.y = std::move(y);
    w.probs = std::move(att.probs);
    w.heads = std::move(att.heads);
    w.att_out = std::move(att_out);
    w.gate_silu = std::move(gate_silu);
    w.ffn_act = std::move(ffn_act);
    return w;
}

void backward_layer(const CrNetParams& params, std::size_t l, const LayerWork& w,
                    const std::array<Matrix, 7>* y_prev, StreamState& st, Gradients& g,
                    const BackwardHooks* hooks) {
    const ModelConfig& cfg = params.cfg;
    const LayerParams& lp = params.layers[l - 1];
    LayerParams& gl = g.layers[l - 1];
    const bool low = lp.low_rank;
    if (low && !y_prev)
        throw std::invalid_argument("backward_layer: low-rank layer " + std::to_string(l) +
                                    " needs Y_prev");

    // Local backward of one projection; returns the input gradient.
    auto proj_backward = [&](int i, const Matrix& input, const Matrix& dy) -> Matrix {
        if (!low) {
            add_inplace(gl.w[i], matmul_transposed_a(input, dy));
            return matmul_transposed_b(dy, lp.w[i]);
        }
        gl.beta[i] += frob_inner(dy, (*y_prev)[i]);  // d tau / d beta = 1
        Matrix dua = matmul_transposed_b(dy, lp.b[i]);
        add_inplace(gl.b[i], matmul_transposed_a(w.low_rank[i], dy));
        add_inplace(gl.a[i], matmul_transposed_a(input, dua));
        return matmul_transposed_b(dua, lp.a[i]);
    };
    auto with_stream = [&](Matrix m, int i) {
        if (!st.dy[i].empty()) add_inplace(m, st.dy[i]);
        return m;
    };

    // X_{l+1} = Y^down + att_out
    Matrix dy_down = with_stream(st.dx_next, iDown);
    Matrix d_att = st.dx_next;
    Matrix d_ffn = proj_backward(iDown, w.ffn_act, dy_down);

    // ffn_act = silu(Y^gate) * Y^up
    Matrix dy_up = with_stream(hadamard(d_ffn, w.gate_silu), iUp);
    Matrix dy_gate(d_ffn.rows, d_ffn.cols);
    for (std::size_t i = 0; i < d_ffn.size(); ++i)
        dy_gate.data[i] = d_ffn.data[i] * w.y[iUp].data[i] * silu_prime(w.y[iGate].data[i]);
    dy_gate = with_stream(std::move(dy_gate), iGate);

    add_inplace(d_att, proj_backward(iGate, w.att_out, dy_gate));
    add_inplace(d_att, proj_backward(iUp, w.att_out, dy_up));

    // att_out = Y^O + X_l
    Matrix dy_o = with_stream(d_att, iO);
    Matrix d_heads = proj_backward(iO, w.heads, dy_o);

    const std::size_t n = w.x.rows;
    const std::size_t dh = cfg.h / cfg.heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix dy_q_att(n, cfg.h), dy_k_att(n, cfg.h), dy_v_att(n, cfg.h);
    for (std::size_t m = 0; m < cfg.heads; ++m) {
        const Matrix qm = col_slice(w.y[iQ], m * dh, (m + 1) * dh);
        const Matrix km = col_slice(w.y[iK], m * dh, (m + 1) * dh);
        const Matrix vm = col_slice(w.y[iV], m * dh, (m + 1) * dh);
        const Matrix& pm = w.probs[m];
        const Matrix dhm = col_slice(d_heads, m * dh, (m + 1) * dh);
        Matrix dpm = matmul_transposed_b(dhm, vm);
        col_write(dy_v_att, m * dh, matmul_transposed_a(pm, dhm));
        // exact row softmax JVP: ds = (dp - <dp, p>) * p, masked entries have
        // p = 0 and drop out on their own; fold in the 1/sqrt(dh) scale
        Matrix dsm(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            const double* dp = dpm.row(i);
            const double* pr = pm.row(i);
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += dp[j] * pr[j];
            double* ds = dsm.row(i);
            for (std::size_t j = 0; j < n; ++j) ds[j] = (dp[j] - dot) * pr[j] * inv_sqrt;
        }
        col_write(dy_q_att, m * dh, matmul(dsm, km));
        col_write(dy_k_att, m * dh, matmul_transposed_a(dsm, qm));
    }
    Matrix dy_q = with_stream(std::move(dy_q_att), iQ);
    Matrix dy_k = with_stream(std::move(dy_k_att), iK);
    Matrix dy_v = with_stream(std::move(dy_v_att), iV);

    Matrix dx = std::move(d_att);  // att_out = Y^O + X_l identity path
    add_inplace(dx, proj_backward(iQ, w.x, dy_q));
    add_inplace(dx, proj_backward(iK, w.x, dy_k));
    add_inplace(dx, proj_backward(iV, w.x, dy_v));

    std::array<Matrix, 7> next_dy{};
    if (low) {
        const Matrix* totals[7] = {&dy_q, &dy_k, &dy_v, &dy_o, &dy_gate, &dy_up, &dy_down};
        for (int i = 0; i < kNumPositions; ++i) {
            double t = tau(lp.beta[i], cfg.epsilon);
            if (hooks && hooks->stream_tau)
                t = hooks->stream_tau(l, static_cast<Position>(i), t);
            next_dy[i] = scale(*totals[i], t);
        }
    }
    st.dy = std::move(next_dy);
    st.dx_next = std::move(dx);
}

Gradients backward_prologue(const CrNetParams& params, const Matrix& hidden,
                            const Matrix& d_logits, StreamState& st) {
    Gradients g = zero_like(params);
    g.lm_head = matmul_transposed_a(hidden, d_logits);
    st.dx_next = matmul_transposed_b(d_logits, params.lm_head);
    st.dy = {};
    return g;
}

void backward_epilogue(const std::vector<int>& tokens, const StreamState& st, Gradients& g) {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        double* dst = g.embed.row(tokens[i]);
        const double* src = st.dx_next.row(i);
        for (std::size_t j = 0; j < st.dx_next.cols; ++j) dst[j] += src[j];
    }
}

}  // namespace detail

Gradients backward(const CrNetParams& params, const ActivationCache& cache,
                   const Matrix& d_logits, const BackwardHooks* hooks) {
    if (cache.mode != CacheMode::Full)
        throw std::invalid_argument("backward: needs a full cache (use backward_recompute)");
    const ModelConfig& cfg = params.cfg;
    if (cache.layers.size() != cfg.L || cache.x.size() != cfg.L)
        throw std::invalid_argument("backward: cache/params layer count mismatch");
    if (!d_logits.same_shape(cache.logits))
        throw std::invalid_argument("backward: d_logits shape mismatch");
    if (cache.hidden.rows != cache.tokens.size() || cache.hidden.cols != cfg.h)
        throw std::invalid_argument("backward: cache hidden state missing or wrong shape");

    detail::StreamState st;
    Gradients g = detail::backward_prologue(params, cache.hidden, d_logits, st);
    for (std::size_t l = cfg.L; l > 0; --l) {
        detail::LayerWork w = detail::work_from_full_cache(params, l, cache);
        const std::array<Matrix, 7>* yp = l >= 2 ? &cache.layers[l - 2].y : nullptr;
        detail::backward_layer(params, l, w, yp, st, g, hooks);
    }
    detail::backward_epilogue(cache.tokens, st, g);
    return g;
}

GradCheckReport grad_check(const ModelConfig& cfg, std::uint64_t seed, double fd_step,
                           std::size_t max_coords_per_group) {
    cfg.validate();
    if (!(fd_step > 0.0)) throw std::invalid_argument("grad_check: fd_step must be positive");
    CrNetParams params = random_params(cfg, seed);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_int_distribution<int> tok(0, static_cast<int>(cfg.vocab) - 1);
    std::vector<int> tokens(cfg.s), targets(cfg.s);
    for (auto& t : tokens) t = tok(rng);
    for (auto& t : targets) t = tok(rng);

    ActivationCache cache = forward(params, tokens);
    LossGrad lg = loss_and_grad(cache.logits, targets);
    Gradients grads = backward(params, cache, lg.d_logits);

    std::vector<ParamSpan> pspans = param_spans(params);
    std::vector<ParamSpan> gspans = param_spans(grads);

    // group -> flat coordinate list (span index, offset)
    std::map<std::string, std::vector<std::pair<std::size_t, std::size_t>>> coords;
    for (std::size_t si = 0; si < pspans.size(); ++si)
        for (std::size_t c = 0; c < pspans[si].n; ++c)
            coords[param_group_name(pspans[si].group)].push_back({si, c});

    GradCheckReport rep;
    rep.fd_step = fd_step;
    for (auto& [group, list] : coords) {
        auto picked = list;
        if (max_coords_per_group > 0 && list.size() > std::max<std::size_t>(max_coords_per_group, 200)) {
            const std::size_t want = std::max<std::size_t>(max_coords_per_group, 200);
            std::mt19937_64 pick_rng(seed ^ std::hash<std::string>{}(group));
            std::vector<std::pair<std::size_t, std::size_t>> sample;
            std::sample(list.begin(), list.end(), std::back_inserter(sample), want, pick_rng);
            picked = std::move(sample);
        }
        double worst = 0.0;
        for (auto [si, c] : picked) {
            double& slot = pspans[si].data[c];
            const double orig = slot;
            slot = orig + fd_step;
            const double lp = loss_only(forward(params, tokens).logits, targets);
            slot = orig - fd_step;
            const double lm = loss_only(forward(params, tokens).logits, targets);
            slot = orig;
            const double numeric = (lp - lm) / (2.0 * fd_step);
            const double analytic = gspans[si].data[c];
            const double den = std::max({std::fabs(numeric), std::fabs(analytic), 1e-8});
            worst = std::max(worst, std::fabs(numeric - analytic) / den);
        }
        rep.max_rel_err[group] = worst;
        rep.coords_tested[group] = picked.size();
        rep.overall = std::max(rep.overall, worst);
    }
    return rep;
}

std::string grad_check_json(const GradCheckReport& r) {
    nlohmann::json j;
    j["fd_step"] = r.fd_step;
    j["overall_max_rel_err"] = r.overall;
    for (const auto& [g, e] : r.max_rel_err) {
        j["groups"][g]["max_rel_err"] = e;
        j["groups"][g]["coords_tested"] = r.coords_tested.at(g);
    }
    return j.dump(2);
}

}  // namespace crnet
