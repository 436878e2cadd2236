#include "crnet/trainer.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>

#include "crnet/backprop.hpp"
#include "crnet/recompute.hpp"
#include "json.hpp"

namespace crnet {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::uint64_t step_rng_seed(std::uint64_t seed, std::uint64_t step) {
    // Stateless per-step stream: resuming at step t replays the exact batches
    // of an uninterrupted run without serializing generator state.
    std::uint64_t z = seed ^ (step * 0x9e3779b97f4a7c15ull + 0xbf58476d1ce4e5b9ull);
    z ^= z >> 30;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
}

}  // namespace

std::size_t TrainConfig::warmup_steps() const {
    auto w = static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)));
    if (w < 1) w = 1;
    if (w > total_steps) w = total_steps;
    return w;
}

void TrainConfig::validate() const {
    if (total_steps < 1) throw std::invalid_argument("train config: total_steps must be positive");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be positive");
    if (peak_lr <= 0.0) throw std::invalid_argument("train config: peak_lr must be positive");
    if (warmup_fraction <= 0.0 || warmup_fraction >= 1.0) {
        throw std::invalid_argument("train config: warmup_fraction must lie in (0, 1)");
    }
    if (final_lr_fraction < 0.0 || final_lr_fraction > 1.0) {
        throw std::invalid_argument("train config: final_lr_fraction must lie in [0, 1]");
    }
    if (lowrank_lr_scale <= 0.0) {
        throw std::invalid_argument("train config: lowrank_lr_scale must be positive");
    }
    if (grad_clip_norm <= 0.0) {
        throw std::invalid_argument("train config: grad_clip_norm must be positive");
    }
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0) {
        throw std::invalid_argument("train config: adam betas must lie in [0, 1)");
    }
    if (adam_eps <= 0.0) throw std::invalid_argument("train config: adam_eps must be positive");
    if (eval_every < 1) throw std::invalid_argument("train config: eval_every must be positive");
    if (eval_windows < 1) throw std::invalid_argument("train config: eval_windows must be positive");
}

double lr_at(std::size_t step, const TrainConfig& tc) {
    if (step > tc.total_steps) throw std::out_of_range("lr_at: step beyond total_steps");
    std::size_t w = tc.warmup_steps();
    double peak = tc.peak_lr;
    double fin = tc.final_lr_fraction * peak;
    if (step <= w) return peak * static_cast<double>(step) / static_cast<double>(w);
    double progress =
        static_cast<double>(step - w) / static_cast<double>(tc.total_steps - w);
    return fin + 0.5 * (peak - fin) * (1.0 + std::cos(kPi * progress));
}

double effective_lr(ParamGroup g, double lr, const TrainConfig& tc) {
    if (g == ParamGroup::LowRankA || g == ParamGroup::LowRankB || g == ParamGroup::Beta) {
        return lr * tc.lowrank_lr_scale;
    }
    return lr;
}

AdamState init_adam(CrNetParams& params, const TrainConfig& tc) {
    AdamState st;
    st.beta1 = tc.adam_beta1;
    st.beta2 = tc.adam_beta2;
    st.eps = tc.adam_eps;
    for (const ParamSpan& sp : param_spans(params)) {
        st.m.emplace_back(sp.n, 0.0);
        st.v.emplace_back(sp.n, 0.0);
    }
    return st;
}

bool adam_step(CrNetParams& params, Gradients& grads, AdamState& st, double lr,
               const TrainConfig& tc) {
    auto pspans = param_spans(params);
    auto gspans = param_spans(grads);
    if (pspans.size() != gspans.size() || pspans.size() != st.m.size()) {
        throw std::invalid_argument("adam_step: state does not mirror parameters");
    }
    for (std::size_t i = 0; i < gspans.size(); ++i) {
        if (gspans[i].n != pspans[i].n || st.m[i].size() != pspans[i].n) {
            throw std::invalid_argument("adam_step: span shape mismatch at " + pspans[i].name);
        }
        for (std::size_t j = 0; j < gspans[i].n; ++j) {
            if (!std::isfinite(gspans[i].data[j])) return false;
        }
    }

    st.t += 1;
    double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
    double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < pspans.size(); ++i) {
        double eff = effective_lr(pspans[i].group, lr, tc);
        double* p = pspans[i].data;
        const double* g = gspans[i].data;
        std::vector<double>& m = st.m[i];
        std::vector<double>& v = st.v[i];
        for (std::size_t j = 0; j < pspans[i].n; ++j) {
            m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g[j];
            v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g[j] * g[j];
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            p[j] -= eff * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
    return true;
}

double global_grad_norm(Gradients& grads) {
    double sq = 0.0;
    for (const ParamSpan& sp : param_spans(grads)) {
        for (std::size_t j = 0; j < sp.n; ++j) sq += sp.data[j] * sp.data[j];
    }
    return std::sqrt(sq);
}

double clip_gradients(Gradients& grads, double max_norm) {
    double norm = global_grad_norm(grads);
    if (norm > max_norm && norm > 0.0) {
        double scale = max_norm / norm;
        for (const ParamSpan& sp : param_spans(grads)) {
            for (std::size_t j = 0; j < sp.n; ++j) sp.data[j] *= scale;
        }
    }
    return norm;
}

Corpus ingest_corpus(const std::string& path, std::size_t s) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("corpus: cannot open " + path);
    Corpus c;
    in.seekg(0, std::ios::end);
    auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    if (size < 2 * (s + 1)) {
        throw std::runtime_error("corpus: " + path + " has " + std::to_string(size) +
                                 " bytes, need at least " + std::to_string(2 * (s + 1)));
    }
    c.bytes.resize(size);
    in.read(reinterpret_cast<char*>(c.bytes.data()), static_cast<std::streamsize>(size));
    if (!in) throw std::runtime_error("corpus: short read on " + path);
    c.train_size = size * 9 / 10;
    return c;
}

namespace {

void sample_window(const Corpus& corpus, std::mt19937_64& rng, std::size_t s,
                   std::vector<int>& tokens, std::vector<int>& targets) {
    std::uniform_int_distribution<std::size_t> dist(0, corpus.train_size - (s + 1));
    std::size_t start = dist(rng);
    tokens.resize(s);
    targets.resize(s);
    for (std::size_t i = 0; i < s; ++i) {
        tokens[i] = corpus.bytes[start + i];
        targets[i] = corpus.bytes[start + i + 1];
    }
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_uint(const std::string& in, std::size_t& off, std::size_t nbytes,
                       const std::string& what) {
    if (off + nbytes > in.size()) {
        throw std::runtime_error("checkpoint read: truncated at offset " + std::to_string(off) +
                                 " while reading " + what);
    }
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < nbytes; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
    }
    off += nbytes;
    return v;
}

Matrix span_matrix(const ParamSpan& sp) {
    Matrix m(1, sp.n);
    std::memcpy(m.data.data(), sp.data, sp.n * sizeof(double));
    return m;
}

std::string checkpoint_file(const std::string& path) {
    if (std::filesystem::is_directory(path)) return path + "/crnet.ckpt";
    return path;
}

constexpr std::uint32_t kCkptVersion = 1;

}  // namespace

std::string save_checkpoint(const CrNetParams& params, const AdamState& st,
                            std::uint64_t step, const std::string& dir) {
    // Read-only span walk; param_spans is the single order authority.
    auto& mut = const_cast<CrNetParams&>(params);
    auto spans = param_spans(mut);
    if (st.m.size() != spans.size() || st.v.size() != spans.size()) {
        throw std::invalid_argument("save_checkpoint: optimizer state does not mirror parameters");
    }

    std::string buf = "CRCK";
    put_u32(buf, kCkptVersion);
    std::string cfg_json = params.cfg.to_json();
    put_u32(buf, static_cast<std::uint32_t>(cfg_json.size()));
    buf += cfg_json;
    for (const ParamSpan& sp : spans) write_matrix(span_matrix(sp), buf);
    for (std::size_t i = 0; i < spans.size(); ++i) {
        Matrix m(1, st.m[i].size());
        std::memcpy(m.data.data(), st.m[i].data(), st.m[i].size() * sizeof(double));
        write_matrix(m, buf);
    }
    for (std::size_t i = 0; i < spans.size(); ++i) {
        Matrix v(1, st.v[i].size());
        std::memcpy(v.data.data(), st.v[i].data(), st.v[i].size() * sizeof(double));
        write_matrix(v, buf);
    }
    put_u64(buf, step);

    std::filesystem::create_directories(dir);
    std::string path = dir + "/crnet.ckpt";
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    out.close();
    if (!out) throw std::runtime_error("save_checkpoint: short write on " + path);
    return path;
}

Checkpoint load_checkpoint(const std::string& path) {
    std::string file = checkpoint_file(path);
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + file);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    std::size_t off = 0;
    if (buf.size() < 4 || buf.compare(0, 4, "CRCK") != 0) {
        throw std::runtime_error("load_checkpoint: bad magic in " + file);
    }
    off = 4;
    auto version = static_cast<std::uint32_t>(get_uint(buf, off, 4, "version"));
    if (version != kCkptVersion) {
        throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
    }
    auto json_len = static_cast<std::size_t>(get_uint(buf, off, 4, "config length"));
    if (off + json_len > buf.size()) {
        throw std::runtime_error("checkpoint read: truncated at offset " + std::to_string(off) +
                                 " while reading config");
    }
    Checkpoint ck;
    ck.cfg = ModelConfig::from_json(buf.substr(off, json_len));
    off += json_len;
    ck.cfg.validate();

    ck.params = init_params(ck.cfg);
    auto spans = param_spans(ck.params);
    for (const ParamSpan& sp : spans) {
        Matrix m = read_matrix(buf, off, sp.name);
        if (m.size() != sp.n) {
            throw std::runtime_error("load_checkpoint: size mismatch for " + sp.name);
        }
        std::memcpy(sp.data, m.data.data(), sp.n * sizeof(double));
    }
    for (const ParamSpan& sp : spans) {
        Matrix m = read_matrix(buf, off, sp.name + ".m");
        if (m.size() != sp.n) {
            throw std::runtime_error("load_checkpoint: size mismatch for " + sp.name + ".m");
        }
        ck.adam.m.emplace_back(m.data.begin(), m.data.end());
    }
    for (const ParamSpan& sp : spans) {
        Matrix v = read_matrix(buf, off, sp.name + ".v");
        if (v.size() != sp.n) {
            throw std::runtime_error("load_checkpoint: size mismatch for " + sp.name + ".v");
        }
        ck.adam.v.emplace_back(v.data.begin(), v.data.end());
    }
    ck.step = get_uint(buf, off, 8, "step");
    ck.adam.t = ck.step;
    if (off != buf.size()) {
        throw std::runtime_error("load_checkpoint: trailing bytes in " + file);
    }
    return ck;
}

double eval_loss(const CrNetParams& params, const Corpus& corpus, const TrainConfig& tc) {
    std::size_t s = params.cfg.s;
    std::size_t total = corpus.bytes.size();
    std::vector<std::size_t> starts;
    for (std::size_t i = 0; i < tc.eval_windows; ++i) {
        std::size_t start = corpus.train_size + i * (s + 1);
        if (start + s + 1 > total) break;
        starts.push_back(start);
    }
    // Tail window fallback when the validation split is shorter than one window.
    if (starts.empty()) starts.push_back(total - (s + 1));

    double sum = 0.0;
    std::vector<int> tokens(s), targets(s);
    for (std::size_t start : starts) {
        for (std::size_t i = 0; i < s; ++i) {
            tokens[i] = corpus.bytes[start + i];
            targets[i] = corpus.bytes[start + i + 1];
        }
        ActivationCache cache = forward(params, tokens);
        sum += loss_only(cache.logits, targets);
    }
    return sum / static_cast<double>(starts.size());
}

namespace {

void accumulate(Gradients& into, Gradients& from) {
    auto a = param_spans(into);
    auto b = param_spans(from);
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < a[i].n; ++j) a[i].data[j] += b[i].data[j];
    }
}

void scale_gradients(Gradients& g, double s) {
    for (const ParamSpan& sp : param_spans(g)) {
        for (std::size_t j = 0; j < sp.n; ++j) sp.data[j] *= s;
    }
}

}  // namespace

TrainResult train(const ModelConfig& cfg, const TrainConfig& tc) {
    cfg.validate();
    tc.validate();
    if (cfg.vocab != 256) {
        throw std::invalid_argument("train: byte-level corpus needs vocab 256");
    }
    if (tc.corpus_path.empty() || tc.out_dir.empty()) {
        throw std::invalid_argument("train: corpus_path and out_dir are required");
    }

    Corpus corpus = ingest_corpus(tc.corpus_path, cfg.s);

    CrNetParams params;
    AdamState adam;
    std::uint64_t start_step = 0;
    if (!tc.resume_from.empty()) {
        Checkpoint ck = load_checkpoint(tc.resume_from);
        if (ck.cfg.to_json() != cfg.to_json()) {
            throw std::invalid_argument("train: resume checkpoint was built for a different config");
        }
        params = std::move(ck.params);
        adam = std::move(ck.adam);
        adam.beta1 = tc.adam_beta1;
        adam.beta2 = tc.adam_beta2;
        adam.eps = tc.adam_eps;
        start_step = ck.step;
        if (start_step > tc.total_steps) {
            throw std::invalid_argument("train: checkpoint is past total_steps");
        }
    } else {
        params = init_params(cfg);
        adam = init_adam(params, tc);
    }

    std::vector<std::size_t> cps;
    if (tc.recompute) {
        std::size_t k = tc.recompute_k ? tc.recompute_k : (cfg.L / 8 > 0 ? cfg.L / 8 : 1);
        cps = select_checkpoints(cfg.L, k);
    }

    std::filesystem::create_directories(tc.out_dir);
    TrainResult res;
    res.metrics_path = tc.out_dir + "/metrics.jsonl";
    res.checkpoint_path = save_checkpoint(params, adam, start_step, tc.out_dir);

    std::ofstream metrics(res.metrics_path,
                          start_step ? std::ios::app : std::ios::trunc);
    if (!metrics) throw std::runtime_error("train: cannot write " + res.metrics_path);

    std::vector<int> tokens, targets;
    for (std::uint64_t step = start_step + 1; step <= tc.total_steps; ++step) {
        std::mt19937_64 rng(step_rng_seed(tc.seed, step));
        Gradients grads = zero_like(params);
        double batch_loss = 0.0;
        bool loss_finite = true;
        for (std::size_t b = 0; b < tc.batch_size; ++b) {
            sample_window(corpus, rng, cfg.s, tokens, targets);
            ActivationCache cache = tc.recompute
                                        ? forward(params, tokens, CacheMode::Selective, cps)
                                        : forward(params, tokens);
            LossGrad lg = loss_and_grad(cache.logits, targets);
            batch_loss += lg.loss;
            if (!std::isfinite(lg.loss)) {
                loss_finite = false;
                break;
            }
            Gradients gb = tc.recompute ? backward_recompute(params, cache, lg.d_logits)
                                        : backward(params, cache, lg.d_logits);
            accumulate(grads, gb);
        }
        batch_loss /= static_cast<double>(tc.batch_size);
        scale_gradients(grads, 1.0 / static_cast<double>(tc.batch_size));
        double grad_norm = clip_gradients(grads, tc.grad_clip_norm);
        double lr = lr_at(step, tc);
        bool applied = loss_finite && adam_step(params, grads, adam, lr, tc);

        nlohmann::ordered_json line;
        line["step"] = step;
        if (std::isfinite(batch_loss)) {
            line["loss"] = batch_loss;
        } else {
            line["loss"] = nullptr;
        }
        line["lr"] = lr;
        if (std::isfinite(grad_norm)) {
            line["grad_norm"] = grad_norm;
        } else {
            line["grad_norm"] = nullptr;
        }

        if (!applied) {
            // Bad loss or gradients: stop here, last saved checkpoint stands.
            res.aborted = true;
            metrics << line.dump() << "\n";
            break;
        }
        res.losses.push_back(batch_loss);
        res.steps_done = step;
        if (step % tc.eval_every == 0 || step == tc.total_steps) {
            line["val_loss"] = eval_loss(params, corpus, tc);
            res.checkpoint_path = save_checkpoint(params, adam, step, tc.out_dir);
        }
        metrics << line.dump() << "\n";
    }
    metrics.close();

    if (!res.losses.empty()) {
        res.initial_loss = res.losses.front();
        std::size_t tail = res.losses.size() < 10 ? res.losses.size() : 10;
        double sum = 0.0;
        for (std::size_t i = res.losses.size() - tail; i < res.losses.size(); ++i) {
            sum += res.losses[i];
        }
        res.final_loss = sum / static_cast<double>(tail);
    }
    return res;
}

}  // namespace crnet
