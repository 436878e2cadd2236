#include "crnet/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <iostream>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "crnet/backprop.hpp"
#include "crnet/cost_model.hpp"
#include "crnet/matrix.hpp"
#include "crnet/model.hpp"
#include "crnet/presets.hpp"
#include "crnet/recompute.hpp"
#include "crnet/residual_analysis.hpp"
#include "crnet/trainer.hpp"

namespace crnet {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr int kOk = 0;
constexpr int kError = 1;
constexpr int kCheckFailed = 2;

// Check thresholds for the verification subcommands. Kept here, not behind
// flags that could silently loosen them.
constexpr double kGradCheckDefaultTol = 1e-6;
constexpr double kReconTol = 1e-9;
constexpr double kGradAgreementTol = 1e-8;

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::string preset;
    std::uint64_t seed = 1;
    int threads = 1;
    CLI::Option* seed_opt = nullptr;

    bool seed_given() const { return seed_opt != nullptr && seed_opt->count() > 0; }
};

void add_common(CLI::App* sub, CommonArgs& c) {
    sub->add_option("--config", c.config_path,
                    "JSON config file with sections model/train/cost/pipeline");
    sub->add_option("--out", c.out_dir, "output directory")->capture_default_str();
    sub->add_option("--preset", c.preset,
                    "preset: tiny, toy, llama2-{60m,130m,350m,1b,7b,13b}");
    c.seed_opt = sub->add_option("--seed", c.seed, "RNG seed")->capture_default_str();
    sub->add_option("--threads", c.threads, "matmul worker threads")->capture_default_str();
}

std::string preset_or(const CommonArgs& c, const char* fallback) {
    return c.preset.empty() ? std::string(fallback) : c.preset;
}

void check_keys(const json& sec, const char* where, std::initializer_list<const char*> known) {
    for (auto it = sec.begin(); it != sec.end(); ++it) {
        bool ok = false;
        for (const char* k : known)
            if (it.key() == k) {
                ok = true;
                break;
            }
        if (!ok)
            throw std::runtime_error("config: unknown key \"" + it.key() + "\" in section " +
                                     where);
    }
}

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw std::runtime_error("config: " + path + ": " + e.what());
    }
    if (!j.is_object()) throw std::runtime_error("config: top level must be a JSON object");
    check_keys(j, "(top level)", {"model", "train", "cost", "pipeline"});
    return j;
}

// preset < config file < flags. The "r" shorthand expands to a uniform
// schedule once L is settled.
ModelConfig resolve_model(const CommonArgs& c, const json& file_cfg, const std::string& name,
                          bool must_instantiate) {
    ModelConfig base = model_preset(name);
    if (must_instantiate && !preset_instantiable(name))
        throw std::runtime_error("preset " + name +
                                 " is accounting-only at this scale; use tiny, toy, "
                                 "llama2-60m or llama2-130m");
    json j = json::parse(base.to_json());
    if (file_cfg.contains("model")) {
        json sec = file_cfg.at("model");
        check_keys(sec, "model",
                   {"arch", "L", "h", "h_ff", "heads", "vocab", "s", "r", "r_schedule",
                    "epsilon", "causal", "seed"});
        std::size_t uniform = 0;
        if (sec.contains("r")) {
            uniform = sec.at("r").get<std::size_t>();
            sec.erase("r");
        }
        j.update(sec);
        if (uniform > 0) {
            const std::size_t L = j.at("L").get<std::size_t>();
            j["r_schedule"] = std::vector<std::size_t>(L > 0 ? L - 1 : 0, uniform);
        }
    }
    if (c.seed_given()) j["seed"] = c.seed;
    return ModelConfig::from_json(j.dump());
}

json train_json(const TrainConfig& tc) {
    json j;
    j["total_steps"] = tc.total_steps;
    j["batch_size"] = tc.batch_size;
    j["peak_lr"] = tc.peak_lr;
    j["final_lr_fraction"] = tc.final_lr_fraction;
    j["warmup_fraction"] = tc.warmup_fraction;
    j["lowrank_lr_scale"] = tc.lowrank_lr_scale;
    j["grad_clip_norm"] = tc.grad_clip_norm;
    j["adam_beta1"] = tc.adam_beta1;
    j["adam_beta2"] = tc.adam_beta2;
    j["adam_eps"] = tc.adam_eps;
    j["eval_every"] = tc.eval_every;
    j["eval_windows"] = tc.eval_windows;
    j["seed"] = tc.seed;
    j["recompute"] = tc.recompute;
    j["recompute_k"] = tc.recompute_k;
    j["corpus_path"] = tc.corpus_path;
    j["out_dir"] = tc.out_dir;
    j["resume_from"] = tc.resume_from;
    return j;
}

TrainConfig merge_train(TrainConfig tc, const json& file_cfg) {
    if (!file_cfg.contains("train")) return tc;
    const json& sec = file_cfg.at("train");
    check_keys(sec, "train",
               {"total_steps", "batch_size", "peak_lr", "final_lr_fraction", "warmup_fraction",
                "lowrank_lr_scale", "grad_clip_norm", "adam_beta1", "adam_beta2", "adam_eps",
                "eval_every", "eval_windows", "seed", "recompute", "recompute_k",
                "corpus_path"});
    if (sec.contains("total_steps")) tc.total_steps = sec.at("total_steps").get<std::size_t>();
    if (sec.contains("batch_size")) tc.batch_size = sec.at("batch_size").get<std::size_t>();
    if (sec.contains("peak_lr")) tc.peak_lr = sec.at("peak_lr").get<double>();
    if (sec.contains("final_lr_fraction"))
        tc.final_lr_fraction = sec.at("final_lr_fraction").get<double>();
    if (sec.contains("warmup_fraction"))
        tc.warmup_fraction = sec.at("warmup_fraction").get<double>();
    if (sec.contains("lowrank_lr_scale"))
        tc.lowrank_lr_scale = sec.at("lowrank_lr_scale").get<double>();
    if (sec.contains("grad_clip_norm")) tc.grad_clip_norm = sec.at("grad_clip_norm").get<double>();
    if (sec.contains("adam_beta1")) tc.adam_beta1 = sec.at("adam_beta1").get<double>();
    if (sec.contains("adam_beta2")) tc.adam_beta2 = sec.at("adam_beta2").get<double>();
    if (sec.contains("adam_eps")) tc.adam_eps = sec.at("adam_eps").get<double>();
    if (sec.contains("eval_every")) tc.eval_every = sec.at("eval_every").get<std::size_t>();
    if (sec.contains("eval_windows")) tc.eval_windows = sec.at("eval_windows").get<std::size_t>();
    if (sec.contains("seed")) tc.seed = sec.at("seed").get<std::uint64_t>();
    if (sec.contains("recompute")) tc.recompute = sec.at("recompute").get<bool>();
    if (sec.contains("recompute_k")) tc.recompute_k = sec.at("recompute_k").get<std::size_t>();
    if (sec.contains("corpus_path")) tc.corpus_path = sec.at("corpus_path").get<std::string>();
    return tc;
}

json cost_config_json(const CostConfig& cc) {
    json j;
    j["method"] = method_name(cc.method);
    j["gcp"] = gcp_mode_name(cc.gcp);
    j["L"] = cc.L;
    j["h"] = cc.h;
    j["h_ff"] = cc.h_ff;
    j["s"] = cc.s;
    j["heads"] = cc.heads;
    j["vocab"] = cc.vocab;
    j["batch"] = cc.batch;
    j["bytes_per_value"] = cc.bytes_per_value;
    j["r_schedule"] = cc.r_schedule;
    j["checkpoint_count"] = cc.checkpoint_count;
    j["sparsity"] = cc.sparsity;
    return j;
}

CostConfig merge_cost(CostConfig cc, const json& file_cfg) {
    if (!file_cfg.contains("cost")) return cc;
    const json& sec = file_cfg.at("cost");
    check_keys(sec, "cost",
               {"method", "gcp", "L", "h", "h_ff", "s", "heads", "vocab", "batch",
                "bytes_per_value", "r", "r_schedule", "checkpoint_count", "sparsity"});
    if (sec.contains("method")) cc.method = method_from_name(sec.at("method").get<std::string>());
    if (sec.contains("gcp")) cc.gcp = gcp_mode_from_name(sec.at("gcp").get<std::string>());
    if (sec.contains("L")) cc.L = sec.at("L").get<std::size_t>();
    if (sec.contains("h")) cc.h = sec.at("h").get<std::size_t>();
    if (sec.contains("h_ff")) cc.h_ff = sec.at("h_ff").get<std::size_t>();
    if (sec.contains("s")) cc.s = sec.at("s").get<std::size_t>();
    if (sec.contains("heads")) cc.heads = sec.at("heads").get<std::size_t>();
    if (sec.contains("vocab")) cc.vocab = sec.at("vocab").get<std::size_t>();
    if (sec.contains("batch")) cc.batch = sec.at("batch").get<std::size_t>();
    if (sec.contains("bytes_per_value"))
        cc.bytes_per_value = sec.at("bytes_per_value").get<std::size_t>();
    if (sec.contains("r_schedule"))
        cc.r_schedule = sec.at("r_schedule").get<std::vector<std::size_t>>();
    if (sec.contains("r")) cc.r_schedule.assign(1, sec.at("r").get<std::size_t>());
    if (sec.contains("checkpoint_count"))
        cc.checkpoint_count = sec.at("checkpoint_count").get<std::size_t>();
    if (sec.contains("sparsity")) cc.sparsity = sec.at("sparsity").get<double>();
    return cc;
}

json pipeline_config_json(const PipelineConfig& pc) {
    json j;
    j["peak_flops"] = pc.peak_flops;
    j["bandwidth_gbs"] = pc.bandwidth_gbs;
    j["microbatch"] = pc.microbatch;
    j["pp_size"] = pc.pp_size;
    j["bytes_per_act"] = pc.bytes_per_act;
    j["comm_passes"] = pc.comm_passes;
    return j;
}

PipelineConfig merge_pipeline(PipelineConfig pc, const json& file_cfg) {
    if (!file_cfg.contains("pipeline")) return pc;
    const json& sec = file_cfg.at("pipeline");
    check_keys(sec, "pipeline",
               {"peak_tflops", "bandwidth_gbs", "microbatch", "pp_size", "bytes_per_act",
                "comm_passes"});
    if (sec.contains("peak_tflops")) pc.peak_flops = sec.at("peak_tflops").get<double>() * 1e12;
    if (sec.contains("bandwidth_gbs")) pc.bandwidth_gbs = sec.at("bandwidth_gbs").get<double>();
    if (sec.contains("microbatch")) pc.microbatch = sec.at("microbatch").get<std::size_t>();
    if (sec.contains("pp_size")) pc.pp_size = sec.at("pp_size").get<std::size_t>();
    if (sec.contains("bytes_per_act")) pc.bytes_per_act = sec.at("bytes_per_act").get<std::size_t>();
    if (sec.contains("comm_passes")) pc.comm_passes = sec.at("comm_passes").get<std::size_t>();
    return pc;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

// Every run prints its effective configuration and mirrors it to a file, so
// any output can be reproduced from the echo alone.
void emit_resolved(const CommonArgs& c, const char* subcommand, json extra) {
    extra["subcommand"] = subcommand;
    extra["out"] = c.out_dir;
    if (!extra.contains("seed")) extra["seed"] = c.seed;
    extra["threads"] = c.threads;
    std::cout << "resolved-config " << extra.dump() << "\n";
    fs::create_directories(c.out_dir);
    write_text(c.out_dir + "/resolved_config.json", extra.dump(2) + "\n");
}

std::vector<int> random_tokens(const ModelConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick(0, static_cast<int>(cfg.vocab) - 1);
    std::vector<int> tokens(cfg.s);
    for (int& t : tokens) t = pick(rng);
    return tokens;
}

std::vector<int> shifted_targets(const std::vector<int>& tokens) {
    std::vector<int> targets(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i)
        targets[i] = tokens[(i + 1) % tokens.size()];
    return targets;
}

double max_grad_rel_diff(Gradients& a, Gradients& b) {
    auto sa = param_spans(a);
    auto sb = param_spans(b);
    double worst = 0.0;
    for (std::size_t i = 0; i < sa.size(); ++i)
        for (std::size_t k = 0; k < sa[i].n; ++k) {
            const double x = sa[i].data[k];
            const double y = sb[i].data[k];
            const double den = std::max({std::fabs(x), std::fabs(y), 1e-8});
            worst = std::max(worst, std::fabs(x - y) / den);
        }
    return worst;
}

int run_train(const CommonArgs& c, const CLI::Option* steps_o, std::size_t steps,
              const CLI::Option* batch_o, std::size_t batch, const CLI::Option* lr_o, double lr,
              const CLI::Option* rec_o, const CLI::Option* cps_o, std::size_t cps,
              const CLI::Option* corpus_o, const std::string& corpus,
              const CLI::Option* resume_o, const std::string& resume) {
    const json file_cfg = load_config_file(c.config_path);
    const std::string name = preset_or(c, "toy");
    ModelConfig cfg = resolve_model(c, file_cfg, name, true);

    TrainConfig tc = merge_train(TrainConfig{}, file_cfg);
    if (steps_o->count() > 0) tc.total_steps = steps;
    if (batch_o->count() > 0) tc.batch_size = batch;
    if (lr_o->count() > 0) tc.peak_lr = lr;
    if (rec_o->count() > 0) tc.recompute = true;
    if (cps_o->count() > 0) tc.recompute_k = cps;
    if (corpus_o->count() > 0) tc.corpus_path = corpus;
    if (resume_o->count() > 0) tc.resume_from = resume;
    if (c.seed_given()) tc.seed = c.seed;
    tc.out_dir = c.out_dir;
    tc.validate();

    json echo;
    echo["preset"] = name;
    echo["model"] = json::parse(cfg.to_json());
    echo["train"] = train_json(tc);
    echo["seed"] = tc.seed;
    emit_resolved(c, "train", echo);

    TrainResult res = train(cfg, tc);
    if (res.aborted) {
        std::printf("train: ABORTED at step %zu (non-finite loss); kept %s\n", res.steps_done,
                    res.checkpoint_path.c_str());
        return kError;
    }
    std::printf("train: steps=%zu initial_loss=%.6f final_loss=%.6f metrics=%s checkpoint=%s\n",
                res.steps_done, res.initial_loss, res.final_loss, res.metrics_path.c_str(),
                res.checkpoint_path.c_str());
    return kOk;
}

int run_grad_check(const CommonArgs& c, double fd_step, std::size_t max_coords,
                   double threshold) {
    const json file_cfg = load_config_file(c.config_path);
    const std::string name = preset_or(c, "tiny");
    ModelConfig cfg = resolve_model(c, file_cfg, name, true);

    json echo;
    echo["preset"] = name;
    echo["model"] = json::parse(cfg.to_json());
    echo["fd_step"] = fd_step;
    echo["max_coords_per_group"] = max_coords;
    echo["threshold"] = threshold;
    echo["seed"] = cfg.seed;
    emit_resolved(c, "grad-check", echo);

    GradCheckReport rep = grad_check(cfg, cfg.seed, fd_step, max_coords);
    const bool pass = rep.overall <= threshold;
    json j = json::parse(grad_check_json(rep));
    j["threshold"] = threshold;
    j["pass"] = pass;
    write_text(c.out_dir + "/grad_check.json", j.dump(2) + "\n");

    std::printf("grad-check: overall=%.3e threshold=%.1e groups=%zu %s\n", rep.overall, threshold,
                rep.max_rel_err.size(), pass ? "pass" : "FAIL");
    return pass ? kOk : kCheckFailed;
}

int run_recompute_check(const CommonArgs& c, std::size_t k) {
    const json file_cfg = load_config_file(c.config_path);
    ModelConfig cfg;
    std::string name = "(builtin 9-layer)";
    if (!c.preset.empty() || file_cfg.contains("model")) {
        name = preset_or(c, "toy");
        cfg = resolve_model(c, file_cfg, name, true);
    } else {
        // Deep enough that several layers sit between stored ones.
        cfg.L = 9;
        cfg.h = 16;
        cfg.h_ff = 32;
        cfg.heads = 2;
        cfg.vocab = 16;
        cfg.s = 8;
        cfg.r_schedule.assign(cfg.L - 1, 4);
        if (c.seed_given()) cfg.seed = c.seed;
        cfg.validate();
    }
    const std::vector<std::size_t> checkpoints = select_checkpoints(cfg.L, k);

    json echo;
    echo["preset"] = name;
    echo["model"] = json::parse(cfg.to_json());
    echo["stored_layers"] = checkpoints;
    echo["recon_threshold"] = kReconTol;
    echo["grad_threshold"] = kGradAgreementTol;
    echo["seed"] = cfg.seed;
    emit_resolved(c, "recompute-check", echo);

    // Random betas bounded away from zero (reconstruction divides by tau) and
    // a small embedding scale so nine layers of SwiGLU stay conditioned.
    CrNetParams params = random_params(cfg, cfg.seed, 0.1, 1.5, true, 0.05);
    const std::vector<int> tokens = random_tokens(cfg, cfg.seed ^ 0x746f6b656eULL);
    const std::vector<int> targets = shifted_targets(tokens);

    std::vector<ReconEntry> profile = reconstruction_error_profile(params, tokens, checkpoints);
    const double recon = max_recon_error(profile);
    write_text(c.out_dir + "/recon_profile.csv", recon_profile_csv(profile));

    ActivationCache full_cache = forward(params, tokens, CacheMode::Full);
    LossGrad lg = loss_and_grad(full_cache.logits, targets);
    Gradients g_full = backward(params, full_cache, lg.d_logits);
    ActivationCache sel_cache = forward(params, tokens, CacheMode::Selective, checkpoints);
    Gradients g_sel = backward_recompute(params, sel_cache, lg.d_logits);
    const double gdiff = max_grad_rel_diff(g_full, g_sel);

    const bool pass = recon <= kReconTol && gdiff <= kGradAgreementTol;
    json j;
    j["stored_layers"] = checkpoints;
    j["max_recon_error"] = recon;
    j["recon_threshold"] = kReconTol;
    j["max_grad_rel_diff"] = gdiff;
    j["grad_threshold"] = kGradAgreementTol;
    j["stored_elements_selective"] = sel_cache.stored_elements();
    j["stored_elements_full"] = full_cache.stored_elements();
    j["pass"] = pass;
    write_text(c.out_dir + "/recompute_check.json", j.dump(2) + "\n");

    std::printf("recompute-check: recon=%.3e grad_diff=%.3e stored=%zu/%zu %s\n", recon, gdiff,
                sel_cache.stored_elements(), full_cache.stored_elements(),
                pass ? "pass" : "FAIL");
    return pass ? kOk : kCheckFailed;
}

int run_analyze(const CommonArgs& c, double r_fraction, const std::string& ckpt,
                const std::string& corpus_path) {
    const json file_cfg = load_config_file(c.config_path);
    ModelConfig cfg;
    CrNetParams params;
    std::string name;
    if (!ckpt.empty()) {
        Checkpoint loaded = load_checkpoint(ckpt);
        params = std::move(loaded.params);
        cfg = params.cfg;
        name = "(checkpoint)";
    } else {
        name = preset_or(c, "toy");
        cfg = resolve_model(c, file_cfg, name, true);
        params = random_params(cfg, cfg.seed);
    }

    std::vector<int> sample;
    if (!corpus_path.empty()) {
        if (cfg.vocab != 256)
            throw std::runtime_error("analyze: corpus sampling needs a byte model (vocab 256)");
        Corpus corpus = ingest_corpus(corpus_path, cfg.s);
        sample.resize(cfg.s);
        for (std::size_t i = 0; i < cfg.s; ++i) sample[i] = corpus.bytes[i];
    } else {
        sample = random_tokens(cfg, cfg.seed ^ 0x73616d706cULL);
    }

    json echo;
    echo["preset"] = name;
    echo["model"] = json::parse(cfg.to_json());
    echo["r_fraction"] = r_fraction;
    echo["checkpoint"] = ckpt;
    echo["corpus"] = corpus_path;
    echo["seed"] = cfg.seed;
    emit_resolved(c, "analyze", echo);

    AnalysisReport rep = analyze_model_activations(params, sample, r_fraction);
    write_text(c.out_dir + "/analysis.csv", analysis_csv(rep));

    json j;
    j["r_fraction"] = r_fraction;
    j["mean_rel_err_direct"] = rep.mean_direct;
    j["mean_rel_err_cross"] = rep.mean_cross;
    j["best_global_beta0"] = rep.best_global_beta0;
    j["best_global_mean"] = rep.best_global_mean;
    j["rows"] = json::array();
    for (const LayerPosStat& row : rep.rows) {
        json r;
        r["layer"] = row.layer;
        r["position"] = position_name(row.pos);
        r["r"] = row.r;
        r["beta0"] = row.beta0;
        r["rel_err_direct"] = row.rel_err_direct;
        r["rel_err_cross"] = row.rel_err_cross;
        r["cosine"] = row.cosine;
        r["stable_rank_prev"] = row.stable_rank_prev;
        j["rows"].push_back(r);
    }
    write_text(c.out_dir + "/analysis.json", j.dump(2) + "\n");

    std::printf("analyze: rows=%zu mean_direct=%.6f mean_cross=%.6f best_beta0=%.2f\n",
                rep.rows.size(), rep.mean_direct, rep.mean_cross, rep.best_global_beta0);
    return kOk;
}

int run_theorem_check(const CommonArgs& c, std::size_t n, double eps, std::size_t trials) {
    json echo;
    echo["n"] = n;
    echo["eps_cos"] = eps;
    echo["trials"] = trials;
    echo["seed"] = c.seed;
    emit_resolved(c, "theorem-check", echo);

    std::size_t in_hyp = 0;
    std::size_t held = 0;
    json rows = json::array();
    for (std::size_t i = 0; i < trials; ++i) {
        TheoremCheckResult t = theorem_check(n, eps, c.seed + i);
        if (t.in_hypothesis) {
            ++in_hyp;
            if (t.holds) ++held;
        }
        json r;
        r["seed"] = c.seed + i;
        r["in_hypothesis"] = t.in_hypothesis;
        r["holds"] = t.holds;
        r["lhs"] = t.lhs;
        r["rhs"] = t.rhs;
        r["beta"] = t.beta;
        r["r0"] = t.r0;
        r["r"] = t.r;
        r["eps_used"] = t.eps_used;
        r["cos_sim"] = t.cos_sim;
        rows.push_back(r);
    }
    const bool pass = held == in_hyp;

    json j;
    j["n"] = n;
    j["eps_cos"] = eps;
    j["trials"] = trials;
    j["in_hypothesis"] = in_hyp;
    j["holds"] = held;
    j["pass"] = pass;
    j["rows"] = rows;
    write_text(c.out_dir + "/theorem_check.json", j.dump(2) + "\n");

    std::printf("theorem-check: trials=%zu in_hypothesis=%zu holds=%zu %s\n", trials, in_hyp,
                held, pass ? "pass" : "FAIL");
    return pass ? kOk : kCheckFailed;
}

int run_cost(const CommonArgs& c, const CLI::Option* method_o, const std::string& method,
             const CLI::Option* gcp_o, const std::string& gcp, const CLI::Option* batch_o,
             std::size_t batch, const CLI::Option* seq_o, std::size_t seq) {
    const json file_cfg = load_config_file(c.config_path);
    const std::string name = preset_or(c, "llama2-60m");
    CostConfig cc = merge_cost(cost_preset(name), file_cfg);
    if (method_o->count() > 0) cc.method = method_from_name(method);
    if (gcp_o->count() > 0) cc.gcp = gcp_mode_from_name(gcp);
    if (batch_o->count() > 0) cc.batch = batch;
    if (seq_o->count() > 0) cc.s = seq;
    cc.validate();

    json echo;
    echo["preset"] = name;
    echo["cost"] = cost_config_json(cc);
    emit_resolved(c, "cost", echo);

    write_text(c.out_dir + "/cost.json", cost_report_json(cc) + "\n");

    ParamCount pc = param_count(cc);
    OptimizerMemory om = optimizer_memory(cc);
    StepFlops sf = step_flops(cc);
    std::printf("cost: method=%s params_total=%llu core=%llu step_flops_seq=%.3e "
                "optimizer_gib=%.4f\n",
                method_name(cc.method), pc.total, pc.core, sf.total, om.gib);
    return kOk;
}

json pipeline_report_fields(const PipelineReport& r) {
    json j;
    j["method"] = r.method;
    j["step_flops_seq"] = r.step_flops_seq;
    j["recompute_flops_seq"] = r.recompute_flops_seq;
    j["compute_flops"] = r.compute_flops;
    j["compute_time_s"] = r.compute_time_s;
    j["comm_dim_elements"] = r.comm_dim_elements;
    j["comm_volume_bytes"] = r.comm_volume_bytes;
    j["comm_volume_gib"] = r.comm_volume_gib;
    j["comm_volume_gb"] = r.comm_volume_gb;
    j["comm_time_s"] = r.comm_time_s;
    j["comm_time_s_decimal"] = r.comm_time_s_decimal;
    j["param_state_gib"] = r.param_state_gib;
    j["activation_gib"] = r.activation_gib;
    return j;
}

int run_pipeline_cost(const CommonArgs& c, const CLI::Option* tflops_o, double tflops,
                      const CLI::Option* bw_o, double bw, const CLI::Option* micro_o,
                      std::size_t micro, const CLI::Option* pp_o, std::size_t pp,
                      const CLI::Option* rank_o, std::size_t rank, const CLI::Option* cps_o,
                      std::size_t cps) {
    const json file_cfg = load_config_file(c.config_path);
    const std::string name = preset_or(c, "llama2-13b");
    CostConfig cc = cost_preset(name);
    // Pipeline-table conventions: full 4096-token context, uniform rank h/4,
    // one stored layer per eight. A config file can override any of these.
    cc.s = 4096;
    cc.r_schedule.assign(1, std::max<std::size_t>(1, cc.h / 4));
    cc.checkpoint_count = std::max<std::size_t>(1, cc.L / 8);
    cc = merge_cost(std::move(cc), file_cfg);
    if (rank_o->count() > 0) cc.r_schedule.assign(1, rank);
    if (cps_o->count() > 0) cc.checkpoint_count = cps;
    cc.method = Method::CrNet;
    cc.gcp = GcpMode::CrNetRecompute;
    cc.validate();

    PipelineConfig pcfg = merge_pipeline(PipelineConfig{}, file_cfg);
    if (tflops_o->count() > 0) pcfg.peak_flops = tflops * 1e12;
    if (bw_o->count() > 0) pcfg.bandwidth_gbs = bw;
    if (micro_o->count() > 0) pcfg.microbatch = micro;
    if (pp_o->count() > 0) pcfg.pp_size = pp;

    json echo;
    echo["preset"] = name;
    echo["cost"] = cost_config_json(cc);
    echo["pipeline"] = pipeline_config_json(pcfg);
    emit_resolved(c, "pipeline-cost", echo);

    CostConfig full_cc = cc;
    full_cc.method = Method::FullRank;
    full_cc.gcp = GcpMode::Vanilla;
    PipelineReport rf = pipeline_report(pcfg, full_cc);
    PipelineReport rc = pipeline_report(pcfg, cc);

    json j;
    j["config"]["cost"] = cost_config_json(cc);
    j["config"]["pipeline"] = pipeline_config_json(pcfg);
    j["full_rank"] = pipeline_report_fields(rf);
    j["crnet"] = pipeline_report_fields(rc);
    write_text(c.out_dir + "/pipeline_cost.json", j.dump(2) + "\n");

    std::printf("pipeline-cost: full compute=%.4e time=%.2fs comm=%.2fGiB %.3fs | "
                "crnet compute=%.4e time=%.2fs comm=%.2fGiB %.3fs\n",
                rf.compute_flops, rf.compute_time_s, rf.comm_volume_gib, rf.comm_time_s,
                rc.compute_flops, rc.compute_time_s, rc.comm_volume_gib, rc.comm_time_s);
    return kOk;
}

int run_dump_activations(const CommonArgs& c) {
    const json file_cfg = load_config_file(c.config_path);
    const std::string name = preset_or(c, "toy");
    ModelConfig cfg = resolve_model(c, file_cfg, name, true);

    json echo;
    echo["preset"] = name;
    echo["model"] = json::parse(cfg.to_json());
    echo["seed"] = cfg.seed;
    emit_resolved(c, "dump-activations", echo);

    CrNetParams params = random_params(cfg, cfg.seed);
    const std::vector<int> tokens = random_tokens(cfg, cfg.seed ^ 0x616374ULL);
    ActivationCache cache = forward(params, tokens, CacheMode::Full);

    const std::string dir = c.out_dir + "/activations";
    fs::create_directories(dir);
    json files = json::array();
    auto dump = [&](const std::string& file, const Matrix& m) {
        save_matrix(m, dir + "/" + file);
        json f;
        f["file"] = file;
        f["rows"] = m.rows;
        f["cols"] = m.cols;
        files.push_back(f);
    };
    for (std::size_t l = 1; l <= cfg.L; ++l) {
        dump("x" + std::to_string(l) + ".crmx", cache.x[l - 1]);
        for (Position p : kPositions)
            dump("y" + std::to_string(l) + "_" + position_name(p) + ".crmx",
                 cache.layers[l - 1].y[static_cast<int>(p)]);
    }
    dump("hidden.crmx", cache.hidden);
    dump("logits.crmx", cache.logits);

    json manifest;
    manifest["model"] = json::parse(cfg.to_json());
    manifest["tokens"] = tokens;
    manifest["files"] = files;
    write_text(dir + "/manifest.json", manifest.dump(2) + "\n");

    std::printf("dump-activations: wrote %zu matrices under %s\n", files.size(), dir.c_str());
    return kOk;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"cross-layer low-rank residual LM: training, checks and cost accounting"};
    app.require_subcommand(1);
    int rc = kOk;

    CLI::App* train_cmd = app.add_subcommand("train", "train a byte-level model on a corpus");
    CommonArgs train_c;
    add_common(train_cmd, train_c);
    std::size_t t_steps = 300, t_batch = 8, t_cps = 0;
    double t_lr = 3e-3;
    std::string t_corpus, t_resume;
    bool t_rec = false;
    CLI::Option* t_steps_o = train_cmd->add_option("--steps", t_steps, "optimizer steps");
    CLI::Option* t_batch_o = train_cmd->add_option("--batch", t_batch, "sequences per step");
    CLI::Option* t_lr_o = train_cmd->add_option("--lr", t_lr, "peak learning rate");
    CLI::Option* t_rec_o =
        train_cmd->add_flag("--recompute", t_rec, "backward from a selective cache");
    CLI::Option* t_cps_o =
        train_cmd->add_option("--checkpoints", t_cps, "stored layers when recomputing");
    CLI::Option* t_corpus_o = train_cmd->add_option("--corpus", t_corpus, "training corpus file");
    CLI::Option* t_resume_o =
        train_cmd->add_option("--resume", t_resume, "checkpoint file or directory");
    train_cmd->callback([&]() {
        set_matmul_threads(train_c.threads);
        rc = run_train(train_c, t_steps_o, t_steps, t_batch_o, t_batch, t_lr_o, t_lr, t_rec_o,
                       t_cps_o, t_cps, t_corpus_o, t_corpus, t_resume_o, t_resume);
    });

    CLI::App* gc_cmd =
        app.add_subcommand("grad-check", "analytic gradients against finite differences");
    CommonArgs gc_c;
    add_common(gc_cmd, gc_c);
    double gc_fd = 1e-5, gc_threshold = kGradCheckDefaultTol;
    std::size_t gc_max = 0;
    gc_cmd->add_option("--fd-step", gc_fd, "central difference step")->capture_default_str();
    gc_cmd->add_option("--max-coords", gc_max, "coordinates per group, 0 = all")
        ->capture_default_str();
    gc_cmd->add_option("--threshold", gc_threshold, "max relative error accepted")
        ->capture_default_str();
    gc_cmd->callback([&]() {
        set_matmul_threads(gc_c.threads);
        rc = run_grad_check(gc_c, gc_fd, gc_max, gc_threshold);
    });

    CLI::App* rcc_cmd = app.add_subcommand(
        "recompute-check", "selective-cache backward against the full-cache baseline");
    CommonArgs rcc_c;
    add_common(rcc_cmd, rcc_c);
    std::size_t rcc_k = 2;
    rcc_cmd->add_option("--checkpoints", rcc_k, "stored layer count")->capture_default_str();
    rcc_cmd->callback([&]() {
        set_matmul_threads(rcc_c.threads);
        rc = run_recompute_check(rcc_c, rcc_k);
    });

    CLI::App* an_cmd =
        app.add_subcommand("analyze", "score cross-layer low-rank structure of activations");
    CommonArgs an_c;
    add_common(an_cmd, an_c);
    double an_rfrac = 0.25;
    std::string an_ckpt, an_corpus;
    an_cmd->add_option("--r-fraction", an_rfrac, "rank as a fraction of h")
        ->capture_default_str();
    an_cmd->add_option("--ckpt", an_ckpt, "analyze a trained checkpoint");
    an_cmd->add_option("--corpus", an_corpus, "sample tokens from this corpus");
    an_cmd->callback([&]() {
        set_matmul_threads(an_c.threads);
        rc = run_analyze(an_c, an_rfrac, an_ckpt, an_corpus);
    });

    CLI::App* th_cmd =
        app.add_subcommand("theorem-check", "cross-layer estimator bound on synthetic pairs");
    CommonArgs th_c;
    add_common(th_cmd, th_c);
    std::size_t th_n = 64, th_trials = 100;
    double th_eps = 0.05;
    th_cmd->add_option("--n", th_n, "matrix side")->capture_default_str();
    th_cmd->add_option("--eps", th_eps, "target cosine defect")->capture_default_str();
    th_cmd->add_option("--trials", th_trials, "seeds to try")->capture_default_str();
    th_cmd->callback([&]() {
        set_matmul_threads(th_c.threads);
        rc = run_theorem_check(th_c, th_n, th_eps, th_trials);
    });

    CLI::App* cost_cmd =
        app.add_subcommand("cost", "closed-form parameter, memory and FLOP accounting");
    CommonArgs cost_c;
    add_common(cost_cmd, cost_c);
    std::string cost_method = "crnet", cost_gcp = "none";
    std::size_t cost_batch = 1, cost_seq = 256;
    CLI::Option* cost_method_o =
        cost_cmd->add_option("--method", cost_method,
                             "full_rank, lora, relora, sltrain, galore, cola or crnet");
    CLI::Option* cost_gcp_o = cost_cmd->add_option(
        "--gcp-mode", cost_gcp, "activation plan: none, vanilla, cola_m or crnet_recompute");
    CLI::Option* cost_batch_o = cost_cmd->add_option("--batch", cost_batch, "sequences per step");
    CLI::Option* cost_seq_o = cost_cmd->add_option("--seq", cost_seq, "sequence length");
    cost_cmd->callback([&]() {
        rc = run_cost(cost_c, cost_method_o, cost_method, cost_gcp_o, cost_gcp, cost_batch_o,
                      cost_batch, cost_seq_o, cost_seq);
    });

    CLI::App* pp_cmd = app.add_subcommand(
        "pipeline-cost", "two-stage pipeline compute and boundary traffic estimates");
    CommonArgs pp_c;
    add_common(pp_cmd, pp_c);
    double pp_tflops = 312.0, pp_bw = 64.0;
    std::size_t pp_micro = 16, pp_size = 2, pp_rank = 0, pp_cps = 0;
    CLI::Option* pp_tflops_o =
        pp_cmd->add_option("--peak-tflops", pp_tflops, "per-device peak TFLOP/s")
            ->capture_default_str();
    CLI::Option* pp_bw_o = pp_cmd->add_option("--bandwidth-gbs", pp_bw, "interconnect GB/s")
                               ->capture_default_str();
    CLI::Option* pp_micro_o = pp_cmd->add_option("--microbatch", pp_micro, "sequences in flight")
                                  ->capture_default_str();
    CLI::Option* pp_size_o =
        pp_cmd->add_option("--pp-size", pp_size, "pipeline stages")->capture_default_str();
    CLI::Option* pp_rank_o = pp_cmd->add_option("--rank", pp_rank, "uniform rank, default h/4");
    CLI::Option* pp_cps_o =
        pp_cmd->add_option("--checkpoints", pp_cps, "stored layers, default L/8");
    pp_cmd->callback([&]() {
        rc = run_pipeline_cost(pp_c, pp_tflops_o, pp_tflops, pp_bw_o, pp_bw, pp_micro_o, pp_micro,
                               pp_size_o, pp_size, pp_rank_o, pp_rank, pp_cps_o, pp_cps);
    });

    CLI::App* da_cmd =
        app.add_subcommand("dump-activations", "forward pass tensors as CRMX files");
    CommonArgs da_c;
    add_common(da_cmd, da_c);
    da_cmd->callback([&]() {
        set_matmul_threads(da_c.threads);
        rc = run_dump_activations(da_c);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        std::cerr << "run with --help for usage\n";
        return kError;
    }
    return rc;
}

}  // namespace crnet
