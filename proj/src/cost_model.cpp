#include "crnet/cost_model.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace crnet {

namespace {

using u128 = unsigned __int128;

unsigned long long to_u64(u128 v, const char* what) {
    if (v > static_cast<u128>(~0ull)) {
        throw std::overflow_error(std::string(what) + ": count exceeds 64 bits");
    }
    return static_cast<unsigned long long>(v);
}

}  // namespace

const char* method_name(Method m) {
    switch (m) {
        case Method::FullRank: return "full_rank";
        case Method::Lora: return "lora";
        case Method::ReLora: return "relora";
        case Method::SlTrain: return "sltrain";
        case Method::GaLore: return "galore";
        case Method::Cola: return "cola";
        case Method::CrNet: return "crnet";
    }
    throw std::logic_error("method_name: bad enum");
}

Method method_from_name(const std::string& name) {
    for (Method m : {Method::FullRank, Method::Lora, Method::ReLora, Method::SlTrain,
                     Method::GaLore, Method::Cola, Method::CrNet}) {
        if (name == method_name(m)) return m;
    }
    throw std::invalid_argument("unknown method: " + name);
}

const char* gcp_mode_name(GcpMode m) {
    switch (m) {
        case GcpMode::None: return "none";
        case GcpMode::Vanilla: return "vanilla";
        case GcpMode::ColaM: return "cola_m";
        case GcpMode::CrNetRecompute: return "crnet_recompute";
    }
    throw std::logic_error("gcp_mode_name: bad enum");
}

GcpMode gcp_mode_from_name(const std::string& name) {
    for (GcpMode m : {GcpMode::None, GcpMode::Vanilla, GcpMode::ColaM,
                      GcpMode::CrNetRecompute}) {
        if (name == gcp_mode_name(m)) return m;
    }
    throw std::invalid_argument("unknown gcp mode: " + name);
}

bool CostConfig::uses_rank() const { return method != Method::FullRank; }

std::size_t CostConfig::rank_for_layer(std::size_t l) const {
    if (l < 1 || l > L) throw std::out_of_range("rank_for_layer: layer out of range");
    if (r_schedule.empty()) throw std::invalid_argument("rank_for_layer: empty schedule");
    if (r_schedule.size() == 1) return r_schedule[0];
    return l == 1 ? r_schedule[0] : r_schedule[l - 2];
}

std::size_t CostConfig::uniform_rank() const {
    if (r_schedule.empty()) throw std::invalid_argument("uniform_rank: empty schedule");
    return r_schedule[0];
}

void CostConfig::validate() const {
    if (L < 1) throw std::invalid_argument("cost config: L must be positive");
    if (h < 1 || h_ff < 1 || s < 1 || heads < 1 || vocab < 1) {
        throw std::invalid_argument("cost config: dimensions must be positive");
    }
    if (batch < 1) throw std::invalid_argument("cost config: batch must be positive");
    if (bytes_per_value < 1) {
        throw std::invalid_argument("cost config: bytes_per_value must be positive");
    }
    if (sparsity < 0.0 || sparsity > 1.0) {
        throw std::invalid_argument("cost config: sparsity must lie in [0, 1]");
    }
    if (checkpoint_count > L) {
        throw std::invalid_argument("cost config: checkpoint_count exceeds L");
    }
    bool needs_rank = uses_rank() && (method != Method::CrNet || L > 1);
    if (needs_rank) {
        if (r_schedule.empty()) {
            throw std::invalid_argument("cost config: rank schedule required for low-rank methods");
        }
        if (r_schedule.size() != 1 && r_schedule.size() != L - 1) {
            throw std::invalid_argument("cost config: rank schedule must have 1 or L-1 entries");
        }
        for (std::size_t r : r_schedule) {
            if (r < 1) throw std::invalid_argument("cost config: ranks must be positive");
            if (r >= h || r >= h_ff) {
                throw std::invalid_argument("cost config: rank must be below min(h, h_ff)");
            }
        }
    }
}

namespace {

// Sum of per-layer ranks for layers first..last inclusive (1-based).
u128 rank_sum(const CostConfig& cfg, std::size_t first, std::size_t last) {
    u128 sum = 0;
    for (std::size_t l = first; l <= last; ++l) sum += cfg.rank_for_layer(l);
    return sum;
}

double rank_sum_d(const CostConfig& cfg, std::size_t first, std::size_t last) {
    if (first > last) return 0.0;
    return static_cast<double>(to_u64(rank_sum(cfg, first, last), "rank sum"));
}

}  // namespace

ParamCount param_count(const CostConfig& cfg) {
    cfg.validate();
    ParamCount out;
    u128 h = cfg.h, hff = cfg.h_ff, L = cfg.L;
    u128 dense_layer = 4 * h * h + 3 * h * hff;

    auto push = [&](const std::string& name, u128 v) {
        out.terms.emplace_back(name, to_u64(v, "param_count"));
    };

    switch (cfg.method) {
        case Method::FullRank:
        case Method::GaLore:
            push("4Lh^2", L * 4 * h * h);
            push("3Lhh_ff", L * 3 * h * hff);
            break;
        case Method::Lora:
        case Method::ReLora:
            push("4Lh^2", L * 4 * h * h);
            push("3Lhh_ff", L * 3 * h * hff);
            push("adapters 11hr", 11 * h * rank_sum(cfg, 1, cfg.L));
            push("adapters 3h_ffr", 3 * hff * rank_sum(cfg, 1, cfg.L));
            break;
        case Method::SlTrain: {
            push("11hr", 11 * h * rank_sum(cfg, 1, cfg.L));
            push("3h_ffr", 3 * hff * rank_sum(cfg, 1, cfg.L));
            double sparse = cfg.sparsity * static_cast<double>(to_u64(L * dense_layer, "sltrain"));
            push("sparse deltaL(4h^2+3hh_ff)", static_cast<u128>(std::llround(sparse)));
            break;
        }
        case Method::Cola:
            push("11hr", 11 * h * rank_sum(cfg, 1, cfg.L));
            push("3h_ffr", 3 * hff * rank_sum(cfg, 1, cfg.L));
            break;
        case Method::CrNet:
            push("first layer 4h^2+3hh_ff", dense_layer);
            if (cfg.L > 1) {
                push("11hr", 11 * h * rank_sum(cfg, 2, cfg.L));
                push("3h_ffr", 3 * hff * rank_sum(cfg, 2, cfg.L));
            }
            break;
    }

    u128 core = 0;
    for (const auto& [name, v] : out.terms) core += v;
    out.core = to_u64(core, "param_count core");
    out.embeddings = to_u64(2 * static_cast<u128>(cfg.vocab) * h, "embeddings");
    out.total = to_u64(core + out.embeddings, "param_count total");
    return out;
}

OptimizerMemory optimizer_memory(const CostConfig& cfg) {
    ParamCount pc = param_count(cfg);
    OptimizerMemory out;
    out.bytes = to_u64(u128(4) * pc.total * cfg.bytes_per_value, "optimizer_memory");
    out.core_bytes = to_u64(u128(4) * pc.core * cfg.bytes_per_value, "optimizer_memory");
    out.gib = static_cast<double>(out.bytes) / (1024.0 * 1024.0 * 1024.0);
    out.gb = static_cast<double>(out.bytes) / 1e9;
    return out;
}

StepFlops step_flops(const CostConfig& cfg) {
    return step_flops_ffn(cfg, static_cast<double>(cfg.h_ff));
}

StepFlops step_flops_ffn(const CostConfig& cfg, double hff) {
    cfg.validate();
    StepFlops out;
    double L = static_cast<double>(cfg.L);
    double s = static_cast<double>(cfg.s);
    double h = static_cast<double>(cfg.h);

    auto push = [&](const std::string& name, double v) { out.terms.emplace_back(name, v); };

    switch (cfg.method) {
        case Method::FullRank:
            push("24Lsh^2", 24.0 * L * s * h * h);
            push("12Ls^2h", 12.0 * L * s * s * h);
            push("18Lshh_ff", 18.0 * L * s * h * hff);
            break;
        case Method::Lora:
        case Method::ReLora:
            push("40Lsh^2", 40.0 * L * s * h * h);
            push("24Ls^2h", 24.0 * L * s * s * h);
            push("30Lshh_ff", 30.0 * L * s * h * hff);
            break;
        case Method::SlTrain:
            push("24Lsh^2", 24.0 * L * s * h * h);
            push("12Ls^2h", 12.0 * L * s * s * h);
            push("18Lshh_ff", 18.0 * L * s * h * hff);
            push("24h^2r", 24.0 * h * h * rank_sum_d(cfg, 1, cfg.L));
            push("18hh_ffr", 18.0 * h * hff * rank_sum_d(cfg, 1, cfg.L));
            break;
        case Method::GaLore:
            push("24Lsh^2", 24.0 * L * s * h * h);
            push("12Ls^2h", 12.0 * L * s * s * h);
            push("18Lshh_ff", 18.0 * L * s * h * hff);
            push("16h^2r", 16.0 * h * h * rank_sum_d(cfg, 1, cfg.L));
            push("12hh_ffr", 12.0 * h * hff * rank_sum_d(cfg, 1, cfg.L));
            break;
        case Method::Cola:
            push("48shr", 48.0 * s * h * rank_sum_d(cfg, 1, cfg.L));
            push("12Ls^2h", 12.0 * L * s * s * h);
            push("18sr(h+h_ff)", 18.0 * s * (h + hff) * rank_sum_d(cfg, 1, cfg.L));
            break;
        case Method::CrNet: {
            push("first layer 24sh^2+12s^2h+18shh_ff",
                 24.0 * s * h * h + 12.0 * s * s * h + 18.0 * s * h * hff);
            if (cfg.L > 1) {
                double rs = rank_sum_d(cfg, 2, cfg.L);
                push("48shr", 48.0 * s * h * rs);
                push("12(L-1)s^2h", 12.0 * (L - 1.0) * s * s * h);
                push("18sr(h+h_ff)", 18.0 * s * (h + hff) * rs);
            }
            break;
        }
    }

    for (const auto& [name, v] : out.terms) out.total += v;
    out.lm_head_flops = 6.0 * s * h * static_cast<double>(cfg.vocab);
    return out;
}

ActivationCost activation_cost(const CostConfig& cfg) {
    return activation_cost_ffn(cfg, static_cast<double>(cfg.h_ff));
}

ActivationCost activation_cost_ffn(const CostConfig& cfg, double hff) {
    cfg.validate();
    ActivationCost out;
    double L = static_cast<double>(cfg.L);
    double s = static_cast<double>(cfg.s);
    double h = static_cast<double>(cfg.h);
    double a = static_cast<double>(cfg.heads);
    double b = static_cast<double>(cfg.checkpoint_count);

    auto mem = [&](const std::string& name, double v) { out.memory_terms.emplace_back(name, v); };
    auto rec = [&](const std::string& name, double v) { out.recompute_terms.emplace_back(name, v); };

    switch (cfg.gcp) {
        case GcpMode::None:
            // 10Lsh + 4Lsh_ff reduces to the quoted 20.67Lsh at h_ff = 8h/3.
            mem("10Lsh", 10.0 * L * s * h);
            mem("4Lsh_ff", 4.0 * L * s * hff);
            mem("2Ls^2a", 2.0 * L * s * s * a);
            break;
        case GcpMode::Vanilla:
            mem("Lsh", L * s * h);
            rec("24Lsh^2", 24.0 * L * s * h * h);
            rec("4Ls^2h", 4.0 * L * s * s * h);
            break;
        case GcpMode::ColaM: {
            double rs = rank_sum_d(cfg, 1, cfg.L);
            mem("2Lsh", 2.0 * L * s * h);
            mem("7sr", 7.0 * s * rs);
            rec("10shr", 10.0 * s * h * rs);
            rec("4sh_ffr", 4.0 * s * hff * rs);
            rec("4Ls^2h", 4.0 * L * s * s * h);
            break;
        }
        case GcpMode::CrNetRecompute: {
            if (cfg.method != Method::CrNet) {
                throw std::invalid_argument("activation_cost: crnet_recompute needs method crnet");
            }
            mem("(L+5b)sh", (L + 5.0 * b) * s * h);
            mem("2bsh_ff", 2.0 * b * s * hff);
            mem("7(L-1)sr", 7.0 * s * rank_sum_d(cfg, 2, cfg.L));
            // Count-based: the b stored layers are taken from the top of the stack,
            // so L-b layer slots rebuild their linear outputs (layer 1 counted at
            // the layer-2 rank, matching the table's uniform-rank form).
            double rs = cfg.L > cfg.checkpoint_count
                            ? rank_sum_d(cfg, 1, cfg.L - cfg.checkpoint_count)
                            : 0.0;
            rec("10shr", 10.0 * s * h * rs);
            rec("4sh_ffr", 4.0 * s * hff * rs);
            rec("4Ls^2h", 4.0 * L * s * s * h);
            break;
        }
    }

    for (const auto& [name, v] : out.memory_terms) out.memory_elements += v;
    for (const auto& [name, v] : out.recompute_terms) out.recompute_flops += v;
    return out;
}

GcpComparison gcp_flops_comparison(const CostConfig& crnet_cfg) {
    CostConfig cr = crnet_cfg;
    cr.method = Method::CrNet;
    cr.gcp = GcpMode::CrNetRecompute;
    cr.validate();
    double batch = static_cast<double>(cr.batch);
    double hff83 = 8.0 * static_cast<double>(cr.h) / 3.0;

    CostConfig full = cr;
    full.method = Method::FullRank;
    full.gcp = GcpMode::None;
    full.r_schedule.clear();

    CostConfig van = full;
    van.gcp = GcpMode::Vanilla;

    GcpComparison out;
    out.full_total = batch * step_flops(full).total;
    out.vanilla_total =
            batch * (step_flops_ffn(van, hff83).total + activation_cost_ffn(van, hff83).recompute_flops);
    out.crnet_total =
            batch * (step_flops_ffn(cr, hff83).total + activation_cost_ffn(cr, hff83).recompute_flops);
    out.full_over_vanilla = out.full_total / out.vanilla_total;
    out.crnet_over_vanilla = out.crnet_total / out.vanilla_total;
    return out;
}

PipelineReport pipeline_report(const PipelineConfig& pcfg, const CostConfig& cfg) {
    cfg.validate();
    if (pcfg.peak_flops <= 0.0 || pcfg.bandwidth_gbs <= 0.0 || pcfg.microbatch < 1 ||
            pcfg.pp_size < 1 || pcfg.bytes_per_act < 1 || pcfg.comm_passes < 1) {
        throw std::invalid_argument("pipeline config: all fields must be positive");
    }
    if (cfg.method != Method::FullRank && cfg.method != Method::CrNet) {
        throw std::invalid_argument("pipeline_report: method must be full_rank or crnet");
    }

    double s = static_cast<double>(cfg.s);
    double h = static_cast<double>(cfg.h);
    double hff = 8.0 * h / 3.0;
    double micro = static_cast<double>(pcfg.microbatch);

    PipelineReport out;
    out.method = method_name(cfg.method);
    out.step_flops_seq = step_flops_ffn(cfg, hff).total;

    CostConfig act = cfg;
    if (cfg.method == Method::FullRank) {
        act.gcp = GcpMode::Vanilla;
        // Layer-input checkpointing re-runs the forward pass: x4/3 on fwd+bwd.
        out.compute_flops = micro * out.step_flops_seq * (4.0 / 3.0);
        out.comm_dim_elements = s * h;
    } else {
        act.gcp = GcpMode::CrNetRecompute;
        out.recompute_flops_seq = activation_cost_ffn(act, hff).recompute_flops;
        out.compute_flops = micro * (out.step_flops_seq + out.recompute_flops_seq);
        // Boundary payload: next-layer input plus the seven residual streams.
        out.comm_dim_elements = 6.0 * s * h + 2.0 * s * hff;
    }
    out.compute_time_s = out.compute_flops / pcfg.peak_flops;

    out.comm_volume_bytes = micro * out.comm_dim_elements *
                            static_cast<double>(pcfg.bytes_per_act) *
                            static_cast<double>(pcfg.comm_passes) *
                            static_cast<double>(pcfg.pp_size - 1);
    out.comm_volume_gib = out.comm_volume_bytes / (1024.0 * 1024.0 * 1024.0);
    out.comm_volume_gb = out.comm_volume_bytes / 1e9;
    out.comm_time_s = out.comm_volume_gib / pcfg.bandwidth_gbs;
    out.comm_time_s_decimal = out.comm_volume_gb / pcfg.bandwidth_gbs;

    out.param_state_gib = optimizer_memory(cfg).gib;
    out.activation_gib = activation_cost_ffn(act, hff).memory_elements *
                         static_cast<double>(pcfg.bytes_per_act) /
                         (1024.0 * 1024.0 * 1024.0);
    return out;
}

namespace {

nlohmann::json terms_json(const std::vector<std::pair<std::string, double>>& terms) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, v] : terms) j[name] = v;
    return j;
}

}  // namespace

std::string cost_report_json(const CostConfig& cfg) {
    cfg.validate();
    ParamCount pc = param_count(cfg);
    OptimizerMemory om = optimizer_memory(cfg);
    StepFlops sf = step_flops(cfg);
    ActivationCost ac = activation_cost(cfg);

    nlohmann::json j;
    j["config"]["method"] = method_name(cfg.method);
    j["config"]["gcp"] = gcp_mode_name(cfg.gcp);
    j["config"]["L"] = cfg.L;
    j["config"]["h"] = cfg.h;
    j["config"]["h_ff"] = cfg.h_ff;
    j["config"]["s"] = cfg.s;
    j["config"]["heads"] = cfg.heads;
    j["config"]["vocab"] = cfg.vocab;
    j["config"]["batch"] = cfg.batch;
    j["config"]["bytes_per_value"] = cfg.bytes_per_value;
    j["config"]["r_schedule"] = cfg.r_schedule;
    j["config"]["checkpoint_count"] = cfg.checkpoint_count;
    j["config"]["sparsity"] = cfg.sparsity;

    j["params"]["core"] = pc.core;
    j["params"]["embeddings"] = pc.embeddings;
    j["params"]["total"] = pc.total;
    for (const auto& [name, v] : pc.terms) j["params"]["terms"][name] = v;

    j["optimizer_memory"]["bytes"] = om.bytes;
    j["optimizer_memory"]["core_bytes"] = om.core_bytes;
    j["optimizer_memory"]["gib"] = om.gib;
    j["optimizer_memory"]["gb"] = om.gb;

    j["step_flops"]["per_sequence"] = sf.total;
    j["step_flops"]["per_batch"] = sf.total * static_cast<double>(cfg.batch);
    j["step_flops"]["lm_head"] = sf.lm_head_flops;
    j["step_flops"]["terms"] = terms_json(sf.terms);

    j["activation"]["memory_elements"] = ac.memory_elements;
    j["activation"]["recompute_flops"] = ac.recompute_flops;
    j["activation"]["memory_terms"] = terms_json(ac.memory_terms);
    j["activation"]["recompute_terms"] = terms_json(ac.recompute_terms);

    if (cfg.method == Method::CrNet && cfg.L > 1) {
        GcpComparison gc = gcp_flops_comparison(cfg);
        j["gcp_comparison"]["full_total"] = gc.full_total;
        j["gcp_comparison"]["vanilla_total"] = gc.vanilla_total;
        j["gcp_comparison"]["crnet_total"] = gc.crnet_total;
        j["gcp_comparison"]["full_over_vanilla"] = gc.full_over_vanilla;
        j["gcp_comparison"]["crnet_over_vanilla"] = gc.crnet_over_vanilla;
    }
    return j.dump(2);
}

std::string cost_report_text(const CostConfig& cfg) {
    cfg.validate();
    ParamCount pc = param_count(cfg);
    OptimizerMemory om = optimizer_memory(cfg);
    StepFlops sf = step_flops(cfg);
    ActivationCost ac = activation_cost(cfg);

    char buf[256];
    std::string out;
    std::snprintf(buf, sizeof(buf), "method            %s\n", method_name(cfg.method));
    out += buf;
    std::snprintf(buf, sizeof(buf), "params core       %llu\n", pc.core);
    out += buf;
    std::snprintf(buf, sizeof(buf), "params total      %llu\n", pc.total);
    out += buf;
    std::snprintf(buf, sizeof(buf), "optimizer bytes   %llu (%.4f GiB)\n", om.bytes, om.gib);
    out += buf;
    std::snprintf(buf, sizeof(buf), "step flops/seq    %.6e\n", sf.total);
    out += buf;
    std::snprintf(buf, sizeof(buf), "step flops/batch  %.6e\n",
                  sf.total * static_cast<double>(cfg.batch));
    out += buf;
    std::snprintf(buf, sizeof(buf), "act mem elements  %.6e (%s)\n", ac.memory_elements,
                  gcp_mode_name(cfg.gcp));
    out += buf;
    std::snprintf(buf, sizeof(buf), "recompute flops   %.6e\n", ac.recompute_flops);
    out += buf;
    return out;
}

std::string pipeline_report_json(const PipelineConfig& pcfg, const CostConfig& cfg) {
    PipelineReport r = pipeline_report(pcfg, cfg);
    nlohmann::json j;
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
    j["pipeline"]["peak_flops"] = pcfg.peak_flops;
    j["pipeline"]["bandwidth_gbs"] = pcfg.bandwidth_gbs;
    j["pipeline"]["microbatch"] = pcfg.microbatch;
    j["pipeline"]["pp_size"] = pcfg.pp_size;
    return j.dump(2);
}

}  // namespace crnet
