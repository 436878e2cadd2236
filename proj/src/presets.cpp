#include "crnet/presets.hpp"

#include <stdexcept>

namespace crnet {

namespace {

struct PresetDims {
    std::size_t L, h, h_ff, heads, vocab, s;
    // Rank blocks as (count, rank) pairs covering layers 2..L in order.
    std::vector<std::pair<std::size_t, std::size_t>> rank_blocks;
    bool instantiable;
};

PresetDims preset_dims(const std::string& name) {
    if (name == "tiny") return {3, 8, 16, 1, 16, 5, {{2, 2}}, true};
    if (name == "toy") return {4, 64, 172, 4, 256, 64, {{3, 16}}, true};
    if (name == "llama2-60m")
        return {8, 512, 1376, 8, 32000, 256, {{3, 96}, {4, 112}}, true};
    if (name == "llama2-130m")
        return {12, 768, 2048, 12, 32000, 256, {{3, 192}, {8, 224}}, true};
    if (name == "llama2-350m")
        return {24, 1024, 2736, 16, 32000, 256, {{15, 224}, {8, 256}}, false};
    if (name == "llama2-1b")
        return {24, 2048, 5461, 32, 32000, 256, {{23, 448}}, false};
    if (name == "llama2-7b")
        return {32, 4096, 11008, 32, 32000, 256, {{31, 896}}, false};
    if (name == "llama2-13b")
        return {40, 5120, 13653, 40, 32000, 256, {{39, 1260}}, false};
    throw std::invalid_argument("unknown preset: " + name);
}

std::vector<std::size_t> expand_ranks(const PresetDims& d) {
    std::vector<std::size_t> out;
    for (const auto& [count, rank] : d.rank_blocks) {
        out.insert(out.end(), count, rank);
    }
    if (out.size() != d.L - 1) throw std::logic_error("preset rank blocks do not cover layers");
    return out;
}

}  // namespace

std::vector<std::string> preset_names() {
    return {"tiny",        "toy",        "llama2-60m", "llama2-130m",
            "llama2-350m", "llama2-1b",  "llama2-7b",  "llama2-13b"};
}

bool preset_instantiable(const std::string& name) { return preset_dims(name).instantiable; }

ModelConfig model_preset(const std::string& name) {
    PresetDims d = preset_dims(name);
    ModelConfig cfg;
    cfg.L = d.L;
    cfg.h = d.h;
    cfg.h_ff = d.h_ff;
    cfg.heads = d.heads;
    cfg.vocab = d.vocab;
    cfg.s = d.s;
    cfg.r_schedule = expand_ranks(d);
    cfg.validate();
    return cfg;
}

CostConfig cost_preset(const std::string& name) {
    PresetDims d = preset_dims(name);
    CostConfig cfg;
    cfg.L = d.L;
    cfg.h = d.h;
    cfg.h_ff = d.h_ff;
    cfg.heads = d.heads;
    cfg.vocab = d.vocab;
    cfg.s = d.s;
    cfg.r_schedule = expand_ranks(d);
    // One stored-activation layer per eight, at least one.
    cfg.checkpoint_count = d.L / 8 > 0 ? d.L / 8 : 1;
    cfg.validate();
    return cfg;
}

}  // namespace crnet
