#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "crnet/cost_model.hpp"
#include "crnet/model.hpp"
#include "crnet/presets.hpp"

using namespace crnet;

namespace {

CostConfig small_cost(Method m) {
    CostConfig c;
    c.L = 2;
    c.h = 4;
    c.h_ff = 8;
    c.s = 3;
    c.heads = 2;
    c.vocab = 10;
    c.r_schedule = {2};
    c.method = m;
    if (m == Method::FullRank) c.r_schedule.clear();
    return c;
}

// Sum of trainable scalars of an instantiated model, split the way the
// accounting splits them. Betas are scaling scalars and excluded on purpose.
struct SpanTotals {
    unsigned long long core = 0;
    unsigned long long embeddings = 0;
};

SpanTotals instantiated_totals(const ModelConfig& cfg) {
    CrNetParams p = init_params(cfg);
    SpanTotals t;
    for (const ParamSpan& sp : param_spans(p)) {
        switch (sp.group) {
            case ParamGroup::FullWeight:
            case ParamGroup::LowRankA:
            case ParamGroup::LowRankB:
                t.core += sp.n;
                break;
            case ParamGroup::Embed:
            case ParamGroup::LmHead:
                t.embeddings += sp.n;
                break;
            case ParamGroup::Beta:
                break;
        }
    }
    return t;
}

}  // namespace

TEST_CASE("method and gcp names round trip") {
    for (Method m : {Method::FullRank, Method::Lora, Method::ReLora, Method::SlTrain,
                     Method::GaLore, Method::Cola, Method::CrNet})
        CHECK(method_from_name(method_name(m)) == m);
    for (GcpMode g : {GcpMode::None, GcpMode::Vanilla, GcpMode::ColaM, GcpMode::CrNetRecompute})
        CHECK(gcp_mode_from_name(gcp_mode_name(g)) == g);
    CHECK(std::string(method_name(Method::CrNet)) == "crnet");
    CHECK(std::string(gcp_mode_name(GcpMode::ColaM)) == "cola_m");
    CHECK_THROWS_AS(method_from_name("adamw"), std::invalid_argument);
    CHECK_THROWS_AS(gcp_mode_from_name("all"), std::invalid_argument);
}

TEST_CASE("cost config validation") {
    CostConfig c = small_cost(Method::CrNet);
    CHECK_NOTHROW(c.validate());

    CostConfig bad = c;
    bad.L = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.h = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.batch = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.bytes_per_value = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.sparsity = -0.1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.sparsity = 1.5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.checkpoint_count = 3;  // L = 2
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.checkpoint_count = 0;  // allowed: nothing stored beyond the inputs
    CHECK_NOTHROW(bad.validate());

    bad = c;
    bad.r_schedule.clear();
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.r_schedule = {2, 2};  // needs 1 or L-1 = 1 entries
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.r_schedule = {0};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.r_schedule = {4};  // must stay below min(h, h_ff) = 4
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    // a single-layer crnet model is dense and needs no schedule
    bad = c;
    bad.L = 1;
    bad.checkpoint_count = 1;
    bad.r_schedule.clear();
    CHECK_NOTHROW(bad.validate());
    // full-rank never needs one
    CHECK_NOTHROW(small_cost(Method::FullRank).validate());

    CHECK(c.uses_rank());
    CHECK_FALSE(small_cost(Method::FullRank).uses_rank());
}

TEST_CASE("rank schedule lookup") {
    CostConfig c = small_cost(Method::Lora);
    c.L = 4;
    c.r_schedule = {2, 3, 3};
    CHECK(c.rank_for_layer(1) == 2);  // layer 1 reuses the layer-2 rank
    CHECK(c.rank_for_layer(2) == 2);
    CHECK(c.rank_for_layer(3) == 3);
    CHECK(c.rank_for_layer(4) == 3);
    CHECK_THROWS_AS(c.rank_for_layer(0), std::out_of_range);
    CHECK_THROWS_AS(c.rank_for_layer(5), std::out_of_range);
    CHECK(c.uniform_rank() == 2);

    c.r_schedule = {3};
    for (std::size_t l = 1; l <= 4; ++l) CHECK(c.rank_for_layer(l) == 3);

    c.r_schedule.clear();
    CHECK_THROWS_AS(c.rank_for_layer(1), std::invalid_argument);
    CHECK_THROWS_AS(c.uniform_rank(), std::invalid_argument);
}

TEST_CASE("the 60m recipe lands on the published parameter count") {
    CostConfig cfg = cost_preset("llama2-60m");
    ParamCount pc = param_count(cfg);
    CHECK(pc.total == 43113472ull);
    CHECK(pc.embeddings == 2ull * 32000 * 512);
    CHECK(pc.core == 43113472ull - 32768000ull);

    unsigned long long sum = 0;
    for (const auto& [name, v] : pc.terms) sum += v;
    CHECK(sum == pc.core);
    REQUIRE(pc.terms.size() == 3);
    CHECK(pc.terms[0].first == "first layer 4h^2+3hh_ff");
    CHECK(pc.terms[0].second == 4ull * 512 * 512 + 3ull * 512 * 1376);
    // layers 2..8 at ranks 3x96 + 4x112 = 736
    CHECK(pc.terms[1].second == 11ull * 512 * 736);
    CHECK(pc.terms[2].second == 3ull * 1376 * 736);
}

TEST_CASE("closed-form counts match instantiated models") {
    struct Case {
        std::size_t L, h, h_ff, heads, vocab;
        std::vector<std::size_t> ranks;
        Arch arch;
    };
    const std::vector<Case> cases = {
        {1, 8, 12, 2, 11, {}, Arch::CrNet},
        {2, 8, 20, 4, 17, {3}, Arch::CrNet},
        {3, 12, 16, 3, 9, {5, 4}, Arch::CrNet},
        {5, 16, 24, 4, 33, {6, 6, 6, 6}, Arch::CrNet},
        {3, 8, 28, 2, 13, {}, Arch::FullRank},
        {4, 16, 20, 2, 21, {}, Arch::FullRank},
    };
    for (const Case& cs : cases) {
        ModelConfig mc;
        mc.L = cs.L;
        mc.h = cs.h;
        mc.h_ff = cs.h_ff;
        mc.heads = cs.heads;
        mc.vocab = cs.vocab;
        mc.s = 4;
        mc.r_schedule = cs.ranks;
        mc.arch = cs.arch;

        CostConfig cc;
        cc.L = cs.L;
        cc.h = cs.h;
        cc.h_ff = cs.h_ff;
        cc.heads = cs.heads;
        cc.vocab = cs.vocab;
        cc.s = 4;
        cc.r_schedule = cs.ranks;
        cc.method = cs.arch == Arch::CrNet ? Method::CrNet : Method::FullRank;
        cc.checkpoint_count = 1;

        ParamCount pc = param_count(cc);
        SpanTotals live = instantiated_totals(mc);
        INFO("L=", cs.L, " h=", cs.h, " arch=", cs.arch == Arch::CrNet ? "crnet" : "full");
        CHECK(pc.core == live.core);
        CHECK(pc.embeddings == live.embeddings);
        CHECK(pc.total == live.core + live.embeddings);
    }
}

TEST_CASE("betas are counted by the model but not by the accounting") {
    ModelConfig mc = model_preset("tiny");
    CrNetParams p = init_params(mc);
    unsigned long long all = 0, betas = 0;
    for (const ParamSpan& sp : param_spans(p)) {
        all += sp.n;
        if (sp.group == ParamGroup::Beta) betas += sp.n;
    }
    CHECK(betas == (mc.L - 1) * 7);

    CostConfig cc;
    cc.L = mc.L;
    cc.h = mc.h;
    cc.h_ff = mc.h_ff;
    cc.heads = mc.heads;
    cc.vocab = mc.vocab;
    cc.s = mc.s;
    cc.r_schedule = mc.r_schedule;
    CHECK(param_count(cc).total == all - betas);
}

TEST_CASE("optimizer memory is four states at the configured width") {
    CostConfig cfg = cost_preset("llama2-60m");
    OptimizerMemory om = optimizer_memory(cfg);
    CHECK(om.bytes == 4ull * 43113472 * 2);
    CHECK(om.core_bytes == 4ull * (43113472 - 32768000) * 2);
    CHECK(om.gib == doctest::Approx(0.3212).epsilon(1e-3));
    CHECK(om.gb == doctest::Approx(static_cast<double>(om.bytes) / 1e9).epsilon(1e-15));

    cfg.bytes_per_value = 4;
    CHECK(optimizer_memory(cfg).bytes == 2 * om.bytes);
}

TEST_CASE("per-step flops match hand-expanded forms") {
    // L=2 h=4 h_ff=8 s=3, rank 2 everywhere it applies
    CHECK(step_flops(small_cost(Method::FullRank)).total == 6624.0);
    CHECK(step_flops(small_cost(Method::CrNet)).total == 6192.0);
    CHECK(step_flops(small_cost(Method::Lora)).total == 11328.0);
    CHECK(step_flops(small_cost(Method::ReLora)).total == 11328.0);
    CHECK(step_flops(small_cost(Method::SlTrain)).total == 10464.0);
    CHECK(step_flops(small_cost(Method::GaLore)).total == 9184.0);
    CHECK(step_flops(small_cost(Method::Cola)).total == 5760.0);

    StepFlops sf = step_flops(small_cost(Method::CrNet));
    CHECK(sf.lm_head_flops == 6.0 * 3 * 4 * 10);
    double sum = 0.0;
    for (const auto& [name, v] : sf.terms) sum += v;
    CHECK(sum == sf.total);

    // fractional intermediate width: full rank at h_ff = 8h/3
    double hff83 = 8.0 * 4.0 / 3.0;
    StepFlops wide = step_flops_ffn(small_cost(Method::FullRank), hff83);
    CHECK(wide.total == doctest::Approx(2304.0 + 864.0 + 18.0 * 2 * 3 * 4 * hff83)
                            .epsilon(1e-15));
}

TEST_CASE("a single-layer crnet stack is exactly a dense layer") {
    CostConfig cr = small_cost(Method::CrNet);
    cr.L = 1;
    cr.checkpoint_count = 1;
    cr.r_schedule.clear();
    CostConfig fr = small_cost(Method::FullRank);
    fr.L = 1;
    fr.checkpoint_count = 1;
    CHECK(param_count(cr).total == param_count(fr).total);
    CHECK(step_flops(cr).total == step_flops(fr).total);
}

TEST_CASE("flops grow with every scale knob") {
    CostConfig base = small_cost(Method::CrNet);
    double t0 = step_flops(base).total;

    CostConfig c = base;
    c.L = 3;
    c.r_schedule = {2, 2};
    CHECK(step_flops(c).total > t0);
    c = base;
    c.s = 6;
    CHECK(step_flops(c).total > t0);
    c = base;
    c.h = 8;
    CHECK(step_flops(c).total > t0);
    c = base;
    c.r_schedule = {3};
    CHECK(step_flops(c).total > t0);
}

TEST_CASE("activation accounting matches hand-expanded forms") {
    CostConfig c = small_cost(Method::CrNet);
    c.L = 4;
    c.r_schedule = {2, 2, 2};
    c.checkpoint_count = 1;
    const double L = 4, s = 3, h = 4, hff = 8, heads = 2;

    c.gcp = GcpMode::None;
    ActivationCost none = activation_cost(c);
    CHECK(none.memory_elements == 10 * L * s * h + 4 * L * s * hff + 2 * L * s * s * heads);
    CHECK(none.recompute_flops == 0.0);

    c.gcp = GcpMode::Vanilla;
    ActivationCost van = activation_cost(c);
    CHECK(van.memory_elements == L * s * h);
    CHECK(van.recompute_flops == 24 * L * s * h * h + 4 * L * s * s * h);

    // rank sum over layers 1..4: layer 1 reuses the layer-2 rank -> 8
    c.gcp = GcpMode::ColaM;
    ActivationCost cola = activation_cost(c);
    CHECK(cola.memory_elements == 2 * L * s * h + 7 * s * 8);
    CHECK(cola.recompute_flops == 10 * s * h * 8 + 4 * s * hff * 8 + 4 * L * s * s * h);

    // one stored layer: rebuild rank sum covers layers 1..3 -> 6
    c.gcp = GcpMode::CrNetRecompute;
    ActivationCost cr = activation_cost(c);
    CHECK(cr.memory_elements == (L + 5) * s * h + 2 * s * hff + 7 * s * 6);
    CHECK(cr.recompute_flops == 10 * s * h * 6 + 4 * s * hff * 6 + 4 * L * s * s * h);

    double msum = 0.0, rsum = 0.0;
    for (const auto& [name, v] : cr.memory_terms) msum += v;
    for (const auto& [name, v] : cr.recompute_terms) rsum += v;
    CHECK(msum == cr.memory_elements);
    CHECK(rsum == cr.recompute_flops);

    CostConfig wrong = c;
    wrong.method = Method::Cola;
    CHECK_THROWS_AS(activation_cost(wrong), std::invalid_argument);
}

TEST_CASE("storing nothing makes crnet recompute collapse to the cola_m form") {
    CostConfig cr = small_cost(Method::CrNet);
    cr.L = 5;
    cr.r_schedule = {2};  // uniform, so layer 1's stand-in rank matches
    cr.checkpoint_count = 0;
    cr.gcp = GcpMode::CrNetRecompute;

    CostConfig cam = cr;
    cam.method = Method::Cola;
    cam.gcp = GcpMode::ColaM;

    CHECK(activation_cost(cr).recompute_flops == activation_cost(cam).recompute_flops);

    // and storing everything leaves only the attention-score replay
    cr.checkpoint_count = cr.L;
    CHECK(activation_cost(cr).recompute_flops == 4.0 * 5 * 3 * 3 * 4);
}

TEST_CASE("checkpointed-training flop ratios at the 7b scale") {
    CostConfig cfg = cost_preset("llama2-7b");
    cfg.batch = 16;
    GcpComparison gc = gcp_flops_comparison(cfg);
    // pinned values; derived from the closed forms at r = 896, 4 stored layers
    CHECK(gc.full_over_vanilla == doctest::Approx(0.753866).epsilon(1e-4));
    CHECK(gc.crnet_over_vanilla == doctest::Approx(0.323340).epsilon(1e-4));
    CHECK(gc.full_total < gc.vanilla_total);
    CHECK(gc.crnet_total < gc.full_total);

    // the denominators reproduce from the public pieces
    double hff83 = 8.0 * 4096.0 / 3.0;
    CostConfig van = cfg;
    van.method = Method::FullRank;
    van.gcp = GcpMode::Vanilla;
    van.r_schedule.clear();
    double want_van =
        16.0 * (step_flops_ffn(van, hff83).total + activation_cost_ffn(van, hff83).recompute_flops);
    CHECK(gc.vanilla_total == doctest::Approx(want_van).epsilon(1e-12));

    CostConfig full = van;
    full.gcp = GcpMode::None;
    CHECK(gc.full_total == doctest::Approx(16.0 * step_flops(full).total).epsilon(1e-12));
}

TEST_CASE("pipeline accounting reproduces the 13b reference rows") {
    CostConfig cfg = cost_preset("llama2-13b");
    cfg.s = 4096;
    cfg.r_schedule = {1280};  // h / 4
    cfg.checkpoint_count = 5;  // L / 8
    PipelineConfig pp;  // A100 / PCIe4 defaults: 312 TF, 64 GB/s, micro 16, 2 stages

    const double s = 4096, h = 5120, hff = 8.0 * h / 3.0, L = 40;

    SUBCASE("full rank with layer-input checkpointing") {
        CostConfig full = cfg;
        full.method = Method::FullRank;
        full.r_schedule.clear();
        PipelineReport r = pipeline_report(pp, full);
        CHECK(r.method == "full_rank");

        double step = 24 * L * s * h * h + 12 * L * s * s * h + 18 * L * s * h * hff;
        CHECK(r.step_flops_seq == doctest::Approx(step).epsilon(1e-12));
        CHECK(r.compute_flops == doctest::Approx(16.0 * step * 4.0 / 3.0).epsilon(1e-12));
        CHECK(r.compute_flops == doctest::Approx(7.4767e15).epsilon(2e-4));
        CHECK(r.compute_time_s == doctest::Approx(r.compute_flops / 312e12).epsilon(1e-15));

        // 16 microbatches x (s*h) x 2 bytes x 3 passes x 1 boundary
        CHECK(r.comm_volume_gib == 1.875);
        CHECK(r.comm_time_s == 1.875 / 64.0);
        CHECK(r.comm_volume_gb == doctest::Approx(2013265920.0 / 1e9).epsilon(1e-15));

        // layer-input checkpointing stores one s*h tensor per layer
        CHECK(r.activation_gib == doctest::Approx(L * s * h * 2.0 / 1073741824.0).epsilon(1e-12));
    }

    SUBCASE("crnet with five stored layers") {
        PipelineReport r = pipeline_report(pp, cfg);
        CHECK(r.method == "crnet");

        double step = (24 * s * h * h + 12 * s * s * h + 18 * s * h * hff) +
                      48 * s * h * (39.0 * 1280) + 12 * 39 * s * s * h +
                      18 * s * (h + hff) * (39.0 * 1280);
        double rec = 10 * s * h * (35.0 * 1280) + 4 * s * hff * (35.0 * 1280) +
                     4 * L * s * s * h;
        CHECK(r.step_flops_seq == doctest::Approx(step).epsilon(1e-12));
        CHECK(r.recompute_flops_seq == doctest::Approx(rec).epsilon(1e-12));
        CHECK(r.compute_flops == doctest::Approx(16.0 * (step + rec)).epsilon(1e-12));
        CHECK(r.compute_flops == doctest::Approx(3.2235e15).epsilon(2e-4));

        // the boundary ships X plus all seven streams: 6sh + 2s h_ff = 34/3 sh
        CHECK(r.comm_dim_elements == doctest::Approx(s * h * 34.0 / 3.0).epsilon(1e-15));
        CHECK(r.comm_volume_gib == doctest::Approx(1.875 * 34.0 / 3.0).epsilon(1e-15));
        CHECK(r.comm_time_s == doctest::Approx(21.25 / 64.0).epsilon(1e-15));
    }
}

TEST_CASE("pipeline communication at the 70b scale crosses seven boundaries") {
    CostConfig cfg;
    cfg.L = 80;
    cfg.h = 8192;
    cfg.h_ff = 21845;
    cfg.s = 4096;
    cfg.heads = 64;
    cfg.vocab = 32000;
    cfg.r_schedule = {2048};  // h / 4
    cfg.checkpoint_count = 10;
    PipelineConfig pp;
    pp.pp_size = 8;

    CostConfig full = cfg;
    full.method = Method::FullRank;
    full.r_schedule.clear();
    CHECK(pipeline_report(pp, full).comm_volume_gib == 21.0);
    CHECK(pipeline_report(pp, full).comm_time_s == 21.0 / 64.0);

    cfg.method = Method::CrNet;
    PipelineReport r = pipeline_report(pp, cfg);
    CHECK(r.comm_volume_gib == doctest::Approx(238.0).epsilon(1e-12));
    CHECK(r.comm_time_s == doctest::Approx(238.0 / 64.0).epsilon(1e-12));

    // a single stage never communicates
    pp.pp_size = 1;
    CHECK(pipeline_report(pp, full).comm_volume_gib == 0.0);
    CHECK(pipeline_report(pp, full).comm_time_s == 0.0);
}

TEST_CASE("pipeline report validates its inputs") {
    CostConfig cfg = small_cost(Method::CrNet);
    PipelineConfig pp;
    pp.peak_flops = 0.0;
    CHECK_THROWS_AS(pipeline_report(pp, cfg), std::invalid_argument);
    pp = PipelineConfig{};
    pp.microbatch = 0;
    CHECK_THROWS_AS(pipeline_report(pp, cfg), std::invalid_argument);
    pp = PipelineConfig{};
    CHECK_THROWS_AS(pipeline_report(pp, small_cost(Method::Lora)), std::invalid_argument);
}

TEST_CASE("cost report json carries every section") {
    CostConfig cfg = cost_preset("llama2-60m");
    cfg.gcp = GcpMode::CrNetRecompute;
    nlohmann::json j = nlohmann::json::parse(cost_report_json(cfg));
    CHECK(j["config"]["method"] == "crnet");
    CHECK(j["config"]["gcp"] == "crnet_recompute");
    CHECK(j["params"]["total"].get<unsigned long long>() == 43113472ull);
    CHECK(j["optimizer_memory"]["bytes"].get<unsigned long long>() ==
          4ull * 43113472 * 2);
    CHECK(j["step_flops"]["per_sequence"].get<double>() == step_flops(cfg).total);
    CHECK(j["step_flops"]["per_batch"].get<double>() == step_flops(cfg).total);  // batch = 1
    CHECK(j["activation"]["recompute_flops"].get<double>() ==
          activation_cost(cfg).recompute_flops);
    // crnet reports always embed the checkpointing comparison
    CHECK(j.contains("gcp_comparison"));
    CHECK(j["gcp_comparison"]["crnet_over_vanilla"].get<double>() > 0.0);

    CostConfig fr = small_cost(Method::FullRank);
    nlohmann::json jf = nlohmann::json::parse(cost_report_json(fr));
    CHECK_FALSE(jf.contains("gcp_comparison"));

    std::string text = cost_report_text(cfg);
    CHECK(text.find("params total      43113472") != std::string::npos);

    nlohmann::json jp = nlohmann::json::parse(
        pipeline_report_json(PipelineConfig{}, cost_preset("llama2-13b")));
    CHECK(jp["method"] == "crnet");
    CHECK(jp["pipeline"]["microbatch"].get<int>() == 16);
    CHECK(jp["compute_flops"].get<double>() > 0.0);
}
