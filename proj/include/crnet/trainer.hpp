#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "crnet/model.hpp"

namespace crnet {

struct TrainConfig {
    std::size_t total_steps = 300;
    std::size_t batch_size = 8;
    double peak_lr = 3e-3;
    double final_lr_fraction = 0.1;
    double warmup_fraction = 0.1;
    double lowrank_lr_scale = 0.25;
    double grad_clip_norm = 1.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t eval_every = 50;
    std::size_t eval_windows = 8;
    std::uint64_t seed = 1;
    bool recompute = false;
    std::size_t recompute_k = 0;  // 0 picks max(1, L/8) stored layers
    std::string corpus_path;
    std::string out_dir;
    std::string resume_from;  // checkpoint dir or file; empty = fresh start

    void validate() const;
    std::size_t warmup_steps() const;
};

// Linear ramp 0 -> peak over the warmup steps, then cosine decay to
// final_lr_fraction x peak at total_steps. Valid for step in [0, total].
double lr_at(std::size_t step, const TrainConfig& tc);
// Low-rank tensors (A, B, beta) train at a reduced rate.
double effective_lr(ParamGroup g, double lr, const TrainConfig& tc);

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t t = 0;
    // Moment buffers aligned with param_spans order.
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

AdamState init_adam(CrNetParams& params, const TrainConfig& tc);

// One bias-corrected update in place. Returns false and leaves parameters and
// state untouched when any gradient entry is not finite.
bool adam_step(CrNetParams& params, Gradients& grads, AdamState& st, double lr,
               const TrainConfig& tc);

double global_grad_norm(Gradients& grads);
// Scales gradients so the global norm is at most max_norm; returns the
// pre-clip norm.
double clip_gradients(Gradients& grads, double max_norm);

// Byte-level corpus with a 90/10 head/tail split.
struct Corpus {
    std::vector<std::uint8_t> bytes;
    std::size_t train_size = 0;
};

Corpus ingest_corpus(const std::string& path, std::size_t s);

struct TrainResult {
    double initial_loss = 0.0;  // first logged step, before any update took hold
    double final_loss = 0.0;    // mean over the last (up to) 10 steps
    std::size_t steps_done = 0;
    bool aborted = false;
    std::string checkpoint_path;
    std::string metrics_path;
    std::vector<double> losses;  // per completed step
};

TrainResult train(const ModelConfig& cfg, const TrainConfig& tc);

// Checkpoint file "crnet.ckpt": magic CRCK, u32 version, config JSON, every
// parameter span in canonical order as a matrix block, Adam m then v spans,
// and the u64 step counter. Load reproduces parameters bitwise.
std::string save_checkpoint(const CrNetParams& params, const AdamState& st,
                            std::uint64_t step, const std::string& dir);

struct Checkpoint {
    ModelConfig cfg;
    CrNetParams params;
    AdamState adam;
    std::uint64_t step = 0;
};

// Accepts the checkpoint directory or the file path itself.
Checkpoint load_checkpoint(const std::string& path);

double eval_loss(const CrNetParams& params, const Corpus& corpus, const TrainConfig& tc);

}  // namespace crnet
