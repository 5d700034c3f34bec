#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "patchflow/backbone.hpp"
#include "patchflow/config.hpp"
#include "patchflow/corpus.hpp"
#include "patchflow/locdit.hpp"
#include "patchflow/vae.hpp"

namespace patchflow {

struct StepMetrics {
    std::int64_t step = 0;
    double lr = 0;
    float flow_loss = 0, stop_loss = 0, total = 0;
    std::map<std::string, double> grad_norms; // per module namespace
    double seconds = 0;

    std::string json_line() const; // seconds last; rest is determinism-compared
};

// LM-stack training state: backbone + flow decoder sharing one ParamStore.
struct Trainer {
    ModelConfig cfg;
    TrainConfig tcfg;
    ParamStore store;
    Backbone bb;
    LocDit dit;
    AdamW opt;
    std::int64_t step = 0;

    void init(); // fresh params, deterministic in tcfg.seed

    // batch content depends only on (seed, step): utterance picks, CFG masks
    SeqBatch make_batch(const Corpus& c, std::int64_t step) const;

    // forward + backward + optimizer update; throws on non-finite loss with a
    // per-module grad-norm dump
    StepMetrics train_step(const SeqBatch& b);

    std::string config_text() const { return serialize_config(cfg, tcfg); }
};

// full run: WSD phases, periodic checkpoints, metrics JSONL. resume=true
// continues from the newest checkpoint in out_dir (config must match).
void run_training(const ModelConfig& cfg, const TrainConfig& tcfg, const Corpus& corpus,
                  const std::string& out_dir, bool resume);

struct VaeStepMetrics {
    std::int64_t step = 0;
    double lr = 0;
    float mel = 0, kl = 0, total = 0;
    double seconds = 0;
    std::string json_line() const;
};

struct VaeTrainer {
    ModelConfig cfg;
    TrainConfig tcfg;
    ParamStore store;
    AudioVae vae;
    AdamW opt;
    std::int64_t step = 0;

    void init();
    VaeStepMetrics train_step(const std::vector<std::vector<float>>& clips);
};

void train_vae(const ModelConfig& cfg, const TrainConfig& tcfg,
               const std::vector<std::vector<float>>& clips, const std::string& out_dir,
               bool resume);

} // namespace patchflow
