#pragma once
// model reload + teacher-forced / autoregressive evaluation + the ablation
// sweep and hidden-state export behind the eval/ablate/dump-hiddens commands
#include <cstdint>
#include <string>
#include <vector>

#include "patchflow/corpus.hpp"
#include "patchflow/train.hpp"

namespace patchflow {

// rebuilds a Trainer from a checkpoint file (or the newest one in a run dir)
struct LoadedModel {
    Trainer tr;
    std::uint64_t step = 0;
    std::string checkpoint_path;
};
void load_model(const std::string& path_or_dir, LoadedModel& lm);

struct EvalSettings {
    std::uint64_t seed = 0;
    int steps = 32;
    float cfg_scale = 1.0f;
    bool generate = true;
};

struct EvalRow {
    std::string id;
    double flow_loss = 0, stop_accuracy = 0, gen_mse = 0;
    bool has_gen = false;
    int patch_count = 0, target_patches = 0;
    bool decomposition_ok = true;
};

struct EvalReport {
    std::string variant;
    EvalSettings settings;
    std::vector<EvalRow> rows;
    // aggregates: plain means over rows (gen_mse over rows that generated)
    double flow_loss = 0, stop_accuracy = 0, gen_mse = 0;
    int gen_rows = 0;
    bool decomposition_ok = true;

    std::string json() const;
    std::string table() const;
};

EvalReport eval_corpus(const Backbone& bb, const LocDit& dit, const Corpus& corpus,
                       const EvalSettings& st);
void write_eval_report(const EvalReport& r, const std::string& path);

struct AblateRow {
    std::string variant;
    std::string codebook; // "10^k" lattice size, "inf" without the lattice
    std::string status;   // trained | cached | failed
    double flow_loss = 0, stop_accuracy = 0, gen_mse = 0;
    std::string error;
    std::string run_dir;
};

struct AblateResult {
    std::vector<AblateRow> rows;
    std::string table_text;
};

// trains + evaluates each variant under the same seed/budget; failures mark
// their row; repeat variants are served from cache by config hash
AblateResult run_ablate(const ModelConfig& cfg, const TrainConfig& base,
                        const Corpus& train_corpus, const Corpus& held_out,
                        const std::vector<std::string>& variants,
                        const std::string& out_dir, const EvalSettings& eval_st);

// the standard sweep: default, d4/d16/d32, no_fsq, no_ralm,
// no_acoustic_input, skeleton_only
std::vector<std::string> default_ablation_variants();

// per-utterance skeleton/residual hidden export for offline projection
void dump_hiddens(const Backbone& bb, const Corpus& corpus, const std::string& out_dir);

} // namespace patchflow
