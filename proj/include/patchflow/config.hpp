#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace patchflow {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Variant {
    none,
    no_fsq,
    no_ralm,
    no_acoustic_input,
    skeleton_only,
    fsq_dim_override,
};

std::string variant_name(Variant v, int fsq_dim_override = 0);
// accepts "none", "no_fsq", ..., "fsq_dim_override:<k>"
Variant parse_variant(const std::string& s, int* fsq_dim_override);

struct ModelConfig {
    int model_dim = 128;
    int tslm_layers = 4;
    int ralm_layers = 2;
    int locenc_layers = 2;
    int locdit_layers = 2;
    int fsq_dim = 32;
    int fsq_levels = 9;
    int patch_size = 2;
    int latent_dim = 16;
    int vocab_size = 259;
    double cfg_mask_prob = 0.1;
    double stop_loss_weight = 1.0;
    int max_patches = 256;
    // architecture knobs with derived defaults (0 = derive)
    int n_heads = 0;   // model_dim / 32, at least 1
    int ffn_dim = 0;   // 4 * model_dim
    int stop_hidden = 0; // model_dim
    int vae_channels = 32;

    int heads() const { return n_heads ? n_heads : (model_dim >= 32 ? model_dim / 32 : 1); }
    int ffn() const { return ffn_dim ? ffn_dim : 4 * model_dim; }
    int stop_mlp_dim() const { return stop_hidden ? stop_hidden : model_dim; }
    int fsq_L() const { return (fsq_levels - 1) / 2; }

    void validate() const; // throws ConfigError naming the offending key
};

struct TrainConfig {
    double peak_lr = 1e-4;
    double final_lr = 5e-6;
    std::int64_t warmup_steps = 1000;
    std::int64_t stable_steps = 3000;
    std::int64_t decay_steps = 1000;
    int batch_patches = 64;
    std::int64_t seed = 0;
    Variant variant = Variant::none;
    int fsq_dim_override = 0;
    std::int64_t checkpoint_every = 1000;
    std::int64_t total_steps = 0; // 0 = warmup+stable+decay

    std::int64_t planned_steps() const {
        return total_steps ? total_steps : warmup_steps + stable_steps + decay_steps;
    }
    void validate() const;
};

struct SyntheticCorpusSpec {
    int num_utterances = 32;
    int text_min = 4;
    int text_max = 12;
    std::int64_t mapping_seed = 7;
    enum Pattern { sinusoid_bank, random_anchor_walk } pattern = sinusoid_bank;
};

// WSD schedule: linear 0->peak over warmup, flat peak during stable,
// log-linear peak->final over decay (endpoint exact), final thereafter.
double lr_at_step(const TrainConfig& c, std::int64_t step);
// batch size doubles when the decay phase begins
int batch_patches_at(const TrainConfig& c, std::int64_t step);

// flat "key = value" text, '#' comments
void parse_config_text(const std::string& text, ModelConfig& m, TrainConfig& t);
void load_config(const std::string& path, ModelConfig& m, TrainConfig& t);
std::string serialize_config(const ModelConfig& m, const TrainConfig& t);

} // namespace patchflow
