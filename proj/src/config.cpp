#include "patchflow/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace patchflow {

std::string variant_name(Variant v, int k) {
    switch (v) {
    case Variant::none: return "none";
    case Variant::no_fsq: return "no_fsq";
    case Variant::no_ralm: return "no_ralm";
    case Variant::no_acoustic_input: return "no_acoustic_input";
    case Variant::skeleton_only: return "skeleton_only";
    case Variant::fsq_dim_override: return "fsq_dim_override:" + std::to_string(k);
    }
    return "none";
}

Variant parse_variant(const std::string& s, int* k) {
    if (k) *k = 0;
    if (s == "none" || s == "default" || s.empty()) return Variant::none;
    if (s == "no_fsq") return Variant::no_fsq;
    if (s == "no_ralm") return Variant::no_ralm;
    if (s == "no_acoustic_input") return Variant::no_acoustic_input;
    if (s == "skeleton_only") return Variant::skeleton_only;
    if (s.rfind("fsq_dim_override:", 0) == 0) {
        int v = std::stoi(s.substr(17));
        if (v <= 0) throw ConfigError("ablation_variant: fsq_dim_override needs a positive dim");
        if (k) *k = v;
        return Variant::fsq_dim_override;
    }
    // shorthand d<k>
    if (s.size() > 1 && s[0] == 'd') {
        bool digits = true;
        for (std::size_t i = 1; i < s.size(); ++i) digits = digits && std::isdigit(s[i]);
        if (digits) {
            if (k) *k = std::stoi(s.substr(1));
            return Variant::fsq_dim_override;
        }
    }
    throw ConfigError("ablation_variant: unknown variant '" + s + "'");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (model_dim < 1) fail("model_dim must be positive");
    if (tslm_layers < 1) fail("tslm_layers must be >= 1");
    if (ralm_layers < 1) fail("ralm_layers must be >= 1");
    if (locenc_layers < 1) fail("locenc_layers must be >= 1");
    if (locdit_layers < 1) fail("locdit_layers must be >= 1");
    if (fsq_dim < 1) fail("fsq_dim must be positive");
    if (fsq_dim > model_dim) fail("fsq_dim must be <= model_dim");
    if (fsq_levels < 3) fail("fsq_levels must be >= 3");
    if (fsq_levels % 2 == 0) fail("fsq_levels must be odd");
    if (patch_size < 1) fail("patch_size must be >= 1");
    if (latent_dim < 1) fail("latent_dim must be >= 1");
    if (vocab_size < 259) fail("vocab_size must cover 256 bytes plus BOS/EOS/PAD (>= 259)");
    if (cfg_mask_prob < 0.0 || cfg_mask_prob > 1.0) fail("cfg_mask_prob must be in [0,1]");
    if (stop_loss_weight <= 0.0) fail("stop_loss_weight must be positive");
    if (max_patches < 1) fail("max_patches must be >= 1");
    if (model_dim % heads() != 0) fail("model_dim must be divisible by n_heads");
    if ((model_dim / heads()) % 2 != 0) fail("n_heads: head dim must be even for rotary embedding");
    if (vae_channels < 1) fail("vae_channels must be >= 1");
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (peak_lr <= 0.0) fail("peak_lr must be positive");
    if (final_lr <= 0.0) fail("final_lr must be positive");
    if (final_lr > peak_lr) fail("final_lr must be <= peak_lr");
    if (warmup_steps < 0 || stable_steps < 0 || decay_steps < 0)
        fail("schedule step counts must be non-negative");
    if (batch_patches < 1) fail("batch_patches must be >= 1");
    if (variant == Variant::fsq_dim_override && fsq_dim_override < 1)
        fail("ablation_variant: fsq_dim_override needs a positive dim");
}

double lr_at_step(const TrainConfig& c, std::int64_t step) {
    if (step < c.warmup_steps)
        return c.peak_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
    const std::int64_t s1 = c.warmup_steps + c.stable_steps;
    if (step <= s1) return c.peak_lr;
    const std::int64_t s2 = s1 + c.decay_steps;
    if (step >= s2) return c.final_lr;
    const double u = static_cast<double>(step - s1) / static_cast<double>(c.decay_steps);
    return c.peak_lr * std::pow(c.final_lr / c.peak_lr, u);
}

int batch_patches_at(const TrainConfig& c, std::int64_t step) {
    return step >= c.warmup_steps + c.stable_steps ? 2 * c.batch_patches : c.batch_patches;
}

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

struct Setter {
    ModelConfig* m;
    TrainConfig* t;
    int line;

    [[noreturn]] void fail(const std::string& msg) const {
        throw ConfigError("line " + std::to_string(line) + ": " + msg);
    }
    std::int64_t as_int(const std::string& k, const std::string& v) const {
        try {
            std::size_t used = 0;
            long long r = std::stoll(v, &used);
            if (used != v.size()) throw std::invalid_argument("");
            return r;
        } catch (...) {
            fail(k + ": expected integer, got '" + v + "'");
        }
    }
    double as_real(const std::string& k, const std::string& v) const {
        try {
            std::size_t used = 0;
            double r = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument("");
            return r;
        } catch (...) {
            fail(k + ": expected number, got '" + v + "'");
        }
    }

    bool set(const std::string& k, const std::string& v) const {
        auto i = [&] { return static_cast<int>(as_int(k, v)); };
        if (k == "model_dim") m->model_dim = i();
        else if (k == "tslm_layers") m->tslm_layers = i();
        else if (k == "ralm_layers") m->ralm_layers = i();
        else if (k == "locenc_layers") m->locenc_layers = i();
        else if (k == "locdit_layers") m->locdit_layers = i();
        else if (k == "fsq_dim") m->fsq_dim = i();
        else if (k == "fsq_levels") m->fsq_levels = i();
        else if (k == "patch_size") m->patch_size = i();
        else if (k == "latent_dim") m->latent_dim = i();
        else if (k == "vocab_size") m->vocab_size = i();
        else if (k == "cfg_mask_prob") m->cfg_mask_prob = as_real(k, v);
        else if (k == "stop_loss_weight") m->stop_loss_weight = as_real(k, v);
        else if (k == "max_patches") m->max_patches = i();
        else if (k == "n_heads") m->n_heads = i();
        else if (k == "ffn_dim") m->ffn_dim = i();
        else if (k == "stop_hidden") m->stop_hidden = i();
        else if (k == "vae_channels") m->vae_channels = i();
        else if (k == "peak_lr") t->peak_lr = as_real(k, v);
        else if (k == "final_lr") t->final_lr = as_real(k, v);
        else if (k == "warmup_steps") t->warmup_steps = as_int(k, v);
        else if (k == "stable_steps") t->stable_steps = as_int(k, v);
        else if (k == "decay_steps") t->decay_steps = as_int(k, v);
        else if (k == "batch_patches") t->batch_patches = i();
        else if (k == "seed") t->seed = as_int(k, v);
        else if (k == "checkpoint_every") t->checkpoint_every = as_int(k, v);
        else if (k == "total_steps") t->total_steps = as_int(k, v);
        else if (k == "ablation_variant") {
            try {
                t->variant = parse_variant(v, &t->fsq_dim_override);
            } catch (const ConfigError& e) {
                fail(e.what());
            }
        } else
            return false;
        return true;
    }
};

} // namespace

void parse_config_text(const std::string& text, ModelConfig& m, TrainConfig& t) {
    std::istringstream in(text);
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        std::string s = raw;
        std::size_t hash = s.find('#');
        if (hash != std::string::npos) s = s.substr(0, hash);
        s = trim(s);
        if (s.empty()) continue;
        std::size_t eq = s.find('=');
        Setter st{&m, &t, line};
        if (eq == std::string::npos) st.fail("expected 'key = value', got '" + trim(raw) + "'");
        std::string k = trim(s.substr(0, eq));
        std::string v = trim(s.substr(eq + 1));
        if (k.empty()) st.fail("missing key before '='");
        if (v.empty()) st.fail(k + ": missing value");
        if (!st.set(k, v)) st.fail("unknown key '" + k + "'");
    }
    m.validate();
    t.validate();
}

void load_config(const std::string& path, ModelConfig& m, TrainConfig& t) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    parse_config_text(ss.str(), m, t);
}

std::string serialize_config(const ModelConfig& m, const TrainConfig& t) {
    std::ostringstream o;
    o.precision(17);
    o << "model_dim = " << m.model_dim << '\n'
      << "tslm_layers = " << m.tslm_layers << '\n'
      << "ralm_layers = " << m.ralm_layers << '\n'
      << "locenc_layers = " << m.locenc_layers << '\n'
      << "locdit_layers = " << m.locdit_layers << '\n'
      << "fsq_dim = " << m.fsq_dim << '\n'
      << "fsq_levels = " << m.fsq_levels << '\n'
      << "patch_size = " << m.patch_size << '\n'
      << "latent_dim = " << m.latent_dim << '\n'
      << "vocab_size = " << m.vocab_size << '\n'
      << "cfg_mask_prob = " << m.cfg_mask_prob << '\n'
      << "stop_loss_weight = " << m.stop_loss_weight << '\n'
      << "max_patches = " << m.max_patches << '\n'
      << "n_heads = " << m.n_heads << '\n'
      << "ffn_dim = " << m.ffn_dim << '\n'
      << "stop_hidden = " << m.stop_hidden << '\n'
      << "vae_channels = " << m.vae_channels << '\n'
      << "peak_lr = " << t.peak_lr << '\n'
      << "final_lr = " << t.final_lr << '\n'
      << "warmup_steps = " << t.warmup_steps << '\n'
      << "stable_steps = " << t.stable_steps << '\n'
      << "decay_steps = " << t.decay_steps << '\n'
      << "batch_patches = " << t.batch_patches << '\n'
      << "seed = " << t.seed << '\n'
      << "checkpoint_every = " << t.checkpoint_every << '\n'
      << "total_steps = " << t.total_steps << '\n'
      << "ablation_variant = " << variant_name(t.variant, t.fsq_dim_override) << '\n';
    return o.str();
}

} // namespace patchflow
