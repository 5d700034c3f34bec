#pragma once
// shared scaffolding for unit + acceptance tests: tiny configs, batch
// assembly mirrors, and a full-prefix reference generator used to pin the
// incremental cache against the batched tape path.
#include <cstring>
#include <string>
#include <vector>

#include "patchflow/backbone.hpp"
#include "patchflow/corpus.hpp"
#include "patchflow/infer.hpp"
#include "patchflow/locdit.hpp"
#include "patchflow/train.hpp"

namespace pftest {

using namespace patchflow;

inline ModelConfig tiny_config() {
    ModelConfig c;
    c.model_dim = 32;
    c.tslm_layers = 2;
    c.ralm_layers = 1;
    c.locenc_layers = 1;
    c.locdit_layers = 1;
    c.fsq_dim = 8;
    c.patch_size = 2;
    c.latent_dim = 8;
    c.max_patches = 64;
    c.vae_channels = 4;
    return c;
}

inline TrainConfig tiny_train() {
    TrainConfig t;
    t.warmup_steps = 2;
    t.stable_steps = 4;
    t.decay_steps = 2;
    t.batch_patches = 8;
    t.checkpoint_every = 4;
    t.seed = 1;
    return t;
}

// single-utterance teacher-forcing batch (no CFG mask)
inline SeqBatch batch_for(const ModelConfig& cfg, const std::string& text,
                          const std::vector<float>& latents, int frames) {
    SeqBatch b;
    b.P = cfg.patch_size;
    b.D = cfg.latent_dim;
    const int M = frames / cfg.patch_size;
    b.tokens.push_back(tokenize_bytes(text));
    b.patch_counts.push_back(M);
    b.cfg_mask.push_back(0);
    b.latents = latents;
    b.latents.resize(static_cast<std::size_t>(M) * cfg.patch_size * cfg.latent_dim);
    b.frame_mask.assign(static_cast<std::size_t>(M) * cfg.patch_size, 1.f);
    b.stop_labels.assign(M, 0.f);
    if (M > 0) b.stop_labels[M - 1] = 1.f;
    return b;
}

// Reference generator: rebuilds the whole prefix through the batched tape
// path for every emitted patch. Bit-for-bit target for GenerationSession.
inline GenResult reference_generate(const Backbone& bb, const LocDit& dit,
                                    const std::string& text, const GenSettings& st) {
    const ModelConfig& cfg = bb.cfg;
    const int P = cfg.patch_size, D = cfg.latent_dim, dim = cfg.model_dim;
    const int max_p = st.max_patches < 0 ? cfg.max_patches : st.max_patches;
    GenResult res;
    std::vector<float> gen; // [k*P, D] accepted patches
    for (int k = 0; k < max_p; ++k) {
        // slot k's conditioning must not depend on patch k: zero placeholder
        std::vector<float> lat = gen;
        lat.resize(static_cast<std::size_t>(k + 1) * P * D, 0.f);
        SeqBatch b = batch_for(cfg, text, lat, (k + 1) * P);
        Tape t;
        BackboneOut out = bb.forward(t, b);
        const float* cond = &out.cond->v[static_cast<std::size_t>(k) * dim];
        const bool stop_fires = out.stop_logits->v[k] > 0.f;
        std::vector<float> z(static_cast<std::size_t>(P) * D);
        Rng rng = Rng::for_stream(st.seed, static_cast<std::uint64_t>(k));
        std::vector<float> prev(static_cast<std::size_t>(P) * D);
        if (k == 0)
            std::memcpy(prev.data(), dit.start_patch->w.data(), prev.size() * 4);
        else
            std::memcpy(prev.data(), &gen[static_cast<std::size_t>(k - 1) * P * D],
                        prev.size() * 4);
        sample_patch(dit, cond, prev.data(), st.steps, st.cfg_scale, rng, z.data());
        gen.insert(gen.end(), z.begin(), z.end());
        res.conds.insert(res.conds.end(), cond, cond + dim);
        res.patches = k + 1;
        if (stop_fires) {
            res.reason = StopReason::stop_head;
            break;
        }
        if (k + 1 >= max_p) {
            res.reason = StopReason::max_length;
            break;
        }
    }
    res.latents = std::move(gen);
    return res;
}

// push the stop head hard toward "continue" so generation runs to the cap
inline void disable_stop(Backbone& bb) {
    bb.st3_b->w[0] = -30.f;
    bb.st3_b->refresh();
}

} // namespace pftest
