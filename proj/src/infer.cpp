#include "patchflow/infer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

#include "patchflow/corpus.hpp"
#include "patchflow/wav.hpp"

namespace patchflow {

const char* stop_reason_name(StopReason r) {
    return r == StopReason::stop_head ? "stop_head" : "max_length";
}

GenerationSession::GenerationSession(const Backbone& bb, const LocDit& dit,
                                     const GenSettings& st)
    : bb_(bb), dit_(dit), st_(st) {
    const int d = bb.cfg.model_dim;
    tslm_raw_ = {&bb.tslm_stack, d};
    tslm_st_ = tslm_raw_.new_state();
    if (bb.has_ralm()) {
        ralm_raw_ = {&bb.ralm_stack, d};
        ralm_st_ = ralm_raw_.new_state();
    }
    e_prev_.resize(d);
    prev_patch_.assign(dit.start_patch->w.begin(), dit.start_patch->w.end());
}

void GenerationSession::set_text(const std::string& text) { text_ = text; }

void GenerationSession::set_prompt(const std::vector<float>& latents, int frames,
                                   const std::string& prompt_text) {
    if (latents.empty() && prompt_text.empty()) return;
    const int P = bb_.cfg.patch_size;
    if (frames < P)
        throw std::runtime_error("prompt shorter than one patch: " +
                                 std::to_string(frames) + " frames, patch needs " +
                                 std::to_string(P));
    prompt_patches_ = frames / P; // trailing partial patch dropped
    prompt_latents_.assign(latents.begin(),
                           latents.begin() + static_cast<std::int64_t>(prompt_patches_) *
                                                 P * bb_.cfg.latent_dim);
    prompt_text_ = prompt_text;
}

void GenerationSession::tslm_audio_step(const float* e_prev, float* h_audio) {
    tslm_raw_.step(e_prev, pos_, tslm_st_, h_audio);
}

void GenerationSession::prefill() {
    const int d = bb_.cfg.model_dim, P = bb_.cfg.patch_size, D = bb_.cfg.latent_dim;
    std::vector<int> ids;
    ids.push_back(TOK_BOS);
    for (int x : tokenize_bytes(prompt_text_)) ids.push_back(x);
    for (int x : tokenize_bytes(text_)) ids.push_back(x);

    std::vector<float> h(d);
    std::vector<std::vector<float>> text_h;
    text_h.reserve(ids.size());
    for (int id : ids) {
        const float* emb = &bb_.tok_emb->w[static_cast<std::int64_t>(id) * d];
        tslm_raw_.step(emb, pos_, tslm_st_, h.data());
        text_h.push_back(h);
        ++pos_;
    }
    if (bb_.has_ralm()) {
        int rpos = 0;
        for (const auto& th : text_h) ralm_raw_.step(th.data(), rpos++, ralm_st_, h.data());
    }

    // teacher-force the prompt's own patches through the caches (stop head
    // is not consulted here: the prompt is not supposed to end the utterance)
    std::vector<float> lattice(bb_.cfg.fsq_dim), up(d), fused(d);
    for (int j = 0; j < prompt_patches_; ++j) {
        const float* e_in = first_slot_ ? bb_.audio_bos->w.data() : e_prev_.data();
        tslm_audio_step(e_in, h.data());
        bb_.fsq.raw_forward(h.data(), d, lattice.data(), up.data());
        if (bb_.has_ralm()) {
            const float* ep = bb_.variant == Variant::no_acoustic_input
                                  ? bb_.null_acoustic->w.data()
                                  : e_in;
            bb_.ralm_fuse_raw(up.data(), ep, fused.data());
            ralm_raw_.step(fused.data(), pos_, ralm_st_, h.data());
        }
        const float* patch = &prompt_latents_[static_cast<std::int64_t>(j) * P * D];
        bb_.locenc_raw(patch, e_prev_.data());
        std::memcpy(prev_patch_.data(), patch,
                    static_cast<std::size_t>(P) * D * sizeof(float));
        first_slot_ = false;
        ++pos_;
    }
}

GenResult GenerationSession::generate() {
    prefill();
    const int d = bb_.cfg.model_dim, P = bb_.cfg.patch_size, D = bb_.cfg.latent_dim;
    const int max_p = st_.max_patches < 0 ? bb_.cfg.max_patches : st_.max_patches;
    GenResult res;
    if (max_p == 0) return res;

    std::vector<float> h(d), lattice(bb_.cfg.fsq_dim), up(d), fused(d), h_res(d),
        cond(d), z(static_cast<std::size_t>(P) * D);
    for (int k = 0;;) {
        const float* e_in = first_slot_ ? bb_.audio_bos->w.data() : e_prev_.data();
        tslm_audio_step(e_in, h.data());
        bb_.fsq.raw_forward(h.data(), d, lattice.data(), up.data());
        const bool stop_fires = bb_.stop_raw(up.data()) > 0.f; // sigmoid > 0.5
        if (bb_.has_ralm()) {
            const float* ep = bb_.variant == Variant::no_acoustic_input
                                  ? bb_.null_acoustic->w.data()
                                  : e_in;
            bb_.ralm_fuse_raw(up.data(), ep, fused.data());
            ralm_raw_.step(fused.data(), pos_, ralm_st_, h_res.data());
            for (int i = 0; i < d; ++i) cond[i] = up[i] + h_res[i];
        } else {
            cond = up;
        }
        const float* c = bb_.variant == Variant::skeleton_only ? up.data() : cond.data();

        Rng pr = Rng::for_stream(st_.seed, static_cast<std::uint64_t>(k));
        sample_patch(dit_, c, prev_patch_.data(), st_.steps, st_.cfg_scale, pr, z.data());
        for (float v : z)
            if (!std::isfinite(v))
                throw std::runtime_error("non-finite latent at slot " +
                                         std::to_string(prompt_patches_ + k));

        res.latents.insert(res.latents.end(), z.begin(), z.end());
        res.conds.insert(res.conds.end(), c, c + d);
        bb_.locenc_raw(z.data(), e_prev_.data());
        prev_patch_ = z;
        first_slot_ = false;
        ++pos_;
        ++k;
        res.patches = k;
        if (stop_fires) {
            res.reason = StopReason::stop_head;
            break;
        }
        if (k >= max_p) {
            res.reason = StopReason::max_length;
            break;
        }
    }
    return res;
}

SynthResult synth_to_wav(const Backbone& bb, const LocDit& dit, const AudioVae& vae,
                         const SynthRequest& req) {
    if (vae.latent_dim() != bb.cfg.latent_dim)
        throw std::runtime_error("latent dim mismatch: lm checkpoint has " +
                                 std::to_string(bb.cfg.latent_dim) + ", vae has " +
                                 std::to_string(vae.latent_dim()));
    GenerationSession session(bb, dit, req.settings);
    session.set_text(req.text);
    if (!req.prompt_wav.empty()) {
        int frames = 0;
        std::vector<float> lat = vae.encode_mean(req.prompt_wav, &frames);
        session.set_prompt(lat, frames, req.prompt_text);
    }
    SynthResult out;
    out.gen = session.generate();
    if (out.gen.patches == 0)
        std::fprintf(stderr, "warning: zero patches generated, writing empty waveform\n");
    else
        out.samples = vae.decode_frames(out.gen.latents,
                                        out.gen.patches * bb.cfg.patch_size);
    out.wav_bytes = encode_wav(out.samples, 16000);
    return out;
}

} // namespace patchflow
