#pragma once
// autoregressive generation: one causal stream over KV caches, patch samples
// via the flow decoder, generated patches re-encoded through LocEnc to close
// the loop. Bit-deterministic given (weights, settings, seed).
#include <cstdint>
#include <string>
#include <vector>

#include "patchflow/backbone.hpp"
#include "patchflow/locdit.hpp"
#include "patchflow/vae.hpp"

namespace patchflow {

struct GenSettings {
    int steps = 32;
    float cfg_scale = 2.0f;
    std::uint64_t seed = 0;
    int max_patches = -1; // -1 = model config cap
};

enum class StopReason { stop_head, max_length };
const char* stop_reason_name(StopReason r);

struct GenResult {
    std::vector<float> latents; // [patches*P, D], generated patches only
    int patches = 0;
    StopReason reason = StopReason::max_length;
    std::vector<float> conds; // [patches, model_dim] conditioning actually used
};

class GenerationSession {
public:
    GenerationSession(const Backbone& bb, const LocDit& dit, const GenSettings& st);

    void set_text(const std::string& text);
    // latents: [frames, D] mean-encoded prompt; frames/P patches teacher-forced
    // into the caches after the combined text. Empty prompt is a no-op.
    void set_prompt(const std::vector<float>& latents, int frames,
                    const std::string& prompt_text);

    GenResult generate();

private:
    void prefill();
    void tslm_audio_step(const float* e_prev, float* h_audio);

    const Backbone& bb_;
    const LocDit& dit_;
    GenSettings st_;
    std::string text_, prompt_text_;
    std::vector<float> prompt_latents_;
    int prompt_patches_ = 0;
    RawStack tslm_raw_, ralm_raw_;
    StackState tslm_st_, ralm_st_;
    int pos_ = 0; // shared position counter ([BOS, text..., audio...])
    std::vector<float> e_prev_, prev_patch_;
    bool first_slot_ = true;
};

struct SynthRequest {
    std::string text;
    std::string prompt_text;
    std::vector<float> prompt_wav; // 16 kHz samples; empty = pure TTS
    GenSettings settings;
};

struct SynthResult {
    GenResult gen;
    std::vector<float> samples;
    std::vector<std::uint8_t> wav_bytes;
};

SynthResult synth_to_wav(const Backbone& bb, const LocDit& dit, const AudioVae& vae,
                         const SynthRequest& req);

} // namespace patchflow
