#pragma once
// causal audio VAE: 640x downsampling (strides 2,5,8,8), kernel = 2*stride,
// left-padded convs so latent frame n never sees samples past (n+1)*640-1.
#include <vector>

#include "patchflow/config.hpp"
#include "patchflow/mel.hpp"
#include "patchflow/params.hpp"
#include "patchflow/rng.hpp"
#include "patchflow/tensor.hpp"

namespace patchflow {

constexpr int VAE_HOP = 640; // samples per latent frame
constexpr int VAE_STAGES = 4;
extern const int VAE_STRIDES[VAE_STAGES]; // {2,5,8,8}

struct VaeStageSpec {
    int K, stride, cin, cout;
};

struct VaeLoss {
    TPtr total, mel, kl;
};

class AudioVae {
public:
    void init(ParamStore& s, const ModelConfig& c, Rng& rng);
    void bind(ParamStore& s, const ModelConfig& c);

    // tape paths (for training; inputs as constants work for plain eval too)
    TPtr encode_stats(Tape& t, const TPtr& x) const; // [T,1] -> [T/640, 2D]
    TPtr decode(Tape& t, const TPtr& z) const;       // [F,D]  -> [F*640, 1]
    VaeLoss loss(Tape& t, const std::vector<float>& samples, Rng& rng) const;

    // deterministic LM-latent extraction: truncates to a multiple of 640,
    // errors below one frame; returns mean channels only, [frames * D]
    std::vector<float> encode_mean(const std::vector<float>& samples, int* frames_out) const;
    std::vector<float> decode_frames(const std::vector<float>& latents, int frames) const;

    int latent_dim() const { return D_; }
    const VaeStageSpec& enc_spec(int i) const { return enc_spec_[i]; }
    const VaeStageSpec& dec_spec(int i) const { return dec_spec_[i]; }

    ParamPtr enc_w[VAE_STAGES], enc_b[VAE_STAGES];
    ParamPtr enc_head_w, enc_head_b;
    ParamPtr dec_head_w, dec_head_b;
    ParamPtr dec_w[VAE_STAGES], dec_b[VAE_STAGES];

private:
    void fill_specs(const ModelConfig& c);
    VaeStageSpec enc_spec_[VAE_STAGES], dec_spec_[VAE_STAGES];
    int D_ = 0;
};

// chunked encoder; bit-exact against the batch path. push() takes a multiple
// of 640 samples and returns the newly final mean latents, [new_frames * D].
class EncodeStream {
public:
    explicit EncodeStream(const AudioVae& vae);
    void reset();
    std::vector<float> push(const float* x, int n);

private:
    const AudioVae& vae_;
    std::vector<std::vector<float>> carry_; // per stage: last K-1 input rows
};

// chunked decoder; carries the overlap-add tail of each transposed conv so
// emitted samples match the batch path bit for bit.
class DecodeStream {
public:
    explicit DecodeStream(const AudioVae& vae);
    void reset();
    std::vector<float> push(const float* z, int frames); // -> frames*640 samples

private:
    const AudioVae& vae_;
    std::vector<std::vector<float>> pending_; // per stage: K-stride partial rows
};

} // namespace patchflow
