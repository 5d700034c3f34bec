#include "patchflow/vae.hpp"

#include <cstring>
#include <stdexcept>
#include <string>

#include "patchflow/kernels.hpp"

namespace patchflow {

const int VAE_STRIDES[VAE_STAGES] = {2, 5, 8, 8};

void AudioVae::fill_specs(const ModelConfig& c) {
    D_ = c.latent_dim;
    int ch = c.vae_channels, cin = 1;
    for (int i = 0; i < VAE_STAGES; ++i) {
        const int s = VAE_STRIDES[i];
        enc_spec_[i] = {2 * s, s, cin, ch};
        cin = ch;
        ch *= 2;
    }
    // decoder mirrors the encoder back down to one sample channel
    for (int i = 0; i < VAE_STAGES; ++i) {
        const VaeStageSpec& e = enc_spec_[VAE_STAGES - 1 - i];
        dec_spec_[i] = {e.K, e.stride, e.cout, e.cin};
    }
}

void AudioVae::init(ParamStore& s, const ModelConfig& c, Rng& rng) {
    fill_specs(c);
    for (int i = 0; i < VAE_STAGES; ++i) {
        const VaeStageSpec& e = enc_spec_[i];
        const std::string p = "vae.enc" + std::to_string(i);
        enc_w[i] = s.create(p + ".w", e.K * e.cin, e.cout, {ParamInit::normal, 0.02f}, rng, true);
        enc_b[i] = s.create(p + ".b", 1, e.cout, {ParamInit::zeros}, rng);
    }
    const int top = enc_spec_[VAE_STAGES - 1].cout;
    enc_head_w = s.create("vae.enc_head.w", top, 2 * D_, {ParamInit::normal, 0.02f}, rng, true);
    enc_head_b = s.create("vae.enc_head.b", 1, 2 * D_, {ParamInit::zeros}, rng);
    dec_head_w = s.create("vae.dec_head.w", D_, top, {ParamInit::normal, 0.02f}, rng, true);
    dec_head_b = s.create("vae.dec_head.b", 1, top, {ParamInit::zeros}, rng);
    for (int i = 0; i < VAE_STAGES; ++i) {
        const VaeStageSpec& d = dec_spec_[i];
        const std::string p = "vae.dec" + std::to_string(i);
        dec_w[i] = s.create(p + ".w", d.cin, d.K * d.cout, {ParamInit::normal, 0.02f}, rng, true);
        dec_b[i] = s.create(p + ".b", 1, d.cout, {ParamInit::zeros}, rng);
    }
}

void AudioVae::bind(ParamStore& s, const ModelConfig& c) {
    fill_specs(c);
    for (int i = 0; i < VAE_STAGES; ++i) {
        const std::string p = "vae.enc" + std::to_string(i);
        enc_w[i] = s.get(p + ".w");
        enc_b[i] = s.get(p + ".b");
    }
    enc_head_w = s.get("vae.enc_head.w");
    enc_head_b = s.get("vae.enc_head.b");
    dec_head_w = s.get("vae.dec_head.w");
    dec_head_b = s.get("vae.dec_head.b");
    for (int i = 0; i < VAE_STAGES; ++i) {
        const std::string p = "vae.dec" + std::to_string(i);
        dec_w[i] = s.get(p + ".w");
        dec_b[i] = s.get(p + ".b");
    }
}

TPtr AudioVae::encode_stats(Tape& t, const TPtr& x) const {
    TPtr h = x;
    for (int i = 0; i < VAE_STAGES; ++i) {
        const VaeStageSpec& e = enc_spec_[i];
        h = conv1d_causal(t, h, t.leaf(enc_w[i]), t.leaf(enc_b[i]), e.K, e.cin, e.cout,
                          e.stride);
        h = silu(t, h);
    }
    return linear(t, h, t.leaf(enc_head_w), t.leaf(enc_head_b));
}

TPtr AudioVae::decode(Tape& t, const TPtr& z) const {
    TPtr h = linear(t, z, t.leaf(dec_head_w), t.leaf(dec_head_b));
    h = silu(t, h);
    for (int i = 0; i < VAE_STAGES; ++i) {
        const VaeStageSpec& d = dec_spec_[i];
        h = tconv1d_causal(t, h, t.leaf(dec_w[i]), t.leaf(dec_b[i]), d.K, d.cin, d.cout,
                           d.stride);
        h = i + 1 < VAE_STAGES ? silu(t, h) : tanh_op(t, h);
    }
    return h;
}

VaeLoss AudioVae::loss(Tape& t, const std::vector<float>& samples, Rng& rng) const {
    const int T = static_cast<int>(samples.size()) / VAE_HOP * VAE_HOP;
    if (T == 0)
        throw std::runtime_error("vae loss: need at least " + std::to_string(VAE_HOP) +
                                 " samples, got " + std::to_string(samples.size()));
    std::vector<float> clip(samples.begin(), samples.begin() + T);
    TPtr x = t.constant(T, 1, clip.data());
    TPtr stats = encode_stats(t, x);
    TPtr mean = slice_cols(t, stats, 0, D_);
    TPtr logvar = slice_cols(t, stats, D_, D_);
    const int F = stats->rows;
    std::vector<float> noise(static_cast<std::size_t>(F) * D_);
    for (auto& v : noise) v = rng.normalf();
    TPtr z = gauss_reparam(t, mean, logvar, t.constant(F, D_, std::move(noise)));
    TPtr recon = decode(t, z);
    VaeLoss out;
    out.mel = mel_l1(t, recon, clip, default_mel_plans());
    out.kl = kl_std_normal(t, mean, logvar);
    out.total = add_scaled(t, out.mel, out.kl, 5e-5f);
    return out;
}

std::vector<float> AudioVae::encode_mean(const std::vector<float>& samples,
                                         int* frames_out) const {
    const int T = static_cast<int>(samples.size()) / VAE_HOP * VAE_HOP;
    if (T == 0)
        throw std::runtime_error("encode: need at least " + std::to_string(VAE_HOP) +
                                 " samples, got " + std::to_string(samples.size()));
    EncodeStream es(*this);
    std::vector<float> z = es.push(samples.data(), T);
    if (frames_out) *frames_out = T / VAE_HOP;
    return z;
}

std::vector<float> AudioVae::decode_frames(const std::vector<float>& latents,
                                           int frames) const {
    DecodeStream ds(*this);
    return ds.push(latents.data(), frames);
}

namespace {

// the tape convs read the column-major shadow; the streams must walk the
// identical buffer or batch/streaming equality degrades to mere closeness
const float* shadow_cm(const ParamPtr& p) {
    if (!p->shadow) throw std::runtime_error("stream: param " + p->name + " has no shadow");
    return p->wcm.data();
}

} // namespace

EncodeStream::EncodeStream(const AudioVae& vae) : vae_(vae) { reset(); }

void EncodeStream::reset() {
    carry_.assign(VAE_STAGES, {});
    for (int i = 0; i < VAE_STAGES; ++i) {
        const VaeStageSpec& e = vae_.enc_spec(i);
        carry_[i].assign(static_cast<std::size_t>(e.K - 1) * e.cin, 0.f);
    }
}

std::vector<float> EncodeStream::push(const float* x, int n) {
    if (n <= 0 || n % VAE_HOP != 0)
        throw std::runtime_error("encode stream: chunk must be a positive multiple of " +
                                 std::to_string(VAE_HOP));
    std::vector<float> cur(x, x + n);
    int rows = n;
    for (int i = 0; i < VAE_STAGES; ++i) {
        const VaeStageSpec& e = vae_.enc_spec(i);
        std::vector<float>& carry = carry_[i];
        const int pad = e.K - 1;
        std::vector<float> ext(static_cast<std::size_t>(pad + rows) * e.cin);
        std::memcpy(ext.data(), carry.data(), carry.size() * sizeof(float));
        std::memcpy(ext.data() + carry.size(), cur.data(), cur.size() * sizeof(float));
        const int n_out = rows / e.stride;
        // im2col row t = ext rows [t*stride, t*stride + K) — contiguous slab
        std::vector<float> cols(static_cast<std::size_t>(n_out) * e.K * e.cin);
        for (int to = 0; to < n_out; ++to)
            std::memcpy(&cols[static_cast<std::size_t>(to) * e.K * e.cin],
                        &ext[static_cast<std::size_t>(to) * e.stride * e.cin],
                        static_cast<std::size_t>(e.K) * e.cin * sizeof(float));
        std::vector<float> out(static_cast<std::size_t>(n_out) * e.cout);
        kern::gemm_colB(cols.data(), shadow_cm(vae_.enc_w[i]), out.data(), n_out,
                        e.K * e.cin, e.cout, vae_.enc_b[i]->w.data());
        kern::silu(out.data(), out.data(), static_cast<std::int64_t>(out.size()));
        std::memcpy(carry.data(), ext.data() + static_cast<std::size_t>(rows) * e.cin,
                    carry.size() * sizeof(float));
        cur = std::move(out);
        rows = n_out;
    }
    const int top = vae_.enc_spec(VAE_STAGES - 1).cout, D = vae_.latent_dim();
    std::vector<float> stats(static_cast<std::size_t>(rows) * 2 * D);
    kern::gemm_colB(cur.data(), shadow_cm(vae_.enc_head_w), stats.data(), rows, top, 2 * D,
                    vae_.enc_head_b->w.data());
    std::vector<float> mean(static_cast<std::size_t>(rows) * D);
    for (int f = 0; f < rows; ++f)
        std::memcpy(&mean[static_cast<std::size_t>(f) * D],
                    &stats[static_cast<std::size_t>(f) * 2 * D], D * sizeof(float));
    return mean;
}

DecodeStream::DecodeStream(const AudioVae& vae) : vae_(vae) { reset(); }

void DecodeStream::reset() {
    pending_.assign(VAE_STAGES, {});
    for (int i = 0; i < VAE_STAGES; ++i) {
        const VaeStageSpec& d = vae_.dec_spec(i);
        const int tail = d.K - d.stride;
        pending_[i].resize(static_cast<std::size_t>(tail) * d.cout);
        for (int r = 0; r < tail; ++r)
            std::memcpy(&pending_[i][static_cast<std::size_t>(r) * d.cout],
                        vae_.dec_b[i]->w.data(), d.cout * sizeof(float));
    }
}

std::vector<float> DecodeStream::push(const float* z, int frames) {
    if (frames <= 0) throw std::runtime_error("decode stream: need at least one frame");
    const int top = vae_.dec_spec(0).cin, D = vae_.latent_dim();
    std::vector<float> cur(static_cast<std::size_t>(frames) * top);
    kern::gemm_colB(z, shadow_cm(vae_.dec_head_w), cur.data(), frames, D, top,
                    vae_.dec_head_b->w.data());
    kern::silu(cur.data(), cur.data(), static_cast<std::int64_t>(cur.size()));
    int rows = frames;
    for (int i = 0; i < VAE_STAGES; ++i) {
        const VaeStageSpec& d = vae_.dec_spec(i);
        std::vector<float> R(static_cast<std::size_t>(rows) * d.K * d.cout);
        kern::gemm_colB(cur.data(), shadow_cm(vae_.dec_w[i]), R.data(), rows, d.cin,
                        d.K * d.cout, nullptr);
        const int tail = d.K - d.stride, n_emit = rows * d.stride;
        std::vector<float> buf(static_cast<std::size_t>(n_emit + tail) * d.cout);
        std::memcpy(buf.data(), pending_[i].data(), pending_[i].size() * sizeof(float));
        for (int r = tail; r < n_emit + tail; ++r)
            std::memcpy(&buf[static_cast<std::size_t>(r) * d.cout], vae_.dec_b[i]->w.data(),
                        d.cout * sizeof(float));
        // same (input, tap) accumulation order as the batch overlap-add
        for (int tt = 0; tt < rows; ++tt)
            for (int kk = 0; kk < d.K; ++kk) {
                float* o = &buf[static_cast<std::size_t>(tt * d.stride + kk) * d.cout];
                const float* r = &R[static_cast<std::size_t>(tt) * d.K * d.cout +
                                    static_cast<std::size_t>(kk) * d.cout];
                for (int c = 0; c < d.cout; ++c) o[c] += r[c];
            }
        std::memcpy(pending_[i].data(), &buf[static_cast<std::size_t>(n_emit) * d.cout],
                    pending_[i].size() * sizeof(float));
        buf.resize(static_cast<std::size_t>(n_emit) * d.cout);
        if (i + 1 < VAE_STAGES)
            kern::silu(buf.data(), buf.data(), static_cast<std::int64_t>(buf.size()));
        else
            kern::tanh_v(buf.data(), buf.data(), static_cast<std::int64_t>(buf.size()));
        cur = std::move(buf);
        rows = n_emit;
    }
    return cur;
}

} // namespace patchflow
