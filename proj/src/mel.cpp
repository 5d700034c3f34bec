#include "patchflow/mel.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "patchflow/kernels.hpp"

namespace patchflow {

namespace {

float hz_to_mel(float f) { return 2595.0f * std::log10(1.0f + f / 700.0f); }
float mel_to_hz(float m) { return 700.0f * (std::pow(10.0f, m / 2595.0f) - 1.0f); }
constexpr float kMagEps = 1e-9f;

} // namespace

MelPlan make_mel_plan(int n_fft, int hop, int n_mels, int sample_rate) {
    MelPlan p;
    p.n_fft = n_fft;
    p.hop = hop;
    p.n_mels = n_mels;
    p.n_bins = n_fft / 2 + 1;
    p.window.resize(n_fft);
    for (int i = 0; i < n_fft; ++i)
        p.window[i] = 0.5f - 0.5f * std::cos(2.0f * static_cast<float>(M_PI) * i / n_fft);
    const std::size_t nd = static_cast<std::size_t>(n_fft) * p.n_bins;
    p.dft_re_cm.resize(nd);
    p.dft_im_cm.resize(nd);
    p.dft_re_rm.resize(nd);
    p.dft_im_rm.resize(nd);
    for (int b = 0; b < p.n_bins; ++b)
        for (int i = 0; i < n_fft; ++i) {
            const double ang = -2.0 * M_PI * static_cast<double>(i) * b / n_fft;
            const float re = static_cast<float>(std::cos(ang));
            const float im = static_cast<float>(std::sin(ang));
            p.dft_re_cm[static_cast<std::size_t>(b) * n_fft + i] = re;
            p.dft_im_cm[static_cast<std::size_t>(b) * n_fft + i] = im;
            p.dft_re_rm[static_cast<std::size_t>(i) * p.n_bins + b] = re;
            p.dft_im_rm[static_cast<std::size_t>(i) * p.n_bins + b] = im;
        }
    // triangular mel filters, 0 .. sr/2
    const float mel_lo = hz_to_mel(0.0f), mel_hi = hz_to_mel(sample_rate / 2.0f);
    std::vector<float> centers(n_mels + 2);
    for (int i = 0; i < n_mels + 2; ++i)
        centers[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_mels + 1));
    const std::size_t nf = static_cast<std::size_t>(p.n_bins) * n_mels;
    p.fb_cm.assign(nf, 0.f);
    p.fb_rm.assign(nf, 0.f);
    for (int m = 0; m < n_mels; ++m) {
        const float lo = centers[m], mid = centers[m + 1], hi = centers[m + 2];
        for (int b = 0; b < p.n_bins; ++b) {
            const float f = static_cast<float>(b) * sample_rate / n_fft;
            float w = 0.f;
            if (f > lo && f < hi)
                w = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
            p.fb_cm[static_cast<std::size_t>(m) * p.n_bins + b] = w;
            p.fb_rm[static_cast<std::size_t>(b) * n_mels + m] = w;
        }
    }
    return p;
}

const std::vector<MelPlan>& default_mel_plans() {
    static const std::vector<MelPlan> plans = [] {
        std::vector<MelPlan> v;
        v.push_back(make_mel_plan(1024, 256, 80, 16000));
        v.push_back(make_mel_plan(512, 128, 80, 16000));
        v.push_back(make_mel_plan(256, 64, 80, 16000));
        return v;
    }();
    return plans;
}

std::vector<float> mel_spectrogram(const MelPlan& p, const float* x, int T) {
    const int F = p.frames(T);
    std::vector<float> out(static_cast<std::size_t>(F) * p.n_mels);
    std::vector<float> frame(p.n_fft), re(p.n_bins), im(p.n_bins), mag(p.n_bins);
    for (int f = 0; f < F; ++f) {
        const float* seg = x + static_cast<std::size_t>(f) * p.hop;
        for (int i = 0; i < p.n_fft; ++i) frame[i] = seg[i] * p.window[i];
        kern::gemm_colB(frame.data(), p.dft_re_cm.data(), re.data(), 1, p.n_fft, p.n_bins, nullptr);
        kern::gemm_colB(frame.data(), p.dft_im_cm.data(), im.data(), 1, p.n_fft, p.n_bins, nullptr);
        for (int b = 0; b < p.n_bins; ++b)
            mag[b] = std::sqrt(re[b] * re[b] + im[b] * im[b] + kMagEps);
        kern::gemm_colB(mag.data(), p.fb_cm.data(), &out[static_cast<std::size_t>(f) * p.n_mels],
                        1, p.n_bins, p.n_mels, nullptr);
    }
    return out;
}

TPtr mel_l1(Tape& t, const TPtr& recon, const std::vector<float>& target,
            const std::vector<MelPlan>& plans) {
    if (recon->cols != 1) throw std::runtime_error("mel_l1: recon must be [T,1]");
    const int T = recon->rows;
    if (static_cast<int>(target.size()) != T)
        throw std::runtime_error("mel_l1: length mismatch");
    for (const auto& p : plans)
        if (p.frames(T) < 1)
            throw std::runtime_error("mel_l1: clip shorter than analysis window");

    struct PlanScratch {
        std::vector<float> re, im, mag, mel; // per frame, concatenated
        std::vector<float> mel_t;
        int F = 0;
    };
    auto scr = std::make_shared<std::vector<PlanScratch>>(plans.size());
    double total = 0.0;
    for (std::size_t pi = 0; pi < plans.size(); ++pi) {
        const MelPlan& p = plans[pi];
        PlanScratch& s = (*scr)[pi];
        s.F = p.frames(T);
        s.re.resize(static_cast<std::size_t>(s.F) * p.n_bins);
        s.im.resize(s.re.size());
        s.mag.resize(s.re.size());
        s.mel.resize(static_cast<std::size_t>(s.F) * p.n_mels);
        s.mel_t = mel_spectrogram(p, target.data(), T);
        std::vector<float> frame(p.n_fft);
        double acc = 0.0;
        for (int f = 0; f < s.F; ++f) {
            const float* seg = recon->v.data() + static_cast<std::size_t>(f) * p.hop;
            for (int i = 0; i < p.n_fft; ++i) frame[i] = seg[i] * p.window[i];
            float* re = &s.re[static_cast<std::size_t>(f) * p.n_bins];
            float* im = &s.im[static_cast<std::size_t>(f) * p.n_bins];
            float* mag = &s.mag[static_cast<std::size_t>(f) * p.n_bins];
            kern::gemm_colB(frame.data(), p.dft_re_cm.data(), re, 1, p.n_fft, p.n_bins, nullptr);
            kern::gemm_colB(frame.data(), p.dft_im_cm.data(), im, 1, p.n_fft, p.n_bins, nullptr);
            for (int b = 0; b < p.n_bins; ++b)
                mag[b] = std::sqrt(re[b] * re[b] + im[b] * im[b] + kMagEps);
            float* mel = &s.mel[static_cast<std::size_t>(f) * p.n_mels];
            kern::gemm_colB(mag, p.fb_cm.data(), mel, 1, p.n_bins, p.n_mels, nullptr);
            const float* mt = &s.mel_t[static_cast<std::size_t>(f) * p.n_mels];
            for (int m = 0; m < p.n_mels; ++m) acc += std::abs(mel[m] - mt[m]);
        }
        total += acc / (static_cast<double>(s.F) * p.n_mels);
    }
    auto out = t.make(1, 1, recon->needs_grad);
    out->v[0] = static_cast<float>(total / plans.size());
    if (out->needs_grad) {
        auto plans_copy = &plans; // default plans are static; callers keep custom ones alive
        out->back = [out, recon, plans_copy, scr, T] {
            recon->ensure_grad();
            const auto& plans = *plans_copy;
            for (std::size_t pi = 0; pi < plans.size(); ++pi) {
                const MelPlan& p = plans[pi];
                const PlanScratch& s = (*scr)[pi];
                const float gs = out->g[0] / (static_cast<float>(plans.size()) * s.F * p.n_mels);
                std::vector<float> dmel(p.n_mels), dmag(p.n_bins), dre(p.n_bins),
                    dim(p.n_bins), dframe(p.n_fft);
                for (int f = 0; f < s.F; ++f) {
                    const float* mel = &s.mel[static_cast<std::size_t>(f) * p.n_mels];
                    const float* mt = &s.mel_t[static_cast<std::size_t>(f) * p.n_mels];
                    for (int m = 0; m < p.n_mels; ++m)
                        dmel[m] = gs * (mel[m] > mt[m] ? 1.f : (mel[m] < mt[m] ? -1.f : 0.f));
                    std::fill(dmag.begin(), dmag.end(), 0.f);
                    kern::gemm_rowBT(dmel.data(), p.fb_rm.data(), dmag.data(), 1, p.n_mels,
                                     p.n_bins, true);
                    const float* re = &s.re[static_cast<std::size_t>(f) * p.n_bins];
                    const float* im = &s.im[static_cast<std::size_t>(f) * p.n_bins];
                    const float* mag = &s.mag[static_cast<std::size_t>(f) * p.n_bins];
                    for (int b = 0; b < p.n_bins; ++b) {
                        dre[b] = dmag[b] * re[b] / mag[b];
                        dim[b] = dmag[b] * im[b] / mag[b];
                    }
                    std::fill(dframe.begin(), dframe.end(), 0.f);
                    kern::gemm_rowBT(dre.data(), p.dft_re_rm.data(), dframe.data(), 1,
                                     p.n_bins, p.n_fft, true);
                    kern::gemm_rowBT(dim.data(), p.dft_im_rm.data(), dframe.data(), 1,
                                     p.n_bins, p.n_fft, true);
                    float* gx = recon->g.data() + static_cast<std::size_t>(f) * p.hop;
                    for (int i = 0; i < p.n_fft; ++i) gx[i] += p.window[i] * dframe[i];
                }
            }
        };
    }
    return out;
}

} // namespace patchflow
