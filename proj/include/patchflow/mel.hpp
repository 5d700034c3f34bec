#pragma once

#include <vector>

#include "patchflow/tensor.hpp"

namespace patchflow {

// Precomputed DFT + mel filterbank matrices for one STFT configuration.
// Both layouts of each matrix are kept so forward and backward can walk
// them contiguously.
struct MelPlan {
    int n_fft = 1024, hop = 256, n_bins = 513, n_mels = 80;
    std::vector<float> window;                 // Hann, n_fft
    std::vector<float> dft_re_cm, dft_im_cm;   // [n_fft, n_bins], col-major
    std::vector<float> dft_re_rm, dft_im_rm;   // row-major
    std::vector<float> fb_cm, fb_rm;           // [n_bins, n_mels]

    int frames(int T) const { return T >= n_fft ? 1 + (T - n_fft) / hop : 0; }
};

MelPlan make_mel_plan(int n_fft, int hop, int n_mels, int sample_rate);
// the loss windows: (1024,256), (512,128), (256,64), 80 bands at 16 kHz
const std::vector<MelPlan>& default_mel_plans();

std::vector<float> mel_spectrogram(const MelPlan& p, const float* x, int T);

// scalar L1 between mel spectrograms of recon ([T,1] node) and target,
// averaged per (frame, band) within each plan, then across plans
TPtr mel_l1(Tape& t, const TPtr& recon, const std::vector<float>& target,
            const std::vector<MelPlan>& plans);

} // namespace patchflow
