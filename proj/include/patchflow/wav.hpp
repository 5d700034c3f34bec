#pragma once

#include <string>
#include <vector>

namespace patchflow {

// 16-bit PCM mono WAV, the only format this project reads or writes.
struct WavData {
    int sample_rate = 16000;
    std::vector<float> samples; // in [-1, 1]
};

WavData read_wav(const std::string& path);
void write_wav(const std::string& path, const std::vector<float>& samples, int sample_rate);
std::vector<std::uint8_t> encode_wav(const std::vector<float>& samples, int sample_rate);

} // namespace patchflow
