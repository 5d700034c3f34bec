#include "patchflow/wav.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace patchflow {

namespace {

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    b.push_back(v & 0xff);
    b.push_back((v >> 8) & 0xff);
    b.push_back((v >> 16) & 0xff);
    b.push_back((v >> 24) & 0xff);
}
void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
    b.push_back(v & 0xff);
    b.push_back((v >> 8) & 0xff);
}
std::uint32_t get_u32(const std::uint8_t* p) {
    return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t get_u16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

} // namespace

std::vector<std::uint8_t> encode_wav(const std::vector<float>& samples, int sample_rate) {
    const std::uint32_t n = static_cast<std::uint32_t>(samples.size());
    const std::uint32_t data_bytes = n * 2;
    std::vector<std::uint8_t> b;
    b.reserve(44 + data_bytes);
    b.insert(b.end(), {'R', 'I', 'F', 'F'});
    put_u32(b, 36 + data_bytes);
    b.insert(b.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
    put_u32(b, 16);
    put_u16(b, 1); // PCM
    put_u16(b, 1); // mono
    put_u32(b, static_cast<std::uint32_t>(sample_rate));
    put_u32(b, static_cast<std::uint32_t>(sample_rate) * 2);
    put_u16(b, 2);  // block align
    put_u16(b, 16); // bits
    b.insert(b.end(), {'d', 'a', 't', 'a'});
    put_u32(b, data_bytes);
    for (float x : samples) {
        float c = x < -1.f ? -1.f : (x > 1.f ? 1.f : x);
        std::int16_t s = static_cast<std::int16_t>(std::lrintf(c * 32767.f));
        b.push_back(static_cast<std::uint8_t>(s & 0xff));
        b.push_back(static_cast<std::uint8_t>((s >> 8) & 0xff));
    }
    return b;
}

void write_wav(const std::string& path, const std::vector<float>& samples, int sample_rate) {
    auto bytes = encode_wav(samples, sample_rate);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

WavData read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
    if (b.size() < 44 || std::memcmp(b.data(), "RIFF", 4) != 0 ||
        std::memcmp(b.data() + 8, "WAVE", 4) != 0)
        throw std::runtime_error("not a RIFF/WAVE file: " + path);
    WavData w;
    std::size_t off = 12;
    bool have_fmt = false;
    int channels = 0, bits = 0;
    while (off + 8 <= b.size()) {
        const char* tag = reinterpret_cast<const char*>(b.data() + off);
        std::uint32_t len = get_u32(b.data() + off + 4);
        off += 8;
        if (off + len > b.size()) throw std::runtime_error("truncated WAV chunk: " + path);
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            if (len < 16) throw std::runtime_error("bad fmt chunk: " + path);
            const std::uint16_t fmtcode = get_u16(b.data() + off);
            channels = get_u16(b.data() + off + 2);
            w.sample_rate = static_cast<int>(get_u32(b.data() + off + 4));
            bits = get_u16(b.data() + off + 14);
            if (fmtcode != 1) throw std::runtime_error("unsupported WAV format (want PCM): " + path);
            have_fmt = true;
        } else if (std::memcmp(tag, "data", 4) == 0) {
            if (!have_fmt) throw std::runtime_error("data chunk before fmt: " + path);
            if (channels != 1) throw std::runtime_error("unsupported channel count (want mono): " + path);
            if (bits != 16) throw std::runtime_error("unsupported bit depth (want 16): " + path);
            const std::size_t n = len / 2;
            w.samples.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                std::int16_t s = static_cast<std::int16_t>(
                    b[off + 2 * i] | (b[off + 2 * i + 1] << 8));
                w.samples[i] = static_cast<float>(s) / 32768.f;
            }
            return w;
        }
        off += len + (len & 1);
    }
    throw std::runtime_error("no data chunk: " + path);
}

} // namespace patchflow
