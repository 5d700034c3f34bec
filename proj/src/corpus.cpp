#include "patchflow/corpus.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "patchflow/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace patchflow {

std::vector<int> tokenize_bytes(const std::string& text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<int>(c));
    return out;
}

namespace {

struct TokenTables {
    std::vector<float> amp, freq, phase, anchor; // each [256, D]
    int D;

    TokenTables(std::int64_t seed, int latent_dim) : D(latent_dim) {
        const std::size_t n = 256u * D;
        amp.resize(n);
        freq.resize(n);
        phase.resize(n);
        anchor.resize(n);
        Rng ra = Rng::for_stream(seed, 11), rf = Rng::for_stream(seed, 12),
            rp = Rng::for_stream(seed, 13), rw = Rng::for_stream(seed, 14);
        for (std::size_t i = 0; i < n; ++i) {
            amp[i] = 0.2f + 0.8f * ra.uniformf();
            freq[i] = 0.2f + 1.3f * rf.uniformf();
            phase[i] = 6.2831853f * rp.uniformf();
            anchor[i] = 2.f * rw.uniformf() - 1.f;
        }
    }
};

const char* pattern_name(SyntheticCorpusSpec::Pattern p) {
    return p == SyntheticCorpusSpec::sinusoid_bank ? "sinusoid_bank" : "random_anchor_walk";
}

SyntheticCorpusSpec::Pattern pattern_from(const std::string& s) {
    if (s == "sinusoid_bank") return SyntheticCorpusSpec::sinusoid_bank;
    if (s == "random_anchor_walk") return SyntheticCorpusSpec::random_anchor_walk;
    throw std::runtime_error("unknown latent pattern: " + s);
}

} // namespace

std::vector<float> synthetic_latents(const std::string& text, const SyntheticCorpusSpec& spec,
                                     int D) {
    TokenTables tab(spec.mapping_seed, D);
    const int n = static_cast<int>(text.size());
    const int frames = FRAMES_PER_TOKEN * n;
    std::vector<float> z(static_cast<std::size_t>(frames) * D, 0.f);
    std::vector<float> prev(D, 0.f);
    for (int p = 0; p < n; ++p) {
        const int b = static_cast<unsigned char>(text[p]);
        for (int j = 0; j < FRAMES_PER_TOKEN; ++j) {
            float* row = &z[static_cast<std::size_t>(p * FRAMES_PER_TOKEN + j) * D];
            for (int d = 0; d < D; ++d) {
                const std::size_t t = static_cast<std::size_t>(b) * D + d;
                if (spec.pattern == SyntheticCorpusSpec::sinusoid_bank) {
                    row[d] = tab.amp[t] * std::sin(tab.phase[t] + tab.freq[t] * static_cast<float>(j));
                } else {
                    row[d] = prev[d] + 0.3f * (tab.anchor[t] - prev[d]);
                }
            }
            if (spec.pattern == SyntheticCorpusSpec::random_anchor_walk)
                std::memcpy(prev.data(), row, D * sizeof(float));
        }
    }
    return z;
}

Corpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec, const ModelConfig& cfg) {
    static const char alphabet[] = "abcdefghijklmnopqrstuvwxyz ";
    Corpus c;
    c.latent_dim = cfg.latent_dim;
    c.spec = spec;
    c.has_spec = true;
    const int P = cfg.patch_size;
    for (int i = 0; i < spec.num_utterances; ++i) {
        Rng rng = Rng::for_stream(spec.mapping_seed, 1000 + i);
        const int len = spec.text_min +
                        static_cast<int>(rng.uniform_int(spec.text_max - spec.text_min + 1));
        std::string text;
        for (int j = 0; j < len; ++j)
            text.push_back(alphabet[rng.uniform_int(sizeof(alphabet) - 1)]);
        Utterance u;
        char idbuf[16];
        std::snprintf(idbuf, sizeof idbuf, "utt%05d", i);
        u.id = idbuf;
        u.text = text;
        u.latent_dim = cfg.latent_dim;
        u.latents = synthetic_latents(text, spec, cfg.latent_dim);
        u.frames_real = static_cast<int>(u.latents.size()) / cfg.latent_dim;
        u.frames = (u.frames_real + P - 1) / P * P;
        // pad by repeating the final frame; padded frames are masked out of the loss
        u.latents.resize(static_cast<std::size_t>(u.frames) * cfg.latent_dim);
        for (int f = u.frames_real; f < u.frames; ++f)
            std::memcpy(&u.latents[static_cast<std::size_t>(f) * cfg.latent_dim],
                        &u.latents[static_cast<std::size_t>(u.frames_real - 1) * cfg.latent_dim],
                        cfg.latent_dim * sizeof(float));
        c.utts.push_back(std::move(u));
    }
    return c;
}

void write_latents(const std::string& path, const float* data, int frames, int dim) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write("PFLAT001", 8);
    std::uint32_t hdr[2] = {static_cast<std::uint32_t>(frames), static_cast<std::uint32_t>(dim)};
    f.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
    f.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(sizeof(float) * frames * dim));
    if (!f) throw std::runtime_error("write failed: " + path);
}

std::pair<int, int> read_latents(const std::string& path, std::vector<float>& out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "PFLAT001", 8) != 0)
        throw std::runtime_error("bad latent file magic: " + path);
    std::uint32_t hdr[2];
    f.read(reinterpret_cast<char*>(hdr), sizeof hdr);
    out.resize(static_cast<std::size_t>(hdr[0]) * hdr[1]);
    f.read(reinterpret_cast<char*>(out.data()),
           static_cast<std::streamsize>(out.size() * sizeof(float)));
    if (!f) throw std::runtime_error("truncated latent file: " + path);
    return {static_cast<int>(hdr[0]), static_cast<int>(hdr[1])};
}

void write_corpus(const Corpus& c, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "latents");
    std::ofstream mf(fs::path(dir) / "manifest.jsonl");
    if (!mf) throw std::runtime_error("cannot write manifest in " + dir);
    for (const auto& u : c.utts) {
        const std::string rel = "latents/" + u.id + ".pfl";
        write_latents((fs::path(dir) / rel).string(), u.latents.data(), u.frames, u.latent_dim);
        json row = {{"id", u.id},
                    {"text", u.text},
                    {"latent_path", rel},
                    {"frames", u.frames},
                    {"frames_real", u.frames_real}};
        mf << row.dump() << '\n';
    }
    if (c.has_spec) {
        json sj = {{"num_utterances", c.spec.num_utterances},
                   {"text_min", c.spec.text_min},
                   {"text_max", c.spec.text_max},
                   {"mapping_seed", c.spec.mapping_seed},
                   {"latent_pattern", pattern_name(c.spec.pattern)}};
        std::ofstream sf(fs::path(dir) / "spec.json");
        sf << sj.dump(2) << '\n';
    }
}

Corpus load_corpus(const std::string& manifest_path) {
    std::ifstream mf(manifest_path);
    if (!mf) throw std::runtime_error("cannot open manifest: " + manifest_path);
    const fs::path dir = fs::path(manifest_path).parent_path();
    Corpus c;
    std::string line;
    int lineno = 0;
    while (std::getline(mf, line)) {
        ++lineno;
        if (line.empty()) continue;
        json row;
        try {
            row = json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
        Utterance u;
        u.id = row.at("id").get<std::string>();
        u.text = row.at("text").get<std::string>();
        auto [frames, dim] = read_latents((dir / row.at("latent_path").get<std::string>()).string(),
                                          u.latents);
        u.frames = frames;
        u.latent_dim = dim;
        u.frames_real = row.value("frames_real", frames);
        if (c.latent_dim == 0) c.latent_dim = dim;
        if (dim != c.latent_dim)
            throw std::runtime_error("manifest line " + std::to_string(lineno) +
                                     ": latent dim mismatch");
        c.utts.push_back(std::move(u));
    }
    const fs::path sp = dir / "spec.json";
    if (fs::exists(sp)) {
        std::ifstream sf(sp);
        json sj = json::parse(sf);
        c.spec.num_utterances = sj.value("num_utterances", 0);
        c.spec.text_min = sj.value("text_min", 0);
        c.spec.text_max = sj.value("text_max", 0);
        c.spec.mapping_seed = sj.value("mapping_seed", 0);
        c.spec.pattern = pattern_from(sj.value("latent_pattern", "sinusoid_bank"));
        c.has_spec = true;
    }
    return c;
}

std::vector<float> synthetic_wave(std::int64_t seed, int n_samples) {
    Rng rng = Rng::for_stream(seed, 77);
    std::vector<float> w(n_samples, 0.f);
    const float sr = 16000.f;
    for (int k = 0; k < 3; ++k) {
        const float f = 100.f + 1900.f * rng.uniformf();
        const float a = 0.1f + 0.15f * rng.uniformf();
        const float ph = 6.2831853f * rng.uniformf();
        for (int i = 0; i < n_samples; ++i)
            w[i] += a * std::sin(ph + 6.2831853f * f * static_cast<float>(i) / sr);
    }
    // gentle onset/offset so clips don't click
    const int ramp = std::min(200, n_samples / 4);
    for (int i = 0; i < ramp; ++i) {
        const float e = static_cast<float>(i) / ramp;
        w[i] *= e;
        w[n_samples - 1 - i] *= e;
    }
    return w;
}

} // namespace patchflow
