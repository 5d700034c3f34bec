#pragma once

#include <string>
#include <utility>
#include <vector>

#include "patchflow/config.hpp"

namespace patchflow {

// byte tokenizer: 256 raw byte values plus specials
inline constexpr int TOK_BOS = 256;
inline constexpr int TOK_EOS = 257;
inline constexpr int TOK_PAD = 258;
inline constexpr int FRAMES_PER_TOKEN = 3;

std::vector<int> tokenize_bytes(const std::string& text);

struct Utterance {
    std::string id;
    std::string text;
    std::vector<float> latents; // [frames, latent_dim], padded to a multiple of P
    int frames = 0;             // padded length
    int frames_real = 0;        // before padding
    int latent_dim = 0;
};

struct Corpus {
    std::vector<Utterance> utts;
    int latent_dim = 0;
    SyntheticCorpusSpec spec;
    bool has_spec = false;
};

// deterministic text -> latent mapping (unpadded, FRAMES_PER_TOKEN * len(text) frames)
std::vector<float> synthetic_latents(const std::string& text, const SyntheticCorpusSpec& spec,
                                     int latent_dim);
Corpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec, const ModelConfig& cfg);

// manifest.jsonl (one {id,text,latent_path} per line) + latents/*.pfl + spec.json
void write_corpus(const Corpus& c, const std::string& dir);
Corpus load_corpus(const std::string& manifest_path);

void write_latents(const std::string& path, const float* data, int frames, int dim);
std::pair<int, int> read_latents(const std::string& path, std::vector<float>& out);

// synthetic 16 kHz test waveforms for VAE training (sinusoid mixtures)
std::vector<float> synthetic_wave(std::int64_t seed, int n_samples);

} // namespace patchflow
