#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "patchflow/corpus.hpp"
#include "patchflow/wav.hpp"

using namespace patchflow;
namespace fs = std::filesystem;

namespace {
fs::path tmpdir(const char* tag) {
    fs::path p = fs::temp_directory_path() / (std::string("pf_corpus_") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}
} // namespace

TEST_CASE("byte tokenizer is plain bytes") {
    auto t = tokenize_bytes("ab");
    REQUIRE(t.size() == 2);
    CHECK(t[0] == 97);
    CHECK(t[1] == 98);
    CHECK(tokenize_bytes("").empty());
    auto hi = tokenize_bytes("\xff");
    CHECK(hi[0] == 255); // bytes stay unsigned
}

TEST_CASE("synthetic corpus is deterministic and patch-padded") {
    ModelConfig cfg;
    cfg.patch_size = 2;
    cfg.latent_dim = 16;
    SyntheticCorpusSpec spec;
    spec.num_utterances = 6;

    Corpus a = generate_synthetic_corpus(spec, cfg);
    Corpus b = generate_synthetic_corpus(spec, cfg);
    REQUIRE(a.utts.size() == 6);
    CHECK(a.latent_dim == 16);
    for (size_t i = 0; i < a.utts.size(); ++i) {
        const Utterance& u = a.utts[i];
        CHECK(u.frames % cfg.patch_size == 0);
        CHECK(u.frames_real == FRAMES_PER_TOKEN * (int)u.text.size());
        CHECK(u.frames >= u.frames_real);
        CHECK(u.frames - u.frames_real < cfg.patch_size);
        CHECK((int)u.latents.size() == u.frames * 16);
        CHECK((int)u.text.size() >= spec.text_min);
        CHECK((int)u.text.size() <= spec.text_max);
        for (float v : u.latents) CHECK(std::isfinite(v));
        CHECK(u.latents == b.utts[i].latents); // bitwise repeatable
        CHECK(u.text == b.utts[i].text);
    }

    SyntheticCorpusSpec other = spec;
    other.mapping_seed = 99;
    Corpus c = generate_synthetic_corpus(other, cfg);
    CHECK(c.utts[0].latents != a.utts[0].latents);

    SyntheticCorpusSpec walk = spec;
    walk.pattern = SyntheticCorpusSpec::random_anchor_walk;
    Corpus d = generate_synthetic_corpus(walk, cfg);
    CHECK(d.utts[0].latents != a.utts[0].latents);
}

TEST_CASE("same text maps to the same latent prefix") {
    ModelConfig cfg;
    SyntheticCorpusSpec spec;
    auto l1 = synthetic_latents("abcd", spec, cfg.latent_dim);
    auto l2 = synthetic_latents("abcd", spec, cfg.latent_dim);
    CHECK(l1 == l2);
    CHECK((int)l1.size() == FRAMES_PER_TOKEN * 4 * cfg.latent_dim);
}

TEST_CASE("corpus writes and reloads bitwise") {
    ModelConfig cfg;
    SyntheticCorpusSpec spec;
    spec.num_utterances = 4;
    Corpus c = generate_synthetic_corpus(spec, cfg);
    auto dir = tmpdir("roundtrip");
    write_corpus(c, dir.string());

    CHECK(fs::exists(dir / "manifest.jsonl"));
    CHECK(fs::exists(dir / "spec.json"));

    Corpus r = load_corpus((dir / "manifest.jsonl").string());
    REQUIRE(r.utts.size() == c.utts.size());
    CHECK(r.latent_dim == c.latent_dim);
    CHECK(r.has_spec);
    CHECK(r.spec.mapping_seed == spec.mapping_seed);
    CHECK(r.spec.num_utterances == spec.num_utterances);
    for (size_t i = 0; i < c.utts.size(); ++i) {
        CHECK(r.utts[i].id == c.utts[i].id);
        CHECK(r.utts[i].text == c.utts[i].text);
        CHECK(r.utts[i].frames == c.utts[i].frames);
        CHECK(r.utts[i].frames_real == c.utts[i].frames_real);
        CHECK(r.utts[i].latents == c.utts[i].latents);
    }
    fs::remove_all(dir);
}

TEST_CASE("latent files round-trip") {
    auto dir = tmpdir("latfile");
    std::vector<float> data = {1.f, -2.5f, 0.25f, 3e-7f, -0.f, 42.f};
    const std::string p = (dir / "x.pfl").string();
    write_latents(p, data.data(), 3, 2);
    std::vector<float> back;
    auto [frames, dim] = read_latents(p, back);
    CHECK(frames == 3);
    CHECK(dim == 2);
    CHECK(std::memcmp(back.data(), data.data(), data.size() * 4) == 0);
    fs::remove_all(dir);
}

TEST_CASE("synthetic waves are deterministic, bounded, and sized") {
    auto w1 = synthetic_wave(5, 3200);
    auto w2 = synthetic_wave(5, 3200);
    CHECK(w1 == w2);
    CHECK(w1.size() == 3200);
    float peak = 0.f;
    for (float v : w1) peak = std::max(peak, std::abs(v));
    CHECK(peak < 1.f);
    CHECK(peak > 0.01f);
    auto w3 = synthetic_wave(6, 3200);
    CHECK(w3 != w1);
}

TEST_CASE("wav files round-trip through 16-bit PCM") {
    auto dir = tmpdir("wav");
    auto w = synthetic_wave(9, 1600);
    const std::string p = (dir / "a.wav").string();
    write_wav(p, w, 16000);
    WavData r = read_wav(p);
    CHECK(r.sample_rate == 16000);
    REQUIRE(r.samples.size() == w.size());
    for (size_t i = 0; i < w.size(); ++i)
        CHECK(std::abs(r.samples[i] - w[i]) <= 1.0f / 32767.f + 1e-6f);

    // encode_wav produces the same bytes the file writer does
    auto bytes = encode_wav(w, 16000);
    std::ifstream f(p, std::ios::binary);
    std::vector<std::uint8_t> disk((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    CHECK(disk == bytes);
    fs::remove_all(dir);
}
