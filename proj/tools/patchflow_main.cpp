// patchflow CLI: train / train-vae / synth / eval / ablate / dump-hiddens /
// gen-corpus / vae-roundtrip. Errors leave a JSON record on stderr.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "patchflow/checkpoint.hpp"
#include "patchflow/corpus.hpp"
#include "patchflow/evalrun.hpp"
#include "patchflow/infer.hpp"
#include "patchflow/train.hpp"
#include "patchflow/wav.hpp"

namespace pf = patchflow;
using json = nlohmann::ordered_json;

namespace {

std::string env_root() {
    const char* r = std::getenv("PATCHFLOW_CHECKPOINT_ROOT");
    return r ? r : "";
}

void load_configs(const std::string& path, pf::ModelConfig& m, pf::TrainConfig& t) {
    if (!path.empty()) pf::load_config(path, m, t);
}

pf::Corpus corpus_or_synthetic(const std::string& manifest, const pf::ModelConfig& cfg) {
    if (manifest.empty())
        return pf::generate_synthetic_corpus(pf::SyntheticCorpusSpec{}, cfg);
    std::string path = manifest;
    if (std::filesystem::is_directory(path)) path += "/manifest.jsonl";
    return pf::load_corpus(path);
}

void load_vae_checkpoint(const std::string& path_or_dir, pf::VaeTrainer& vt) {
    namespace fs = std::filesystem;
    std::string path = path_or_dir;
    if (fs::is_directory(path)) {
        path = pf::latest_checkpoint(path_or_dir);
        if (path.empty())
            throw std::runtime_error("no checkpoint found in " + path_or_dir);
    }
    pf::CheckpointMeta meta = pf::read_checkpoint_meta(path);
    pf::parse_config_text(meta.config_text, vt.cfg, vt.tcfg);
    vt.init();
    pf::load_checkpoint(path, vt.store);
}

std::vector<std::vector<float>> vae_clips(const std::string& wav_dir, int n_clips,
                                          double seconds, std::int64_t seed) {
    std::vector<std::vector<float>> clips;
    if (!wav_dir.empty()) {
        namespace fs = std::filesystem;
        std::vector<std::string> paths;
        for (const auto& e : fs::directory_iterator(wav_dir))
            if (e.path().extension() == ".wav") paths.push_back(e.path().string());
        std::sort(paths.begin(), paths.end());
        for (const auto& p : paths) clips.push_back(pf::read_wav(p).samples);
    } else {
        const int n = std::max(pf::VAE_HOP,
                               static_cast<int>(seconds * 16000) / pf::VAE_HOP * pf::VAE_HOP);
        for (int i = 0; i < n_clips; ++i)
            clips.push_back(pf::synthetic_wave(seed + i, n));
    }
    return clips;
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"hierarchical patch-local flow TTS, desk scale"};
    app.require_subcommand(1);

    // ---- train ----
    std::string tr_config, tr_corpus, tr_out = env_root(), tr_variant;
    std::int64_t tr_seed = -1, tr_steps = 0;
    bool tr_resume = false;
    auto* c_train = app.add_subcommand("train", "train the LM stack");
    c_train->add_option("--config", tr_config, "key=value config file");
    c_train->add_option("--corpus", tr_corpus, "manifest.jsonl (default: synthetic)");
    c_train->add_option("--out", tr_out, "run directory")
        ->required(env_root().empty());
    c_train->add_option("--seed", tr_seed, "training seed");
    c_train->add_option("--variant", tr_variant, "ablation variant");
    c_train->add_option("--steps", tr_steps, "override total steps");
    c_train->add_flag("--resume", tr_resume, "continue from newest checkpoint");
    c_train->callback([&] {
        pf::ModelConfig cfg;
        pf::TrainConfig tcfg;
        load_configs(tr_config, cfg, tcfg);
        if (tr_seed >= 0) tcfg.seed = tr_seed;
        if (!tr_variant.empty())
            tcfg.variant = pf::parse_variant(tr_variant, &tcfg.fsq_dim_override);
        if (tr_steps > 0) tcfg.total_steps = tr_steps;
        pf::Corpus corpus = corpus_or_synthetic(tr_corpus, cfg);
        pf::run_training(cfg, tcfg, corpus, tr_out, tr_resume);
        std::cout << json{{"run_dir", tr_out}, {"steps", tcfg.planned_steps()}}.dump()
                  << "\n";
    });

    // ---- train-vae ----
    std::string tv_config, tv_wavdir, tv_out = env_root();
    std::int64_t tv_seed = -1, tv_steps = 0;
    int tv_clips = 8;
    double tv_seconds = 2.0;
    bool tv_resume = false;
    auto* c_tvae = app.add_subcommand("train-vae", "train the audio VAE");
    c_tvae->add_option("--config", tv_config, "key=value config file");
    c_tvae->add_option("--wav-dir", tv_wavdir, "directory of 16 kHz mono PCM16 WAVs");
    c_tvae->add_option("--clips", tv_clips, "synthetic clip count (no --wav-dir)");
    c_tvae->add_option("--clip-seconds", tv_seconds, "synthetic clip length");
    c_tvae->add_option("--out", tv_out, "run directory")->required(env_root().empty());
    c_tvae->add_option("--seed", tv_seed, "training seed");
    c_tvae->add_option("--steps", tv_steps, "override total steps");
    c_tvae->add_flag("--resume", tv_resume, "continue from newest checkpoint");
    c_tvae->callback([&] {
        pf::ModelConfig cfg;
        pf::TrainConfig tcfg;
        load_configs(tv_config, cfg, tcfg);
        if (tv_seed >= 0) tcfg.seed = tv_seed;
        if (tv_steps > 0) tcfg.total_steps = tv_steps;
        auto clips = vae_clips(tv_wavdir, tv_clips, tv_seconds, tcfg.seed);
        pf::train_vae(cfg, tcfg, clips, tv_out, tv_resume);
        std::cout << json{{"run_dir", tv_out}, {"clips", clips.size()}}.dump() << "\n";
    });

    // ---- synth ----
    std::string sy_ckpt = env_root(), sy_vae, sy_text, sy_prompt_audio, sy_prompt_text,
        sy_out;
    double sy_cfg = 2.0;
    int sy_steps = 32, sy_max = -1;
    std::int64_t sy_seed = 0;
    auto* c_synth = app.add_subcommand("synth", "text to waveform");
    c_synth->add_option("--checkpoint", sy_ckpt, "LM run dir or checkpoint file")
        ->required(env_root().empty());
    c_synth->add_option("--vae", sy_vae, "VAE run dir or checkpoint file")->required();
    c_synth->add_option("--text", sy_text, "text to speak")->required();
    c_synth->add_option("--prompt-audio", sy_prompt_audio, "voice-cloning prompt WAV");
    c_synth->add_option("--prompt-text", sy_prompt_text, "prompt transcript");
    c_synth->add_option("--out", sy_out, "output WAV path")->required();
    c_synth->add_option("--cfg", sy_cfg, "guidance scale");
    c_synth->add_option("--steps", sy_steps, "flow integration steps");
    c_synth->add_option("--seed", sy_seed, "sampling seed");
    c_synth->add_option("--max-patches", sy_max, "patch cap (-1 = model default)");
    c_synth->callback([&] {
        if (!sy_prompt_audio.empty() && sy_prompt_text.empty())
            throw CLI::ValidationError("--prompt-audio needs --prompt-text");
        pf::LoadedModel lm;
        pf::load_model(sy_ckpt, lm);
        pf::VaeTrainer vt;
        load_vae_checkpoint(sy_vae, vt);
        pf::SynthRequest req;
        req.text = sy_text;
        req.prompt_text = sy_prompt_text;
        if (!sy_prompt_audio.empty()) req.prompt_wav = pf::read_wav(sy_prompt_audio).samples;
        req.settings.steps = sy_steps;
        req.settings.cfg_scale = static_cast<float>(sy_cfg);
        req.settings.seed = static_cast<std::uint64_t>(sy_seed);
        req.settings.max_patches = sy_max;
        pf::SynthResult res = pf::synth_to_wav(lm.tr.bb, lm.tr.dit, vt.vae, req);
        write_bytes(sy_out, res.wav_bytes);
        std::cout << json{{"out", sy_out},
                          {"patches", res.gen.patches},
                          {"stop_reason", pf::stop_reason_name(res.gen.reason)},
                          {"samples", res.samples.size()}}
                         .dump()
                  << "\n";
    });

    // ---- eval ----
    std::string ev_ckpt = env_root(), ev_corpus, ev_out;
    std::int64_t ev_seed = 0;
    int ev_steps = 32;
    double ev_cfg = 1.0;
    bool ev_nogen = false;
    auto* c_eval = app.add_subcommand("eval", "teacher-forced + generation metrics");
    c_eval->add_option("--checkpoint", ev_ckpt, "LM run dir or checkpoint file")
        ->required(env_root().empty());
    c_eval->add_option("--corpus", ev_corpus, "manifest.jsonl (default: synthetic)");
    c_eval->add_option("--out", ev_out, "report path (default <checkpoint>/eval.json)");
    c_eval->add_option("--seed", ev_seed, "eval seed");
    c_eval->add_option("--steps", ev_steps, "flow integration steps");
    c_eval->add_option("--cfg", ev_cfg, "guidance scale");
    c_eval->add_flag("--no-gen", ev_nogen, "skip autoregressive generation");
    c_eval->callback([&] {
        pf::LoadedModel lm;
        pf::load_model(ev_ckpt, lm);
        pf::Corpus corpus = corpus_or_synthetic(ev_corpus, lm.tr.cfg);
        pf::EvalSettings st;
        st.seed = static_cast<std::uint64_t>(ev_seed);
        st.steps = ev_steps;
        st.cfg_scale = static_cast<float>(ev_cfg);
        st.generate = !ev_nogen;
        pf::EvalReport rep = pf::eval_corpus(lm.tr.bb, lm.tr.dit, corpus, st);
        std::string out = ev_out;
        if (out.empty()) {
            namespace fs = std::filesystem;
            out = (fs::is_directory(ev_ckpt) ? ev_ckpt : fs::path(ev_ckpt).parent_path().string());
            out += "/eval.json";
        }
        pf::write_eval_report(rep, out);
        std::cout << rep.table();
        std::cout << json{{"report", out}}.dump() << "\n";
    });

    // ---- ablate ----
    std::string ab_config, ab_corpus, ab_out = env_root(), ab_variants;
    std::int64_t ab_seed = -1, ab_steps = 600;
    int ab_heldout = 8, ab_hmin = 16, ab_hmax = 24, ab_eval_steps = 32;
    auto* c_ablate = app.add_subcommand("ablate", "train + evaluate ablation variants");
    c_ablate->add_option("--config", ab_config, "key=value config file");
    c_ablate->add_option("--corpus", ab_corpus, "manifest.jsonl (default: synthetic)");
    c_ablate->add_option("--out", ab_out, "sweep directory")->required(env_root().empty());
    c_ablate->add_option("--variants", ab_variants, "comma list (default: table sweep)");
    c_ablate->add_option("--seed", ab_seed, "shared training seed");
    c_ablate->add_option("--steps", ab_steps, "per-variant steps (near-constant lr)");
    c_ablate->add_option("--heldout-num", ab_heldout, "held-out utterance count");
    c_ablate->add_option("--heldout-min", ab_hmin, "held-out min text length");
    c_ablate->add_option("--heldout-max", ab_hmax, "held-out max text length");
    c_ablate->add_option("--eval-steps", ab_eval_steps, "flow steps during eval");
    c_ablate->callback([&] {
        pf::ModelConfig cfg;
        pf::TrainConfig tcfg;
        load_configs(ab_config, cfg, tcfg);
        if (ab_seed >= 0) tcfg.seed = ab_seed;
        if (ab_steps > 0) {
            // ablation protocol: short warmup then flat peak, no decay
            tcfg.warmup_steps = std::min<std::int64_t>(100, ab_steps / 10);
            tcfg.stable_steps = ab_steps - tcfg.warmup_steps;
            tcfg.decay_steps = 0;
            tcfg.total_steps = 0;
            tcfg.checkpoint_every = ab_steps;
        }
        pf::Corpus corpus = corpus_or_synthetic(ab_corpus, cfg);
        pf::SyntheticCorpusSpec hspec;
        if (corpus.has_spec) hspec = corpus.spec;
        hspec.num_utterances = ab_heldout;
        hspec.text_min = ab_hmin;
        hspec.text_max = ab_hmax;
        pf::Corpus held_out = pf::generate_synthetic_corpus(hspec, cfg);
        std::vector<std::string> variants;
        if (ab_variants.empty()) {
            variants = pf::default_ablation_variants();
        } else {
            std::string cur;
            for (char c : ab_variants + ",") {
                if (c == ',') {
                    if (!cur.empty()) variants.push_back(cur);
                    cur.clear();
                } else {
                    cur += c;
                }
            }
        }
        pf::EvalSettings est;
        est.seed = static_cast<std::uint64_t>(tcfg.seed);
        est.steps = ab_eval_steps;
        est.cfg_scale = 1.0f;
        pf::AblateResult res =
            pf::run_ablate(cfg, tcfg, corpus, held_out, variants, ab_out, est);
        std::cout << res.table_text;
        std::cout << json{{"table", ab_out + "/ablate_table.txt"},
                          {"rows", ab_out + "/ablate_rows.jsonl"}}
                         .dump()
                  << "\n";
    });

    // ---- dump-hiddens ----
    std::string dh_ckpt = env_root(), dh_corpus, dh_out;
    auto* c_dump = app.add_subcommand("dump-hiddens", "export skeleton/residual hiddens");
    c_dump->add_option("--checkpoint", dh_ckpt, "LM run dir or checkpoint file")
        ->required(env_root().empty());
    c_dump->add_option("--corpus", dh_corpus, "manifest.jsonl (default: synthetic)");
    c_dump->add_option("--out", dh_out, "output directory")->required();
    c_dump->callback([&] {
        pf::LoadedModel lm;
        pf::load_model(dh_ckpt, lm);
        pf::Corpus corpus = corpus_or_synthetic(dh_corpus, lm.tr.cfg);
        pf::dump_hiddens(lm.tr.bb, corpus, dh_out);
        std::cout << json{{"out", dh_out}, {"utterances", corpus.utts.size()}}.dump()
                  << "\n";
    });

    // ---- gen-corpus ----
    std::string gc_out, gc_pattern = "sinusoid_bank", gc_config;
    int gc_num = 32, gc_tmin = 4, gc_tmax = 12;
    std::int64_t gc_seed = 7;
    auto* c_gen = app.add_subcommand("gen-corpus", "write a synthetic latent corpus");
    c_gen->add_option("--out", gc_out, "corpus directory")->required();
    c_gen->add_option("--num", gc_num, "utterance count");
    c_gen->add_option("--pattern", gc_pattern, "sinusoid_bank | random_anchor_walk");
    c_gen->add_option("--text-min", gc_tmin, "min text length");
    c_gen->add_option("--text-max", gc_tmax, "max text length");
    c_gen->add_option("--mapping-seed", gc_seed, "token-table seed");
    c_gen->add_option("--config", gc_config, "key=value config file");
    c_gen->callback([&] {
        pf::ModelConfig cfg;
        pf::TrainConfig tcfg;
        load_configs(gc_config, cfg, tcfg);
        pf::SyntheticCorpusSpec spec;
        spec.num_utterances = gc_num;
        spec.text_min = gc_tmin;
        spec.text_max = gc_tmax;
        spec.mapping_seed = gc_seed;
        if (gc_pattern == "sinusoid_bank")
            spec.pattern = pf::SyntheticCorpusSpec::sinusoid_bank;
        else if (gc_pattern == "random_anchor_walk")
            spec.pattern = pf::SyntheticCorpusSpec::random_anchor_walk;
        else
            throw pf::ConfigError("unknown pattern '" + gc_pattern + "'");
        pf::Corpus corpus = pf::generate_synthetic_corpus(spec, cfg);
        pf::write_corpus(corpus, gc_out);
        std::cout << json{{"out", gc_out}, {"utterances", corpus.utts.size()}}.dump()
                  << "\n";
    });

    // ---- vae-roundtrip ----
    std::string vr_vae, vr_in, vr_out;
    int vr_chunk = 0;
    auto* c_vr = app.add_subcommand("vae-roundtrip", "encode + decode a WAV");
    c_vr->add_option("--vae", vr_vae, "VAE run dir or checkpoint file")->required();
    c_vr->add_option("--in", vr_in, "input WAV")->required();
    c_vr->add_option("--out", vr_out, "reconstructed WAV")->required();
    c_vr->add_option("--chunk", vr_chunk, "stream in chunks of N frames (0 = batch)");
    c_vr->callback([&] {
        pf::VaeTrainer vt;
        load_vae_checkpoint(vr_vae, vt);
        pf::WavData in = pf::read_wav(vr_in);
        int frames = 0;
        std::vector<float> z = vt.vae.encode_mean(in.samples, &frames);
        std::vector<float> recon;
        if (vr_chunk > 0) {
            pf::DecodeStream ds(vt.vae);
            const int D = vt.vae.latent_dim();
            for (int f0 = 0; f0 < frames; f0 += vr_chunk) {
                const int n = std::min(vr_chunk, frames - f0);
                auto part = ds.push(&z[static_cast<std::int64_t>(f0) * D], n);
                recon.insert(recon.end(), part.begin(), part.end());
            }
        } else {
            recon = vt.vae.decode_frames(z, frames);
        }
        pf::write_wav(vr_out, recon, 16000);
        std::cout << json{{"frames", frames},
                          {"samples_in", in.samples.size()},
                          {"samples_out", recon.size()},
                          {"out", vr_out}}
                         .dump()
                  << "\n";
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::fprintf(stderr, "%s\n", json{{"error", e.what()}}.dump().c_str());
        return e.get_exit_code();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "%s\n", json{{"error", e.what()}}.dump().c_str());
        return 1;
    }
    return 0;
}
