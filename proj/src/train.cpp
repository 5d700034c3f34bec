#include "patchflow/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "patchflow/checkpoint.hpp"

namespace patchflow {

namespace {

// stream-id regions under the training seed; keeps init / batch / noise draws
// independent of each other at every step
constexpr std::uint64_t kStreamInit = 0;
constexpr std::uint64_t kStreamBatch = 1ull << 32;
constexpr std::uint64_t kStreamNoise = 2ull << 32;
constexpr std::uint64_t kStreamVae = 3ull << 32;

const char* kModuleNames[] = {"locenc", "tslm", "fsq.down", "fsq.up",
                              "ralm",   "stop", "locdit"};

double now_seconds() {
    using clk = std::chrono::steady_clock;
    return std::chrono::duration<double>(clk::now().time_since_epoch()).count();
}

std::string fmt_float(float x) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(x));
    return buf;
}

std::string fmt_double(double x) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::string grad_norm_dump(const std::map<std::string, double>& norms) {
    std::string s;
    for (const auto& [k, v] : norms) {
        if (!s.empty()) s += ", ";
        s += k + "=" + fmt_double(v);
    }
    return s;
}

void append_metrics_line(std::ofstream& log, const std::string& line) {
    log << line << '\n';
    log.flush();
}

} // namespace

std::string StepMetrics::json_line() const {
    std::string s = "{\"step\":" + std::to_string(step) + ",\"lr\":" + fmt_double(lr) +
                    ",\"flow_loss\":" + fmt_float(flow_loss) +
                    ",\"stop_loss\":" + fmt_float(stop_loss) +
                    ",\"total\":" + fmt_float(total) + ",\"grad_norms\":{";
    bool first = true;
    for (const auto& [k, v] : grad_norms) {
        if (!first) s += ",";
        first = false;
        s += "\"" + k + "\":" + fmt_double(v);
    }
    s += "},\"seconds\":" + fmt_double(seconds) + "}";
    return s;
}

void Trainer::init() {
    cfg.validate();
    tcfg.validate();
    Rng rng = Rng::for_stream(static_cast<std::uint64_t>(tcfg.seed), kStreamInit);
    ModelConfig mc = cfg;
    if (tcfg.variant == Variant::fsq_dim_override) mc.fsq_dim = tcfg.fsq_dim_override;
    cfg = mc;
    bb.init(store, cfg, tcfg.variant, rng);
    dit.init(store, cfg, rng);
    step = 0;
    opt = AdamW{};
}

SeqBatch Trainer::make_batch(const Corpus& c, std::int64_t at_step) const {
    if (c.utts.empty()) throw ConfigError("corpus is empty");
    Rng rng = Rng::for_stream(static_cast<std::uint64_t>(tcfg.seed),
                              kStreamBatch + static_cast<std::uint64_t>(at_step));
    SeqBatch b;
    b.P = cfg.patch_size;
    b.D = cfg.latent_dim;
    const int budget = batch_patches_at(tcfg, at_step);
    int patches = 0;
    while (patches < budget) {
        const Utterance& u = c.utts[rng.uniform_int(c.utts.size())];
        if (u.latent_dim != cfg.latent_dim)
            throw std::runtime_error("utterance " + u.id + " has latent dim " +
                                     std::to_string(u.latent_dim) + ", model wants " +
                                     std::to_string(cfg.latent_dim));
        if (u.frames % b.P != 0)
            throw std::runtime_error("utterance " + u.id + " frames not a multiple of P");
        const int M = u.frames / b.P;
        b.tokens.push_back(tokenize_bytes(u.text));
        b.patch_counts.push_back(M);
        b.cfg_mask.push_back(rng.bernoulli(cfg.cfg_mask_prob) ? 1 : 0);
        b.latents.insert(b.latents.end(), u.latents.begin(), u.latents.end());
        for (int f = 0; f < u.frames; ++f)
            b.frame_mask.push_back(f < u.frames_real ? 1.f : 0.f);
        for (int j = 0; j < M; ++j) b.stop_labels.push_back(j + 1 == M ? 1.f : 0.f);
        patches += M;
    }
    return b;
}

StepMetrics Trainer::train_step(const SeqBatch& b) {
    const double t0 = now_seconds();
    Rng rng = Rng::for_stream(static_cast<std::uint64_t>(tcfg.seed),
                              kStreamNoise + static_cast<std::uint64_t>(step));
    Tape t;
    BackboneOut out = bb.forward(t, b);

    const int P = b.P, D = b.D, G = b.total_patches();
    const std::int64_t pd = static_cast<std::int64_t>(P) * D;
    std::vector<float> zt(static_cast<std::int64_t>(G) * pd);
    std::vector<float> target(static_cast<std::int64_t>(G) * pd);
    std::vector<float> t_of(G);
    std::vector<float> eps(pd);
    std::vector<TPtr> parts;
    parts.reserve(2 * G);
    std::vector<std::uint8_t> patch_mask(G);
    int g = 0;
    std::int64_t frame0 = 0;
    for (std::size_t u = 0; u < b.patch_counts.size(); ++u) {
        const int M = b.patch_counts[u];
        for (int j = 0; j < M; ++j, ++g) {
            patch_mask[g] = b.cfg_mask[u];
            t_of[g] = static_cast<float>(rng.uniform());
            for (auto& e : eps) e = rng.normalf();
            const float* z0 = &b.latents[(frame0 + static_cast<std::int64_t>(j) * P) * D];
            make_flow_sample(z0, eps.data(), t_of[g], static_cast<int>(pd), &zt[g * pd],
                             &target[g * pd]);
            parts.push_back(j == 0 ? t.leaf(dit.start_patch)
                                   : t.constant(P, D, z0 - pd));
            parts.push_back(t.constant(P, D, &zt[g * pd]));
        }
        frame0 += static_cast<std::int64_t>(M) * P;
    }
    TPtr tokens = concat_rows(t, parts);
    TPtr cond = row_mix(t, out.cond, t.leaf(dit.null_embedding), patch_mask);
    TPtr vel = dit.forward(t, tokens, t_of, cond);
    TPtr flow = mse_masked(t, vel, t.constant(G * P, D, std::move(target)),
                           t.constant(G * P, 1, b.frame_mask.data()));
    TPtr stop = bce_logits_mean(t, out.stop_logits, t.constant(G, 1, b.stop_labels.data()));
    TPtr total = add_scaled(t, flow, stop, static_cast<float>(cfg.stop_loss_weight));

    store.zero_grad();
    t.backward(total);
    t.sync_param_grads();

    StepMetrics m;
    m.step = step;
    m.lr = lr_at_step(tcfg, step);
    m.flow_loss = flow->item();
    m.stop_loss = stop->item();
    m.total = total->item();
    for (const char* name : kModuleNames)
        m.grad_norms[name] = store.grad_norm(std::string(name) + ".");
    if (!std::isfinite(m.total))
        throw std::runtime_error("non-finite loss at step " + std::to_string(step) +
                                 " (flow=" + fmt_float(m.flow_loss) + ", stop=" +
                                 fmt_float(m.stop_loss) + "); grad norms: " +
                                 grad_norm_dump(m.grad_norms));
    opt.step(store, m.lr);
    ++step;
    m.seconds = now_seconds() - t0;
    return m;
}

void run_training(const ModelConfig& cfg, const TrainConfig& tcfg, const Corpus& corpus,
                  const std::string& out_dir, bool resume) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    Trainer tr;
    tr.cfg = cfg;
    tr.tcfg = tcfg;
    tr.init();
    const std::string cfg_text = tr.config_text();
    if (resume) {
        const std::string ck = latest_checkpoint(out_dir);
        if (ck.empty()) throw std::runtime_error("no checkpoint to resume from in " + out_dir);
        CheckpointMeta meta = read_checkpoint_meta(ck);
        const auto diff = config_diff(cfg_text, meta.config_text);
        if (!diff.empty()) {
            std::string msg = "refusing to resume, config differs from checkpoint:";
            for (const auto& d : diff) msg += "\n  " + d;
            throw std::runtime_error(msg);
        }
        meta = load_checkpoint(ck, tr.store);
        tr.step = static_cast<std::int64_t>(meta.step);
        tr.opt.t = static_cast<std::int64_t>(meta.adam_t);
    } else {
        std::ofstream cf(out_dir + "/config.txt", std::ios::trunc);
        cf << cfg_text;
    }
    std::ofstream mlog(out_dir + "/metrics.jsonl",
                       resume ? std::ios::app : std::ios::trunc);
    const std::int64_t total = tcfg.planned_steps();
    std::int64_t last_saved = -1;
    while (tr.step < total) {
        SeqBatch b = tr.make_batch(corpus, tr.step);
        StepMetrics m = tr.train_step(b);
        append_metrics_line(mlog, m.json_line());
        if (tcfg.checkpoint_every > 0 && tr.step % tcfg.checkpoint_every == 0) {
            save_checkpoint(out_dir + "/" + checkpoint_name(tr.step), tr.store,
                            static_cast<std::uint64_t>(tr.step),
                            static_cast<std::uint64_t>(tr.opt.t), cfg_text);
            last_saved = tr.step;
        }
    }
    if (last_saved != tr.step)
        save_checkpoint(out_dir + "/" + checkpoint_name(tr.step), tr.store,
                        static_cast<std::uint64_t>(tr.step),
                        static_cast<std::uint64_t>(tr.opt.t), cfg_text);
}

std::string VaeStepMetrics::json_line() const {
    return "{\"step\":" + std::to_string(step) + ",\"lr\":" + fmt_double(lr) +
           ",\"mel\":" + fmt_float(mel) + ",\"kl\":" + fmt_float(kl) +
           ",\"total\":" + fmt_float(total) + ",\"kl_weight\":5e-05" +
           ",\"seconds\":" + fmt_double(seconds) + "}";
}

void VaeTrainer::init() {
    cfg.validate();
    tcfg.validate();
    Rng rng = Rng::for_stream(static_cast<std::uint64_t>(tcfg.seed), kStreamInit);
    vae.init(store, cfg, rng);
    step = 0;
    opt = AdamW{};
}

VaeStepMetrics VaeTrainer::train_step(const std::vector<std::vector<float>>& clips) {
    if (clips.empty()) throw ConfigError("vae training corpus is empty");
    const double t0 = now_seconds();
    Rng rng = Rng::for_stream(static_cast<std::uint64_t>(tcfg.seed),
                              kStreamVae + static_cast<std::uint64_t>(step));
    Tape t;
    const auto& clip = clips[rng.uniform_int(clips.size())];
    VaeLoss L = vae.loss(t, clip, rng);
    store.zero_grad();
    t.backward(L.total);
    t.sync_param_grads();

    VaeStepMetrics m;
    m.step = step;
    m.lr = lr_at_step(tcfg, step);
    m.mel = L.mel->item();
    m.kl = L.kl->item();
    m.total = L.total->item();
    if (!std::isfinite(m.total))
        throw std::runtime_error("non-finite vae loss at step " + std::to_string(step) +
                                 " (mel=" + fmt_float(m.mel) + ", kl=" + fmt_float(m.kl) +
                                 "); grad norm vae=" + fmt_double(store.grad_norm("vae.")));
    opt.step(store, m.lr);
    ++step;
    m.seconds = now_seconds() - t0;
    return m;
}

void train_vae(const ModelConfig& cfg, const TrainConfig& tcfg,
               const std::vector<std::vector<float>>& clips, const std::string& out_dir,
               bool resume) {
    namespace fs = std::filesystem;
    if (clips.empty()) throw ConfigError("vae training corpus is empty");
    fs::create_directories(out_dir);
    VaeTrainer tr;
    tr.cfg = cfg;
    tr.tcfg = tcfg;
    tr.init();
    const std::string cfg_text = serialize_config(cfg, tcfg);
    if (resume) {
        const std::string ck = latest_checkpoint(out_dir);
        if (ck.empty()) throw std::runtime_error("no checkpoint to resume from in " + out_dir);
        CheckpointMeta meta = read_checkpoint_meta(ck);
        const auto diff = config_diff(cfg_text, meta.config_text);
        if (!diff.empty()) {
            std::string msg = "refusing to resume, config differs from checkpoint:";
            for (const auto& d : diff) msg += "\n  " + d;
            throw std::runtime_error(msg);
        }
        meta = load_checkpoint(ck, tr.store);
        tr.step = static_cast<std::int64_t>(meta.step);
        tr.opt.t = static_cast<std::int64_t>(meta.adam_t);
    } else {
        std::ofstream cf(out_dir + "/config.txt", std::ios::trunc);
        cf << cfg_text;
    }
    std::ofstream mlog(out_dir + "/metrics.jsonl",
                       resume ? std::ios::app : std::ios::trunc);
    const std::int64_t total = tcfg.planned_steps();
    std::int64_t last_saved = -1;
    while (tr.step < total) {
        VaeStepMetrics m = tr.train_step(clips);
        append_metrics_line(mlog, m.json_line());
        if (tcfg.checkpoint_every > 0 && tr.step % tcfg.checkpoint_every == 0) {
            save_checkpoint(out_dir + "/" + checkpoint_name(tr.step), tr.store,
                            static_cast<std::uint64_t>(tr.step),
                            static_cast<std::uint64_t>(tr.opt.t), cfg_text);
            last_saved = tr.step;
        }
    }
    if (last_saved != tr.step)
        save_checkpoint(out_dir + "/" + checkpoint_name(tr.step), tr.store,
                        static_cast<std::uint64_t>(tr.step),
                        static_cast<std::uint64_t>(tr.opt.t), cfg_text);
}

} // namespace patchflow
