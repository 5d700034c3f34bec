#include "patchflow/evalrun.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "patchflow/checkpoint.hpp"
#include "patchflow/infer.hpp"

namespace patchflow {

namespace {

using json = nlohmann::ordered_json;
constexpr std::uint64_t kStreamEval = 4ull << 32;

SeqBatch single_batch(const ModelConfig& cfg, const Utterance& u) {
    SeqBatch b;
    b.P = cfg.patch_size;
    b.D = cfg.latent_dim;
    const int M = u.frames / b.P;
    b.tokens.push_back(tokenize_bytes(u.text));
    b.patch_counts.push_back(M);
    b.cfg_mask.push_back(0);
    b.latents = u.latents;
    for (int f = 0; f < u.frames; ++f) b.frame_mask.push_back(f < u.frames_real ? 1.f : 0.f);
    for (int j = 0; j < M; ++j) b.stop_labels.push_back(j + 1 == M ? 1.f : 0.f);
    return b;
}

// same flow-loss construction as a training step, minus CFG masking
double teacher_flow_loss(const LocDit& dit, Tape& t, const SeqBatch& b,
                         const BackboneOut& out, Rng& rng) {
    const int P = b.P, D = b.D, G = b.total_patches();
    const std::int64_t pd = static_cast<std::int64_t>(P) * D;
    std::vector<float> zt(G * pd), target(G * pd), t_of(G), eps(pd);
    std::vector<TPtr> parts;
    parts.reserve(2 * G);
    int g = 0;
    std::int64_t frame0 = 0;
    for (std::size_t u = 0; u < b.patch_counts.size(); ++u) {
        const int M = b.patch_counts[u];
        for (int j = 0; j < M; ++j, ++g) {
            t_of[g] = static_cast<float>(rng.uniform());
            for (auto& e : eps) e = rng.normalf();
            const float* z0 = &b.latents[(frame0 + static_cast<std::int64_t>(j) * P) * D];
            make_flow_sample(z0, eps.data(), t_of[g], static_cast<int>(pd), &zt[g * pd],
                             &target[g * pd]);
            parts.push_back(j == 0 ? t.leaf(dit.start_patch) : t.constant(P, D, z0 - pd));
            parts.push_back(t.constant(P, D, &zt[g * pd]));
        }
        frame0 += static_cast<std::int64_t>(M) * P;
    }
    TPtr vel = dit.forward(t, concat_rows(t, parts), t_of, out.cond);
    TPtr flow = mse_masked(t, vel, t.constant(G * P, D, std::move(target)),
                           t.constant(G * P, 1, b.frame_mask.data()));
    return flow->item();
}

// h_final must be up_proj(lattice_vec) + h_residual with bit equality, and
// lattice_vec must sit on the lattice
bool decomposition_holds(const Backbone& bb, const BackboneOut& out) {
    const int G = out.h_final->rows, d = out.h_final->cols;
    const int fd = bb.cfg.fsq_dim;
    std::vector<float> up(d), snapped(fd);
    for (int g = 0; g < G; ++g) {
        const float* lat = &out.lattice_vec->v[static_cast<std::int64_t>(g) * fd];
        if (!bb.fsq.bypass) {
            quantize_inplace(lat, snapped.data(), fd, bb.fsq.lat);
            if (std::memcmp(snapped.data(), lat, fd * sizeof(float)) != 0) return false;
        }
        bb.fsq.raw_up(lat, up.data());
        const float* hf = &out.h_final->v[static_cast<std::int64_t>(g) * d];
        if (out.h_residual) {
            const float* hr = &out.h_residual->v[static_cast<std::int64_t>(g) * d];
            for (int c = 0; c < d; ++c)
                if (up[c] + hr[c] != hf[c]) return false;
        } else {
            for (int c = 0; c < d; ++c)
                if (up[c] != hf[c]) return false;
        }
    }
    return true;
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

json report_to_json(const EvalReport& r) {
    json j;
    j["variant"] = r.variant;
    j["settings"] = {{"seed", r.settings.seed},
                     {"steps", r.settings.steps},
                     {"cfg_scale", r.settings.cfg_scale},
                     {"generate", r.settings.generate}};
    j["aggregates"] = {{"flow_loss", r.flow_loss},
                       {"stop_accuracy", r.stop_accuracy},
                       {"gen_mse", r.gen_mse},
                       {"gen_rows", r.gen_rows},
                       {"decomposition_ok", r.decomposition_ok}};
    j["rows"] = json::array();
    for (const auto& row : r.rows) {
        json o = {{"id", row.id},
                  {"flow_loss", row.flow_loss},
                  {"stop_accuracy", row.stop_accuracy},
                  {"patch_count", row.patch_count},
                  {"target_patches", row.target_patches},
                  {"decomposition_ok", row.decomposition_ok}};
        if (row.has_gen) o["gen_mse"] = row.gen_mse;
        j["rows"].push_back(o);
    }
    return j;
}

} // namespace

void load_model(const std::string& path_or_dir, LoadedModel& lm) {
    namespace fs = std::filesystem;
    std::string path = path_or_dir;
    if (fs::is_directory(path)) {
        path = latest_checkpoint(path_or_dir);
        if (path.empty())
            throw std::runtime_error("no checkpoint found in " + path_or_dir);
    }
    CheckpointMeta meta = read_checkpoint_meta(path);
    ModelConfig cfg;
    TrainConfig tcfg;
    parse_config_text(meta.config_text, cfg, tcfg);
    lm.tr.cfg = cfg;
    lm.tr.tcfg = tcfg;
    lm.tr.init();
    meta = load_checkpoint(path, lm.tr.store);
    lm.tr.step = static_cast<std::int64_t>(meta.step);
    lm.tr.opt.t = static_cast<std::int64_t>(meta.adam_t);
    lm.step = meta.step;
    lm.checkpoint_path = path;
}

EvalReport eval_corpus(const Backbone& bb, const LocDit& dit, const Corpus& corpus,
                       const EvalSettings& st) {
    EvalReport rep;
    rep.variant = variant_name(bb.variant, bb.cfg.fsq_dim);
    rep.settings = st;
    const int P = bb.cfg.patch_size, D = bb.cfg.latent_dim;
    for (std::size_t u = 0; u < corpus.utts.size(); ++u) {
        const Utterance& utt = corpus.utts[u];
        EvalRow row;
        row.id = utt.id;
        row.target_patches = utt.frames / P;

        SeqBatch b = single_batch(bb.cfg, utt);
        Tape t;
        BackboneOut out = bb.forward(t, b);
        Rng rng = Rng::for_stream(st.seed, kStreamEval + u);
        row.flow_loss = teacher_flow_loss(dit, t, b, out, rng);

        int correct = 0;
        const int M = b.patch_counts[0];
        for (int j = 0; j < M; ++j) {
            const bool fired = out.stop_logits->v[j] > 0.f;
            if (fired == (b.stop_labels[j] == 1.f)) ++correct;
        }
        row.stop_accuracy = static_cast<double>(correct) / M;
        row.decomposition_ok = decomposition_holds(bb, out);

        if (st.generate) {
            GenSettings gs;
            gs.steps = st.steps;
            gs.cfg_scale = st.cfg_scale;
            gs.seed = st.seed + u;
            GenerationSession session(bb, dit, gs);
            session.set_text(utt.text);
            GenResult g = session.generate();
            row.patch_count = g.patches;
            const int overlap = std::min(g.patches * P, utt.frames_real);
            double acc = 0;
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(overlap) * D; ++i) {
                const double d = static_cast<double>(g.latents[i]) - utt.latents[i];
                acc += d * d;
            }
            row.gen_mse = acc / (static_cast<double>(overlap) * D);
            row.has_gen = true;
        }
        rep.rows.push_back(row);
    }

    const double n = static_cast<double>(rep.rows.size());
    for (const auto& row : rep.rows) {
        rep.flow_loss += row.flow_loss / n;
        rep.stop_accuracy += row.stop_accuracy / n;
        rep.decomposition_ok = rep.decomposition_ok && row.decomposition_ok;
        if (row.has_gen) {
            rep.gen_mse += row.gen_mse;
            ++rep.gen_rows;
        }
    }
    if (rep.gen_rows) rep.gen_mse /= rep.gen_rows;
    return rep;
}

std::string EvalReport::json() const { return report_to_json(*this).dump(2); }

std::string EvalReport::table() const {
    std::string s;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-12s %12s %10s %12s %8s %8s %6s\n", "utterance",
                  "flow_loss", "stop_acc", "gen_mse", "patches", "target", "decomp");
    s += buf;
    for (const auto& r : rows) {
        char gen[32] = "-";
        if (r.has_gen) std::snprintf(gen, sizeof gen, "%.6f", r.gen_mse);
        std::snprintf(buf, sizeof buf, "%-12s %12.6f %10.4f %12s %8d %8d %6s\n",
                      r.id.c_str(), r.flow_loss, r.stop_accuracy, gen, r.patch_count,
                      r.target_patches, r.decomposition_ok ? "ok" : "FAIL");
        s += buf;
    }
    char gen[32] = "-";
    if (gen_rows) std::snprintf(gen, sizeof gen, "%.6f", gen_mse);
    std::snprintf(buf, sizeof buf,
                  "mean: flow_loss=%.6f stop_acc=%.4f gen_mse=%s over %zu utterances\n",
                  flow_loss, stop_accuracy, gen, rows.size());
    s += buf;
    return s;
}

void write_eval_report(const EvalReport& r, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << r.json() << "\n";
}

std::vector<std::string> default_ablation_variants() {
    return {"none", "d4",      "d16",
            "d32",  "no_fsq",  "no_ralm",
            "no_acoustic_input", "skeleton_only"};
}

AblateResult run_ablate(const ModelConfig& cfg, const TrainConfig& base,
                        const Corpus& train_corpus, const Corpus& held_out,
                        const std::vector<std::string>& variants,
                        const std::string& out_dir, const EvalSettings& eval_st) {
    namespace fs = std::filesystem;
    if (variants.empty()) throw ConfigError("ablate: empty variant list");
    fs::create_directories(out_dir);
    AblateResult res;
    for (const std::string& vname : variants) {
        AblateRow row;
        row.variant = vname;
        try {
            TrainConfig tcfg = base;
            tcfg.variant = parse_variant(vname, &tcfg.fsq_dim_override);

            ModelConfig mc = cfg;
            if (tcfg.variant == Variant::fsq_dim_override) mc.fsq_dim = tcfg.fsq_dim_override;
            if (tcfg.variant == Variant::no_fsq) {
                row.codebook = "inf";
            } else {
                const CodebookSize cs = codebook_size(lattice_for(mc));
                char cb[32];
                std::snprintf(cb, sizeof cb, "10^%.1f", cs.log10_size);
                row.codebook = cb;
            }

            const std::string cfg_text = serialize_config(mc, tcfg);
            char hex[20];
            std::snprintf(hex, sizeof hex, "%016llx",
                          static_cast<unsigned long long>(fnv1a(cfg_text)));
            std::string tag = vname;
            for (auto& c : tag)
                if (c == ':') c = '_';
            const std::string dir = out_dir + "/" + tag + "-" + hex;
            row.run_dir = dir;

            const std::string train_json = dir + "/eval_train.json";
            const std::string held_json = dir + "/eval_heldout.json";
            if (fs::exists(train_json) && fs::exists(held_json)) {
                json jt = json::parse(std::ifstream(train_json));
                json jh = json::parse(std::ifstream(held_json));
                row.flow_loss = jt["aggregates"]["flow_loss"].get<double>();
                row.stop_accuracy = jt["aggregates"]["stop_accuracy"].get<double>();
                row.gen_mse = jh["aggregates"]["gen_mse"].get<double>();
                row.status = "cached";
            } else {
                run_training(cfg, tcfg, train_corpus, dir, false);
                LoadedModel lm;
                load_model(dir, lm);
                EvalSettings tf = eval_st;
                tf.generate = false;
                EvalReport rt = eval_corpus(lm.tr.bb, lm.tr.dit, train_corpus, tf);
                write_eval_report(rt, train_json);
                EvalReport rh = eval_corpus(lm.tr.bb, lm.tr.dit, held_out, eval_st);
                write_eval_report(rh, held_json);
                row.flow_loss = rt.flow_loss;
                row.stop_accuracy = rt.stop_accuracy;
                row.gen_mse = rh.gen_mse;
                row.status = "trained";
            }
        } catch (const std::exception& e) {
            row.status = "failed";
            row.error = e.what();
        }
        res.rows.push_back(row);
    }

    std::string table;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-20s %-10s %12s %10s %16s %-8s\n", "variant",
                  "codebook", "flow_loss", "stop_acc", "heldout_gen_mse", "status");
    table += buf;
    for (const auto& r : res.rows) {
        if (r.status == "failed")
            std::snprintf(buf, sizeof buf, "%-20s %-10s %12s %10s %16s %-8s (%s)\n",
                          r.variant.c_str(), "-", "-", "-", "-", r.status.c_str(),
                          r.error.c_str());
        else
            std::snprintf(buf, sizeof buf, "%-20s %-10s %12.6f %10.4f %16.6f %-8s\n",
                          r.variant.c_str(), r.codebook.c_str(), r.flow_loss,
                          r.stop_accuracy, r.gen_mse, r.status.c_str());
        table += buf;
    }
    res.table_text = table;

    std::ofstream tf(out_dir + "/ablate_table.txt", std::ios::trunc);
    tf << table;
    std::ofstream jf(out_dir + "/ablate_rows.jsonl", std::ios::trunc);
    for (const auto& r : res.rows) {
        json j = {{"variant", r.variant},   {"codebook", r.codebook},
                  {"status", r.status},     {"flow_loss", r.flow_loss},
                  {"stop_accuracy", r.stop_accuracy}, {"gen_mse", r.gen_mse},
                  {"run_dir", r.run_dir}};
        if (!r.error.empty()) j["error"] = r.error;
        jf << j.dump() << "\n";
    }
    return res;
}

void dump_hiddens(const Backbone& bb, const Corpus& corpus, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const int d = bb.cfg.model_dim, fd = bb.cfg.fsq_dim;
    std::string label = "corpus";
    if (corpus.has_spec)
        label = corpus.spec.pattern == SyntheticCorpusSpec::sinusoid_bank
                    ? "sinusoid_bank"
                    : "random_anchor_walk";
    std::ofstream index(out_dir + "/index.jsonl", std::ios::trunc);
    for (const Utterance& utt : corpus.utts) {
        SeqBatch b = single_batch(bb.cfg, utt);
        Tape t;
        BackboneOut out = bb.forward(t, b);
        const int M = b.patch_counts[0];
        json files;
        auto dump = [&](const char* kind, const TPtr& x, int cols) {
            const std::string name = utt.id + "." + kind + ".pfl";
            write_latents(out_dir + "/" + name, x->v.data(), M, cols);
            files[kind] = name;
        };
        dump("up", out.up, d);
        dump("hfinal", out.h_final, d);
        if (out.h_residual) dump("res", out.h_residual, d);
        dump("preq", out.pre_q, fd);
        dump("lattice", out.lattice_vec, fd);
        json j = {{"id", utt.id},
                  {"text", utt.text},
                  {"label", label},
                  {"patches", M},
                  {"model_dim", d},
                  {"fsq_dim", fd},
                  {"files", files}};
        index << j.dump() << "\n";
    }
}

} // namespace patchflow
