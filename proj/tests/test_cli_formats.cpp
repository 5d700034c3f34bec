#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "patchflow/checkpoint.hpp"
#include "patchflow/evalrun.hpp"

using namespace patchflow;
using json = nlohmann::json;
using pftest::batch_for;
using pftest::tiny_config;
using pftest::tiny_train;
namespace fs = std::filesystem;

namespace {

fs::path tmpdir(const char* tag) {
    fs::path p = fs::temp_directory_path() / (std::string("pf_fmt_") + tag);
    fs::remove_all(p);
    return p;
}

Corpus tiny_corpus(const ModelConfig& cfg, int n = 4) {
    SyntheticCorpusSpec spec;
    spec.num_utterances = n;
    spec.text_min = 4;
    spec.text_max = 6;
    return generate_synthetic_corpus(spec, cfg);
}

struct TinyModel {
    Trainer tr;
    TinyModel() {
        tr.cfg = tiny_config();
        tr.tcfg = tiny_train();
        tr.init();
    }
};

} // namespace

TEST_CASE("variant names round-trip through the parser") {
    const std::vector<std::pair<std::string, std::string>> cases = {
        {"none", "none"},
        {"default", "none"},
        {"no_fsq", "no_fsq"},
        {"no_ralm", "no_ralm"},
        {"no_acoustic_input", "no_acoustic_input"},
        {"skeleton_only", "skeleton_only"},
        {"d4", "fsq_dim_override:4"},
        {"d16", "fsq_dim_override:16"},
        {"d32", "fsq_dim_override:32"},
        {"fsq_dim_override:16", "fsq_dim_override:16"},
    };
    for (const auto& [in, canon] : cases) {
        int k = 0;
        Variant v = parse_variant(in, &k);
        CHECK(variant_name(v, k) == canon);
        // canonical spellings are fixed points
        int k2 = 0;
        Variant v2 = parse_variant(canon, &k2);
        CHECK(v2 == v);
        CHECK(k2 == k);
    }
}

TEST_CASE("default ablation sweep covers lattice sizes and module removals") {
    const std::vector<std::string> want = {"none",   "d4",      "d16",
                                           "d32",    "no_fsq",  "no_ralm",
                                           "no_acoustic_input", "skeleton_only"};
    CHECK(default_ablation_variants() == want);
}

TEST_CASE("config_diff reports changed and absent keys") {
    ModelConfig cfg = tiny_config();
    TrainConfig tcfg = tiny_train();
    const std::string a = serialize_config(cfg, tcfg);
    TrainConfig t2 = tcfg;
    t2.total_steps = 17;
    const std::string b = serialize_config(cfg, t2);

    CHECK(config_diff(a, a).empty());
    auto d = config_diff(b, a);
    REQUIRE(d.size() == 1);
    CHECK(d[0] == "total_steps: ours=17 checkpoint=0");

    auto d2 = config_diff("x = 1\ny = 2\n", "x = 1\n");
    REQUIRE(d2.size() == 1);
    CHECK(d2[0] == "y: ours=2 checkpoint=<absent>");
    auto d3 = config_diff("x = 1\n", "x = 1\ny = 2\n");
    REQUIRE(d3.size() == 1);
    CHECK(d3[0] == "y: ours=<absent> checkpoint=2");
}

TEST_CASE("eval report json and table stay consistent with the rows") {
    TinyModel m;
    Corpus c = tiny_corpus(m.tr.cfg);
    EvalSettings st;
    st.seed = 9;
    st.steps = 2;
    st.cfg_scale = 1.0f;
    EvalReport rep = eval_corpus(m.tr.bb, m.tr.dit, c, st);
    REQUIRE(rep.rows.size() == c.utts.size());
    CHECK(rep.decomposition_ok); // bit-exact skeleton/residual split on every row

    json j = json::parse(rep.json());
    CHECK(j["variant"] == "none");
    CHECK(j["settings"]["seed"] == 9);
    CHECK(j["settings"]["steps"] == 2);
    CHECK(j["settings"]["generate"] == true);
    REQUIRE(j["rows"].size() == rep.rows.size());

    // aggregates are plain means over rows (gen_mse over generating rows)
    double fl = 0, sa = 0, gm = 0;
    int gr = 0;
    const double n = static_cast<double>(rep.rows.size());
    for (const auto& r : rep.rows) {
        fl += r.flow_loss / n;
        sa += r.stop_accuracy / n;
        if (r.has_gen) {
            gm += r.gen_mse;
            ++gr;
        }
    }
    REQUIRE(gr == static_cast<int>(rep.rows.size()));
    gm /= gr;
    CHECK(rep.flow_loss == doctest::Approx(fl).epsilon(1e-12));
    CHECK(rep.stop_accuracy == doctest::Approx(sa).epsilon(1e-12));
    CHECK(rep.gen_mse == doctest::Approx(gm).epsilon(1e-12));
    CHECK(j["aggregates"]["gen_rows"] == gr);
    CHECK(j["aggregates"]["decomposition_ok"] == true);
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
        CHECK(j["rows"][i]["id"] == rep.rows[i].id);
        CHECK(j["rows"][i].contains("gen_mse"));
        CHECK(j["rows"][i]["target_patches"] ==
              c.utts[i].frames / m.tr.cfg.patch_size);
        CHECK(rep.rows[i].patch_count >= 1);
        CHECK(rep.rows[i].stop_accuracy >= 0.0);
        CHECK(rep.rows[i].stop_accuracy <= 1.0);
    }

    // table: header + one line per row + mean footer
    std::istringstream is(rep.table());
    std::vector<std::string> lines;
    for (std::string ln; std::getline(is, ln);) lines.push_back(ln);
    REQUIRE(lines.size() == rep.rows.size() + 2);
    CHECK(lines.front().find("utterance") == 0);
    CHECK(lines.back().find("mean:") == 0);
    for (std::size_t i = 0; i < rep.rows.size(); ++i)
        CHECK(lines[i + 1].find(rep.rows[i].id) == 0);
}

TEST_CASE("teacher-forced-only eval skips generation cleanly") {
    TinyModel m;
    Corpus c = tiny_corpus(m.tr.cfg, 2);
    EvalSettings st;
    st.generate = false;
    EvalReport rep = eval_corpus(m.tr.bb, m.tr.dit, c, st);
    CHECK(rep.gen_rows == 0);
    CHECK(rep.gen_mse == 0.0);
    json j = json::parse(rep.json());
    CHECK(!j["rows"][0].contains("gen_mse"));
    CHECK(rep.table().find(" - ") != std::string::npos);
}

TEST_CASE("eval report file round-trips and reruns are bit-deterministic") {
    TinyModel m;
    Corpus c = tiny_corpus(m.tr.cfg, 2);
    EvalSettings st;
    st.steps = 2;
    EvalReport a = eval_corpus(m.tr.bb, m.tr.dit, c, st);
    EvalReport b = eval_corpus(m.tr.bb, m.tr.dit, c, st);
    CHECK(a.json() == b.json());

    fs::path dir = tmpdir("report");
    fs::create_directories(dir);
    const std::string path = (dir / "eval.json").string();
    write_eval_report(a, path);
    json j = json::parse(std::ifstream(path));
    CHECK(j["aggregates"]["flow_loss"].get<double>() ==
          doctest::Approx(a.flow_loss).epsilon(1e-12));
    fs::remove_all(dir);
}

TEST_CASE("load_model rebuilds a trainer from a run directory") {
    TinyModel m;
    fs::path dir = tmpdir("loadmodel");
    fs::create_directories(dir);
    save_checkpoint((dir / checkpoint_name(3)).string(), m.tr.store, 3, 3,
                    m.tr.config_text());

    LoadedModel lm;
    load_model(dir.string(), lm);
    CHECK(lm.step == 3);
    CHECK(lm.tr.step == 3);
    CHECK(lm.tr.opt.t == 3);
    CHECK(fs::path(lm.checkpoint_path).filename().string() == checkpoint_name(3));
    CHECK(lm.tr.bb.tok_emb->w == m.tr.bb.tok_emb->w);
    CHECK(lm.tr.dit.null_embedding->w == m.tr.dit.null_embedding->w);

    fs::path empty = tmpdir("loadmodel_empty");
    fs::create_directories(empty);
    LoadedModel lm2;
    CHECK_THROWS_WITH_AS(load_model(empty.string(), lm2),
                         doctest::Contains("no checkpoint found in"), std::runtime_error);
    fs::remove_all(dir);
    fs::remove_all(empty);
}

TEST_CASE("ablate refuses an empty variant list") {
    TinyModel m;
    Corpus c = tiny_corpus(m.tr.cfg, 2);
    fs::path dir = tmpdir("ablate_empty");
    CHECK_THROWS_WITH_AS(run_ablate(m.tr.cfg, m.tr.tcfg, c, c, {}, dir.string(), {}),
                         doctest::Contains("empty variant list"), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("dump_hiddens writes an index plus per-utterance latent files") {
    TinyModel m;
    const ModelConfig& cfg = m.tr.cfg;
    Corpus c = tiny_corpus(cfg, 2);
    fs::path dir = tmpdir("hiddens");
    dump_hiddens(m.tr.bb, c, dir.string());

    std::ifstream index(dir / "index.jsonl");
    REQUIRE(index.good());
    std::vector<json> entries;
    for (std::string ln; std::getline(index, ln);) entries.push_back(json::parse(ln));
    REQUIRE(entries.size() == c.utts.size());

    for (std::size_t u = 0; u < entries.size(); ++u) {
        const json& e = entries[u];
        const Utterance& utt = c.utts[u];
        const int M = utt.frames / cfg.patch_size;
        CHECK(e["id"] == utt.id);
        CHECK(e["text"] == utt.text);
        CHECK(e["label"] == "sinusoid_bank");
        CHECK(e["patches"] == M);
        CHECK(e["model_dim"] == cfg.model_dim);
        CHECK(e["fsq_dim"] == cfg.fsq_dim);
        for (const char* kind : {"up", "hfinal", "res", "preq", "lattice"}) {
            REQUIRE(e["files"].contains(kind));
            const fs::path p = dir / e["files"][kind].get<std::string>();
            REQUIRE(fs::exists(p));
            std::vector<float> data;
            auto [rows, cols] = read_latents(p.string(), data);
            CHECK(rows == M);
            const bool narrow = std::strcmp(kind, "preq") == 0 ||
                                std::strcmp(kind, "lattice") == 0;
            CHECK(cols == (narrow ? cfg.fsq_dim : cfg.model_dim));
        }
    }

    // the dumped skeleton matches a fresh forward bitwise
    const Utterance& u0 = c.utts[0];
    SeqBatch b = batch_for(cfg, u0.text, u0.latents, u0.frames);
    Tape t;
    BackboneOut out = m.tr.bb.forward(t, b);
    std::vector<float> up;
    read_latents((dir / entries[0]["files"]["up"].get<std::string>()).string(), up);
    REQUIRE(up.size() == out.up->v.size());
    CHECK(std::memcmp(up.data(), out.up->v.data(), up.size() * 4) == 0);

    // lattice rows actually sit on the lattice
    std::vector<float> lat;
    read_latents((dir / entries[0]["files"]["lattice"].get<std::string>()).string(), lat);
    const FsqLattice& l = m.tr.bb.fsq.lat;
    for (float v : lat) {
        const float steps = v / l.delta;
        CHECK(steps == static_cast<float>(static_cast<int>(std::lround(steps))));
        CHECK(std::fabs(v) <= l.L * l.delta + 1e-9f);
    }
    fs::remove_all(dir);
}
