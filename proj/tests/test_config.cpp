#include <cmath>
#include <string>

#include "doctest.h"
#include "patchflow/config.hpp"

using namespace patchflow;

TEST_CASE("defaults validate and serialization round-trips") {
    ModelConfig m;
    TrainConfig t;
    m.validate();
    t.validate();
    const std::string text = serialize_config(m, t);
    ModelConfig m2;
    TrainConfig t2;
    m2.model_dim = 1; // scribble so the parse has to restore everything
    t2.peak_lr = 0;
    parse_config_text(text, m2, t2);
    CHECK(serialize_config(m2, t2) == text);
}

TEST_CASE("config text: comments, blanks, and line-numbered errors") {
    ModelConfig m;
    TrainConfig t;
    parse_config_text("# comment\n\nmodel_dim = 96\npeak_lr = 2e-4\n", m, t);
    CHECK(m.model_dim == 96);
    CHECK(t.peak_lr == doctest::Approx(2e-4));

    CHECK_THROWS_AS(parse_config_text("model_dim = 64\nnot_a_key = 1\n", m, t), ConfigError);
    try {
        parse_config_text("model_dim = 64\nnot_a_key = 1\n", m, t);
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("2") != std::string::npos);
        CHECK(std::string(e.what()).find("not_a_key") != std::string::npos);
    }
}

TEST_CASE("validate names the offending key") {
    ModelConfig m;
    m.fsq_levels = 8; // must be odd
    CHECK_THROWS_WITH_AS(m.validate(), doctest::Contains("fsq_levels"), ConfigError);
    m = ModelConfig{};
    m.patch_size = 0;
    CHECK_THROWS_WITH_AS(m.validate(), doctest::Contains("patch_size"), ConfigError);
    TrainConfig t;
    t.peak_lr = 0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("warmup-stable-decay schedule hits its boundary values") {
    TrainConfig t;
    t.peak_lr = 1e-3;
    t.final_lr = 1e-5;
    t.warmup_steps = 100;
    t.stable_steps = 300;
    t.decay_steps = 200;

    CHECK(lr_at_step(t, 0) == 0.0);
    CHECK(lr_at_step(t, 50) == doctest::Approx(5e-4));
    CHECK(lr_at_step(t, 100) == doctest::Approx(1e-3));
    CHECK(lr_at_step(t, 250) == doctest::Approx(1e-3));
    CHECK(lr_at_step(t, 400) == doctest::Approx(1e-3));
    // geometric midpoint of a log-linear decay
    CHECK(lr_at_step(t, 500) == doctest::Approx(std::sqrt(1e-3 * 1e-5)).epsilon(1e-6));
    CHECK(lr_at_step(t, 600) == t.final_lr); // exact at the endpoint
    CHECK(lr_at_step(t, 10000) == t.final_lr);
    // monotone through the decay
    for (std::int64_t s = 400; s < 600; ++s)
        CHECK(lr_at_step(t, s) >= lr_at_step(t, s + 1));
}

TEST_CASE("batch size doubles when the decay phase begins") {
    TrainConfig t;
    t.warmup_steps = 10;
    t.stable_steps = 20;
    t.decay_steps = 5;
    t.batch_patches = 64;
    CHECK(batch_patches_at(t, 0) == 64);
    CHECK(batch_patches_at(t, 29) == 64);
    CHECK(batch_patches_at(t, 30) == 128);
    CHECK(batch_patches_at(t, 35) == 128);
}

TEST_CASE("planned_steps honors the override") {
    TrainConfig t;
    t.warmup_steps = 10;
    t.stable_steps = 20;
    t.decay_steps = 5;
    CHECK(t.planned_steps() == 35);
    t.total_steps = 7;
    CHECK(t.planned_steps() == 7);
}

TEST_CASE("variant parsing covers every spelling") {
    int k = 0;
    CHECK(parse_variant("none", &k) == Variant::none);
    CHECK(parse_variant("default", &k) == Variant::none);
    CHECK(parse_variant("", &k) == Variant::none);
    CHECK(parse_variant("no_fsq", &k) == Variant::no_fsq);
    CHECK(parse_variant("no_ralm", &k) == Variant::no_ralm);
    CHECK(parse_variant("no_acoustic_input", &k) == Variant::no_acoustic_input);
    CHECK(parse_variant("skeleton_only", &k) == Variant::skeleton_only);

    CHECK(parse_variant("fsq_dim_override:8", &k) == Variant::fsq_dim_override);
    CHECK(k == 8);
    CHECK(parse_variant("d16", &k) == Variant::fsq_dim_override);
    CHECK(k == 16);
    CHECK_THROWS_AS(parse_variant("bogus", &k), ConfigError);
}

TEST_CASE("variant names round-trip through the config text") {
    ModelConfig m;
    TrainConfig t;
    t.variant = Variant::skeleton_only;
    const std::string text = serialize_config(m, t);
    CHECK(text.find("skeleton_only") != std::string::npos);
    TrainConfig t2;
    ModelConfig m2;
    parse_config_text(text, m2, t2);
    CHECK(t2.variant == Variant::skeleton_only);
}

TEST_CASE("derived dims follow model_dim unless pinned") {
    ModelConfig m;
    m.model_dim = 128;
    CHECK(m.heads() == 4);
    CHECK(m.ffn() == 512);
    CHECK(m.stop_mlp_dim() == 128);
    m.n_heads = 2;
    m.ffn_dim = 96;
    CHECK(m.heads() == 2);
    CHECK(m.ffn() == 96);
    CHECK(m.fsq_L() == (m.fsq_levels - 1) / 2);
}
