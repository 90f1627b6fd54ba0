// SPDX-License-Identifier: Apache-2.0
#include "support.hpp"

#include "clipada/config.hpp"
#include "clipada/errors.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>

using namespace clipada;
using namespace clipada::test;

TEST_CASE("presets") {
    const Config m = preset("mvtec");
    CHECK(m.train.epochs == 800);
    CHECK(m.train.lr == 2e-4);
    CHECK(m.train.lr_milestones == std::vector<int>{400, 700});
    CHECK(m.train.lr_decay == 0.2);
    CHECK(m.train.batch_size == 16);
    CHECK(m.train.lambda_refine == 1.0);
    CHECK(m.model.n_refine == 1);
    CHECK(m.image_size == 224);
    CHECK(m.inference.k_top == 500);
    CHECK(m.inference.sigma == 4.0);
    CHECK(m.synthesis.anomaly_probability == 0.5);
    CHECK(m.freeze_backbone);
    CHECK(m.dataset.name == "mvtec");

    const Config v = preset("visa");
    CHECK(v.train.epochs == 500);
    CHECK(v.train.lr == 4e-4);
    CHECK(v.train.lr_milestones == std::vector<int>{250});
    CHECK(v.train.batch_size == 64);
    CHECK(v.dataset.name == "visa");

    CHECK_THROWS_AS(preset("kolektor"), ConfigError);
}

TEST_CASE("step schedule") {
    const TrainConfig t = preset("mvtec").train;
    CHECK(learning_rate(t, 0) == 2e-4);
    CHECK(learning_rate(t, 399) == 2e-4);
    CHECK(learning_rate(t, 400) == doctest::Approx(4e-5).epsilon(1e-12));
    CHECK(learning_rate(t, 699) == doctest::Approx(4e-5).epsilon(1e-12));
    CHECK(learning_rate(t, 700) == doctest::Approx(8e-6).epsilon(1e-12));
    CHECK(learning_rate(t, 799) == doctest::Approx(8e-6).epsilon(1e-12));

    const TrainConfig v = preset("visa").train;
    CHECK(learning_rate(v, 249) == 4e-4);
    CHECK(learning_rate(v, 250) == doctest::Approx(8e-5).epsilon(1e-12));

    // Non-increasing everywhere.
    for (int e = 1; e < 800; ++e) CHECK(learning_rate(t, e) <= learning_rate(t, e - 1));
}

TEST_CASE("parse overrides and errors") {
    const Config base = default_config();
    const Config c = parse_config(R"(
backend: toy:7
image_size: 64
model:
  n_refine: 2
train:
  lambda: 0.5
  lr_milestones: [3]
  epochs: 5
inference:
  k_top: 9
)",
                                  base);
    CHECK(c.backend.kind == BackendSpec::Kind::toy);
    CHECK(c.backend.toy_seed == 7);
    CHECK(c.image_size == 64);
    CHECK(c.model.n_refine == 2);
    CHECK(c.train.lambda_refine == 0.5);
    CHECK(c.train.epochs == 5);
    CHECK(c.inference.k_top == 9);
    CHECK(c.train.batch_size == base.train.batch_size);

    const Config p = parse_config("preset: visa\ntrain:\n  epochs: 10\n  lr_milestones: [5]\n", base);
    CHECK(p.train.lr == 4e-4);
    CHECK(p.train.epochs == 10);

    CHECK_THROWS_AS(parse_config("bogus: 1\n", base), ConfigError);
    CHECK_THROWS_AS(parse_config("train:\n  lrr: 1\n", base), ConfigError);
    CHECK_THROWS_AS(parse_config("train: [1, 2]\n", base), ConfigError);
    CHECK_THROWS_AS(parse_config("train:\n  epochs: many\n", base), ConfigError);
    CHECK_THROWS_AS(parse_config("train:\n  epochs: 0\n", base), ConfigError);
    CHECK_THROWS_AS(parse_config("train:\n  batch_size: 0\n", base), ConfigError);
    CHECK_THROWS_AS(parse_config("model:\n  n_refine: -1\n", base), ConfigError);
    CHECK_THROWS_AS(parse_config("dataset:\n  fraction: 0\n", base), ConfigError);
    CHECK_THROWS_AS(parse_config("dataset:\n  fraction: 1.5\n", base), ConfigError);
    CHECK_THROWS_AS(parse_config("synthesis:\n  anomaly_probability: 2\n", base), ConfigError);
    CHECK_THROWS_AS(parse_config("inference:\n  sigma: -1\n", base), ConfigError);
    CHECK_THROWS_AS(parse_config("inference:\n  k_top: 0\n", base), ConfigError);
    CHECK_THROWS_AS(parse_config("{unclosed", base), ConfigError);
}

TEST_CASE("frozen backbone is the only mode") {
    CHECK(parse_config("freeze_backbone: true\n", default_config()).freeze_backbone);
    CHECK_THROWS_AS(parse_config("freeze_backbone: false\n", default_config()), ConfigError);
}

TEST_CASE("yaml round trip") {
    Config c = toy_config(8, 8, 32, 2);
    c.train.lr = 1.0 / 3.0;
    c.synthesis.opacity_min = 0.123456789012345;
    c.dataset.root = "/tmp/some where";
    c.dataset.fraction = 0.25;
    c.prompt.template_text = "a photo of a {} object";
    const Config back = parse_config(to_yaml(c), default_config());
    CHECK(to_yaml(back) == to_yaml(c));
    CHECK(back.train.lr == c.train.lr);
    CHECK(back.synthesis.opacity_min == c.synthesis.opacity_min);
    CHECK(back.dataset.root == c.dataset.root);
    CHECK(back.prompt == c.prompt);
    CHECK(back.backend == c.backend);
}

TEST_CASE("backend spec") {
    const BackendSpec t = BackendSpec::parse("toy:42");
    CHECK(t.kind == BackendSpec::Kind::toy);
    CHECK(t.toy_seed == 42);
    CHECK(t.str() == "toy:42");
    const BackendSpec p = BackendSpec::parse("pretrained:/models/clip");
    CHECK(p.kind == BackendSpec::Kind::pretrained);
    CHECK(p.weights == "/models/clip");
    CHECK(BackendSpec::parse(p.str()) == p);
    CHECK_THROWS_AS(BackendSpec::parse("toy:x"), ConfigError);
    CHECK_THROWS_AS(BackendSpec::parse("resnet:1"), ConfigError);
    CHECK_THROWS_AS(BackendSpec::parse("pretrained:"), ConfigError);

    Config c = default_config();
    c.backend = BackendSpec::parse("pretrained:" + std::string(CLIPADA_FIXTURE_DIR) + "/tiny_clip");
    c.image_size = 64;
    CHECK_THROWS_AS(make_backend(c), ConfigError);  // stage 7 of a 3-block encoder
    c.dims.feature_stage = 2;
    CHECK(make_backend(c)->descriptor().patch_size == 16);
    c.backend = BackendSpec::parse("pretrained:no-such-model-anywhere");
    CHECK_THROWS_AS(make_backend(c), ConfigError);
}

TEST_CASE("load_config resolution") {
    CHECK(load_config("visa").train.epochs == 500);
    CHECK(load_config("presets/visa").train.batch_size == 64);

    const auto dir = temp_dir("config_load");
    std::ofstream(dir / "run.yaml") << "preset: visa\ntrain:\n  batch_size: 8\n";
    CHECK(load_config((dir / "run.yaml").string()).train.batch_size == 8);
    CHECK(load_config((dir / "run").string()).train.batch_size == 8);
    CHECK(load_config((dir / "run").string()).train.lr == 4e-4);
    CHECK_THROWS_AS(load_config((dir / "missing").string()), ConfigError);
}
