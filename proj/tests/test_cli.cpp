// SPDX-License-Identifier: Apache-2.0
#include "support.hpp"

#include "clipada/metrics.hpp"
#include "clipada/trainer.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace clipada;
using namespace clipada::test;

namespace {

const std::string kCli = CLIPADA_CLI_PATH;

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Small toy run on top of a preset.
fs::path write_small_config(const fs::path& dir, const std::string& preset_name) {
    const fs::path p = dir / "small.yaml";
    std::ofstream(p) << "preset: " << preset_name << "\n"
                     << "backend: toy:0\n"
                        "image_size: 32\n"
                        "dims: {patch_size: 8, raw_dim: 8, shared_dim: 8, text_token_dim: 8}\n"
                        "train: {epochs: 3, lr_milestones: [2], batch_size: 2, lr: 0.01}\n"
                        "inference: {k_top: 16, sigma: 1.0}\n";
    return p;
}

int cli(const std::string& args) { return run(kCli + " --log-level off " + args + " > /dev/null 2>&1"); }

std::vector<std::string> list_dir(const fs::path& dir) {
    std::vector<std::string> out;
    if (!fs::exists(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir)) out.push_back(e.path().filename().string());
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace

TEST_CASE("train with the mvtec preset on the toy backend") {
    const auto dir = temp_dir("cli_preset");
    const auto root = write_mvtec_fixture(dir / "data", {"bottle"});
    const auto out = dir / "run";
    CHECK(cli("train --config presets/mvtec --backend toy:0 --epochs 2 --dataset-root " + q(root) + " --out-dir " +
              q(out)) == 0);
    CHECK(fs::exists(out / "checkpoint.bin"));
    CHECK(fs::exists(out / "config.yaml"));
    const Config stored = read_checkpoint_config(out / "checkpoint.bin");
    CHECK(stored.train.epochs == 2);
    CHECK(stored.train.lr_milestones.empty());
    CHECK(stored.train.lr == 2e-4);
}

TEST_CASE("train, eval and predict") {
    const auto dir = temp_dir("cli_flow");
    const auto root = write_mvtec_fixture(dir / "data", {"bottle", "cable"});
    const auto cfg = write_small_config(dir, "mvtec");
    const auto out = dir / "run";
    const std::string common = "--config " + q(cfg) + " --dataset-root " + q(root) + " --out-dir " + q(out);

    REQUIRE(cli("train " + common) == 0);
    const auto ckpt = out / "checkpoint.bin";
    REQUIRE(fs::exists(ckpt));
    const std::string log = slurp(out / "train_log.csv");
    CHECK(log.rfind("epoch,step,loss,lr\n", 0) == 0);
    // 6 train images, batch 2: 3 steps per epoch for 3 epochs.
    CHECK(std::count(log.begin(), log.end(), '\n') == 1 + 9);

    SUBCASE("resume to a longer schedule") {
        CHECK(cli("train " + common + " --epochs 4 --resume " + q(ckpt)) == 0);
        CHECK(read_checkpoint_config(ckpt).train.epochs == 4);
        const std::string more = slurp(out / "train_log.csv");
        CHECK(std::count(more.begin(), more.end(), '\n') == 1 + 12);
        CHECK(cli("train " + common + " --n-refine 2 --resume " + q(ckpt)) == 2);
    }

    SUBCASE("eval matches a direct metrics call") {
        REQUIRE(cli("eval --checkpoint " + q(ckpt) + " --out-dir " + q(out)) == 0);
        const auto backend = make_backend(read_checkpoint_config(ckpt));
        const TrainState state = load_checkpoint(ckpt, *backend);
        const Detector det = make_detector(state, *backend);
        const DatasetIndex index = index_mvtec(root);
        std::map<fs::path, ScoreMap> scores;
        for (const auto& r : index.split(Split::test)) scores[r.path] = det.score(load_image(r.path, 32, 32));
        write_csv(evaluate(index, scores), dir / "direct.csv");
        CHECK(slurp(out / "metrics.csv") == slurp(dir / "direct.csv"));
        CHECK(fs::exists(out / "metrics.txt"));
    }

    SUBCASE("eval needs a test split") {
        const auto bare = dir / "bare";
        fs::create_directories(bare / "bottle" / "train");
        fs::copy(root / "bottle" / "train", bare / "bottle" / "train", fs::copy_options::recursive);
        CHECK(cli("eval --checkpoint " + q(ckpt) + " --dataset-root " + q(bare) + " --out-dir " + q(dir / "e")) == 3);
    }

    SUBCASE("predict is deterministic") {
        const std::string imgs = q(root / "bottle" / "test" / "crack" / "000.png") + " " +
                                 q(root / "cable" / "test" / "good" / "000.png");
        REQUIRE(cli("predict --checkpoint " + q(ckpt) + " --out-dir " + q(dir / "p1") + " " + imgs) == 0);
        REQUIRE(cli("predict --checkpoint " + q(ckpt) + " --out-dir " + q(dir / "p2") + " " + imgs) == 0);
        CHECK(slurp(dir / "p1" / "scores.csv") == slurp(dir / "p2" / "scores.csv"));
        CHECK(list_dir(dir / "p1" / "overlays") == std::vector<std::string>{"0000_000.png", "0001_000.png"});
        CHECK(slurp(dir / "p1" / "overlays" / "0000_000.png") == slurp(dir / "p2" / "overlays" / "0000_000.png"));
        CHECK(cli("predict --checkpoint " + q(ckpt) + " --out-dir " + q(dir / "p3") + " " +
                  q(dir / "missing.png")) == 3);
        CHECK(cli("predict --checkpoint " + q(dir / "missing.bin") + " --out-dir " + q(dir / "p3") + " " + imgs) ==
              3);
    }
}

TEST_CASE("train error paths") {
    const auto dir = temp_dir("cli_errors");
    const auto cfg = write_small_config(dir, "mvtec");
    CHECK(cli("train --config " + q(cfg) + " --dataset-root " + q(dir / "nowhere") + " --out-dir " + q(dir / "o")) ==
          3);
    const auto root = write_mvtec_fixture(dir / "data", {"bottle"});
    CHECK(cli("train --config " + q(cfg) + " --dataset-root " + q(root) + " --fraction 0 --out-dir " + q(dir / "o")) ==
          2);
    CHECK(cli("train --config " + q(dir / "absent.yaml") + " --out-dir " + q(dir / "o")) == 2);
    CHECK(cli("train --bogus-flag") == 2);
    CHECK(cli("") == 2);
}

TEST_CASE("fraction subsamples the train split") {
    const auto dir = temp_dir("cli_fraction");
    const auto root = write_visa_fixture(dir / "data", {"candle", "pcb1"});
    const auto cfg = write_small_config(dir, "visa");
    const auto out = dir / "run";
    // 3 train images per category, fraction 0.34 keeps one each: 2 images, 1 step per epoch.
    REQUIRE(cli("train --config " + q(cfg) + " --dataset-root " + q(root) + " --fraction 0.34 --out-dir " + q(out)) ==
            0);
    const std::string log = slurp(out / "train_log.csv");
    CHECK(std::count(log.begin(), log.end(), '\n') == 1 + 3);
    CHECK(read_checkpoint_config(out / "checkpoint.bin").dataset.fraction == 0.34);
}

TEST_CASE("synth-preview") {
    const auto dir = temp_dir("cli_synth");
    const auto root = write_mvtec_fixture(dir / "data", {"bottle"});
    const auto cfg = write_small_config(dir, "mvtec");
    const std::string common = "synth-preview --config " + q(cfg) + " --dataset-root " + q(root);

    CHECK(cli(common + " --count 0 --out-dir " + q(dir / "none")) == 0);
    CHECK(list_dir(dir / "none").empty());

    REQUIRE(cli(common + " --count 3 --seed 5 --out-dir " + q(dir / "a")) == 0);
    REQUIRE(cli(common + " --count 3 --seed 5 --out-dir " + q(dir / "b")) == 0);
    const auto files = list_dir(dir / "a");
    CHECK(files.size() == 9);
    CHECK(files == list_dir(dir / "b"));
    for (const auto& f : files) CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
    CHECK(std::find(files.begin(), files.end(), "synth_0000_overlay.png") != files.end());

    // Masks are strictly 0/255 and never empty.
    for (int i = 0; i < 3; ++i) {
        const auto path = dir / "a" / ("synth_000" + std::to_string(i) + "_mask.png");
        const ImageTensor m = load_image(path, 32, 32);
        bool any = false;
        for (double v : m.channels[0].reshaped()) {
            CHECK((v == 0.0 || v == 1.0));
            any = any || v == 1.0;
        }
        CHECK(any);
    }

    CHECK(cli(common + " --count -1 --out-dir " + q(dir / "c")) == 2);
    CHECK(cli("synth-preview --config " + q(cfg) + " --count 2 --out-dir " + q(dir / "d") + " " +
              q(dir / "missing.png")) == 3);
}

TEST_CASE("inspect-config") {
    const auto dir = temp_dir("cli_inspect");
    CHECK(run(kCli + " inspect-config --config presets/visa --backend toy:3 > " + q(dir / "out.yaml")) == 0);
    const Config c = parse_config(slurp(dir / "out.yaml"), default_config());
    CHECK(c.train.epochs == 500);
    CHECK(c.backend.toy_seed == 3);

    std::ofstream(dir / "bad.yaml") << "train:\n  nonsense: 1\n";
    CHECK(cli("inspect-config --config " + q(dir / "bad.yaml")) == 2);
    CHECK(cli("inspect-config --backend resnet:1") == 2);
}
