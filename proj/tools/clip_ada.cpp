// SPDX-License-Identifier: Apache-2.0
//
// clip_ada: train / eval / predict / synth-preview / inspect-config.
// Exit codes: 0 ok, 2 config, 3 data, 4 runtime.

#include "clipada/config.hpp"
#include "clipada/datasets.hpp"
#include "clipada/errors.hpp"
#include "clipada/inference.hpp"
#include "clipada/metrics.hpp"
#include "clipada/synthesis.hpp"
#include "clipada/trainer.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace clipada;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitRuntime = 4;

struct Overrides {
    std::string config = "presets/mvtec";
    std::optional<std::string> backend;
    std::optional<std::string> dataset_root;
    std::optional<double> fraction;
    std::optional<std::uint64_t> seed;
    std::optional<int> n_refine;
    std::optional<int> k_top;
    std::optional<double> sigma;
    std::optional<int> epochs;
    std::string out_dir = "runs/clip_ada";
};

void apply(const Overrides& o, Config& c) {
    if (o.backend) c.backend = BackendSpec::parse(*o.backend);
    if (o.dataset_root) c.dataset.root = *o.dataset_root;
    if (o.fraction) c.dataset.fraction = *o.fraction;
    if (o.seed) {
        c.train.seed = *o.seed;
        c.synthesis.seed = *o.seed;
        c.dataset.seed = *o.seed;
    }
    if (o.n_refine) c.model.n_refine = *o.n_refine;
    if (o.k_top) c.inference.k_top = *o.k_top;
    if (o.sigma) c.inference.sigma = *o.sigma;
    if (o.epochs) {
        c.train.epochs = *o.epochs;
        // Milestones past a shortened run are dropped.
        std::erase_if(c.train.lr_milestones, [&](int m) { return m >= c.train.epochs; });
    }
    c.validate();
}

Config resolved_config(const Overrides& o) {
    Config c = load_config(o.config);
    apply(o, c);
    return c;
}

DatasetIndex load_index(const Config& c) {
    if (c.dataset.root.empty()) throw DataError("no dataset root (set dataset.root or --dataset-root)");
    return index_dataset(c.dataset.name, c.dataset.root);
}

int cmd_train(const Overrides& o, const std::optional<std::string>& resume_from) {
    Config config = resolved_config(o);
    const DatasetIndex full = load_index(config);
    const DatasetIndex index = subsample(full, config.dataset.fraction, config.dataset.seed);
    spdlog::info("{} train images in {} categories (fraction {})", index.count(Split::train), index.categories.size(),
                 config.dataset.fraction);
    const auto backend = make_backend(config);
    const RecordSource images(index, config.image_size);

    TrainState state;
    if (resume_from) {
        state = load_checkpoint(*resume_from, *backend);
        check_resume_compatible(state.config, config);
        state.config.train.epochs = config.train.epochs;
        state.config.train.lr_milestones = config.train.lr_milestones;
        spdlog::info("resuming from epoch {}", state.epoch);
    } else {
        state = start_training(config, *backend);
    }

    fs::create_directories(o.out_dir);
    std::ofstream log(o.out_dir + "/train_log.csv", resume_from ? std::ios::app : std::ios::trunc);
    if (!resume_from) log << "epoch,step,loss,lr\n";
    TrainOptions options;
    options.on_step = [&](const StepLog& s) {
        log << s.epoch << ',' << s.step << ',' << s.loss << ',' << s.lr << '\n';
    };
    state = resume(std::move(state), images, *backend, options);

    const std::string ckpt = o.out_dir + "/checkpoint.bin";
    save_checkpoint(ckpt, state);
    std::ofstream(o.out_dir + "/config.yaml") << to_yaml(state.config);
    spdlog::info("checkpoint written to {}", ckpt);
    std::cout << ckpt << '\n';
    return 0;
}

struct Loaded {
    Config config;
    std::unique_ptr<Backend> backend;
    TrainState state;
};

Loaded load_trained(const Overrides& o, const std::string& checkpoint) {
    Loaded l;
    l.config = read_checkpoint_config(checkpoint);
    if (o.backend) l.config.backend = BackendSpec::parse(*o.backend);
    l.backend = make_backend(l.config);
    l.state = load_checkpoint(checkpoint, *l.backend);
    if (o.k_top) l.state.config.inference.k_top = *o.k_top;
    if (o.sigma) l.state.config.inference.sigma = *o.sigma;
    if (o.dataset_root) l.state.config.dataset.root = *o.dataset_root;
    l.state.config.validate();
    return l;
}

int cmd_eval(const Overrides& o, const std::string& checkpoint) {
    Loaded l = load_trained(o, checkpoint);
    const Config& config = l.state.config;
    const DatasetIndex index = load_index(config);
    const Detector detector = make_detector(l.state, *l.backend);
    Evaluator evaluator(index);
    const int size = config.image_size;
    for (const auto& r : index.records) {
        if (r.split != Split::test) continue;
        const LoadedRecord data = load_record(r, size, size);
        evaluator.add(r, detector.score(data.image), data.mask);
    }
    const EvaluationReport report = evaluator.finish();
    fs::create_directories(o.out_dir);
    write_csv(report, o.out_dir + "/metrics.csv");
    const std::string table = format_table(report);
    std::ofstream(o.out_dir + "/metrics.txt") << table;
    std::cout << table;
    return 0;
}

int cmd_predict(const Overrides& o, const std::string& checkpoint, const std::vector<std::string>& paths) {
    if (paths.empty()) throw ConfigError("predict needs at least one image path");
    Loaded l = load_trained(o, checkpoint);
    const Detector detector = make_detector(l.state, *l.backend);
    const int size = l.state.config.image_size;
    fs::create_directories(fs::path(o.out_dir) / "overlays");
    std::ofstream csv(o.out_dir + "/scores.csv");
    csv << "index,path,score\n";
    csv.precision(12);
    for (std::size_t i = 0; i < paths.size(); ++i) {
        const ImageTensor image = load_image(paths[i], size, size);
        const ScoreMap s = detector.score(image);
        char prefix[16];
        std::snprintf(prefix, sizeof prefix, "%04zu_", i);
        save_overlay(fs::path(o.out_dir) / "overlays" / (prefix + fs::path(paths[i]).stem().string() + ".png"), image,
                     s.pixels);
        csv << i << ',' << paths[i] << ',' << s.image_score << '\n';
        std::cout << paths[i] << ' ' << s.image_score << '\n';
    }
    return 0;
}

int cmd_synth_preview(const Overrides& o, int count, const std::vector<std::string>& paths) {
    if (count < 0) throw ConfigError("count must be >= 0");
    const Config config = resolved_config(o);
    if (count == 0) return 0;
    std::vector<fs::path> sources(paths.begin(), paths.end());
    if (sources.empty()) {
        for (const auto& r : load_index(config).split(Split::train)) sources.push_back(r.path);
    }
    if (sources.empty()) throw DataError("no source images");
    const auto textures = make_texture_source(config.synthesis);
    const int size = config.image_size;
    // Previews always show a perturbed sample.
    SynthesisConfig cfg = config.synthesis;
    cfg.anomaly_probability = 1.0;
    Rng rng(cfg.seed);
    fs::create_directories(o.out_dir);
    for (int i = 0; i < count; ++i) {
        const ImageTensor source = load_image(sources[static_cast<std::size_t>(i) % sources.size()], size, size);
        const SyntheticSample s = make_sample(source, cfg, config.dims.patch_size, *textures, rng);
        char stem[32];
        std::snprintf(stem, sizeof stem, "synth_%04d", i);
        const fs::path base = fs::path(o.out_dir) / stem;
        save_image(base.string() + "_image.png", s.image);
        save_mask(base.string() + "_mask.png", s.mask_full);
        save_overlay(base.string() + "_overlay.png", s.image, s.mask_full.cast<double>());
    }
    spdlog::info("{} previews written to {}", count, o.out_dir);
    return 0;
}

int cmd_inspect(const Overrides& o) {
    std::cout << to_yaml(resolved_config(o));
    return 0;
}

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config, "config file or preset name (mvtec, visa)");
    cmd->add_option("--backend", o.backend, "toy:<seed> or pretrained:<path-or-id>");
    cmd->add_option("--dataset-root", o.dataset_root, "dataset root directory");
    cmd->add_option("--fraction", o.fraction, "train fraction in (0, 1]");
    cmd->add_option("--seed", o.seed, "seed for training, synthesis and subsampling");
    cmd->add_option("--n-refine", o.n_refine, "number of refinement stages");
    cmd->add_option("--out-dir", o.out_dir, "output directory");
    cmd->add_option("--k-top", o.k_top, "top-K pixels averaged into the image score");
    cmd->add_option("--sigma", o.sigma, "Gaussian smoothing sigma in pixels");
    cmd->add_option("--epochs", o.epochs, "number of epochs");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"CLIP-based unified anomaly detection"};
    app.require_subcommand(1);
    std::string log_level = "info";
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error, off");

    Overrides o;
    std::optional<std::string> resume_from;
    std::string checkpoint;
    std::vector<std::string> paths;
    int count = 8;

    auto* train = app.add_subcommand("train", "train prompts and projections");
    add_common(train, o);
    train->add_option("--resume", resume_from, "checkpoint to continue from");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    add_common(eval, o);
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();

    auto* predict = app.add_subcommand("predict", "score images and write heatmap overlays");
    add_common(predict, o);
    predict->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    predict->add_option("images", paths, "image files");

    auto* synth = app.add_subcommand("synth-preview", "write synthetic anomaly samples");
    add_common(synth, o);
    synth->add_option("--count", count, "number of samples");
    synth->add_option("images", paths, "source images (default: dataset train split)");

    auto* inspect = app.add_subcommand("inspect-config", "print the resolved config");
    add_common(inspect, o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }
    spdlog::set_level(spdlog::level::from_str(log_level));

    try {
        if (*train) return cmd_train(o, resume_from);
        if (*eval) return cmd_eval(o, checkpoint);
        if (*predict) return cmd_predict(o, checkpoint, paths);
        if (*synth) return cmd_synth_preview(o, count, paths);
        if (*inspect) return cmd_inspect(o);
    } catch (const ConfigError& e) {
        spdlog::error("config error: {}", e.what());
        return kExitConfig;
    } catch (const TokenizerError& e) {
        spdlog::error("config error: {}", e.what());
        return kExitConfig;
    } catch (const DataError& e) {
        spdlog::error("data error: {}", e.what());
        return kExitData;
    } catch (const CheckpointError& e) {
        spdlog::error("data error: {}", e.what());
        return kExitData;
    } catch (const std::exception& e) {
        spdlog::error("runtime error: {}", e.what());
        return kExitRuntime;
    }
    return kExitRuntime;
}
