// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a YAML file, optionally starting from a named preset.

#pragma once

#include "clipada/backbone.hpp"
#include "clipada/synthesis.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace clipada {

struct BackendSpec {
    enum class Kind { toy, pretrained };
    Kind kind = Kind::toy;
    std::uint64_t toy_seed = 0;
    std::string weights;  ///< directory or cache id for pretrained

    /// "toy:<seed>" or "pretrained:<path-or-id>".
    static BackendSpec parse(const std::string& text);
    [[nodiscard]] std::string str() const;
    bool operator==(const BackendSpec&) const = default;
};

struct PromptConfig {
    std::string template_text;
    int length = 4;  ///< number of learnable vectors
    int insert_position = 4;
    double init_std = 0.02;
    bool operator==(const PromptConfig&) const = default;
};

struct ModelConfig {
    int n_refine = 1;
    bool detach_attention = false;
    bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
    int epochs = 800;
    double lr = 2e-4;
    std::vector<int> lr_milestones{400, 700};
    double lr_decay = 0.2;
    int batch_size = 16;
    double lambda_refine = 1.0;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;
    /// 0 means one pass over the train split per epoch.
    int steps_per_epoch = 0;

    void validate() const;
};

struct DatasetConfig {
    std::string name = "mvtec";
    std::filesystem::path root;
    double fraction = 1.0;
    std::uint64_t seed = 0;
};

struct InferenceConfig {
    int k_top = 500;
    double sigma = 4.0;
};

struct Config {
    BackendSpec backend;
    bool freeze_backbone = true;
    BackendDescriptor dims;  ///< toy backend dims; pretrained reads its own
    int image_size = 224;
    PromptConfig prompt;
    ModelConfig model;
    TrainConfig train;
    SynthesisConfig synthesis;
    DatasetConfig dataset;
    InferenceConfig inference;

    /// Throws ConfigError on any invalid value.
    void validate() const;
};

Config default_config();
/// Built-in "mvtec" or "visa" preset.
Config preset(const std::string& name);

/// Parses YAML text on top of `base`. Unknown keys are errors.
Config parse_config(const std::string& yaml, const Config& base);
/// A file path, a path without ".yaml", or a preset name such as
/// "presets/mvtec" / "visa".
Config load_config(const std::string& path_or_preset);
std::string to_yaml(const Config& config);

/// Learning rate for a 0-based epoch under the step-decay schedule.
double learning_rate(const TrainConfig& train, int epoch);

/// Instantiates the backbone. Pretrained ids that are not directories are
/// looked up under $CLIP_ADA_CACHE.
std::unique_ptr<Backend> make_backend(const Config& config);

} // namespace clipada
