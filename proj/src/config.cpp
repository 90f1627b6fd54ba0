// SPDX-License-Identifier: Apache-2.0
#include "clipada/config.hpp"

#include "clipada/errors.hpp"
#include "clipada/prompting.hpp"

#include <yaml-cpp/yaml.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace clipada {

namespace fs = std::filesystem;

BackendSpec BackendSpec::parse(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) throw ConfigError("backend must be 'toy:<seed>' or 'pretrained:<path>': " + text);
    const std::string kind = text.substr(0, colon);
    const std::string value = text.substr(colon + 1);
    BackendSpec spec;
    if (kind == "toy") {
        spec.kind = Kind::toy;
        try {
            std::size_t used = 0;
            spec.toy_seed = std::stoull(value, &used);
            if (used != value.size()) throw std::invalid_argument(value);
        } catch (const std::exception&) {
            throw ConfigError("toy backend seed is not an unsigned integer: " + value);
        }
    } else if (kind == "pretrained") {
        if (value.empty()) throw ConfigError("pretrained backend needs a path or id");
        spec.kind = Kind::pretrained;
        spec.weights = value;
    } else {
        throw ConfigError("unknown backend kind '" + kind + "'");
    }
    return spec;
}

std::string BackendSpec::str() const {
    return kind == Kind::toy ? "toy:" + std::to_string(toy_seed) : "pretrained:" + weights;
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (!(lr_decay > 0.0)) throw ConfigError("train.lr_decay must be > 0");
    for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
        if (lr_milestones[i] < 1 || lr_milestones[i] >= epochs) {
            throw ConfigError("train.lr_milestones must lie in [1, epochs)");
        }
        if (i > 0 && lr_milestones[i] <= lr_milestones[i - 1]) {
            throw ConfigError("train.lr_milestones must be strictly increasing");
        }
    }
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(lambda_refine >= 0.0)) throw ConfigError("train.lambda must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("AdamW betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("train.eps must be > 0");
    if (steps_per_epoch < 0) throw ConfigError("train.steps_per_epoch must be >= 0");
}

void Config::validate() const {
    if (!freeze_backbone) throw ConfigError("freeze_backbone: false is not supported (backbone fine-tuning)");
    if (dims.patch_size < 1 || dims.raw_dim < 1 || dims.shared_dim < 1 || dims.text_token_dim < 1) {
        throw ConfigError("dims must be positive");
    }
    if (image_size < 1 || image_size % dims.patch_size != 0) {
        throw ConfigError("image_size must be a positive multiple of the patch size");
    }
    if (prompt.template_text.empty()) throw ConfigError("prompt.template must not be empty");
    if (prompt.length < 1) throw ConfigError("prompt.length must be >= 1");
    if (prompt.insert_position < 0) throw ConfigError("prompt.insert_position must be >= 0");
    if (!(prompt.init_std > 0.0)) throw ConfigError("prompt.init_std must be > 0");
    if (model.n_refine < 0) throw ConfigError("model.n_refine must be >= 0");
    train.validate();
    synthesis.validate();
    if (dataset.name != "mvtec" && dataset.name != "visa") throw ConfigError("dataset.name must be mvtec or visa");
    if (!(dataset.fraction > 0.0 && dataset.fraction <= 1.0)) throw ConfigError("dataset.fraction must lie in (0, 1]");
    if (inference.k_top < 1) throw ConfigError("inference.k_top must be >= 1");
    if (!(inference.sigma >= 0.0)) throw ConfigError("inference.sigma must be >= 0");
}

Config default_config() {
    Config c;
    c.prompt.template_text = std::string(kDefaultTemplate);
    c.prompt.insert_position = kDefaultInsertPosition;
    return c;
}

Config preset(const std::string& name) {
    Config c = default_config();
    if (name == "mvtec") {
        c.dataset.name = "mvtec";
        c.train.epochs = 800;
        c.train.lr = 2e-4;
        c.train.lr_milestones = {400, 700};
        c.train.batch_size = 16;
    } else if (name == "visa") {
        c.dataset.name = "visa";
        c.train.epochs = 500;
        c.train.lr = 4e-4;
        c.train.lr_milestones = {250};
        c.train.batch_size = 64;
    } else {
        throw ConfigError("unknown preset '" + name + "' (expected mvtec or visa)");
    }
    c.train.lr_decay = 0.2;
    c.train.lambda_refine = 1.0;
    return c;
}

namespace {

void check_keys(const YAML::Node& node, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!node.IsMap()) throw ConfigError(where + " must be a mapping");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& kv : node) {
        const auto key = kv.first.as<std::string>();
        if (!ok.count(key)) throw ConfigError("unknown key '" + (where.empty() ? key : where + "." + key) + "'");
    }
}

template <typename T>
void read(const YAML::Node& node, const char* key, T& out, const std::string& where) {
    if (!node[key]) return;
    try {
        out = node[key].as<T>();
    } catch (const YAML::Exception&) {
        throw ConfigError("bad value for " + where + "." + key);
    }
}

BackendSpec parse_backend(const YAML::Node& n) {
    if (n.IsScalar()) return BackendSpec::parse(n.as<std::string>());
    check_keys(n, "backend", {"toy", "pretrained"});
    if (n.size() != 1) throw ConfigError("backend must name exactly one of toy / pretrained");
    if (n["toy"]) return BackendSpec::parse("toy:" + n["toy"].as<std::string>());
    return BackendSpec::parse("pretrained:" + n["pretrained"].as<std::string>());
}

} // namespace

Config parse_config(const std::string& yaml, const Config& base) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml);
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("config is not valid YAML: ") + e.what());
    }
    Config c = base;
    if (root.IsNull()) return c;
    check_keys(root, "", {"preset", "backend", "freeze_backbone", "dims", "image_size", "prompt", "model", "train",
                          "synthesis", "dataset", "inference"});
    if (root["preset"]) c = preset(root["preset"].as<std::string>());
    if (root["backend"]) c.backend = parse_backend(root["backend"]);
    read(root, "freeze_backbone", c.freeze_backbone, "");
    read(root, "image_size", c.image_size, "");
    if (const auto n = root["dims"]) {
        check_keys(n, "dims", {"patch_size", "feature_stage", "raw_dim", "shared_dim", "text_token_dim"});
        read(n, "patch_size", c.dims.patch_size, "dims");
        read(n, "feature_stage", c.dims.feature_stage, "dims");
        read(n, "raw_dim", c.dims.raw_dim, "dims");
        read(n, "shared_dim", c.dims.shared_dim, "dims");
        read(n, "text_token_dim", c.dims.text_token_dim, "dims");
    }
    if (const auto n = root["prompt"]) {
        check_keys(n, "prompt", {"template", "length", "insert_position", "init_std"});
        read(n, "template", c.prompt.template_text, "prompt");
        read(n, "length", c.prompt.length, "prompt");
        read(n, "insert_position", c.prompt.insert_position, "prompt");
        read(n, "init_std", c.prompt.init_std, "prompt");
    }
    if (const auto n = root["model"]) {
        check_keys(n, "model", {"n_refine", "detach_attention"});
        read(n, "n_refine", c.model.n_refine, "model");
        read(n, "detach_attention", c.model.detach_attention, "model");
    }
    if (const auto n = root["train"]) {
        check_keys(n, "train", {"epochs", "lr", "lr_milestones", "lr_decay", "batch_size", "lambda", "weight_decay",
                                "beta1", "beta2", "eps", "seed", "steps_per_epoch"});
        read(n, "epochs", c.train.epochs, "train");
        read(n, "lr", c.train.lr, "train");
        read(n, "lr_milestones", c.train.lr_milestones, "train");
        read(n, "lr_decay", c.train.lr_decay, "train");
        read(n, "batch_size", c.train.batch_size, "train");
        read(n, "lambda", c.train.lambda_refine, "train");
        read(n, "weight_decay", c.train.weight_decay, "train");
        read(n, "beta1", c.train.beta1, "train");
        read(n, "beta2", c.train.beta2, "train");
        read(n, "eps", c.train.eps, "train");
        read(n, "seed", c.train.seed, "train");
        read(n, "steps_per_epoch", c.train.steps_per_epoch, "train");
    }
    if (const auto n = root["synthesis"]) {
        check_keys(n, "synthesis", {"perlin_scale_min", "perlin_scale_max", "binarize_threshold", "opacity_min",
                                    "opacity_max", "anomaly_probability", "patch_threshold", "texture_dir", "seed",
                                    "max_mask_attempts"});
        auto& s = c.synthesis;
        read(n, "perlin_scale_min", s.perlin_scale_min, "synthesis");
        read(n, "perlin_scale_max", s.perlin_scale_max, "synthesis");
        read(n, "binarize_threshold", s.binarize_threshold, "synthesis");
        read(n, "opacity_min", s.opacity_min, "synthesis");
        read(n, "opacity_max", s.opacity_max, "synthesis");
        read(n, "anomaly_probability", s.anomaly_probability, "synthesis");
        read(n, "patch_threshold", s.patch_threshold, "synthesis");
        std::string dir = s.texture_dir.string();
        read(n, "texture_dir", dir, "synthesis");
        s.texture_dir = dir;
        read(n, "seed", s.seed, "synthesis");
        read(n, "max_mask_attempts", s.max_mask_attempts, "synthesis");
    }
    if (const auto n = root["dataset"]) {
        check_keys(n, "dataset", {"name", "root", "fraction", "seed"});
        read(n, "name", c.dataset.name, "dataset");
        std::string r = c.dataset.root.string();
        read(n, "root", r, "dataset");
        c.dataset.root = r;
        read(n, "fraction", c.dataset.fraction, "dataset");
        read(n, "seed", c.dataset.seed, "dataset");
    }
    if (const auto n = root["inference"]) {
        check_keys(n, "inference", {"k_top", "sigma"});
        read(n, "k_top", c.inference.k_top, "inference");
        read(n, "sigma", c.inference.sigma, "inference");
    }
    c.validate();
    return c;
}

Config load_config(const std::string& path_or_preset) {
    for (const fs::path& p : {fs::path(path_or_preset), fs::path(path_or_preset + ".yaml")}) {
        if (fs::is_regular_file(p)) {
            std::ifstream in(p);
            std::stringstream ss;
            ss << in.rdbuf();
            return parse_config(ss.str(), default_config());
        }
    }
    const std::string name = fs::path(path_or_preset).filename().string();
    if (name == "mvtec" || name == "visa") {
        Config c = preset(name);
        c.validate();
        return c;
    }
    throw ConfigError("config not found: " + path_or_preset);
}

std::string to_yaml(const Config& c) {
    YAML::Emitter e;
    e << YAML::BeginMap;
    e << YAML::Key << "backend" << YAML::Value << c.backend.str();
    e << YAML::Key << "freeze_backbone" << YAML::Value << c.freeze_backbone;
    e << YAML::Key << "dims" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "patch_size" << YAML::Value << c.dims.patch_size;
    e << YAML::Key << "feature_stage" << YAML::Value << c.dims.feature_stage;
    e << YAML::Key << "raw_dim" << YAML::Value << c.dims.raw_dim;
    e << YAML::Key << "shared_dim" << YAML::Value << c.dims.shared_dim;
    e << YAML::Key << "text_token_dim" << YAML::Value << c.dims.text_token_dim;
    e << YAML::EndMap;
    e << YAML::Key << "image_size" << YAML::Value << c.image_size;
    e << YAML::Key << "prompt" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "template" << YAML::Value << c.prompt.template_text;
    e << YAML::Key << "length" << YAML::Value << c.prompt.length;
    e << YAML::Key << "insert_position" << YAML::Value << c.prompt.insert_position;
    e << YAML::Key << "init_std" << YAML::Value << c.prompt.init_std;
    e << YAML::EndMap;
    e << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "n_refine" << YAML::Value << c.model.n_refine;
    e << YAML::Key << "detach_attention" << YAML::Value << c.model.detach_attention;
    e << YAML::EndMap;
    const auto& t = c.train;
    e << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "epochs" << YAML::Value << t.epochs;
    e << YAML::Key << "lr" << YAML::Value << t.lr;
    e << YAML::Key << "lr_milestones" << YAML::Value << YAML::Flow << t.lr_milestones;
    e << YAML::Key << "lr_decay" << YAML::Value << t.lr_decay;
    e << YAML::Key << "batch_size" << YAML::Value << t.batch_size;
    e << YAML::Key << "lambda" << YAML::Value << t.lambda_refine;
    e << YAML::Key << "weight_decay" << YAML::Value << t.weight_decay;
    e << YAML::Key << "beta1" << YAML::Value << t.beta1;
    e << YAML::Key << "beta2" << YAML::Value << t.beta2;
    e << YAML::Key << "eps" << YAML::Value << t.eps;
    e << YAML::Key << "seed" << YAML::Value << t.seed;
    e << YAML::Key << "steps_per_epoch" << YAML::Value << t.steps_per_epoch;
    e << YAML::EndMap;
    const auto& s = c.synthesis;
    e << YAML::Key << "synthesis" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "perlin_scale_min" << YAML::Value << s.perlin_scale_min;
    e << YAML::Key << "perlin_scale_max" << YAML::Value << s.perlin_scale_max;
    e << YAML::Key << "binarize_threshold" << YAML::Value << s.binarize_threshold;
    e << YAML::Key << "opacity_min" << YAML::Value << s.opacity_min;
    e << YAML::Key << "opacity_max" << YAML::Value << s.opacity_max;
    e << YAML::Key << "anomaly_probability" << YAML::Value << s.anomaly_probability;
    e << YAML::Key << "patch_threshold" << YAML::Value << s.patch_threshold;
    e << YAML::Key << "texture_dir" << YAML::Value << s.texture_dir.string();
    e << YAML::Key << "seed" << YAML::Value << s.seed;
    e << YAML::Key << "max_mask_attempts" << YAML::Value << s.max_mask_attempts;
    e << YAML::EndMap;
    e << YAML::Key << "dataset" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "name" << YAML::Value << c.dataset.name;
    e << YAML::Key << "root" << YAML::Value << c.dataset.root.string();
    e << YAML::Key << "fraction" << YAML::Value << c.dataset.fraction;
    e << YAML::Key << "seed" << YAML::Value << c.dataset.seed;
    e << YAML::EndMap;
    e << YAML::Key << "inference" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "k_top" << YAML::Value << c.inference.k_top;
    e << YAML::Key << "sigma" << YAML::Value << c.inference.sigma;
    e << YAML::EndMap;
    e << YAML::EndMap;
    return std::string(e.c_str()) + "\n";
}

double learning_rate(const TrainConfig& train, int epoch) {
    int passed = 0;
    for (int m : train.lr_milestones) {
        if (epoch >= m) ++passed;
    }
    return train.lr * std::pow(train.lr_decay, passed);
}

std::unique_ptr<Backend> make_backend(const Config& config) {
    if (config.backend.kind == BackendSpec::Kind::toy) return make_toy_backend(config.backend.toy_seed, config.dims);
    fs::path dir = config.backend.weights;
    if (!fs::is_directory(dir)) {
        const char* cache = std::getenv("CLIP_ADA_CACHE");
        if (cache == nullptr || !fs::is_directory(fs::path(cache) / config.backend.weights)) {
            throw ConfigError("pretrained weights not found: " + config.backend.weights +
                              " (not a directory, and not under $CLIP_ADA_CACHE)");
        }
        dir = fs::path(cache) / config.backend.weights;
    }
    return load_clip_backend(dir, config.dims.feature_stage);
}

} // namespace clipada
