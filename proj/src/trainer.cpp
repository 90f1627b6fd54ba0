// SPDX-License-Identifier: Apache-2.0
#include "clipada/trainer.hpp"

#include "clipada/errors.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace clipada {

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finaliser
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::vector<bool> decay_mask(const Model& model) {
    std::vector<bool> out(static_cast<std::size_t>(model.bank.size()), false);
    out.resize(model.parameters().size(), true);
    return out;
}

} // namespace

std::vector<ag::Var> Model::parameters() const {
    std::vector<ag::Var> out = bank.vectors;
    for (auto& p : head.parameters()) out.push_back(p);
    return out;
}

std::vector<std::string> Model::parameter_names() const {
    std::vector<std::string> out;
    for (int i = 0; i < bank.size(); ++i) out.push_back("prompt." + std::to_string(i));
    for (int s = 0; s <= head.num_refine(); ++s) {
        out.push_back("proj." + std::to_string(s) + ".weight");
        out.push_back("proj." + std::to_string(s) + ".bias");
    }
    return out;
}

Model init_model(const Config& config, const Backend& backend) {
    const BackendDescriptor& d = backend.descriptor();
    Model m;
    m.tmpl = build_template(config.prompt.template_text, backend, 1);
    if (config.prompt.insert_position > m.tmpl.length()) {
        throw ConfigError("prompt.insert_position " + std::to_string(config.prompt.insert_position) +
                          " exceeds the template length " + std::to_string(m.tmpl.length()));
    }
    m.bank = init_prompt_bank(config.prompt.length, 1, d.text_token_dim, derive_seed(config.train.seed, 0),
                              config.prompt.insert_position, config.prompt.init_std);
    m.head = make_alignment_head(d, config.model.n_refine, derive_seed(config.train.seed, 1));
    m.head.detach_attention = config.model.detach_attention;
    return m;
}

std::size_t trainable_parameter_count(const Model& model) {
    std::size_t n = 0;
    for (const auto& p : model.parameters()) n += static_cast<std::size_t>(p.value().size());
    return n;
}

std::size_t trainable_parameter_count(const BackendDescriptor& dims, int prompt_length, int categories,
                                      int num_refine) {
    const auto per_stage = static_cast<std::size_t>(dims.raw_dim) * dims.shared_dim + dims.shared_dim;
    return static_cast<std::size_t>(prompt_length) * categories * dims.text_token_dim +
           static_cast<std::size_t>(num_refine + 1) * per_stage;
}

ag::Var total_loss(const ForwardResult& maps, const Matrix& target, double lambda) {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    ag::Var loss = alignment_loss(maps.coarse, target);
    for (const auto& m : maps.refined) loss = ag::add(loss, ag::scale(alignment_loss(m, target), lambda));
    return loss;
}

AdamW::AdamW(std::vector<ag::Var> params, std::vector<bool> decay, double beta1, double beta2, double eps,
             double weight_decay)
    : params_(std::move(params)),
      decay_(std::move(decay)),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      weight_decay_(weight_decay) {
    if (decay_.size() != params_.size()) throw ShapeError("AdamW: one decay flag per parameter");
    for (const auto& p : params_) {
        m_.push_back(Matrix::Zero(p.rows(), p.cols()));
        v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        ag::Var& p = params_[i];
        const Matrix g = p.grad();
        Matrix& w = p.mutable_value();
        if (decay_[i]) w *= 1.0 - lr * weight_decay_;
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
        w.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
        p.zero_grad();
    }
}

void AdamW::restore(long long t, std::vector<Matrix> m, std::vector<Matrix> v) {
    if (m.size() != params_.size() || v.size() != params_.size()) throw CheckpointError("optimizer state size mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (m[i].rows() != params_[i].rows() || m[i].cols() != params_[i].cols() || v[i].rows() != m[i].rows() ||
            v[i].cols() != m[i].cols()) {
            throw CheckpointError("optimizer moment shape mismatch");
        }
    }
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
}

RecordSource::RecordSource(const DatasetIndex& index, int size) : records_(index.split(Split::train)), size_(size) {
    for (const auto& r : records_) {
        if (r.label != Label::normal) throw DataError("train split must be normal-only: " + r.path.string());
    }
    if (records_.empty()) throw DataError("train split is empty");
}

ImageTensor RecordSource::image(std::size_t i) const { return load_image(records_.at(i).path, size_, size_); }

TrainState start_training(const Config& config, const Backend& backend) {
    config.validate();
    TrainState s;
    s.config = config;
    s.model = init_model(config, backend);
    s.optimizer = AdamW(s.model.parameters(), decay_mask(s.model), config.train.beta1, config.train.beta2,
                        config.train.eps, config.train.weight_decay);
    s.rng.seed(derive_seed(config.train.seed ^ config.synthesis.seed, 2));
    s.backend_hash = backend.parameter_hash();
    return s;
}

TrainState train(const Config& config, const ImageSource& images, const Backend& backend,
                 const TrainOptions& options) {
    return resume(start_training(config, backend), images, backend, options);
}

TrainState resume(TrainState state, const ImageSource& images, const Backend& backend, const TrainOptions& options) {
    if (backend.parameter_hash() != state.backend_hash) {
        throw CheckpointError("backbone weights differ from the ones used for this run");
    }
    const Config& cfg = state.config;
    const int stop = options.stop_at_epoch < 0 ? cfg.train.epochs : std::min(options.stop_at_epoch, cfg.train.epochs);
    if (state.epoch >= stop) return state;
    if (images.size() == 0) throw DataError("no training images");

    std::unique_ptr<TextureSource> owned;
    const TextureSource* textures = options.textures;
    if (textures == nullptr) {
        owned = make_texture_source(cfg.synthesis);
        textures = owned.get();
    }
    const int patch = backend.descriptor().patch_size;
    const std::size_t n = images.size();
    const auto batch = static_cast<std::size_t>(cfg.train.batch_size);
    const long long steps =
        cfg.train.steps_per_epoch > 0 ? cfg.train.steps_per_epoch : static_cast<long long>((n + batch - 1) / batch);
    Model& model = state.model;

    std::vector<std::size_t> order(n);
    while (state.epoch < stop) {
        const double lr = learning_rate(cfg.train, state.epoch);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), state.rng);
        std::size_t cursor = 0;
        double epoch_loss = 0.0;

        for (long long s = 0; s < steps; ++s) {
            // The text branch is run once per step; per-sample gradients are
            // collected on a detached copy and pushed through it at the end.
            const TextEmbedding text = backend.encode_text(assemble(model.tmpl, model.bank));
            const TextEmbedding text_leaf{ag::Var::parameter(text.values.value())};
            double batch_loss = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
                if (cursor == n) {
                    std::shuffle(order.begin(), order.end(), state.rng);
                    cursor = 0;
                }
                const SyntheticSample sample =
                    make_sample(images.image(order[cursor++]), cfg.synthesis, patch, *textures, state.rng);
                const ForwardResult maps = forward_full(backend, sample.image, text_leaf, model.head);
                const ag::Var loss = total_loss(maps, sample.mask_patch, cfg.train.lambda_refine);
                if (!std::isfinite(loss.item())) {
                    throw RuntimeFailure("non-finite loss at epoch " + std::to_string(state.epoch) + ", step " +
                                         std::to_string(state.step));
                }
                ag::backward(ag::scale(loss, 1.0 / static_cast<double>(batch)));
                batch_loss += loss.item();
            }
            ag::backward(ag::sum(ag::mul(text.values, ag::Var::constant(text_leaf.values.grad()))));
            state.optimizer.step(lr);
            ++state.step;
            batch_loss /= static_cast<double>(batch);
            epoch_loss += batch_loss;
            if (options.on_step) options.on_step({state.epoch, state.step, batch_loss, lr});
            spdlog::debug("epoch {} step {} loss {:.6f}", state.epoch, state.step, batch_loss);
        }
        state.epoch_losses.push_back(epoch_loss / static_cast<double>(steps));
        ++state.epoch;
        spdlog::info("epoch {}/{} lr {:.3g} loss {:.6f}", state.epoch, cfg.train.epochs, lr, state.epoch_losses.back());
    }
    return state;
}

void check_resume_compatible(const Config& stored, const Config& requested) {
    if (stored.model.n_refine != requested.model.n_refine) {
        throw ConfigError("n_refine differs from the checkpoint (" + std::to_string(stored.model.n_refine) + " vs " +
                          std::to_string(requested.model.n_refine) + ")");
    }
    Config a = stored;
    Config b = requested;
    b.train.epochs = a.train.epochs;
    b.dataset.root = a.dataset.root;
    b.inference = a.inference;
    if (to_yaml(a) != to_yaml(b)) {
        throw ConfigError("config differs from the checkpoint in more than train.epochs");
    }
}

Detector make_detector(const TrainState& state, const Backend& backend) {
    return Detector(backend, state.model.tmpl, state.model.bank, state.model.head,
                    {state.config.inference.k_top, state.config.inference.sigma});
}

} // namespace clipada
