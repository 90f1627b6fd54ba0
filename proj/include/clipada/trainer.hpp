// SPDX-License-Identifier: Apache-2.0
//
// Training of the prompt bank and projection layers against the combined
// coarse + refined alignment objective. The backbone stays frozen.

#pragma once

#include "clipada/alignment.hpp"
#include "clipada/config.hpp"
#include "clipada/datasets.hpp"
#include "clipada/inference.hpp"
#include "clipada/prompting.hpp"
#include "clipada/synthesis.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace clipada {

/// Everything that trains.
struct Model {
    PromptTemplate tmpl;
    LearnablePromptBank bank;
    AlignmentHead head;

    /// Prompt vectors first, then the head (coarse stage first).
    [[nodiscard]] std::vector<ag::Var> parameters() const;
    /// prompt.<i>, proj.<stage>.weight, proj.<stage>.bias in parameters() order.
    [[nodiscard]] std::vector<std::string> parameter_names() const;
};

/// Fresh model for `config` on `backend`; seeded from config.train.seed.
Model init_model(const Config& config, const Backend& backend);

std::size_t trainable_parameter_count(const Model& model);
/// S K D + (N + 1)(D_img C + C).
std::size_t trainable_parameter_count(const BackendDescriptor& dims, int prompt_length, int categories,
                                      int num_refine);

/// BCE(M_0, gt) + lambda * sum_t BCE(M_t, gt).
ag::Var total_loss(const ForwardResult& maps, const Matrix& target, double lambda);

/// Decoupled weight decay Adam. Decay applies only where `decay` is set.
class AdamW {
public:
    AdamW() = default;
    AdamW(std::vector<ag::Var> params, std::vector<bool> decay, double beta1, double beta2, double eps,
          double weight_decay);

    /// Uses and then clears the parameter gradients.
    void step(double lr);

    [[nodiscard]] long long steps() const { return t_; }
    [[nodiscard]] const std::vector<Matrix>& first_moments() const { return m_; }
    [[nodiscard]] const std::vector<Matrix>& second_moments() const { return v_; }
    void restore(long long t, std::vector<Matrix> m, std::vector<Matrix> v);

private:
    std::vector<ag::Var> params_;
    std::vector<bool> decay_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    double weight_decay_ = 0.0;
    long long t_ = 0;
};

/// Normal training images at a fixed size.
class ImageSource {
public:
    virtual ~ImageSource() = default;
    [[nodiscard]] virtual std::size_t size() const = 0;
    [[nodiscard]] virtual ImageTensor image(std::size_t i) const = 0;
};

class VectorSource final : public ImageSource {
public:
    explicit VectorSource(std::vector<ImageTensor> images) : images_(std::move(images)) {}
    [[nodiscard]] std::size_t size() const override { return images_.size(); }
    [[nodiscard]] ImageTensor image(std::size_t i) const override { return images_.at(i); }

private:
    std::vector<ImageTensor> images_;
};

/// Train split of an index, read from disk at size x size on each access.
class RecordSource final : public ImageSource {
public:
    RecordSource(const DatasetIndex& index, int size);
    [[nodiscard]] std::size_t size() const override { return records_.size(); }
    [[nodiscard]] ImageTensor image(std::size_t i) const override;

private:
    std::vector<Record> records_;
    int size_;
};

struct StepLog {
    int epoch = 0;
    long long step = 0;
    double loss = 0.0;
    double lr = 0.0;
};

struct TrainState {
    Config config;
    Model model;
    AdamW optimizer;
    int epoch = 0;  ///< completed epochs
    long long step = 0;
    Rng rng;
    std::uint64_t backend_hash = 0;
    std::vector<double> epoch_losses;  ///< mean loss per completed epoch
};

struct TrainOptions {
    /// Stop after this many completed epochs (< 0: config.train.epochs).
    int stop_at_epoch = -1;
    /// Overrides the configured texture source.
    const TextureSource* textures = nullptr;
    std::function<void(const StepLog&)> on_step;
};

/// Fresh state for `config`, ready for resume().
TrainState start_training(const Config& config, const Backend& backend);

TrainState train(const Config& config, const ImageSource& images, const Backend& backend,
                 const TrainOptions& options = {});

/// Continues from the stored epoch and RNG state. A state at its final epoch
/// is returned unchanged.
TrainState resume(TrainState state, const ImageSource& images, const Backend& backend,
                  const TrainOptions& options = {});

/// Throws ConfigError when `requested` cannot continue a run made with
/// `stored` (anything but train.epochs differs).
void check_resume_compatible(const Config& stored, const Config& requested);

void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
/// Rebuilds the template with `backend`; throws CheckpointError when the
/// file is malformed or was written with a different backbone.
TrainState load_checkpoint(const std::filesystem::path& path, const Backend& backend);

/// Config snapshot only, without needing a backend.
Config read_checkpoint_config(const std::filesystem::path& path);

/// Inference bundle from trained state.
Detector make_detector(const TrainState& state, const Backend& backend);

} // namespace clipada
