// SPDX-License-Identifier: Apache-2.0
//
// Synthetic anomalies from normal images: a thresholded Perlin-noise
// region is filled with a blend of some texture and the source image.

#pragma once

#include "clipada/image.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace clipada {

using Rng = std::mt19937_64;

struct SynthesisConfig {
    /// Perlin lattice resolution per axis is 2^k, k uniform in [min, max).
    int perlin_scale_min = 0;
    int perlin_scale_max = 6;
    double binarize_threshold = 0.5;
    /// Texture opacity beta ~ Uniform(opacity_min, opacity_max).
    double opacity_min = 0.15;
    double opacity_max = 1.0;
    double anomaly_probability = 0.5;
    /// A patch is labelled anomalous when at least this fraction of it is.
    double patch_threshold = 0.3;
    /// Folder of texture images; empty means self-augmentation.
    std::filesystem::path texture_dir;
    std::uint64_t seed = 0;
    int max_mask_attempts = 10;

    /// Throws ConfigError on out-of-range values.
    void validate() const;
};

struct SyntheticSample {
    ImageTensor image;
    BinaryMask mask_full;
    /// s_p x s_p grid of 0/1 targets.
    Matrix mask_patch;
    bool is_anomalous = false;
};

/// Where anomaly textures come from.
class TextureSource {
public:
    virtual ~TextureSource() = default;
    [[nodiscard]] virtual ImageTensor sample(const ImageTensor& source, Rng& rng) const = 0;
};

/// Shifted, tile-shuffled and colour-jittered copy of the source image.
class SelfAugmentTexture final : public TextureSource {
public:
    [[nodiscard]] ImageTensor sample(const ImageTensor& source, Rng& rng) const override;
};

/// Random image from a folder, resized to the source size.
class FolderTexture final : public TextureSource {
public:
    explicit FolderTexture(const std::filesystem::path& dir);
    [[nodiscard]] ImageTensor sample(const ImageTensor& source, Rng& rng) const override;
    [[nodiscard]] std::size_t size() const { return files_.size(); }

private:
    std::vector<std::filesystem::path> files_;
};

/// Random pick from preloaded textures (must match the source size).
class InMemoryTexture final : public TextureSource {
public:
    explicit InMemoryTexture(std::vector<ImageTensor> textures);
    [[nodiscard]] ImageTensor sample(const ImageTensor& source, Rng& rng) const override;

private:
    std::vector<ImageTensor> textures_;
};

/// Folder source when cfg.texture_dir is set, self-augmentation otherwise.
std::unique_ptr<TextureSource> make_texture_source(const SynthesisConfig& cfg);

/// 2-D gradient noise on a res_y x res_x lattice, sampled at pixel positions.
Matrix perlin_noise(int height, int width, int res_y, int res_x, Rng& rng);

/// Thresholded Perlin mask. Empty draws are retried up to
/// cfg.max_mask_attempts times before falling back to a random rectangle.
BinaryMask generate_mask(const SynthesisConfig& cfg, int height, int width, Rng& rng);

/// Axis-aligned filled rectangle with sides in [min_side, max_side].
BinaryMask rectangle_mask(int height, int width, int min_side, int max_side, Rng& rng);

/// out = (1 - m) * source + m * (beta * texture + (1 - beta) * source).
ImageTensor blend(const ImageTensor& source, const ImageTensor& texture, const BinaryMask& mask, double beta);

/// Per-patch anomalous-area fraction thresholded at `threshold`.
Matrix patch_targets(const BinaryMask& mask, int patch, double threshold);

/// With probability cfg.anomaly_probability, perturbs the source; otherwise
/// returns it unchanged with empty masks. Anomalous samples always have at
/// least one positive patch.
SyntheticSample make_sample(const ImageTensor& source, const SynthesisConfig& cfg, int patch,
                            const TextureSource& textures, Rng& rng);

} // namespace clipada
