// SPDX-License-Identifier: Apache-2.0
//
// Frozen vision-language encoders behind one interface. Implementations
// hold their weights as plain matrices: gradients can flow *through* an
// encoder (to the prompt vectors or to an attention-modulated image) but
// never into it.

#pragma once

#include "clipada/autograd.hpp"
#include "clipada/image.hpp"
#include "clipada/tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>

namespace clipada {

struct PromptAssembly;

struct BackendDescriptor {
    int patch_size = 16;
    /// Transformer block (1-indexed) whose output is used as patch features.
    int feature_stage = 7;
    /// Width of the raw patch features (D_img).
    int raw_dim = 768;
    /// Shared text/image embedding width (C).
    int shared_dim = 512;
    /// Width of text token embeddings (D).
    int text_token_dim = 512;

    friend bool operator==(const BackendDescriptor&, const BackendDescriptor&) = default;
};

/// Per-patch features, one row per patch in row-major grid order.
struct PatchFeatureMap {
    ag::Var features;
    int grid_rows = 0;
    int grid_cols = 0;
    int stage_index = 0;

    [[nodiscard]] int num_patches() const { return grid_rows * grid_cols; }
    [[nodiscard]] int dim() const { return static_cast<int>(features.cols()); }
};

/// K x C text embedding (K = 1 in the unified setting).
struct TextEmbedding {
    ag::Var values;
};

class Backend {
public:
    virtual ~Backend() = default;

    [[nodiscard]] virtual const BackendDescriptor& descriptor() const = 0;
    [[nodiscard]] virtual const Tokenizer& tokenizer() const = 0;
    [[nodiscard]] virtual std::string name() const = 0;
    /// Maximum number of text positions (template + learnable slots).
    [[nodiscard]] virtual int context_length() const = 0;

    /// Token embedding lookup, L x D.
    [[nodiscard]] virtual Matrix embed_tokens(std::span<const int> ids) const = 0;

    /// Patch features of a (possibly differentiable) [0,1] RGB image, class
    /// token removed. Throws ShapeError if H or W is not a multiple of the
    /// patch size.
    [[nodiscard]] virtual PatchFeatureMap encode_image(const ag::ImageVar& image) const = 0;
    [[nodiscard]] PatchFeatureMap encode_image(const ImageTensor& image) const {
        return encode_image(image.as_var());
    }

    /// K x C embedding of an assembled prompt. Throws TokenizerError when the
    /// assembly exceeds context_length().
    [[nodiscard]] virtual TextEmbedding encode_text(const PromptAssembly& assembly) const = 0;

    /// Hash over every frozen weight; training must leave it unchanged.
    [[nodiscard]] virtual std::uint64_t parameter_hash() const = 0;
};

/// Seeded two-layer encoder pair with the same interface as the pretrained
/// model. Image: per-patch tanh MLP. Text: per-token tanh layer, mean pool,
/// linear head. `feature_stage` is ignored (the toy image encoder always
/// returns its last layer).
std::unique_ptr<Backend> make_toy_backend(std::uint64_t seed, const BackendDescriptor& dims = {});

/// CLIP weights in Hugging Face layout: config.json, model.safetensors,
/// vocab.json and merges.txt inside `dir`.
std::unique_ptr<Backend> load_clip_backend(const std::filesystem::path& dir, int feature_stage = 7);

/// FNV-1a over raw bytes, used for the frozen-weight hash.
std::uint64_t hash_bytes(const void* data, std::size_t size, std::uint64_t seed = 1469598103934665603ULL);
std::uint64_t hash_matrix(const Matrix& m, std::uint64_t seed = 1469598103934665603ULL);

} // namespace clipada
