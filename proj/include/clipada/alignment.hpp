// SPDX-License-Identifier: Apache-2.0
//
// Text/patch alignment: per-stage projections, sigmoid similarity maps,
// the BCE alignment loss, and the coarse-to-fine refinement stack where
// each stage re-encodes the image multiplied by the previous map.

#pragma once

#include "clipada/autograd.hpp"
#include "clipada/backbone.hpp"
#include "clipada/image.hpp"
#include "clipada/prompting.hpp"

#include <cstdint>
#include <vector>

namespace clipada {

/// Logits are clamped to this magnitude inside the loss.
inline constexpr double kLogitClamp = 50.0;

/// Affine map D_img -> C. Each stage owns its own weights.
struct ProjectionLayer {
    ag::Var weight;  ///< D_img x C
    ag::Var bias;    ///< 1 x C
    int stage_id = 0;
};

/// Uniform(-1/sqrt(in), 1/sqrt(in)) initialisation, seeded.
ProjectionLayer make_projection(int in_dim, int out_dim, int stage_id, std::uint64_t seed);

/// s_p x s_p sigmoid map. `logits` keeps the pre-activation for the loss.
struct SimilarityMap {
    ag::Var logits;
    ag::Var values;

    [[nodiscard]] int side() const { return static_cast<int>(values.rows()); }
    [[nodiscard]] const Matrix& grid() const { return values.value(); }
};

/// Wraps fixed probabilities (e.g. a stored map) as a non-differentiable map.
SimilarityMap similarity_from_probabilities(const Matrix& probabilities);

PatchFeatureMap project(const PatchFeatureMap& raw, const ProjectionLayer& proj);

/// sigmoid(F V^T) reshaped onto the patch grid. Needs K = 1, matching widths
/// and a square grid.
SimilarityMap similarity_map(const PatchFeatureMap& features, const TextEmbedding& text);

/// Mean binary cross-entropy between the map and a 0/1 grid of the same shape.
ag::Var alignment_loss(const SimilarityMap& map, const Matrix& target);

/// One refinement stage: upsample the previous map to image size, multiply
/// it into the image, re-encode, project with this stage's layer and align.
/// With `detach_attention` the previous map is treated as a constant.
SimilarityMap refine_once(const Backend& backend, const ImageTensor& image, const SimilarityMap& previous,
                          const ProjectionLayer& proj, const TextEmbedding& text, bool detach_attention = false);

/// Coarse projection plus N refinement projections.
struct AlignmentHead {
    ProjectionLayer coarse;
    std::vector<ProjectionLayer> refine;
    bool detach_attention = false;

    [[nodiscard]] int num_refine() const { return static_cast<int>(refine.size()); }
    /// Every trainable leaf, coarse stage first.
    [[nodiscard]] std::vector<ag::Var> parameters() const;
};

AlignmentHead make_alignment_head(const BackendDescriptor& dims, int num_refine, std::uint64_t seed);

struct ForwardResult {
    SimilarityMap coarse;
    std::vector<SimilarityMap> refined;

    /// Last refined map, or the coarse map when there is no refinement.
    [[nodiscard]] const SimilarityMap& final_map() const { return refined.empty() ? coarse : refined.back(); }
};

ForwardResult forward_full(const Backend& backend, const ImageTensor& image, const TextEmbedding& text,
                           const AlignmentHead& head);
ForwardResult forward_full(const Backend& backend, const ImageTensor& image, const PromptTemplate& tmpl,
                           const LearnablePromptBank& bank, const AlignmentHead& head);

} // namespace clipada
