// SPDX-License-Identifier: Apache-2.0
//
// From the final similarity map to a full-resolution score map and an
// image-level score.

#pragma once

#include "clipada/alignment.hpp"
#include "clipada/image.hpp"
#include "clipada/prompting.hpp"

namespace clipada {

inline constexpr int kDefaultTopK = 500;
inline constexpr double kDefaultSigma = 4.0;

struct ScoreMap {
    Matrix pixels;  ///< H x W, values in [0, 1]
    double image_score = 0.0;
};

/// Separable Gaussian blur, kernel radius ceil(4 sigma), symmetric
/// (half-sample) reflection at the borders. sigma = 0 returns the input.
Matrix gaussian_blur(const Matrix& map, double sigma);

/// Bilinear upsampling to H x W, blur, clip to [0, 1].
Matrix postprocess(const Matrix& grid, int height, int width, double sigma);
Matrix postprocess(const SimilarityMap& map, int height, int width, double sigma);

/// Mean of the k_top largest values (global mean when k_top >= size).
double image_score(const Matrix& scores, int k_top);

struct InferenceOptions {
    int k_top = kDefaultTopK;
    double sigma = kDefaultSigma;
};

/// Trained model bundle. The text embedding is computed once and reused.
class Detector {
public:
    Detector(const Backend& backend, PromptTemplate tmpl, LearnablePromptBank bank, AlignmentHead head,
             InferenceOptions options = {});

    [[nodiscard]] ScoreMap score(const ImageTensor& image) const;
    /// Similarity maps only, no gradients recorded.
    [[nodiscard]] ForwardResult maps(const ImageTensor& image) const;

    [[nodiscard]] const InferenceOptions& options() const { return options_; }

private:
    const Backend* backend_;
    PromptTemplate template_;
    LearnablePromptBank bank_;
    AlignmentHead head_;
    InferenceOptions options_;
    TextEmbedding text_;
};

} // namespace clipada
