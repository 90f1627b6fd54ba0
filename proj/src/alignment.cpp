// SPDX-License-Identifier: Apache-2.0
#include "clipada/alignment.hpp"

#include "clipada/errors.hpp"

#include <cmath>
#include <random>

namespace clipada {

ProjectionLayer make_projection(int in_dim, int out_dim, int stage_id, std::uint64_t seed) {
    if (in_dim <= 0 || out_dim <= 0) throw ShapeError("projection dimensions must be positive");
    std::mt19937_64 rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix w(in_dim, out_dim);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
    Matrix b(1, out_dim);
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = u(rng);
    return {ag::Var::parameter(std::move(w)), ag::Var::parameter(std::move(b)), stage_id};
}

SimilarityMap similarity_from_probabilities(const Matrix& p) {
    Matrix logits = p.unaryExpr([](double v) {
        if (v <= 0.0) return -kLogitClamp;
        if (v >= 1.0) return kLogitClamp;
        return std::log(v) - std::log1p(-v);
    });
    ag::Var z = ag::Var::constant(std::move(logits));
    return {z, ag::sigmoid(z)};
}

PatchFeatureMap project(const PatchFeatureMap& raw, const ProjectionLayer& proj) {
    if (raw.dim() != proj.weight.rows()) {
        throw ShapeError("projection expects width " + std::to_string(proj.weight.rows()) + ", got " +
                         std::to_string(raw.dim()));
    }
    PatchFeatureMap out = raw;
    out.features = ag::linear(raw.features, proj.weight, proj.bias);
    return out;
}

SimilarityMap similarity_map(const PatchFeatureMap& features, const TextEmbedding& text) {
    if (text.values.rows() != 1) throw ShapeError("similarity map needs a single text embedding (K = 1)");
    if (features.dim() != text.values.cols()) {
        throw ShapeError("feature width " + std::to_string(features.dim()) + " differs from text width " +
                         std::to_string(text.values.cols()));
    }
    const auto n = features.features.rows();
    const auto side = static_cast<Eigen::Index>(std::llround(std::sqrt(static_cast<double>(n))));
    if (side * side != n || features.grid_rows != features.grid_cols) {
        throw ShapeError("patch count " + std::to_string(n) + " is not a square grid");
    }
    ag::Var z = ag::reshape(ag::matmul(features.features, ag::transpose(text.values)), side, side);
    return {z, ag::sigmoid(z)};
}

ag::Var alignment_loss(const SimilarityMap& map, const Matrix& target) {
    if (target.rows() != map.logits.rows() || target.cols() != map.logits.cols()) {
        throw ShapeError("ground truth " + std::to_string(target.rows()) + "x" + std::to_string(target.cols()) +
                         " does not match map " + std::to_string(map.side()));
    }
    return ag::bce_with_logits(map.logits, target, kLogitClamp);
}

SimilarityMap refine_once(const Backend& backend, const ImageTensor& image, const SimilarityMap& previous,
                          const ProjectionLayer& proj, const TextEmbedding& text, bool detach_attention) {
    const auto h = image.height();
    const auto w = image.width();
    const ag::Var prev = detach_attention ? previous.values.detach() : previous.values;
    // upsample(M) = R_h M R_w^T
    const ag::Var rh = ag::Var::constant(bilinear_matrix(h, prev.rows()));
    const ag::Var rwt = ag::Var::constant(bilinear_matrix(w, prev.cols()).transpose());
    ag::Var attention = ag::matmul(ag::matmul(rh, prev), rwt);

    ag::ImageVar enhanced;
    for (int c = 0; c < 3; ++c) enhanced[c] = ag::mul(attention, ag::Var::constant(image.channels[c]));
    return similarity_map(project(backend.encode_image(enhanced), proj), text);
}

std::vector<ag::Var> AlignmentHead::parameters() const {
    std::vector<ag::Var> out{coarse.weight, coarse.bias};
    for (const auto& p : refine) {
        out.push_back(p.weight);
        out.push_back(p.bias);
    }
    return out;
}

AlignmentHead make_alignment_head(const BackendDescriptor& dims, int num_refine, std::uint64_t seed) {
    if (num_refine < 0) throw ConfigError("number of refinement stages must be >= 0");
    AlignmentHead head;
    // Stage seeds are spread so the layers never share initial weights.
    head.coarse = make_projection(dims.raw_dim, dims.shared_dim, 0, seed);
    for (int i = 1; i <= num_refine; ++i) {
        head.refine.push_back(make_projection(dims.raw_dim, dims.shared_dim, i,
                                              seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(i)));
    }
    return head;
}

ForwardResult forward_full(const Backend& backend, const ImageTensor& image, const TextEmbedding& text,
                           const AlignmentHead& head) {
    ForwardResult out{similarity_map(project(backend.encode_image(image), head.coarse), text), {}};
    const SimilarityMap* prev = &out.coarse;
    out.refined.reserve(head.refine.size());
    for (const auto& proj : head.refine) {
        out.refined.push_back(refine_once(backend, image, *prev, proj, text, head.detach_attention));
        prev = &out.refined.back();
    }
    return out;
}

ForwardResult forward_full(const Backend& backend, const ImageTensor& image, const PromptTemplate& tmpl,
                           const LearnablePromptBank& bank, const AlignmentHead& head) {
    return forward_full(backend, image, backend.encode_text(assemble(tmpl, bank)), head);
}

} // namespace clipada
