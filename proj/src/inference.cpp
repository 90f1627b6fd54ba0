// SPDX-License-Identifier: Apache-2.0
#include "clipada/inference.hpp"

#include "clipada/errors.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace clipada {

namespace {

// Index into the period-2n mirrored extension of [0, n).
Eigen::Index reflect(Eigen::Index i, Eigen::Index n) {
    const Eigen::Index period = 2 * n;
    Eigen::Index m = i % period;
    if (m < 0) m += period;
    return m < n ? m : period - 1 - m;
}

std::vector<double> gaussian_kernel(double sigma) {
    const int radius = static_cast<int>(std::ceil(4.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = v;
        total += v;
    }
    for (double& v : k) v /= total;
    return k;
}

} // namespace

Matrix gaussian_blur(const Matrix& map, double sigma) {
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("sigma must be a finite value >= 0");
    if (sigma == 0.0 || map.size() == 0) return map;
    const auto k = gaussian_kernel(sigma);
    const auto radius = static_cast<Eigen::Index>(k.size() / 2);
    const auto h = map.rows();
    const auto w = map.cols();
    Matrix tmp(h, w);
    for (Eigen::Index y = 0; y < h; ++y) {
        for (Eigen::Index x = 0; x < w; ++x) {
            double acc = 0.0;
            for (Eigen::Index j = -radius; j <= radius; ++j) acc += k[j + radius] * map(y, reflect(x + j, w));
            tmp(y, x) = acc;
        }
    }
    Matrix out(h, w);
    for (Eigen::Index y = 0; y < h; ++y) {
        for (Eigen::Index x = 0; x < w; ++x) {
            double acc = 0.0;
            for (Eigen::Index j = -radius; j <= radius; ++j) acc += k[j + radius] * tmp(reflect(y + j, h), x);
            out(y, x) = acc;
        }
    }
    return out;
}

Matrix postprocess(const Matrix& grid, int height, int width, double sigma) {
    if (height <= 0 || width <= 0) throw ShapeError("output size must be positive");
    return gaussian_blur(resize_bilinear(grid, height, width), sigma).cwiseMax(0.0).cwiseMin(1.0);
}

Matrix postprocess(const SimilarityMap& map, int height, int width, double sigma) {
    return postprocess(map.grid(), height, width, sigma);
}

double image_score(const Matrix& scores, int k_top) {
    if (k_top < 1) throw ConfigError("k_top must be >= 1");
    if (scores.size() == 0) throw ShapeError("empty score map");
    std::vector<double> v(scores.data(), scores.data() + scores.size());
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(k_top), v.size());
    if (k < v.size()) std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end(), std::greater<>());
    std::sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), std::greater<>());
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) total += v[i];
    return total / static_cast<double>(k);
}

Detector::Detector(const Backend& backend, PromptTemplate tmpl, LearnablePromptBank bank, AlignmentHead head,
                   InferenceOptions options)
    : backend_(&backend),
      template_(std::move(tmpl)),
      bank_(std::move(bank)),
      head_(std::move(head)),
      options_(options) {
    if (options_.k_top < 1) throw ConfigError("k_top must be >= 1");
    if (!(options_.sigma >= 0.0)) throw ConfigError("sigma must be >= 0");
    ag::NoGradGuard guard;
    text_ = backend_->encode_text(assemble(template_, bank_));
}

ForwardResult Detector::maps(const ImageTensor& image) const {
    ag::NoGradGuard guard;
    return forward_full(*backend_, image, text_, head_);
}

ScoreMap Detector::score(const ImageTensor& image) const {
    const ForwardResult r = maps(image);
    ScoreMap out;
    out.pixels = postprocess(r.final_map(), static_cast<int>(image.height()), static_cast<int>(image.width()),
                             options_.sigma);
    out.image_score = image_score(out.pixels, options_.k_top);
    return out;
}

} // namespace clipada
