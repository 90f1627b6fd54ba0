// SPDX-License-Identifier: Apache-2.0
#include "clipada/backbone.hpp"
#include "clipada/errors.hpp"
#include "clipada/prompting.hpp"

#include <cmath>
#include <random>

namespace clipada {

std::uint64_t hash_bytes(const void* data, std::size_t size, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t hash_matrix(const Matrix& m, std::uint64_t seed) {
    const std::int64_t dims[2] = {m.rows(), m.cols()};
    seed = hash_bytes(dims, sizeof(dims), seed);
    return hash_bytes(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()), seed);
}

namespace {

constexpr int kToyVocab = 1024;
constexpr int kToyContext = 77;

class ToyBackend final : public Backend {
public:
    ToyBackend(std::uint64_t seed, const BackendDescriptor& dims) : dims_(dims), tokenizer_(kToyVocab) {
        if (dims.patch_size <= 0 || dims.raw_dim <= 0 || dims.shared_dim <= 0 || dims.text_token_dim <= 0) {
            throw ConfigError("toy backend dimensions must be positive");
        }
        std::mt19937_64 rng(seed);
        const auto gaussian = [&rng](Eigen::Index r, Eigen::Index c, double stddev) {
            std::normal_distribution<double> n(0.0, stddev);
            Matrix m(r, c);
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
            return m;
        };
        const int in = 3 * dims.patch_size * dims.patch_size;
        const int d_img = dims.raw_dim;
        const int d_txt = dims.text_token_dim;
        // Image: two tanh layers on centred patch pixels.
        img_w1_ = gaussian(in, d_img, 3.0 / std::sqrt(double(in)));
        img_b1_ = gaussian(1, d_img, 0.5).row(0);
        img_w2_ = gaussian(d_img, d_img, 1.0 / std::sqrt(double(d_img)));
        img_b2_ = gaussian(1, d_img, 0.1).row(0);
        // Text: embedding table, one tanh layer, mean pool, linear head.
        token_embedding_ = gaussian(kToyVocab, d_txt, 1.0);
        txt_w1_ = gaussian(d_txt, d_txt, 1.0 / std::sqrt(double(d_txt)));
        txt_b1_ = gaussian(1, d_txt, 0.1).row(0);
        txt_w2_ = gaussian(d_txt, dims.shared_dim, 1.0 / std::sqrt(double(d_txt)));
        txt_b2_ = gaussian(1, dims.shared_dim, 0.1).row(0);
    }

    const BackendDescriptor& descriptor() const override { return dims_; }
    const Tokenizer& tokenizer() const override { return tokenizer_; }
    std::string name() const override { return "toy"; }
    int context_length() const override { return kToyContext; }

    Matrix embed_tokens(std::span<const int> ids) const override {
        Matrix out(static_cast<Eigen::Index>(ids.size()), token_embedding_.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= kToyVocab) throw TokenizerError("token id out of range");
            out.row(static_cast<Eigen::Index>(i)) = token_embedding_.row(ids[i]);
        }
        return out;
    }

    PatchFeatureMap encode_image(const ag::ImageVar& image) const override {
        const int p = dims_.patch_size;
        ag::Var patches = ag::affine(ag::patchify(image, p), 1.0, -0.5);
        ag::Var h = ag::tanh(ag::linear(patches, img_w1_, img_b1_));
        ag::Var f = ag::tanh(ag::linear(h, img_w2_, img_b2_));
        PatchFeatureMap out;
        out.features = f;
        out.grid_rows = static_cast<int>(image[0].rows() / p);
        out.grid_cols = static_cast<int>(image[0].cols() / p);
        out.stage_index = 2;
        return out;
    }

    TextEmbedding encode_text(const PromptAssembly& assembly) const override {
        if (assembly.length() > kToyContext) {
            throw TokenizerError("prompt of length " + std::to_string(assembly.length()) +
                                 " exceeds context " + std::to_string(kToyContext));
        }
        std::vector<ag::Var> rows;
        for (const auto& seq : assembly.sequences) {
            if (seq.cols() != dims_.text_token_dim) throw ShapeError("prompt width differs from D");
            ag::Var h = ag::tanh(ag::linear(seq, txt_w1_, txt_b1_));
            rows.push_back(ag::linear(ag::mean_rows(h), txt_w2_, txt_b2_));
        }
        if (rows.empty()) throw ShapeError("empty prompt assembly");
        return {rows.size() == 1 ? rows.front() : ag::concat_rows(rows)};
    }

    std::uint64_t parameter_hash() const override {
        std::uint64_t h = hash_matrix(img_w1_);
        h = hash_matrix(img_b1_, h);
        h = hash_matrix(img_w2_, h);
        h = hash_matrix(img_b2_, h);
        h = hash_matrix(token_embedding_, h);
        h = hash_matrix(txt_w1_, h);
        h = hash_matrix(txt_b1_, h);
        h = hash_matrix(txt_w2_, h);
        return hash_matrix(txt_b2_, h);
    }

private:
    BackendDescriptor dims_;
    WordTokenizer tokenizer_;
    Matrix img_w1_, img_w2_, token_embedding_, txt_w1_, txt_w2_;
    ag::RowVector img_b1_, img_b2_, txt_b1_, txt_b2_;
};

} // namespace

std::unique_ptr<Backend> make_toy_backend(std::uint64_t seed, const BackendDescriptor& dims) {
    return std::make_unique<ToyBackend>(seed, dims);
}

} // namespace clipada
