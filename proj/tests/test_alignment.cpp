// SPDX-License-Identifier: Apache-2.0
#include "support.hpp"

#include "clipada/alignment.hpp"
#include "clipada/errors.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace clipada;
using namespace clipada::test;

namespace {

const BackendDescriptor kDims{8, 7, 8, 8, 8};

PatchFeatureMap features(const Matrix& m, int grid) {
    PatchFeatureMap f;
    f.features = ag::Var::constant(m);
    f.grid_rows = grid;
    f.grid_cols = grid;
    return f;
}

ProjectionLayer fixed_projection(const Matrix& w, const Matrix& b) {
    return {ag::Var::parameter(w), ag::Var::parameter(b), 0};
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

} // namespace

TEST_CASE("project") {
    std::mt19937_64 rng(1);
    const Matrix x = random_matrix(3, 4, rng);
    const PatchFeatureMap f = features(x, 0);
    SUBCASE("identity") {
        const auto p = project(f, fixed_projection(Matrix::Identity(4, 4), Matrix::Zero(1, 4)));
        CHECK(p.features.value() == x);
    }
    SUBCASE("zero weights give the bias") {
        Matrix b(1, 2);
        b << 0.25, -3.0;
        const auto p = project(f, fixed_projection(Matrix::Zero(4, 2), b));
        for (int r = 0; r < 3; ++r) CHECK(p.features.value().row(r) == b);
    }
    SUBCASE("dense matmul oracle") {
        const Matrix w = random_matrix(4, 5, rng);
        const Matrix b = random_matrix(1, 5, rng);
        const auto p = project(f, fixed_projection(w, b));
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 5; ++c) {
                double acc = b(0, c);
                for (int k = 0; k < 4; ++k) acc += x(r, k) * w(k, c);
                CHECK(p.features.value()(r, c) == doctest::Approx(acc).epsilon(1e-14));
            }
        }
    }
    SUBCASE("dimension mismatch") {
        CHECK_THROWS_AS(project(f, fixed_projection(Matrix::Zero(5, 2), Matrix::Zero(1, 2))), ShapeError);
    }
}

TEST_CASE("similarity map") {
    SUBCASE("zero logits give 0.5") {
        const auto m = similarity_map(features(Matrix::Zero(4, 3), 2), {ag::Var::constant(Matrix::Ones(1, 3))});
        CHECK(m.grid() == Matrix::Constant(2, 2, 0.5));
    }
    SUBCASE("single patch with logit 1") {
        const auto m = similarity_map(features(Matrix::Ones(1, 1), 1), {ag::Var::constant(Matrix::Ones(1, 1))});
        CHECK(std::abs(m.grid()(0, 0) - 0.7310585786300049) < 1e-12);
    }
    SUBCASE("dot-product oracle, row-major grid") {
        std::mt19937_64 rng(2);
        const Matrix f = random_matrix(4, 6, rng);
        const Matrix v = random_matrix(1, 6, rng);
        const auto m = similarity_map(features(f, 2), {ag::Var::constant(v)});
        for (int i = 0; i < 4; ++i) CHECK(std::abs(m.grid()(i / 2, i % 2) - sigmoid(f.row(i).dot(v.row(0)))) < 1e-7);
        CHECK(m.logits.value()(1, 0) == doctest::Approx(f.row(2).dot(v.row(0))));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(similarity_map(features(Matrix::Zero(3, 2), 0), {ag::Var::constant(Matrix::Ones(1, 2))}),
                        ShapeError);
        CHECK_THROWS_AS(similarity_map(features(Matrix::Zero(4, 2), 2), {ag::Var::constant(Matrix::Ones(1, 3))}),
                        ShapeError);
        CHECK_THROWS_AS(similarity_map(features(Matrix::Zero(4, 2), 2), {ag::Var::constant(Matrix::Ones(2, 2))}),
                        ShapeError);
    }
    SUBCASE("values strictly inside (0, 1) and monotone in the logit") {
        Matrix f(4, 1);
        f << -60, -1, 1, 60;
        const auto m = similarity_map(features(f, 2), {ag::Var::constant(Matrix::Ones(1, 1))});
        CHECK(m.grid().minCoeff() > 0.0);
        CHECK(m.grid().maxCoeff() < 1.0);
        CHECK(m.grid()(0, 0) < m.grid()(0, 1));
        CHECK(m.grid()(0, 1) < m.grid()(1, 0));
        CHECK(m.grid()(1, 0) < m.grid()(1, 1));
    }
}

TEST_CASE("alignment loss") {
    Matrix y(2, 2);
    y << 1, 0, 1, 0;
    SUBCASE("x = 0.5 gives ln 2") {
        const auto m = similarity_from_probabilities(Matrix::Constant(2, 2, 0.5));
        CHECK(std::abs(alignment_loss(m, y).item() - std::numbers::ln2) < 1e-9);
    }
    SUBCASE("perfect prediction approaches zero") {
        const auto m = similarity_from_probabilities(y);
        CHECK(alignment_loss(m, y).item() < 1e-20);
        CHECK(alignment_loss(m, y).item() >= 0.0);
    }
    SUBCASE("elementwise oracle on a 14 x 14 grid") {
        std::mt19937_64 rng(3);
        const Matrix f = random_matrix(196, 5, rng);
        const Matrix v = random_matrix(1, 5, rng);
        const auto m = similarity_map(features(f, 14), {ag::Var::constant(v)});
        Matrix gt(14, 14);
        std::bernoulli_distribution coin(0.3);
        for (Eigen::Index i = 0; i < gt.size(); ++i) gt.data()[i] = coin(rng) ? 1.0 : 0.0;
        double ref = 0.0;
        for (Eigen::Index i = 0; i < gt.size(); ++i) {
            const double p = m.grid().data()[i];
            ref -= gt.data()[i] * std::log(p) + (1.0 - gt.data()[i]) * std::log(1.0 - p);
        }
        CHECK(std::abs(alignment_loss(m, gt).item() - ref / 196.0) < 1e-6);
    }
    SUBCASE("shape mismatch") {
        CHECK_THROWS_AS(alignment_loss(similarity_from_probabilities(Matrix::Constant(2, 2, 0.5)), Matrix::Zero(3, 3)),
                        ShapeError);
    }
}

TEST_CASE("refinement semantics on the toy backend") {
    const auto be = make_toy_backend(4, kDims);
    std::mt19937_64 rng(5);
    const ImageTensor img = random_image(32, 32, rng);
    const ProjectionLayer proj = make_projection(8, 8, 1, 77);
    const TextEmbedding text{ag::Var::constant(random_matrix(1, 8, rng))};

    SUBCASE("all-ones attention is a fresh map") {
        const auto ones = similarity_from_probabilities(Matrix::Ones(4, 4));
        const auto r = refine_once(*be, img, ones, proj, text);
        const auto fresh = similarity_map(project(be->encode_image(img), proj), text);
        CHECK((r.grid() - fresh.grid()).cwiseAbs().maxCoeff() < 1e-6);
    }
    SUBCASE("all-zero attention is image independent") {
        const auto zeros = similarity_from_probabilities(Matrix::Zero(4, 4));
        const auto a = refine_once(*be, img, zeros, proj, text);
        const auto b = refine_once(*be, random_image(32, 32, rng), zeros, proj, text);
        CHECK(a.grid() == b.grid());
    }
    SUBCASE("composed pipeline oracle") {
        Matrix prev(4, 4);
        std::uniform_real_distribution<double> u(0.05, 0.95);
        for (Eigen::Index i = 0; i < prev.size(); ++i) prev.data()[i] = u(rng);
        const auto r = refine_once(*be, img, similarity_from_probabilities(prev), proj, text);
        const Matrix up = resize_bilinear(prev, 32, 32);
        ImageTensor enhanced(32, 32);
        for (int c = 0; c < 3; ++c) enhanced.channels[c] = up.cwiseProduct(img.channels[c]);
        const auto want = similarity_map(project(be->encode_image(enhanced), proj), text);
        CHECK((r.grid() - want.grid()).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("forward_full structure") {
    const auto be = make_toy_backend(6, kDims);
    std::mt19937_64 rng(7);
    const ImageTensor img = random_image(32, 32, rng);
    const TextEmbedding text{ag::Var::constant(random_matrix(1, 8, rng))};
    for (int n : {0, 1, 2}) {
        CAPTURE(n);
        const AlignmentHead head = make_alignment_head(kDims, n, 3);
        CHECK(head.num_refine() == n);
        CHECK(head.parameters().size() == static_cast<std::size_t>(2 * (n + 1)));
        const ForwardResult r = forward_full(*be, img, text, head);
        CHECK(static_cast<int>(r.refined.size()) == n);
        const auto plain = similarity_map(project(be->encode_image(img), head.coarse), text);
        CHECK(r.coarse.grid() == plain.grid());
        for (const auto& m : r.refined) {
            CHECK(m.side() == 4);
            CHECK(m.grid().minCoeff() > 0.0);
            CHECK(m.grid().maxCoeff() < 1.0);
        }
        CHECK(&r.final_map() == (n == 0 ? &r.coarse : &r.refined.back()));
    }
    SUBCASE("stages do not share weights") {
        const AlignmentHead head = make_alignment_head(kDims, 2, 3);
        CHECK(head.coarse.weight.value() != head.refine[0].weight.value());
        CHECK(head.refine[0].weight.value() != head.refine[1].weight.value());
    }
}
