// SPDX-License-Identifier: Apache-2.0
#include "support.hpp"

#include "clipada/errors.hpp"
#include "clipada/synthesis.hpp"

#include <doctest.h>

using namespace clipada;
using namespace clipada::test;

namespace {

// Brute-force per-patch pixel count.
Matrix count_oracle(const BinaryMask& m, int patch, double tau) {
    Matrix out = Matrix::Zero(m.rows() / patch, m.cols() / patch);
    for (Eigen::Index py = 0; py < out.rows(); ++py) {
        for (Eigen::Index px = 0; px < out.cols(); ++px) {
            int n = 0;
            for (int y = 0; y < patch; ++y) {
                for (int x = 0; x < patch; ++x) n += m(py * patch + y, px * patch + x) ? 1 : 0;
            }
            out(py, px) = n >= tau * patch * patch ? 1.0 : 0.0;
        }
    }
    return out;
}

bool outside_equal(const ImageTensor& a, const ImageTensor& b, const BinaryMask& m) {
    for (int c = 0; c < 3; ++c) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            if (m.data()[i] == 0 && a.channels[c].data()[i] != b.channels[c].data()[i]) return false;
        }
    }
    return true;
}

} // namespace

TEST_CASE("perlin noise is seeded and bounded") {
    Rng a(1);
    Rng b(1);
    const Matrix x = perlin_noise(32, 48, 4, 2, a);
    CHECK(x == perlin_noise(32, 48, 4, 2, b));
    CHECK(x.cwiseAbs().maxCoeff() <= 1.0 + 1e-12);
    // Lattice points are zero.
    CHECK(std::abs(x(0, 0)) < 1e-15);
    CHECK(std::abs(x(8, 24)) < 1e-15);
}

TEST_CASE("generate_mask") {
    SynthesisConfig cfg;
    Rng a(3);
    Rng b(3);
    CHECK(generate_mask(cfg, 64, 64, a) == generate_mask(cfg, 64, 64, b));
    SUBCASE("impossible threshold falls back to a rectangle") {
        cfg.binarize_threshold = 1.0;
        Rng r(4);
        const BinaryMask m = generate_mask(cfg, 64, 64, r);
        CHECK(m.cast<int>().sum() > 0);
        // A filled axis-aligned box: its bounding box is full.
        int y0 = 64, y1 = -1, x0 = 64, x1 = -1;
        for (int y = 0; y < 64; ++y) {
            for (int x = 0; x < 64; ++x) {
                if (m(y, x)) {
                    y0 = std::min(y0, y);
                    y1 = std::max(y1, y);
                    x0 = std::min(x0, x);
                    x1 = std::max(x1, x);
                }
            }
        }
        CHECK(m.cast<int>().sum() == (y1 - y0 + 1) * (x1 - x0 + 1));
    }
}

TEST_CASE("blend") {
    std::mt19937_64 g(5);
    const ImageTensor src = random_image(16, 16, g);
    const ImageTensor tex = random_image(16, 16, g);
    CHECK(blend(src, tex, BinaryMask::Ones(16, 16), 1.0) == tex);
    CHECK(blend(src, tex, BinaryMask::Zero(16, 16), 0.7) == src);
    BinaryMask m = BinaryMask::Zero(16, 16);
    m.block(2, 3, 5, 7).setOnes();
    const double beta = 0.37;
    const ImageTensor out = blend(src, tex, m, beta);
    for (int c = 0; c < 3; ++c) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            const double s = src.channels[c].data()[i];
            const double want = m.data()[i] ? beta * tex.channels[c].data()[i] + (1.0 - beta) * s : s;
            CHECK(out.channels[c].data()[i] == want);
        }
    }
    CHECK_THROWS_AS(blend(src, random_image(8, 16, g), m, 0.5), ShapeError);
    CHECK_THROWS_AS(blend(src, tex, m, 0.0), ShapeError);
}

TEST_CASE("patch targets match the counting oracle") {
    Rng r(6);
    SynthesisConfig cfg;
    for (int i = 0; i < 50; ++i) {
        const BinaryMask m = generate_mask(cfg, 64, 64, r);
        CHECK(patch_targets(m, 8, 0.3) == count_oracle(m, 8, 0.3));
        CHECK(patch_targets(m, 16, 0.5) == count_oracle(m, 16, 0.5));
    }
    CHECK_THROWS_AS(patch_targets(BinaryMask::Zero(10, 10), 4, 0.3), ShapeError);
}

TEST_CASE("make_sample contract") {
    std::mt19937_64 g(7);
    const ImageTensor src = smooth_image(64, 64, g);
    const SelfAugmentTexture self;
    SUBCASE("p_a = 0 is always clean") {
        SynthesisConfig cfg;
        cfg.anomaly_probability = 0.0;
        Rng r(1);
        for (int i = 0; i < 20; ++i) {
            const auto s = make_sample(src, cfg, 8, self, r);
            CHECK_FALSE(s.is_anomalous);
            CHECK(s.image == src);
            CHECK(s.mask_full.cast<int>().sum() == 0);
            CHECK(s.mask_patch == Matrix::Zero(8, 8));
        }
    }
    SUBCASE("anomalous samples") {
        SynthesisConfig cfg;
        cfg.anomaly_probability = 1.0;
        Rng r(2);
        for (int i = 0; i < 100; ++i) {
            const auto s = make_sample(src, cfg, 8, self, r);
            REQUIRE(s.is_anomalous);
            CHECK(s.mask_full.cast<int>().sum() > 0);
            CHECK(s.mask_patch.sum() > 0.0);
            CHECK(s.mask_patch == count_oracle(s.mask_full, 8, cfg.patch_threshold));
            CHECK(outside_equal(s.image, src, s.mask_full));
            CHECK_NOTHROW(s.image.validate());
        }
    }
    SUBCASE("seeded stream is reproducible") {
        SynthesisConfig cfg;
        Rng a(9);
        Rng b(9);
        for (int i = 0; i < 10; ++i) {
            const auto x = make_sample(src, cfg, 8, self, a);
            const auto y = make_sample(src, cfg, 8, self, b);
            CHECK(x.image == y.image);
            CHECK(x.mask_full == y.mask_full);
        }
    }
}

TEST_CASE("texture sources") {
    std::mt19937_64 g(8);
    const ImageTensor src = random_image(32, 32, g);
    Rng r(1);
    const ImageTensor t = SelfAugmentTexture().sample(src, r);
    CHECK(t.height() == 32);
    CHECK_NOTHROW(t.validate());

    const fs::path dir = temp_dir("textures");
    save_image(dir / "a.png", random_image(20, 24, g));
    save_image(dir / "sub" / "b.png", random_image(20, 24, g));
    const FolderTexture folder(dir);
    CHECK(folder.size() == 2);
    CHECK(folder.sample(src, r).width() == 32);
    CHECK_THROWS_AS(FolderTexture(dir / "missing"), DataError);

    SynthesisConfig cfg;
    cfg.texture_dir = dir;
    CHECK(dynamic_cast<FolderTexture*>(make_texture_source(cfg).get()) != nullptr);
    CHECK(dynamic_cast<SelfAugmentTexture*>(make_texture_source(SynthesisConfig{}).get()) != nullptr);

    const InMemoryTexture mem({random_image(32, 32, g)});
    CHECK_NOTHROW((void)mem.sample(src, r));
    CHECK_THROWS_AS((void)mem.sample(random_image(16, 16, g), r), ShapeError);
}

TEST_CASE("config validation") {
    SynthesisConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.opacity_min = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.anomaly_probability = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.perlin_scale_max = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
