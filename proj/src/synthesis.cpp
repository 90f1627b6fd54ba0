// SPDX-License-Identifier: Apache-2.0
#include "clipada/synthesis.hpp"

#include "clipada/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace clipada {

void SynthesisConfig::validate() const {
    if (perlin_scale_min < 0 || perlin_scale_max <= perlin_scale_min) {
        throw ConfigError("perlin scale range must satisfy 0 <= min < max");
    }
    if (!(opacity_min > 0.0 && opacity_min <= opacity_max && opacity_max <= 1.0)) {
        throw ConfigError("opacity range must lie in (0, 1]");
    }
    if (!(anomaly_probability >= 0.0 && anomaly_probability <= 1.0)) {
        throw ConfigError("anomaly probability must lie in [0, 1]");
    }
    if (!(patch_threshold > 0.0 && patch_threshold <= 1.0)) throw ConfigError("patch threshold must lie in (0, 1]");
    if (max_mask_attempts < 1) throw ConfigError("max_mask_attempts must be >= 1");
}

namespace {

double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

bool is_image_file(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

} // namespace

Matrix perlin_noise(int height, int width, int res_y, int res_x, Rng& rng) {
    if (height <= 0 || width <= 0 || res_y <= 0 || res_x <= 0) throw ShapeError("perlin_noise: bad size");
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    Matrix gx(res_y + 1, res_x + 1);
    Matrix gy(res_y + 1, res_x + 1);
    for (Eigen::Index i = 0; i < gx.size(); ++i) {
        const double a = angle(rng);
        gx.data()[i] = std::cos(a);
        gy.data()[i] = std::sin(a);
    }
    Matrix out(height, width);
    for (int y = 0; y < height; ++y) {
        const double u = static_cast<double>(y) * res_y / height;
        const int iy = std::min(static_cast<int>(u), res_y - 1);
        const double fy = u - iy;
        for (int x = 0; x < width; ++x) {
            const double v = static_cast<double>(x) * res_x / width;
            const int ix = std::min(static_cast<int>(v), res_x - 1);
            const double fx = v - ix;
            const auto dot = [&](int cy, int cx, double dy, double dx) {
                return gy(iy + cy, ix + cx) * dy + gx(iy + cy, ix + cx) * dx;
            };
            const double n00 = dot(0, 0, fy, fx);
            const double n01 = dot(0, 1, fy, fx - 1.0);
            const double n10 = dot(1, 0, fy - 1.0, fx);
            const double n11 = dot(1, 1, fy - 1.0, fx - 1.0);
            const double sx = fade(fx);
            const double sy = fade(fy);
            const double top = n00 + sx * (n01 - n00);
            const double bottom = n10 + sx * (n11 - n10);
            out(y, x) = std::numbers::sqrt2 * (top + sy * (bottom - top));
        }
    }
    return out;
}

BinaryMask rectangle_mask(int height, int width, int min_side, int max_side, Rng& rng) {
    const auto side = [&](int limit) {
        const int lo = std::clamp(min_side, 1, limit);
        const int hi = std::clamp(max_side, lo, limit);
        return std::uniform_int_distribution<int>(lo, hi)(rng);
    };
    const int rh = side(height);
    const int rw = side(width);
    const int y0 = std::uniform_int_distribution<int>(0, height - rh)(rng);
    const int x0 = std::uniform_int_distribution<int>(0, width - rw)(rng);
    BinaryMask m = BinaryMask::Zero(height, width);
    m.block(y0, x0, rh, rw).setOnes();
    return m;
}

BinaryMask generate_mask(const SynthesisConfig& cfg, int height, int width, Rng& rng) {
    std::uniform_int_distribution<int> scale(cfg.perlin_scale_min, cfg.perlin_scale_max - 1);
    for (int attempt = 0; attempt < cfg.max_mask_attempts; ++attempt) {
        const int ry = 1 << scale(rng);
        const int rx = 1 << scale(rng);
        const Matrix noise = perlin_noise(height, width, ry, rx, rng);
        BinaryMask m = (noise.array() > cfg.binarize_threshold).cast<std::uint8_t>();
        if (m.cast<int>().sum() > 0) return m;
    }
    return rectangle_mask(height, width, std::max(1, height / 8), std::max(1, height / 4), rng);
}

ImageTensor blend(const ImageTensor& source, const ImageTensor& texture, const BinaryMask& mask, double beta) {
    if (texture.height() != source.height() || texture.width() != source.width() ||
        mask.rows() != source.height() || mask.cols() != source.width()) {
        throw ShapeError("blend: source, texture and mask sizes differ");
    }
    if (!(beta > 0.0 && beta <= 1.0)) throw ShapeError("blend: opacity must lie in (0, 1]");
    ImageTensor out = source;
    for (int c = 0; c < 3; ++c) {
        for (Eigen::Index i = 0; i < mask.size(); ++i) {
            if (mask.data()[i] == 0) continue;
            const double s = source.channels[c].data()[i];
            out.channels[c].data()[i] = beta * texture.channels[c].data()[i] + (1.0 - beta) * s;
        }
    }
    return out;
}

Matrix patch_targets(const BinaryMask& mask, int patch, double threshold) {
    if (patch <= 0 || mask.rows() % patch != 0 || mask.cols() % patch != 0) {
        throw ShapeError("mask size is not divisible by the patch size");
    }
    const auto gh = mask.rows() / patch;
    const auto gw = mask.cols() / patch;
    const double area = static_cast<double>(patch) * patch;
    Matrix out(gh, gw);
    for (Eigen::Index py = 0; py < gh; ++py) {
        for (Eigen::Index px = 0; px < gw; ++px) {
            const int count = mask.block(py * patch, px * patch, patch, patch).cast<int>().sum();
            out(py, px) = static_cast<double>(count) / area >= threshold ? 1.0 : 0.0;
        }
    }
    return out;
}

ImageTensor SelfAugmentTexture::sample(const ImageTensor& source, Rng& rng) const {
    const auto h = static_cast<int>(source.height());
    const auto w = static_cast<int>(source.width());
    const int oy = std::uniform_int_distribution<int>(0, h - 1)(rng);
    const int ox = std::uniform_int_distribution<int>(0, w - 1)(rng);
    const int grid = (h % 4 == 0 && w % 4 == 0) ? 4 : (h % 2 == 0 && w % 2 == 0) ? 2 : 1;
    const int th = h / grid;
    const int tw = w / grid;
    std::vector<int> tiles(static_cast<std::size_t>(grid * grid));
    for (std::size_t i = 0; i < tiles.size(); ++i) tiles[i] = static_cast<int>(i);
    std::shuffle(tiles.begin(), tiles.end(), rng);

    std::array<int, 3> perm{0, 1, 2};
    std::shuffle(perm.begin(), perm.end(), rng);
    std::uniform_real_distribution<double> gain(0.5, 1.5);
    std::uniform_real_distribution<double> bias(-0.3, 0.3);
    const bool invert = std::bernoulli_distribution(0.5)(rng);

    ImageTensor out(h, w);
    for (int c = 0; c < 3; ++c) {
        const double g = gain(rng);
        const double b = bias(rng);
        const Matrix& src = source.channels[perm[c]];
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                // Destination tile (ty, tx) takes the content of tile tiles[...].
                const int t = tiles[static_cast<std::size_t>((y / th) * grid + x / tw)];
                const int sy = (t / grid) * th + y % th;
                const int sx = (t % grid) * tw + x % tw;
                double v = src((sy + oy) % h, (sx + ox) % w);
                if (invert) v = 1.0 - v;
                out.channels[c](y, x) = std::clamp(g * v + b, 0.0, 1.0);
            }
        }
    }
    return out;
}

FolderTexture::FolderTexture(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw DataError("texture folder not found: " + dir.string());
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && is_image_file(e.path())) files_.push_back(e.path());
    }
    std::sort(files_.begin(), files_.end());
    if (files_.empty()) throw DataError("texture folder has no images: " + dir.string());
}

ImageTensor FolderTexture::sample(const ImageTensor& source, Rng& rng) const {
    const auto i = std::uniform_int_distribution<std::size_t>(0, files_.size() - 1)(rng);
    return load_image(files_[i], static_cast<int>(source.height()), static_cast<int>(source.width()));
}

InMemoryTexture::InMemoryTexture(std::vector<ImageTensor> textures) : textures_(std::move(textures)) {
    if (textures_.empty()) throw DataError("no textures given");
}

ImageTensor InMemoryTexture::sample(const ImageTensor& source, Rng& rng) const {
    const auto i = std::uniform_int_distribution<std::size_t>(0, textures_.size() - 1)(rng);
    const ImageTensor& t = textures_[i];
    if (t.height() != source.height() || t.width() != source.width()) {
        throw ShapeError("texture size differs from the source image");
    }
    return t;
}

std::unique_ptr<TextureSource> make_texture_source(const SynthesisConfig& cfg) {
    if (cfg.texture_dir.empty()) return std::make_unique<SelfAugmentTexture>();
    return std::make_unique<FolderTexture>(cfg.texture_dir);
}

SyntheticSample make_sample(const ImageTensor& source, const SynthesisConfig& cfg, int patch,
                            const TextureSource& textures, Rng& rng) {
    const auto h = static_cast<int>(source.height());
    const auto w = static_cast<int>(source.width());
    SyntheticSample out;
    const bool anomalous = cfg.anomaly_probability > 0.0 && std::bernoulli_distribution(cfg.anomaly_probability)(rng);
    if (!anomalous) {
        out.image = source;
        out.mask_full = BinaryMask::Zero(h, w);
        out.mask_patch = Matrix::Zero(h / patch, w / patch);
        if (h % patch != 0 || w % patch != 0) throw ShapeError("image size is not divisible by the patch size");
        return out;
    }

    BinaryMask mask;
    Matrix targets;
    bool found = false;
    for (int attempt = 0; attempt < cfg.max_mask_attempts && !found; ++attempt) {
        mask = generate_mask(cfg, h, w, rng);
        targets = patch_targets(mask, patch, cfg.patch_threshold);
        found = targets.sum() > 0.0;
    }
    if (!found) {
        // A rectangle at least two patches wide always covers one full patch.
        mask = rectangle_mask(h, w, 2 * patch, std::max(2 * patch, h / 4), rng);
        targets = patch_targets(mask, patch, cfg.patch_threshold);
    }
    const double beta = std::uniform_real_distribution<double>(cfg.opacity_min, cfg.opacity_max)(rng);
    const ImageTensor texture = textures.sample(source, rng);
    out.image = blend(source, texture, mask, std::min(beta, 1.0));
    out.mask_full = std::move(mask);
    out.mask_patch = std::move(targets);
    out.is_anomalous = true;
    return out;
}

} // namespace clipada
