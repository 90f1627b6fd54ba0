// SPDX-License-Identifier: Apache-2.0
#include "clipada/image.hpp"

#include "clipada/errors.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>

namespace clipada {

ImageTensor::ImageTensor(Eigen::Index height, Eigen::Index width, double fill) {
    for (auto& c : channels) c = Matrix::Constant(height, width, fill);
}

void ImageTensor::validate() const {
    for (const auto& c : channels) {
        if (c.rows() != height() || c.cols() != width()) {
            throw ShapeError("image channels have different shapes");
        }
        if (c.size() > 0 && (c.minCoeff() < 0.0 || c.maxCoeff() > 1.0)) {
            throw ShapeError("image values must lie in [0, 1]");
        }
    }
}

ag::ImageVar ImageTensor::as_var() const {
    return {ag::Var::constant(channels[0]), ag::Var::constant(channels[1]),
            ag::Var::constant(channels[2])};
}

ImageTensor load_image(const std::filesystem::path& path, int height, int width) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw DataError("cannot read image: " + path.string());
    if (bgr.rows != height || bgr.cols != width) {
        cv::resize(bgr, bgr, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
    }
    ImageTensor out(height, width);
    for (int y = 0; y < height; ++y) {
        const auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < width; ++x) {
            out.channels[0](y, x) = row[x][2] / 255.0;
            out.channels[1](y, x) = row[x][1] / 255.0;
            out.channels[2](y, x) = row[x][0] / 255.0;
        }
    }
    return out;
}

BinaryMask load_mask(const std::filesystem::path& path, int height, int width) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw DataError("cannot read mask: " + path.string());
    if (m.rows != height || m.cols != width) {
        cv::resize(m, m, cv::Size(width, height), 0, 0, cv::INTER_NEAREST);
    }
    BinaryMask out(height, width);
    for (int y = 0; y < height; ++y) {
        const auto* row = m.ptr<std::uint8_t>(y);
        for (int x = 0; x < width; ++x) out(y, x) = row[x] > 0 ? 1 : 0;
    }
    return out;
}

namespace {

cv::Mat to_bgr8(const ImageTensor& image) {
    cv::Mat bgr(static_cast<int>(image.height()), static_cast<int>(image.width()), CV_8UC3);
    for (int y = 0; y < bgr.rows; ++y) {
        auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < bgr.cols; ++x) {
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp(image.channels[c](y, x), 0.0, 1.0);
                row[x][2 - c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
        }
    }
    return bgr;
}

void write_or_throw(const std::filesystem::path& path, const cv::Mat& m) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), m)) throw RuntimeFailure("cannot write image: " + path.string());
}

} // namespace

void save_image(const std::filesystem::path& path, const ImageTensor& image) {
    write_or_throw(path, to_bgr8(image));
}

void save_mask(const std::filesystem::path& path, const BinaryMask& mask) {
    cv::Mat m(static_cast<int>(mask.rows()), static_cast<int>(mask.cols()), CV_8UC1);
    for (int y = 0; y < m.rows; ++y) {
        for (int x = 0; x < m.cols; ++x) m.at<std::uint8_t>(y, x) = mask(y, x) ? 255 : 0;
    }
    write_or_throw(path, m);
}

void save_overlay(const std::filesystem::path& path, const ImageTensor& image, const Matrix& scores,
                  double alpha) {
    if (scores.rows() != image.height() || scores.cols() != image.width()) {
        throw ShapeError("overlay: score map and image sizes differ");
    }
    cv::Mat gray(static_cast<int>(scores.rows()), static_cast<int>(scores.cols()), CV_8UC1);
    for (int y = 0; y < gray.rows; ++y) {
        for (int x = 0; x < gray.cols; ++x) {
            gray.at<std::uint8_t>(y, x) =
                static_cast<std::uint8_t>(std::lround(std::clamp(scores(y, x), 0.0, 1.0) * 255.0));
        }
    }
    cv::Mat heat;
    cv::applyColorMap(gray, heat, cv::COLORMAP_JET);
    cv::Mat blended;
    cv::addWeighted(to_bgr8(image), 1.0 - alpha, heat, alpha, 0.0, blended);
    write_or_throw(path, blended);
}

Matrix bilinear_matrix(Eigen::Index out_size, Eigen::Index in_size) {
    if (out_size <= 0 || in_size <= 0) throw ShapeError("bilinear_matrix: empty size");
    Matrix r = Matrix::Zero(out_size, in_size);
    const double ratio = static_cast<double>(in_size) / static_cast<double>(out_size);
    for (Eigen::Index i = 0; i < out_size; ++i) {
        double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
        const auto i0 = static_cast<Eigen::Index>(std::floor(src));
        const Eigen::Index i1 = std::min(i0 + 1, in_size - 1);
        const double w1 = src - static_cast<double>(i0);
        r(i, i0) += 1.0 - w1;
        r(i, i1) += w1;
    }
    return r;
}

Matrix resize_bilinear(const Matrix& map, Eigen::Index out_h, Eigen::Index out_w) {
    const Matrix rh = bilinear_matrix(out_h, map.rows());
    const Matrix rw = bilinear_matrix(out_w, map.cols());
    return rh * map * rw.transpose();
}

double mask_coverage(const BinaryMask& mask) {
    if (mask.size() == 0) return 0.0;
    return static_cast<double>(mask.cast<int>().sum()) / static_cast<double>(mask.size());
}

} // namespace clipada
