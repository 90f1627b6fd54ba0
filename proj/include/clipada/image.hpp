// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "clipada/autograd.hpp"

#include <array>
#include <cstdint>
#include <filesystem>

namespace clipada {

using ag::Matrix;

/// Binary mask, one byte per pixel, values 0 or 1.
using BinaryMask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// H x W x 3 image with values in [0, 1], stored as three channel planes.
struct ImageTensor {
    std::array<Matrix, 3> channels;

    ImageTensor() = default;
    ImageTensor(Eigen::Index height, Eigen::Index width, double fill = 0.0);

    [[nodiscard]] Eigen::Index height() const { return channels[0].rows(); }
    [[nodiscard]] Eigen::Index width() const { return channels[0].cols(); }

    /// Throws ShapeError unless all channels agree and every value is in [0, 1].
    void validate() const;

    /// Constant (non-differentiable) graph view of the image.
    [[nodiscard]] ag::ImageVar as_var() const;

    friend bool operator==(const ImageTensor& a, const ImageTensor& b) {
        for (int c = 0; c < 3; ++c) {
            if (a.channels[c].rows() != b.channels[c].rows() ||
                a.channels[c].cols() != b.channels[c].cols() || a.channels[c] != b.channels[c]) {
                return false;
            }
        }
        return true;
    }
};

/// Loads an 8-bit image file as RGB in [0,1], bilinearly resized to size x size.
ImageTensor load_image(const std::filesystem::path& path, int height, int width);
/// Loads a mask file, nearest-neighbour resized; any nonzero pixel is set.
BinaryMask load_mask(const std::filesystem::path& path, int height, int width);

void save_image(const std::filesystem::path& path, const ImageTensor& image);
/// Writes 0 -> 0 and 1 -> 255, single channel.
void save_mask(const std::filesystem::path& path, const BinaryMask& mask);
/// Jet-coloured heatmap of `scores` (values in [0,1]) blended over the image.
void save_overlay(const std::filesystem::path& path, const ImageTensor& image, const Matrix& scores,
                  double alpha = 0.5);

/// Bilinear resize with half-pixel centres (the usual align_corners=false
/// convention), edges clamped. Returns the (out x in) interpolation matrix
/// so that for a map M (in_h x in_w), R_h * M * R_w^T is the resized map.
Matrix bilinear_matrix(Eigen::Index out_size, Eigen::Index in_size);

/// Resize a single-channel map with the matrix above.
Matrix resize_bilinear(const Matrix& map, Eigen::Index out_h, Eigen::Index out_w);

/// Fraction of set pixels.
double mask_coverage(const BinaryMask& mask);

} // namespace clipada
