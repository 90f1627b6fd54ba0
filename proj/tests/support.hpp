// SPDX-License-Identifier: Apache-2.0
//
// Shared test helpers: finite differences, temp dirs, dataset fixture trees
// and procedural toy images.

#pragma once

#include "clipada/autograd.hpp"
#include "clipada/config.hpp"
#include "clipada/datasets.hpp"
#include "clipada/image.hpp"

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace clipada::test {

namespace fs = std::filesystem;

/// Fresh empty directory under the system temp dir.
fs::path temp_dir(const std::string& name);

/// Central differences of `f` w.r.t. every entry of `param` (restored after).
Matrix numeric_grad(const std::function<double()>& f, ag::Var& param, double h);

/// ||a - n|| / max(||a||, ||n||, 1e-12).
double rel_error(const Matrix& analytic, const Matrix& numeric);

/// Worst per-tensor relative error between backward() gradients of the
/// scalar built by `f` and central differences.
double gradient_check(std::vector<ag::Var> params, const std::function<ag::Var()>& f, double h = 1e-4);

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0);
ImageTensor random_image(int h, int w, std::mt19937_64& rng);

/// Sum of a few low-frequency sinusoids per channel, values in [0.2, 0.8].
ImageTensor smooth_image(int h, int w, std::mt19937_64& rng);
/// Per-pixel noise with strong contrast.
ImageTensor noise_texture(int h, int w, std::mt19937_64& rng);

/// Toy-backend config with C = D = `dim`, raw width `dim`, the given patch
/// size and image size, short schedule.
Config toy_config(int dim, int patch, int image_size, int n_refine);

/// MVTec-style tree: per category 3 train images, test/good with 1 image,
/// test/crack with 2 images and masks (<stem>_mask.png). Returns the root.
fs::path write_mvtec_fixture(const fs::path& root, const std::vector<std::string>& categories, int size = 32);

/// VisA-style tree with split_csv/1cls.csv; per category 3 train normal,
/// 1 test normal, 2 test anomalies with masks.
fs::path write_visa_fixture(const fs::path& root, const std::vector<std::string>& categories, int size = 32);

/// Runs a shell command, returns its exit status (not the raw wait status).
int run(const std::string& command);

} // namespace clipada::test
