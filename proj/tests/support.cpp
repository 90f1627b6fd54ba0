// SPDX-License-Identifier: Apache-2.0
#include "support.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

namespace clipada::test {

fs::path temp_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("clipada_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

Matrix numeric_grad(const std::function<double()>& f, ag::Var& param, double h) {
    Matrix& w = param.mutable_value();
    Matrix g(w.rows(), w.cols());
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        const double orig = w.data()[i];
        w.data()[i] = orig + h;
        const double up = f();
        w.data()[i] = orig - h;
        const double down = f();
        w.data()[i] = orig;
        g.data()[i] = (up - down) / (2.0 * h);
    }
    return g;
}

double rel_error(const Matrix& a, const Matrix& n) {
    const double denom = std::max({a.norm(), n.norm(), 1e-12});
    return (a - n).norm() / denom;
}

double gradient_check(std::vector<ag::Var> params, const std::function<ag::Var()>& f, double h) {
    for (auto& p : params) p.zero_grad();
    ag::backward(f());
    std::vector<Matrix> analytic;
    for (auto& p : params) {
        analytic.push_back(p.grad());
        p.zero_grad();
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Matrix num = numeric_grad([&] { return f().item(); }, params[i], h);
        worst = std::max(worst, rel_error(analytic[i], num));
    }
    return worst;
}

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

ImageTensor random_image(int h, int w, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ImageTensor img(h, w);
    for (auto& c : img.channels) {
        for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = u(rng);
    }
    return img;
}

ImageTensor smooth_image(int h, int w, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ImageTensor img(h, w);
    for (auto& c : img.channels) {
        const double base = 0.35 + 0.3 * u(rng);
        const double fx = 2.0 * M_PI * (0.5 + 1.5 * u(rng)) / w;
        const double fy = 2.0 * M_PI * (0.5 + 1.5 * u(rng)) / h;
        const double ph = 2.0 * M_PI * u(rng);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) c(y, x) = base + 0.1 * std::sin(fx * x + fy * y + ph);
        }
    }
    return img;
}

ImageTensor noise_texture(int h, int w, std::mt19937_64& rng) {
    std::bernoulli_distribution coin(0.5);
    std::uniform_real_distribution<double> u(0.0, 0.15);
    ImageTensor img(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const bool on = coin(rng);
            for (auto& c : img.channels) c(y, x) = on ? 1.0 - u(rng) : u(rng);
        }
    }
    return img;
}

Config toy_config(int dim, int patch, int image_size, int n_refine) {
    Config c = default_config();
    c.backend = BackendSpec::parse("toy:0");
    c.dims.patch_size = patch;
    c.dims.raw_dim = dim;
    c.dims.shared_dim = dim;
    c.dims.text_token_dim = dim;
    c.image_size = image_size;
    c.model.n_refine = n_refine;
    c.train.epochs = 4;
    c.train.lr_milestones = {2};
    c.train.batch_size = 2;
    c.train.lr = 1e-2;
    c.inference.k_top = 16;
    c.inference.sigma = 1.0;
    c.validate();
    return c;
}

namespace {

void write_png(const fs::path& path, int size, unsigned seed) {
    fs::create_directories(path.parent_path());
    std::mt19937_64 rng(seed);
    save_image(path, random_image(size, size, rng));
}

void write_mask(const fs::path& path, int size, int x0) {
    fs::create_directories(path.parent_path());
    BinaryMask m = BinaryMask::Zero(size, size);
    m.block(size / 4, x0, size / 2, size / 4).setOnes();
    save_mask(path, m);
}

} // namespace

fs::path write_mvtec_fixture(const fs::path& root, const std::vector<std::string>& categories, int size) {
    unsigned seed = 1;
    for (const auto& cat : categories) {
        for (const char* stem : {"000", "001", "002"}) write_png(root / cat / "train" / "good" / (std::string(stem) + ".png"), size, seed++);
        write_png(root / cat / "test" / "good" / "000.png", size, seed++);
        for (const char* stem : {"000", "001"}) {
            write_png(root / cat / "test" / "crack" / (std::string(stem) + ".png"), size, seed++);
            write_mask(root / cat / "ground_truth" / "crack" / (std::string(stem) + "_mask.png"), size,
                       stem[2] == '0' ? 0 : size / 2);
        }
        fs::create_directories(root / cat / "license");  // stray files are ignored
    }
    std::ofstream(root / "readme.txt") << "fixture\n";
    return root;
}

fs::path write_visa_fixture(const fs::path& root, const std::vector<std::string>& categories, int size) {
    unsigned seed = 100;
    fs::create_directories(root / "split_csv");
    std::ofstream csv(root / "split_csv" / "1cls.csv");
    csv << "object,split,label,image,mask\n";
    for (const auto& cat : categories) {
        const std::string normal = cat + "/Data/Images/Normal/";
        const std::string anomaly = cat + "/Data/Images/Anomaly/";
        const std::string masks = cat + "/Data/Masks/Anomaly/";
        for (const char* stem : {"0000", "0001", "0002"}) {
            write_png(root / (normal + stem + ".JPG"), size, seed++);
            csv << cat << ",train,normal," << normal << stem << ".JPG,\n";
        }
        write_png(root / (normal + "0003.JPG"), size, seed++);
        csv << cat << ",test,normal," << normal << "0003.JPG,\n";
        for (const char* stem : {"000", "001"}) {
            write_png(root / (anomaly + stem + ".JPG"), size, seed++);
            write_mask(root / (masks + stem + ".png"), size, stem[2] == '0' ? 0 : size / 2);
            csv << cat << ",test,anomaly," << anomaly << stem << ".JPG," << masks << stem << ".png\n";
        }
    }
    return root;
}

int run(const std::string& command) {
    const int status = std::system(command.c_str());
    if (status == -1) return -1;
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace clipada::test
