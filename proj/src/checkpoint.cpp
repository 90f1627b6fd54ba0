// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container, little-endian:
//   "CLIPADA\0"  u32 version
//   u64 n, n bytes   YAML config snapshot
//   u64 n, n bytes   JSON metadata
//   u32 count, then per tensor: u32 n, name, u64 rows, u64 cols, f64 data

#include "clipada/errors.hpp"
#include "clipada/trainer.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace clipada {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'L', 'I', 'P', 'A', 'D', 'A', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_string(std::ostream& out, const std::string& s) {
    put<std::uint64_t>(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& in) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError("checkpoint is truncated");
    return v;
}

std::string get_bytes(std::istream& in, std::uint64_t n) {
    if (n > (1ULL << 32)) throw CheckpointError("checkpoint field is implausibly large");
    std::string s(n, '\0');
    if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw CheckpointError("checkpoint is truncated");
    return s;
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
    nlohmann::json meta;
    meta["epoch"] = state.epoch;
    meta["step"] = state.step;
    std::ostringstream rng;
    rng << state.rng;
    meta["rng"] = rng.str();
    meta["backend_hash"] = state.backend_hash;
    meta["adam_steps"] = state.optimizer.steps();
    meta["epoch_losses"] = state.epoch_losses;

    std::vector<std::pair<std::string, const Matrix*>> tensors;
    const auto names = state.model.parameter_names();
    const auto params = state.model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) tensors.emplace_back(names[i], &params[i].value());
    for (std::size_t i = 0; i < params.size(); ++i) {
        tensors.emplace_back("adam.m." + names[i], &state.optimizer.first_moments().at(i));
        tensors.emplace_back("adam.v." + names[i], &state.optimizer.second_moments().at(i));
    }

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw RuntimeFailure("cannot write checkpoint " + path.string());
        out.write(kMagic, sizeof kMagic);
        put(out, kVersion);
        put_string(out, to_yaml(state.config));
        put_string(out, meta.dump());
        put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
        for (const auto& [name, m] : tensors) {
            put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            put<std::uint64_t>(out, static_cast<std::uint64_t>(m->rows()));
            put<std::uint64_t>(out, static_cast<std::uint64_t>(m->cols()));
            out.write(reinterpret_cast<const char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(double)));
        }
        if (!out) throw RuntimeFailure("failed writing checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

namespace {

struct Header {
    std::string yaml;
    std::string meta;
};

Header read_header(std::istream& in, const std::filesystem::path& path) {
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
        throw CheckpointError("not a checkpoint file: " + path.string());
    }
    const auto version = get<std::uint32_t>(in);
    if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    Header h;
    h.yaml = get_bytes(in, get<std::uint64_t>(in));
    h.meta = get_bytes(in, get<std::uint64_t>(in));
    return h;
}

Config parse_snapshot(const std::string& yaml) {
    try {
        return parse_config(yaml, default_config());
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
    }
}

} // namespace

Config read_checkpoint_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint not found: " + path.string());
    return parse_snapshot(read_header(in, path).yaml);
}

TrainState load_checkpoint(const std::filesystem::path& path, const Backend& backend) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint not found: " + path.string());
    const Header header = read_header(in, path);

    std::map<std::string, Matrix> tensors;
    const auto count = get<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = get_bytes(in, get<std::uint32_t>(in));
        const auto rows = get<std::uint64_t>(in);
        const auto cols = get<std::uint64_t>(in);
        if (rows > (1U << 24) || cols > (1U << 24)) throw CheckpointError("tensor " + name + " has implausible shape");
        Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        if (!in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)))) {
            throw CheckpointError("checkpoint is truncated");
        }
        tensors.emplace(name, std::move(m));
    }

    const Config config = parse_snapshot(header.yaml);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(header.meta);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint metadata is invalid: ") + e.what());
    }

    TrainState state = start_training(config, backend);
    try {
        if (meta.at("backend_hash").get<std::uint64_t>() != state.backend_hash) {
            throw CheckpointError("checkpoint was written with different backbone weights");
        }
        state.epoch = meta.at("epoch").get<int>();
        state.step = meta.at("step").get<long long>();
        std::istringstream rng(meta.at("rng").get<std::string>());
        rng >> state.rng;
        if (!rng) throw CheckpointError("checkpoint RNG state is invalid");
        state.epoch_losses = meta.at("epoch_losses").get<std::vector<double>>();

        const auto names = state.model.parameter_names();
        auto params = state.model.parameters();
        std::vector<Matrix> m;
        std::vector<Matrix> v;
        const auto take = [&](const std::string& name, const ag::Var& like) {
            auto it = tensors.find(name);
            if (it == tensors.end()) throw CheckpointError("checkpoint lacks tensor " + name);
            if (it->second.rows() != like.rows() || it->second.cols() != like.cols()) {
                throw CheckpointError("tensor " + name + " has the wrong shape");
            }
            return it->second;
        };
        for (std::size_t i = 0; i < params.size(); ++i) {
            params[i].mutable_value() = take(names[i], params[i]);
            m.push_back(take("adam.m." + names[i], params[i]));
            v.push_back(take("adam.v." + names[i], params[i]));
        }
        state.optimizer.restore(meta.at("adam_steps").get<long long>(), std::move(m), std::move(v));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint metadata is incomplete: ") + e.what());
    }
    return state;
}

} // namespace clipada
