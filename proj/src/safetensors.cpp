// SPDX-License-Identifier: Apache-2.0
#include "clipada/safetensors.hpp"

#include "clipada/errors.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <limits>
#include <cstring>
#include <fstream>
#include <numeric>

namespace clipada {

namespace {

double half_to_double(std::uint16_t h) {
    const std::uint32_t sign = (h >> 15) & 1u;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    const std::uint32_t frac = h & 0x3FFu;
    double v;
    if (exp == 0) {
        v = std::ldexp(static_cast<double>(frac), -24);
    } else if (exp == 31) {
        v = frac == 0 ? std::numeric_limits<double>::infinity() : std::numeric_limits<double>::quiet_NaN();
    } else {
        v = std::ldexp(static_cast<double>(frac | 0x400u), static_cast<int>(exp) - 25);
    }
    return sign != 0 ? -v : v;
}

double bf16_to_double(std::uint16_t b) {
    return static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(b) << 16));
}

std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "F64") return 8;
    if (dtype == "F32") return 4;
    if (dtype == "F16" || dtype == "BF16") return 2;
    throw CheckpointError("unsupported safetensors dtype " + dtype);
}

} // namespace

SafetensorsFile::SafetensorsFile(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path_.string());
    std::uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (!in || header_len > (std::uint64_t{1} << 30)) throw CheckpointError("bad safetensors header in " + path_.string());
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw CheckpointError("truncated safetensors header in " + path_.string());
    data_offset_ = 8 + header_len;

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("bad safetensors header: " + std::string(e.what()));
    }
    for (const auto& [name, v] : j.items()) {
        if (name == "__metadata__") continue;
        Entry e;
        e.dtype = v.at("dtype").get<std::string>();
        e.shape = v.at("shape").get<std::vector<std::int64_t>>();
        const auto offsets = v.at("data_offsets").get<std::vector<std::uint64_t>>();
        if (offsets.size() != 2) throw CheckpointError("bad data_offsets for " + name);
        e.begin = offsets[0];
        e.end = offsets[1];
        const auto count = std::accumulate(e.shape.begin(), e.shape.end(), std::int64_t{1}, std::multiplies<>());
        if (e.end - e.begin != static_cast<std::uint64_t>(count) * dtype_size(e.dtype)) {
            throw CheckpointError("size mismatch for tensor " + name);
        }
        entries_.emplace(name, std::move(e));
    }
}

const SafetensorsFile::Entry& SafetensorsFile::entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw CheckpointError("tensor not found: " + name + " in " + path_.string());
    return it->second;
}

std::vector<std::int64_t> SafetensorsFile::shape(const std::string& name) const { return entry(name).shape; }

std::vector<std::string> SafetensorsFile::names() const {
    std::vector<std::string> out;
    for (const auto& [n, _] : entries_) out.push_back(n);
    return out;
}

ag::Matrix SafetensorsFile::matrix(const std::string& name) const {
    const Entry& e = entry(name);
    std::int64_t rows = 1;
    std::int64_t cols = 1;
    if (e.shape.size() == 1) {
        cols = e.shape[0];
    } else if (!e.shape.empty()) {
        rows = e.shape[0];
        cols = std::accumulate(e.shape.begin() + 1, e.shape.end(), std::int64_t{1}, std::multiplies<>());
    }
    std::ifstream in(path_, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(data_offset_ + e.begin));
    std::vector<char> raw(e.end - e.begin);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!in) throw CheckpointError("truncated tensor data for " + name);

    ag::Matrix m(rows, cols);
    const std::size_t n = static_cast<std::size_t>(rows * cols);
    for (std::size_t i = 0; i < n; ++i) {
        const char* p = raw.data() + i * dtype_size(e.dtype);
        double v;
        if (e.dtype == "F64") {
            std::memcpy(&v, p, 8);
        } else if (e.dtype == "F32") {
            float f;
            std::memcpy(&f, p, 4);
            v = f;
        } else {
            std::uint16_t h;
            std::memcpy(&h, p, 2);
            v = e.dtype == "F16" ? half_to_double(h) : bf16_to_double(h);
        }
        m.data()[i] = v;
    }
    return m;
}

} // namespace clipada
