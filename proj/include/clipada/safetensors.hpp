// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "clipada/autograd.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace clipada {

/// Read-only view of a .safetensors file. Tensors are read on demand and
/// converted to double; F64, F32, F16 and BF16 are supported.
class SafetensorsFile {
public:
    explicit SafetensorsFile(std::filesystem::path path);

    [[nodiscard]] bool contains(const std::string& name) const { return entries_.contains(name); }
    [[nodiscard]] std::vector<std::int64_t> shape(const std::string& name) const;
    [[nodiscard]] std::vector<std::string> names() const;

    /// Tensor as a matrix: 1-D -> 1 x n, 2-D as stored, higher ranks ->
    /// dim0 x (product of the rest).
    [[nodiscard]] ag::Matrix matrix(const std::string& name) const;

private:
    struct Entry {
        std::string dtype;
        std::vector<std::int64_t> shape;
        std::uint64_t begin = 0;
        std::uint64_t end = 0;
    };
    const Entry& entry(const std::string& name) const;

    std::filesystem::path path_;
    std::uint64_t data_offset_ = 0;
    std::map<std::string, Entry> entries_;
};

} // namespace clipada
