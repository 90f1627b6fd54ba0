// SPDX-License-Identifier: Apache-2.0
//
// MVTec-AD and VisA directory layouts folded into one multi-class index.

#pragma once

#include "clipada/image.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace clipada {

enum class Split { train, test };
enum class Label { normal, anomalous };

struct Record {
    std::filesystem::path path;
    std::string category;
    Split split = Split::train;
    Label label = Label::normal;
    std::optional<std::filesystem::path> mask_path;

    bool operator==(const Record&) const = default;
};

struct DatasetIndex {
    std::vector<Record> records;
    std::vector<std::string> categories;

    [[nodiscard]] std::vector<Record> split(Split s) const;
    [[nodiscard]] std::size_t count(Split s) const;
    /// Throws DataError when an invariant is broken: anomalous train records,
    /// anomalous test records without mask, or no categories.
    void validate() const;
};

/// category/{train/good, test/<defect>, ground_truth/<defect>} per category.
DatasetIndex index_mvtec(const std::filesystem::path& root);

/// split_csv/1cls.csv with columns object, split, label, image, mask.
DatasetIndex index_visa(const std::filesystem::path& root);

/// "mvtec" or "visa".
DatasetIndex index_dataset(const std::string& name, const std::filesystem::path& root);

/// Per-category stratified subsample of the train split; test records pass
/// through. Keeps each category's max(1, round(fraction * n)) records in
/// their original order.
DatasetIndex subsample(const DatasetIndex& index, double fraction, std::uint64_t seed);

/// Image and mask at a fixed size. Normal records get an all-zero mask.
struct LoadedRecord {
    ImageTensor image;
    BinaryMask mask;
};
LoadedRecord load_record(const Record& record, int height, int width);

std::string to_string(Split s);
std::string to_string(Label l);

} // namespace clipada
