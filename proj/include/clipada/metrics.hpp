// SPDX-License-Identifier: Apache-2.0
//
// Threshold-free detection metrics: image AUROC, pixel AUROC and pixel AP.

#pragma once

#include "clipada/datasets.hpp"
#include "clipada/inference.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace clipada {

/// Normalised Mann-Whitney U; tied pairs count one half.
/// Throws DataError unless both classes are present.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Step-interpolated AP over distinct descending thresholds.
/// Throws DataError without positives.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct MetricRow {
    std::string category;
    double image_auroc = 0.0;
    double pixel_auroc = 0.0;
    double pixel_ap = 0.0;
    std::size_t images = 0;
};

struct EvaluationReport {
    std::vector<MetricRow> rows;
    MetricRow mean;  ///< unweighted average over rows
};

/// Per-category accumulation. Pixels are pooled inside each category.
class Evaluator {
public:
    explicit Evaluator(const DatasetIndex& index);

    void add(const Record& record, const ScoreMap& score, const BinaryMask& ground_truth);
    /// Throws DataError when a test record was never added.
    [[nodiscard]] EvaluationReport finish() const;

private:
    struct Bucket {
        std::vector<double> image_scores;
        std::vector<std::uint8_t> image_labels;
        std::vector<double> pixel_scores;
        std::vector<std::uint8_t> pixel_labels;
    };
    std::vector<std::string> categories_;
    std::map<std::string, Bucket> buckets_;
    std::map<std::filesystem::path, bool> expected_;
};

/// Scores keyed by image path; masks are loaded at the score-map size.
EvaluationReport evaluate(const DatasetIndex& index, const std::map<std::filesystem::path, ScoreMap>& scores);

void write_csv(const EvaluationReport& report, const std::filesystem::path& path);
/// Aligned plain-text table, values in percent.
std::string format_table(const EvaluationReport& report);

} // namespace clipada
