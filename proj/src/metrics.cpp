// SPDX-License-Identifier: Apache-2.0
#include "clipada/metrics.hpp"

#include "clipada/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace clipada {

namespace {

void check_inputs(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) throw ShapeError("scores and labels differ in length");
    for (double s : scores) {
        if (std::isnan(s)) throw DataError("score is NaN");
    }
}

std::vector<std::size_t> order_by_score(std::span<const double> scores, bool descending) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return descending ? scores[a] > scores[b] : scores[a] < scores[b];
    });
    return idx;
}

} // namespace

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    check_inputs(scores, labels);
    const auto idx = order_by_score(scores, false);
    double pos = 0.0;
    double neg = 0.0;
    double rank_sum = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        double group_pos = 0.0;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            group_pos += labels[idx[j]] ? 1.0 : 0.0;
            ++j;
        }
        // Ranks i+1 .. j share their average.
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        rank_sum += group_pos * avg_rank;
        pos += group_pos;
        neg += static_cast<double>(j - i) - group_pos;
        i = j;
    }
    if (pos == 0.0 || neg == 0.0) throw DataError("AUROC needs both positive and negative labels");
    return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    check_inputs(scores, labels);
    const double total_pos = static_cast<double>(std::count_if(labels.begin(), labels.end(), [](auto l) { return l; }));
    if (total_pos == 0.0) throw DataError("average precision needs at least one positive label");
    const auto idx = order_by_score(scores, true);
    double tp = 0.0;
    double seen = 0.0;
    double prev_recall = 0.0;
    double ap = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            tp += labels[idx[j]] ? 1.0 : 0.0;
            seen += 1.0;
            ++j;
        }
        const double recall = tp / total_pos;
        ap += (recall - prev_recall) * (tp / seen);
        prev_recall = recall;
        i = j;
    }
    return ap;
}

Evaluator::Evaluator(const DatasetIndex& index) : categories_(index.categories) {
    for (const auto& r : index.records) {
        if (r.split == Split::test) expected_[r.path] = false;
    }
    if (expected_.empty()) throw DataError("test split is empty");
    for (const auto& c : categories_) buckets_[c];
}

void Evaluator::add(const Record& record, const ScoreMap& score, const BinaryMask& ground_truth) {
    auto it = expected_.find(record.path);
    if (it == expected_.end()) throw DataError("record is not in the test split: " + record.path.string());
    if (ground_truth.rows() != score.pixels.rows() || ground_truth.cols() != score.pixels.cols()) {
        throw ShapeError("mask and score map sizes differ for " + record.path.string());
    }
    it->second = true;
    Bucket& b = buckets_[record.category];
    b.image_scores.push_back(score.image_score);
    b.image_labels.push_back(record.label == Label::anomalous ? 1 : 0);
    b.pixel_scores.insert(b.pixel_scores.end(), score.pixels.data(), score.pixels.data() + score.pixels.size());
    b.pixel_labels.insert(b.pixel_labels.end(), ground_truth.data(), ground_truth.data() + ground_truth.size());
}

EvaluationReport Evaluator::finish() const {
    for (const auto& [path, seen] : expected_) {
        if (!seen) throw DataError("no score for test image " + path.string());
    }
    EvaluationReport report;
    report.mean.category = "mean";
    for (const auto& c : categories_) {
        const Bucket& b = buckets_.at(c);
        if (b.image_scores.empty()) continue;
        MetricRow row;
        row.category = c;
        row.images = b.image_scores.size();
        try {
            row.image_auroc = auroc(b.image_scores, b.image_labels);
            row.pixel_auroc = auroc(b.pixel_scores, b.pixel_labels);
            row.pixel_ap = average_precision(b.pixel_scores, b.pixel_labels);
        } catch (const DataError& e) {
            throw DataError("category " + c + ": " + e.what());
        }
        report.rows.push_back(row);
    }
    if (report.rows.empty()) throw DataError("test split is empty");
    for (const auto& r : report.rows) {
        report.mean.image_auroc += r.image_auroc;
        report.mean.pixel_auroc += r.pixel_auroc;
        report.mean.pixel_ap += r.pixel_ap;
        report.mean.images += r.images;
    }
    const double n = static_cast<double>(report.rows.size());
    report.mean.image_auroc /= n;
    report.mean.pixel_auroc /= n;
    report.mean.pixel_ap /= n;
    return report;
}

EvaluationReport evaluate(const DatasetIndex& index, const std::map<std::filesystem::path, ScoreMap>& scores) {
    Evaluator ev(index);
    for (const auto& r : index.records) {
        if (r.split != Split::test) continue;
        auto it = scores.find(r.path);
        if (it == scores.end()) throw DataError("no score for test image " + r.path.string());
        const auto h = static_cast<int>(it->second.pixels.rows());
        const auto w = static_cast<int>(it->second.pixels.cols());
        const BinaryMask gt = r.mask_path ? load_mask(*r.mask_path, h, w) : BinaryMask(BinaryMask::Zero(h, w));
        ev.add(r, it->second, gt);
    }
    return ev.finish();
}

void write_csv(const EvaluationReport& report, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << "category,images,i_auc,p_auc,p_map\n";
    out.precision(10);
    const auto line = [&](const MetricRow& r) {
        out << r.category << ',' << r.images << ',' << r.image_auroc << ',' << r.pixel_auroc << ',' << r.pixel_ap
            << '\n';
    };
    for (const auto& r : report.rows) line(r);
    line(report.mean);
}

std::string format_table(const EvaluationReport& report) {
    std::size_t width = 8;
    for (const auto& r : report.rows) width = std::max(width, r.category.size());
    std::ostringstream out;
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-*s  %7s  %7s  %7s\n", static_cast<int>(width), "category", "I-AUC", "P-AUC",
                  "P-mAP");
    out << buf;
    const auto line = [&](const MetricRow& r) {
        std::snprintf(buf, sizeof buf, "%-*s  %7.2f  %7.2f  %7.2f\n", static_cast<int>(width), r.category.c_str(),
                      100.0 * r.image_auroc, 100.0 * r.pixel_auroc, 100.0 * r.pixel_ap);
        out << buf;
    };
    for (const auto& r : report.rows) line(r);
    out << std::string(width + 29, '-') << '\n';
    line(report.mean);
    return out.str();
}

} // namespace clipada
