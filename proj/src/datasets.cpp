// SPDX-License-Identifier: Apache-2.0
#include "clipada/datasets.hpp"

#include "clipada/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace clipada {

namespace fs = std::filesystem;

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }
std::string to_string(Label l) { return l == Label::normal ? "normal" : "anomalous"; }

std::vector<Record> DatasetIndex::split(Split s) const {
    std::vector<Record> out;
    std::copy_if(records.begin(), records.end(), std::back_inserter(out), [s](const Record& r) { return r.split == s; });
    return out;
}

std::size_t DatasetIndex::count(Split s) const {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [s](const Record& r) { return r.split == s; }));
}

void DatasetIndex::validate() const {
    if (categories.empty()) throw DataError("dataset has no categories");
    const std::set<std::string> known(categories.begin(), categories.end());
    for (const auto& r : records) {
        if (!known.count(r.category)) throw DataError("record " + r.path.string() + " has unknown category");
        if (r.split == Split::train && r.label != Label::normal) {
            throw DataError("train split holds an anomalous record: " + r.path.string());
        }
        if (r.split == Split::test && r.label == Label::anomalous && !r.mask_path) {
            throw DataError("anomalous test record without mask: " + r.path.string());
        }
    }
}

namespace {

bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" || ext == ".tiff";
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool want_dirs) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (want_dirs ? e.is_directory() : (e.is_regular_file() && is_image_file(e.path()))) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::optional<fs::path> find_mvtec_mask(const fs::path& gt_dir, const fs::path& image) {
    if (!fs::is_directory(gt_dir)) return std::nullopt;
    const std::string stem = image.stem().string();
    for (const std::string& name : {stem + "_mask", stem}) {
        for (const auto& f : sorted_entries(gt_dir, false)) {
            if (f.stem().string() == name) return f;
        }
    }
    return std::nullopt;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (char c : line) {
        if (c == '"') {
            quoted = !quoted;
        } else if (c == ',' && !quoted) {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

} // namespace

DatasetIndex index_mvtec(const fs::path& root) {
    if (!fs::is_directory(root)) throw DataError("dataset root not found: " + root.string());
    DatasetIndex index;
    for (const auto& cat_dir : sorted_entries(root, true)) {
        if (!fs::is_directory(cat_dir / "train")) continue;
        const std::string category = cat_dir.filename().string();
        if (!fs::is_directory(cat_dir / "test")) throw DataError("category " + category + " has no test directory");
        index.categories.push_back(category);

        for (const auto& sub : sorted_entries(cat_dir / "train", true)) {
            if (sub.filename() != "good") {
                throw DataError("unexpected train subdirectory " + sub.string() + " (only 'good' is allowed)");
            }
        }
        if (fs::is_directory(cat_dir / "train" / "good")) {
            for (const auto& f : sorted_entries(cat_dir / "train" / "good", false)) {
                index.records.push_back({f, category, Split::train, Label::normal, std::nullopt});
            }
        }
        for (const auto& defect_dir : sorted_entries(cat_dir / "test", true)) {
            const std::string defect = defect_dir.filename().string();
            const bool normal = defect == "good";
            for (const auto& f : sorted_entries(defect_dir, false)) {
                Record r{f, category, Split::test, normal ? Label::normal : Label::anomalous, std::nullopt};
                if (!normal) {
                    r.mask_path = find_mvtec_mask(cat_dir / "ground_truth" / defect, f);
                    if (!r.mask_path) throw DataError("missing mask for anomalous image " + f.string());
                }
                index.records.push_back(std::move(r));
            }
        }
    }
    if (index.categories.empty()) throw DataError("no MVTec categories (category/train) under " + root.string());
    index.validate();
    return index;
}

DatasetIndex index_visa(const fs::path& root) {
    const fs::path csv = root / "split_csv" / "1cls.csv";
    std::ifstream in(csv);
    if (!in) throw DataError("VisA split file not found: " + csv.string());
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty split file: " + csv.string());
    const auto header = split_csv_line(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    for (const char* key : {"object", "split", "label", "image", "mask"}) {
        if (!col.count(key)) throw DataError("split file lacks column '" + std::string(key) + "'");
    }

    DatasetIndex index;
    std::set<std::string> cats;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto f = split_csv_line(line);
        if (f.size() < header.size()) throw DataError("split file line " + std::to_string(line_no) + " is short");
        Record r;
        r.category = f[col["object"]];
        const std::string& split = f[col["split"]];
        const std::string& label = f[col["label"]];
        if (split == "train") {
            r.split = Split::train;
        } else if (split == "test") {
            r.split = Split::test;
        } else {
            throw DataError("unknown split '" + split + "' on line " + std::to_string(line_no));
        }
        if (label == "normal") {
            r.label = Label::normal;
        } else if (label == "anomaly") {
            r.label = Label::anomalous;
        } else {
            throw DataError("unknown label '" + label + "' on line " + std::to_string(line_no));
        }
        r.path = root / f[col["image"]];
        if (!fs::is_regular_file(r.path)) throw DataError("image not found: " + r.path.string());
        const std::string& mask = f[col["mask"]];
        if (r.label == Label::anomalous) {
            if (mask.empty() || !fs::is_regular_file(root / mask)) {
                throw DataError("missing mask for anomalous image " + r.path.string());
            }
            r.mask_path = root / mask;
        }
        cats.insert(r.category);
        index.records.push_back(std::move(r));
    }
    index.categories.assign(cats.begin(), cats.end());
    index.validate();
    return index;
}

DatasetIndex index_dataset(const std::string& name, const fs::path& root) {
    if (name == "mvtec") return index_mvtec(root);
    if (name == "visa") return index_visa(root);
    throw ConfigError("unknown dataset '" + name + "' (expected mvtec or visa)");
}

DatasetIndex subsample(const DatasetIndex& index, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fraction must lie in (0, 1]");
    std::map<std::string, std::vector<std::size_t>> by_cat;
    for (std::size_t i = 0; i < index.records.size(); ++i) {
        if (index.records[i].split == Split::train) by_cat[index.records[i].category].push_back(i);
    }
    std::vector<bool> keep(index.records.size(), true);
    std::mt19937_64 rng(seed);
    for (auto& [cat, ids] : by_cat) {
        const auto n = ids.size();
        const auto k = std::min<std::size_t>(n, std::max<long long>(1, std::llround(fraction * static_cast<double>(n))));
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t j = k; j < n; ++j) keep[ids[order[j]]] = false;
    }
    DatasetIndex out;
    out.categories = index.categories;
    for (std::size_t i = 0; i < index.records.size(); ++i) {
        if (keep[i]) out.records.push_back(index.records[i]);
    }
    return out;
}

LoadedRecord load_record(const Record& record, int height, int width) {
    LoadedRecord out{load_image(record.path, height, width), BinaryMask::Zero(height, width)};
    if (record.mask_path) out.mask = load_mask(*record.mask_path, height, width);
    return out;
}

} // namespace clipada
