// SPDX-License-Identifier: Apache-2.0
#include "clipada/prompting.hpp"

#include "clipada/errors.hpp"

#include <algorithm>
#include <random>

namespace clipada {

PromptTemplate build_template(std::string_view text, const Backend& backend, int categories) {
    if (text.empty()) throw TokenizerError("empty template text");
    if (categories < 1) throw ShapeError("template needs at least one category");
    PromptTemplate t;
    t.text = std::string(text);
    t.token_ids = backend.tokenizer().encode(text);
    t.embedded = backend.embed_tokens(t.token_ids);
    t.categories = categories;
    return t;
}

LearnablePromptBank init_prompt_bank(int num_prompts, int categories, int dim, std::uint64_t seed,
                                     int insert_position, double stddev) {
    if (num_prompts < 1) throw ConfigError("prompt bank needs at least one vector");
    if (categories < 1 || dim < 1) throw ShapeError("prompt bank dimensions must be positive");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, stddev);
    LearnablePromptBank bank;
    bank.insert_position = insert_position;
    for (int s = 0; s < num_prompts; ++s) {
        Matrix v(categories, dim);
        for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = normal(rng);
        bank.vectors.push_back(ag::Var::parameter(std::move(v)));
    }
    return bank;
}

PromptAssembly assemble(const PromptTemplate& tmpl, const LearnablePromptBank& bank) {
    const int len = tmpl.length();
    const int x = bank.insert_position;
    if (x < 0 || x > len) {
        throw ShapeError("insert position " + std::to_string(x) + " outside [0, " + std::to_string(len) + "]");
    }
    const auto dim = tmpl.embedded.cols();
    for (const auto& v : bank.vectors) {
        if (v.cols() != dim || v.rows() != tmpl.categories) {
            throw ShapeError("prompt vector shape does not match template (K x D)");
        }
    }
    const int split = std::min(x + 1, len);
    const int s = bank.size();

    PromptAssembly out;
    out.learnable.assign(static_cast<std::size_t>(len + s), false);
    std::fill_n(out.learnable.begin() + split, s, true);

    // Templates end with the end-of-text marker.
    const int eot_pos = len - 1;
    out.end_index = eot_pos >= split ? eot_pos + s : eot_pos;

    for (int k = 0; k < tmpl.categories; ++k) {
        std::vector<ag::Var> parts;
        if (split > 0) parts.push_back(ag::Var::constant(tmpl.embedded.topRows(split)));
        for (const auto& v : bank.vectors) {
            parts.push_back(tmpl.categories == 1 ? v : ag::slice_rows(v, k, 1));
        }
        if (split < len) parts.push_back(ag::Var::constant(tmpl.embedded.bottomRows(len - split)));
        out.sequences.push_back(ag::concat_rows(parts));
    }
    return out;
}

} // namespace clipada
