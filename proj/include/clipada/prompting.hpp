// SPDX-License-Identifier: Apache-2.0
//
// Text-side input: a fixed template in token-embedding space with a bank of
// learnable vectors spliced in after template position x.

#pragma once

#include "clipada/autograd.hpp"
#include "clipada/backbone.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace clipada {

inline constexpr std::string_view kDefaultTemplate =
    "A photo of a damaged object with defects for anomaly detection";
/// Index of the last token of "A photo of a" (after the start marker).
inline constexpr int kDefaultInsertPosition = 4;

struct PromptTemplate {
    std::string text;
    std::vector<int> token_ids;
    /// L x D embeddings of the template tokens (shared by all K sequences).
    Matrix embedded;
    int categories = 1;

    [[nodiscard]] int length() const { return static_cast<int>(token_ids.size()); }
};

struct LearnablePromptBank {
    /// P_0 .. P_{S-1}, each a K x D trainable leaf.
    std::vector<ag::Var> vectors;
    /// Learnable vectors go right after template token x.
    int insert_position = kDefaultInsertPosition;

    [[nodiscard]] int size() const { return static_cast<int>(vectors.size()); }
};

struct PromptAssembly {
    /// K sequences, each (L + S) x D.
    std::vector<ag::Var> sequences;
    /// Per slot: true for learnable prompt vectors.
    std::vector<bool> learnable;
    /// Slot holding the end-of-text token (pooling position for CLIP).
    int end_index = -1;

    [[nodiscard]] int length() const { return static_cast<int>(learnable.size()); }
};

/// Tokenizes and embeds `text` with the backend's tokenizer and embedding
/// table. Throws TokenizerError on empty or unencodable text.
PromptTemplate build_template(std::string_view text, const Backend& backend, int categories = 1);

/// S vectors of shape K x D drawn from N(0, stddev^2) with a seeded engine.
LearnablePromptBank init_prompt_bank(int num_prompts, int categories, int dim, std::uint64_t seed,
                                     int insert_position = kDefaultInsertPosition,
                                     double stddev = 0.02);

/// [t_0 .. t_x, P_0 .. P_{S-1}, t_{x+1} .. t_{L-1}]. x == L appends after the
/// last token. Throws ShapeError when x is outside [0, L] or widths differ.
PromptAssembly assemble(const PromptTemplate& tmpl, const LearnablePromptBank& bank);

} // namespace clipada
