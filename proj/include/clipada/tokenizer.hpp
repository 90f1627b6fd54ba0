// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace clipada {

class Tokenizer {
public:
    virtual ~Tokenizer() = default;
    /// Token ids including the start and end markers.
    [[nodiscard]] virtual std::vector<int> encode(std::string_view text) const = 0;
    [[nodiscard]] virtual int vocab_size() const = 0;
    [[nodiscard]] virtual int end_token() const = 0;
};

/// Lower-cased word tokenizer with hashed ids, used by the toy backend.
/// Words are maximal runs of ASCII letters/digits; every other printable
/// ASCII character is its own token. Non-ASCII input is rejected.
class WordTokenizer final : public Tokenizer {
public:
    explicit WordTokenizer(int vocab_size = 1024);

    [[nodiscard]] std::vector<int> encode(std::string_view text) const override;
    [[nodiscard]] int vocab_size() const override { return vocab_size_; }
    [[nodiscard]] int start_token() const { return vocab_size_ - 2; }
    [[nodiscard]] int end_token() const override { return vocab_size_ - 1; }

private:
    int vocab_size_;
};

/// Byte-level BPE as used by CLIP, read from a Hugging Face style
/// vocab.json + merges.txt pair.
class ClipBpeTokenizer final : public Tokenizer {
public:
    ClipBpeTokenizer(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt);

    [[nodiscard]] std::vector<int> encode(std::string_view text) const override;
    [[nodiscard]] int vocab_size() const override { return static_cast<int>(encoder_.size()); }
    [[nodiscard]] int end_token() const override { return eot_; }
    [[nodiscard]] int start_token() const { return sot_; }

    /// Pre-tokenization split (exposed for tests).
    [[nodiscard]] static std::vector<std::string> split_words(std::string_view cleaned);

private:
    [[nodiscard]] std::vector<std::string> bpe(const std::string& word) const;

    std::unordered_map<std::string, int> encoder_;
    std::map<std::pair<std::string, std::string>, int> ranks_;
    std::array<std::string, 256> byte_encoder_;
    int sot_ = -1;
    int eot_ = -1;
};

} // namespace clipada
