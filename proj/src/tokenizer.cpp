// SPDX-License-Identifier: Apache-2.0
#include "clipada/tokenizer.hpp"

#include "clipada/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <climits>
#include <cstdint>
#include <fstream>
#include <sstream>

namespace clipada {

namespace {

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

bool is_ascii_alnum(unsigned char c) { return c < 0x80 && std::isalnum(c) != 0; }

std::string utf8_encode(std::uint32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xC0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        out += static_cast<char>(0xE0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    }
    return out;
}

std::string clean_text(std::string_view text) {
    std::string out;
    bool pending_space = false;
    for (unsigned char c : text) {
        if (std::isspace(c) != 0) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out += ' ';
            pending_space = false;
        }
        out += static_cast<char>(c < 0x80 ? std::tolower(c) : c);
    }
    return out;
}

// Letters are ASCII letters plus any byte of a multi-byte UTF-8 sequence.
bool is_letter(unsigned char c) { return (c < 0x80 && std::isalpha(c) != 0) || c >= 0x80; }
bool is_digit(unsigned char c) { return c < 0x80 && std::isdigit(c) != 0; }
bool is_space(unsigned char c) { return c < 0x80 && std::isspace(c) != 0; }

} // namespace

// --- WordTokenizer ----------------------------------------------------------

WordTokenizer::WordTokenizer(int vocab_size) : vocab_size_(vocab_size) {
    if (vocab_size < 3) throw TokenizerError("word tokenizer needs a vocabulary of at least 3");
}

std::vector<int> WordTokenizer::encode(std::string_view text) const {
    std::vector<int> ids{start_token()};
    const auto word_id = [this](std::string_view w) {
        return static_cast<int>(fnv1a(w) % static_cast<std::uint64_t>(vocab_size_ - 2));
    };
    std::string word;
    for (unsigned char c : text) {
        if (c >= 0x80 || (std::isprint(c) == 0 && std::isspace(c) == 0)) {
            throw TokenizerError("word tokenizer cannot encode byte " + std::to_string(int(c)));
        }
        if (is_ascii_alnum(c)) {
            word += static_cast<char>(std::tolower(c));
            continue;
        }
        if (!word.empty()) {
            ids.push_back(word_id(word));
            word.clear();
        }
        if (std::isspace(c) == 0) ids.push_back(word_id(std::string(1, static_cast<char>(c))));
    }
    if (!word.empty()) ids.push_back(word_id(word));
    if (ids.size() == 1) throw TokenizerError("empty text");
    ids.push_back(end_token());
    return ids;
}

// --- ClipBpeTokenizer -------------------------------------------------------

ClipBpeTokenizer::ClipBpeTokenizer(const std::filesystem::path& vocab_json,
                                   const std::filesystem::path& merges_txt) {
    std::ifstream vf(vocab_json);
    if (!vf) throw TokenizerError("cannot open " + vocab_json.string());
    nlohmann::json vocab;
    try {
        vf >> vocab;
    } catch (const nlohmann::json::exception& e) {
        throw TokenizerError("bad vocab.json: " + std::string(e.what()));
    }
    for (const auto& [tok, id] : vocab.items()) encoder_.emplace(tok, id.get<int>());

    std::ifstream mf(merges_txt);
    if (!mf) throw TokenizerError("cannot open " + merges_txt.string());
    std::string line;
    int rank = 0;
    // The reference tokenizer only uses the first 49152 - 256 - 2 merges.
    constexpr int kMaxMerges = 49152 - 256 - 2;
    while (std::getline(mf, line) && rank < kMaxMerges) {
        if (line.empty() || line.rfind("#version", 0) == 0) continue;
        const auto sp = line.find(' ');
        if (sp == std::string::npos) throw TokenizerError("bad merges line: " + line);
        ranks_.emplace(std::make_pair(line.substr(0, sp), line.substr(sp + 1)), rank++);
    }

    // Printable bytes map to themselves; the rest are shifted past 255.
    std::array<bool, 256> direct{};
    for (int b = '!'; b <= '~'; ++b) direct[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
    std::uint32_t extra = 0;
    for (int b = 0; b < 256; ++b) {
        byte_encoder_[b] = utf8_encode(direct[b] ? static_cast<std::uint32_t>(b) : 256 + extra++);
    }

    const auto special = [this](const std::string& s) {
        auto it = encoder_.find(s);
        if (it == encoder_.end()) throw TokenizerError("vocab lacks " + s);
        return it->second;
    };
    sot_ = special("<|startoftext|>");
    eot_ = special("<|endoftext|>");
}

std::vector<std::string> ClipBpeTokenizer::split_words(std::string_view s) {
    static const std::array<std::string_view, 2> specials{"<|startoftext|>", "<|endoftext|>"};
    static const std::array<std::string_view, 7> contractions{"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        if (is_space(c)) {
            ++i;
            continue;
        }
        bool matched = false;
        for (auto sp : specials) {
            if (s.substr(i, sp.size()) == sp) {
                out.emplace_back(sp);
                i += sp.size();
                matched = true;
                break;
            }
        }
        if (matched) continue;
        if (c == '\'') {
            for (auto ct : contractions) {
                if (s.substr(i, ct.size()) == ct) {
                    out.emplace_back(ct);
                    i += ct.size();
                    matched = true;
                    break;
                }
            }
            if (matched) continue;
        }
        std::size_t j = i;
        if (is_letter(c)) {
            while (j < s.size() && is_letter(static_cast<unsigned char>(s[j]))) ++j;
        } else if (is_digit(c)) {
            j = i + 1;
        } else {
            while (j < s.size()) {
                const auto d = static_cast<unsigned char>(s[j]);
                if (is_space(d) || is_letter(d) || is_digit(d)) break;
                ++j;
            }
        }
        out.emplace_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

std::vector<std::string> ClipBpeTokenizer::bpe(const std::string& word) const {
    // Split the byte-encoded word into UTF-8 characters.
    std::vector<std::string> parts;
    for (std::size_t i = 0; i < word.size();) {
        const auto c = static_cast<unsigned char>(word[i]);
        const std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : 4;
        parts.push_back(word.substr(i, len));
        i += len;
    }
    if (parts.empty()) return parts;
    parts.back() += "</w>";

    while (parts.size() > 1) {
        int best = INT_MAX;
        std::size_t at = 0;
        for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
            auto it = ranks_.find({parts[i], parts[i + 1]});
            if (it != ranks_.end() && it->second < best) {
                best = it->second;
                at = i;
            }
        }
        if (best == INT_MAX) break;
        const std::string first = parts[at];
        const std::string second = parts[at + 1];
        // Merge every occurrence of the best pair, left to right.
        std::vector<std::string> merged;
        for (std::size_t i = 0; i < parts.size();) {
            if (i + 1 < parts.size() && parts[i] == first && parts[i + 1] == second) {
                merged.push_back(first + second);
                i += 2;
            } else {
                merged.push_back(parts[i]);
                ++i;
            }
        }
        parts = std::move(merged);
    }
    return parts;
}

std::vector<int> ClipBpeTokenizer::encode(std::string_view text) const {
    const std::string cleaned = clean_text(text);
    std::vector<int> ids{sot_};
    for (const auto& w : split_words(cleaned)) {
        if (w == "<|startoftext|>") {
            ids.push_back(sot_);
            continue;
        }
        if (w == "<|endoftext|>") {
            ids.push_back(eot_);
            continue;
        }
        std::string encoded;
        for (unsigned char b : w) encoded += byte_encoder_[b];
        for (const auto& piece : bpe(encoded)) {
            auto it = encoder_.find(piece);
            if (it == encoder_.end()) throw TokenizerError("token not in vocabulary: " + piece);
            ids.push_back(it->second);
        }
    }
    if (ids.size() == 1) throw TokenizerError("empty text");
    ids.push_back(eot_);
    return ids;
}

} // namespace clipada
