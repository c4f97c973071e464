#pragma once

#include <array>
#include <string>
#include <vector>

#include "stable/common.hpp"

namespace stable {

// Character-level token alphabet. Ids 0 and 1 are reserved for the padding
// and end-of-answer tokens; text symbols start at id 2.
class Vocabulary {
public:
    static constexpr int pad_id = 0;
    static constexpr int eoa_id = 1;
    static constexpr int reserved = 2;

    Vocabulary() = default;

    explicit Vocabulary(const std::string& symbols) : symbols_(symbols) {
        lookup_.fill(-1);
        for (size_t i = 0; i < symbols_.size(); ++i) {
            const auto uc = static_cast<unsigned char>(symbols_[i]);
            if (lookup_[uc] != -1) {
                fail(ErrorKind::config, std::string("duplicate vocabulary symbol '") + symbols_[i] + "'");
            }
            lookup_[uc] = static_cast<int>(i) + reserved;
        }
        if (size() < 4) fail(ErrorKind::config, "vocabulary needs at least 4 tokens");
    }

    // pad, eoa, space, period, a-z
    static Vocabulary base_charset() {
        std::string s = " .";
        for (char c = 'a'; c <= 'z'; ++c) s.push_back(c);
        return Vocabulary(s);
    }

    int size() const { return static_cast<int>(symbols_.size()) + reserved; }

    const std::string& symbols() const { return symbols_; }

    bool contains(char c) const { return lookup_[static_cast<unsigned char>(c)] != -1; }

    int id_of(char c) const {
        const int id = lookup_[static_cast<unsigned char>(c)];
        if (id == -1) {
            fail(ErrorKind::rejected_input, std::string("character '") + c + "' is not in the vocabulary");
        }
        return id;
    }

    char symbol_of(int id) const {
        if (id < reserved || id >= size()) {
            fail(ErrorKind::rejected_input, "token id " + std::to_string(id) + " has no symbol");
        }
        return symbols_[static_cast<size_t>(id - reserved)];
    }

    // letters usable for synthetic word generation
    std::string letters() const {
        std::string out;
        for (char c : symbols_) {
            if (c >= 'a' && c <= 'z') out.push_back(c);
        }
        return out;
    }

private:
    std::string symbols_;
    std::array<int, 256> lookup_{};
};

// ids with a split point: ids[0..prompt_len) is the prompt, the rest is the
// scored/generated continuation.
struct TokenSequence {
    std::vector<int> ids;
    int prompt_len = 0;

    int length() const { return static_cast<int>(ids.size()); }
    int continuation_len() const { return length() - prompt_len; }
};

inline TokenSequence tokenize(const std::string& text, const Vocabulary& vocab) {
    TokenSequence seq;
    seq.ids.reserve(text.size());
    for (char c : text) seq.ids.push_back(vocab.id_of(c));
    seq.prompt_len = static_cast<int>(seq.ids.size());
    return seq;
}

// Reserved ids (pad, end-of-answer) carry no text and are skipped.
inline std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id == Vocabulary::pad_id || id == Vocabulary::eoa_id) continue;
        out.push_back(vocab.symbol_of(id));
    }
    return out;
}

inline std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
    return detokenize(seq.ids, vocab);
}

}  // namespace stable
