#pragma once

#include <string>
#include <vector>

#include "blsp/common.hpp"

namespace blsp {

// Character-level tokenizer over printable ASCII plus newline. Two reserved
// ids: UNK absorbs out-of-alphabet bytes, EOS terminates generated responses.
struct Token {
    int id = 0;
    std::string surface;
};

class Tokenizer {
public:
    static constexpr int kUnkId = 0;
    static constexpr int kEosId = 1;
    static constexpr int kNewlineId = 2;
    static constexpr char kFirstPrintable = 32;
    static constexpr char kLastPrintable = 126;

    static int vocab_size() { return 3 + (kLastPrintable - kFirstPrintable + 1); }

    static int char_id(char c) {
        if (c == '\n') return kNewlineId;
        if (c >= kFirstPrintable && c <= kLastPrintable)
            return 3 + (c - kFirstPrintable);
        return kUnkId;
    }

    static std::string surface(int id) {
        if (id == kUnkId) return std::string(1, '\x1a');
        if (id == kEosId) return "";
        if (id == kNewlineId) return "\n";
        return std::string(1, char(kFirstPrintable + (id - 3)));
    }

    static std::vector<int> encode(const std::string& text) {
        std::vector<int> ids;
        ids.reserve(text.size());
        for (char c : text) ids.push_back(char_id(c));
        return ids;
    }

    static std::string decode(const std::vector<int>& ids) {
        std::string out;
        out.reserve(ids.size());
        for (int id : ids) out += surface(id);
        return out;
    }

    static std::vector<Token> tokenize(const std::string& text) {
        std::vector<Token> toks;
        toks.reserve(text.size());
        for (char c : text) {
            int id = char_id(c);
            toks.push_back({id, surface(id)});
        }
        return toks;
    }

    static std::string detokenize(const std::vector<Token>& toks) {
        std::string out;
        for (const auto& t : toks) out += t.surface;
        return out;
    }
};

}  // namespace blsp
