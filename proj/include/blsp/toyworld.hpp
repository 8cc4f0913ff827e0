#pragma once

#include <map>
#include <string>
#include <vector>

#include "blsp/common.hpp"

// A tiny closed world of utterances with deterministic continuation and
// translation rules. The fixture LM is trained on it so that instruction
// following is an actual, checkable property rather than an assumption.
namespace blsp::toyworld {

inline const std::vector<std::string>& lexicon() {
    static const std::vector<std::string> words = {
        "rain", "sun",   "wind",  "snow", "cloud", "storm", "light", "dark",
        "tree", "leaf",  "stone", "river", "bird",  "fish",  "moon",  "star"};
    return words;
}

inline const std::map<std::string, std::string>& continuation_table() {
    static const std::map<std::string, std::string> t = {
        {"rain", "falls on the stone"}, {"sun", "warms the river"},
        {"wind", "moves the cloud"},    {"snow", "covers the tree"},
        {"cloud", "hides the moon"},    {"storm", "bends the leaf"},
        {"light", "finds the bird"},    {"dark", "calls the star"},
        {"tree", "shades the fish"},    {"leaf", "rides the wind"},
        {"stone", "splits the stream"}, {"river", "feeds the fish"},
        {"bird", "sings at dawn"},      {"fish", "swims the deep"},
        {"moon", "silvers the lake"},   {"star", "guides the night"},
        {"sky", "is blue today"}};
    return t;
}

inline const std::map<std::string, std::string>& german_table() {
    static const std::map<std::string, std::string> t = {
        {"rain", "regen"},  {"sun", "sonne"},  {"wind", "luft"},   {"snow", "schnee"},
        {"cloud", "wolke"}, {"storm", "sturm"}, {"light", "licht"}, {"dark", "dunkel"},
        {"tree", "baum"},   {"leaf", "blatt"},  {"stone", "stein"}, {"river", "fluss"},
        {"bird", "vogel"},  {"fish", "fisch"},  {"moon", "mond"},   {"star", "stern"},
        {"sky", "himmel"}};
    return t;
}

// continuation depends only on the final word; unknown words map onto the
// lexicon by hash so the rule stays total
inline std::string continuation_of(const std::string& text) {
    auto words = split_ws(text);
    if (words.empty()) throw EmptyInput("continuation_of: empty text");
    const std::string& last = words.back();
    const auto& table = continuation_table();
    auto it = table.find(last);
    if (it != table.end()) return it->second;
    const auto& lex = lexicon();
    return table.at(lex[fnv1a64(last.data(), last.size()) % lex.size()]);
}

// word-by-word toy German; words without an entry pass through unchanged
inline std::string translate_de(const std::string& text) {
    std::string out;
    for (const auto& w : split_ws(text)) {
        auto it = german_table().find(w);
        if (!out.empty()) out += ' ';
        out += (it == german_table().end()) ? w : it->second;
    }
    if (out.empty()) throw EmptyInput("translate_de: empty text");
    return out;
}

inline std::string sample_transcript(Rng& rng, int min_words = 2, int max_words = 5) {
    const auto& lex = lexicon();
    const int n = min_words + int(rng.below(uint64_t(max_words - min_words + 1)));
    std::string s;
    for (int i = 0; i < n; ++i) {
        if (i) s += ' ';
        s += lex[rng.below(lex.size())];
    }
    return s;
}

inline std::vector<std::string> sample_transcripts(int n, uint64_t seed, int min_words = 2,
                                                   int max_words = 5) {
    Rng rng(seed);
    std::vector<std::string> out;
    out.reserve(size_t(n));
    for (int i = 0; i < n; ++i) out.push_back(sample_transcript(rng, min_words, max_words));
    return out;
}

// deterministic label assignment for toy SLU testsets
inline std::string label_of(const std::string& transcript, const std::vector<std::string>& labels) {
    if (labels.empty()) throw ConfigError("label_of: empty label set");
    return labels[fnv1a64(transcript.data(), transcript.size()) % labels.size()];
}

// one line of the fixture LM's instruction corpus
struct CorpusItem {
    std::string tag;  // instruction tag: repetition | continuation | analysis_st
    std::string input;
    std::string response;
};

inline CorpusItem sample_corpus_item(Rng& rng) {
    const uint64_t pick = rng.below(100);
    CorpusItem it;
    if (pick < 2) {
        it = {"continuation", "the sky", "is blue today"};
    } else if (pick < 32) {
        it.tag = "repetition";
        it.input = sample_transcript(rng);
        it.response = it.input;
    } else if (pick < 72) {
        it.tag = "continuation";
        it.input = sample_transcript(rng);
        it.response = continuation_of(it.input);
    } else {
        it.tag = "analysis_st";
        it.input = sample_transcript(rng);
        it.response = translate_de(it.input);
    }
    return it;
}

inline std::vector<CorpusItem> lm_corpus(int n, uint64_t seed) {
    Rng rng(seed);
    std::vector<CorpusItem> out;
    out.reserve(size_t(n));
    for (int i = 0; i < n; ++i) out.push_back(sample_corpus_item(rng));
    return out;
}

}  // namespace blsp::toyworld
