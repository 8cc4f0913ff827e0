#pragma once

#include <algorithm>
#include <atomic>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "blsp/prompting.hpp"
#include "blsp/training.hpp"

namespace blsp {

// one (utterance, behavior, instruction, response) training record
struct BehaviorSample {
    std::string utterance_id;
    std::string behavior;  // continuation | repetition
    std::string instruction;
    std::string response;
    nlohmann::json gen_meta = nlohmann::json::object();
    nlohmann::json extra = nlohmann::json::object();  // unknown fields, preserved

    bool operator==(const BehaviorSample& o) const {
        return utterance_id == o.utterance_id && behavior == o.behavior &&
               instruction == o.instruction && response == o.response &&
               gen_meta == o.gen_meta && extra == o.extra;
    }
};

// ------------------------------ manifests ------------------------------
// JSONL, one record per line; unknown fields round-trip untouched

inline void write_utterance_manifest(const std::string& path,
                                     const std::vector<Utterance>& utts) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    for (const auto& u : utts) {
        nlohmann::json j{{"id", u.id},
                         {"audio_ref", u.audio_ref},
                         {"transcript", u.transcript},
                         {"language", u.language},
                         {"duration_s", u.duration_s}};
        os << j.dump() << "\n";
    }
    if (!os) throw IoError("write failed: " + path);
}

inline std::vector<Utterance> read_utterance_manifest(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    std::vector<Utterance> out;
    std::set<std::string> seen;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw MalformedLine(line_no, e.what());
        }
        for (const char* key : {"id", "audio_ref", "transcript"})
            if (!j.contains(key)) throw MalformedLine(line_no, std::string("missing ") + key);
        Utterance u;
        u.id = j["id"].get<std::string>();
        u.audio_ref = j["audio_ref"].get<std::string>();
        u.transcript = j["transcript"].get<std::string>();
        u.language = j.value("language", std::string("en"));
        u.duration_s = j.value("duration_s", 0.0f);
        if (u.transcript.empty()) throw MalformedLine(line_no, "empty transcript");
        if (!seen.insert(u.id).second) throw DuplicateId("utterance id: " + u.id);
        out.push_back(std::move(u));
    }
    return out;
}

inline void write_behavior_manifest(const std::string& path,
                                    const std::vector<BehaviorSample>& samples) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    for (const auto& s : samples) {
        nlohmann::json j = s.extra;
        j["utterance_id"] = s.utterance_id;
        j["behavior"] = s.behavior;
        j["instruction"] = s.instruction;
        j["response"] = s.response;
        j["gen_meta"] = s.gen_meta;
        os << j.dump() << "\n";
    }
    if (!os) throw IoError("write failed: " + path);
}

inline std::vector<BehaviorSample> read_behavior_manifest(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    std::vector<BehaviorSample> out;
    std::set<std::string> seen;  // per-behavior id uniqueness
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw MalformedLine(line_no, e.what());
        }
        for (const char* key : {"utterance_id", "behavior", "instruction", "response"})
            if (!j.contains(key)) throw MalformedLine(line_no, std::string("missing ") + key);
        BehaviorSample s;
        s.utterance_id = j["utterance_id"].get<std::string>();
        s.behavior = j["behavior"].get<std::string>();
        s.instruction = j["instruction"].get<std::string>();
        s.response = j["response"].get<std::string>();
        s.gen_meta = j.value("gen_meta", nlohmann::json::object());
        if (s.response.empty()) throw MalformedLine(line_no, "empty response");
        if (s.behavior != "continuation" && s.behavior != "repetition")
            throw MalformedLine(line_no, "unknown behavior: " + s.behavior);
        j.erase("utterance_id");
        j.erase("behavior");
        j.erase("instruction");
        j.erase("response");
        j.erase("gen_meta");
        s.extra = std::move(j);
        if (!seen.insert(s.behavior + "\x1f" + s.utterance_id).second)
            throw DuplicateId("behavior sample id: " + s.utterance_id);
        out.push_back(std::move(s));
    }
    return out;
}

// ------------------------------ step one ------------------------------

struct GenStats {
    int empty_dropped = 0;
    int truncated = 0;
    std::vector<std::pair<std::string, std::string>> failures;  // (utterance_id, error)
};

// continuation responses from the LM on text prompts; parallel across
// utterances, results re-sorted by utterance_id so worker scheduling never
// changes output bytes
inline std::vector<BehaviorSample> generate_continuations(
    const ModelBundle& b, const InstructionCatalog& cat, const std::vector<Utterance>& utts,
    const Decoding& dec = Decoding{}, int workers = 4, int response_cap = 64,
    GenStats* stats = nullptr) {
    const Instruction ins = cat.lookup("continuation");
    nlohmann::json gen_meta{{"decoding", dec.kind == Decoding::Kind::Greedy ? "greedy" : "sample"},
                            {"temperature", dec.temperature},
                            {"max_new_tokens", response_cap},
                            {"lm_fingerprint", hash_hex(b.lm.param_hash())},
                            {"timestamp", ""}};

    struct SlotResult {
        bool ok = false;
        bool empty = false;
        bool truncated = false;
        std::string response, error;
    };
    std::vector<SlotResult> results(utts.size());
    workers = std::max(1, workers);
    std::vector<std::thread> pool;
    std::atomic<size_t> next{0};
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&]() {
            for (size_t i = next.fetch_add(1); i < utts.size(); i = next.fetch_add(1)) {
                auto& r = results[i];
                try {
                    auto p = render_prompt(b, cat, ins, PromptInput::text(utts[i].transcript));
                    auto g = respond(b, p, dec, response_cap);
                    r.response = g.text;
                    r.truncated = !g.hit_eos && !g.hit_stop;
                    r.empty = g.text.empty();
                    r.ok = true;
                } catch (const std::exception& e) {
                    r.error = e.what();
                }
            }
        });
    for (auto& t : pool) t.join();

    std::vector<BehaviorSample> samples;
    GenStats local;
    for (size_t i = 0; i < utts.size(); ++i) {
        const auto& r = results[i];
        if (!r.ok) {
            local.failures.emplace_back(
                utts[i].id, GenerationFailed(utts[i].id, r.error).what());
            continue;
        }
        if (r.empty) {
            ++local.empty_dropped;
            continue;
        }
        if (r.truncated) ++local.truncated;
        samples.push_back({utts[i].id, "continuation", ins.text, r.response, gen_meta,
                           nlohmann::json::object()});
    }
    std::sort(samples.begin(), samples.end(),
              [](const BehaviorSample& a, const BehaviorSample& x) {
                  return a.utterance_id < x.utterance_id;
              });
    if (stats) *stats = local;
    return samples;
}

// the repetition shortcut: the transcript is its own response
inline std::vector<BehaviorSample> make_repetition_samples(const InstructionCatalog& cat,
                                                           const std::vector<Utterance>& utts) {
    const Instruction ins = cat.lookup("repetition");
    std::vector<BehaviorSample> out;
    out.reserve(utts.size());
    for (const auto& u : utts) {
        if (u.transcript.empty()) throw EmptyTranscript("utterance " + u.id);
        out.push_back({u.id, "repetition", ins.text, u.transcript,
                       nlohmann::json{{"decoding", "shortcut"}, {"timestamp", ""}},
                       nlohmann::json::object()});
    }
    return out;
}

// ------------------------------ mixing ------------------------------

struct MixSpec {
    int repetition_parts = 1;
    int continuation_parts = 9;
    uint64_t shuffle_seed = 1;
};

// repetition:continuation at the configured ratio; repetition is subsampled
// when more is available, the whole mix is shuffled deterministically
inline std::vector<BehaviorSample> mix_behaviors(const std::vector<BehaviorSample>& continuation,
                                                 const std::vector<BehaviorSample>& repetition,
                                                 const MixSpec& spec) {
    if (spec.continuation_parts <= 0 || spec.repetition_parts < 0)
        throw ConfigError("mix: continuation part must be positive, repetition nonnegative");
    if (continuation.empty()) throw EmptyInput("mix: no continuation samples");
    const size_t want_rep =
        size_t(std::llround(double(continuation.size()) * double(spec.repetition_parts) /
                            double(spec.continuation_parts)));
    if (want_rep > repetition.size())
        throw InsufficientRepetitionData("need " + std::to_string(want_rep) + ", have " +
                                         std::to_string(repetition.size()));

    Rng rng(spec.shuffle_seed);
    std::vector<BehaviorSample> mixed = continuation;
    if (want_rep > 0) {
        std::vector<size_t> idx(repetition.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        rng.shuffle(idx);
        for (size_t i = 0; i < want_rep; ++i) mixed.push_back(repetition[idx[i]]);
    }
    rng.shuffle(mixed);
    return mixed;
}

}  // namespace blsp
