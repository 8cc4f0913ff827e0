#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "blsp/ctc.hpp"
#include "blsp/prompting.hpp"
#include "blsp/training.hpp"

namespace blsp {

// --------------------------- normalization ---------------------------

inline std::string strip_punct(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s)
        if (std::string(".,!?;:\"").find(c) == std::string::npos) out += c;
    return out;
}

inline std::string normalize_for_match(const std::string& s) {
    auto words = split_ws(lowercase(strip_punct(s)));
    std::string out;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

// ------------------------------- wer -------------------------------

struct WerCounts {
    int edits = 0;
    int ref_words = 0;
};

inline WerCounts wer_counts(const std::string& hypothesis, const std::string& reference) {
    const auto ref = split_ws(normalize_for_match(reference));
    if (ref.empty()) throw EmptyReference("wer: reference empty after normalization");
    const auto hyp = split_ws(normalize_for_match(hypothesis));

    const size_t n = hyp.size(), m = ref.size();
    std::vector<int> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = int(j);
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = int(i);
        for (size_t j = 1; j <= m; ++j) {
            const int sub = prev[j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return {prev[m], int(m)};
}

inline double wer(const std::string& hypothesis, const std::string& reference) {
    const auto c = wer_counts(hypothesis, reference);
    return double(c.edits) / double(c.ref_words);
}

// corpus-level: total edits over total reference words
inline double corpus_wer(const std::vector<std::pair<std::string, std::string>>& hyp_ref) {
    long edits = 0, words = 0;
    for (const auto& [h, r] : hyp_ref) {
        const auto c = wer_counts(h, r);
        edits += c.edits;
        words += c.ref_words;
    }
    if (words == 0) throw EmptyReference("corpus wer: no reference words");
    return double(edits) / double(words);
}

// ------------------------------- bleu -------------------------------

// 13a-like: lowercase off, punctuation split out as separate tokens
inline std::vector<std::string> tokenize_13a(const std::string& s) {
    std::string spaced;
    spaced.reserve(s.size() * 2);
    for (char c : s) {
        const bool punct = !std::isalnum(static_cast<unsigned char>(c)) &&
                           !std::isspace(static_cast<unsigned char>(c));
        if (punct) {
            spaced += ' ';
            spaced += c;
            spaced += ' ';
        } else {
            spaced += c;
        }
    }
    return split_ws(spaced);
}

// corpus BLEU-4 in [0,100]; add-one smoothing on the clipped precisions when
// smooth is set, otherwise any empty n-gram level zeroes the score
inline double bleu(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references, bool smooth = false) {
    if (hypotheses.size() != references.size())
        throw LengthMismatch("bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                             std::to_string(references.size()) + " references");
    if (hypotheses.empty()) throw EmptyInput("bleu: empty corpus");

    long hyp_len = 0, ref_len = 0;
    long matches[4] = {0, 0, 0, 0}, totals[4] = {0, 0, 0, 0};
    for (size_t i = 0; i < hypotheses.size(); ++i) {
        const auto hyp = tokenize_13a(hypotheses[i]);
        const auto ref = tokenize_13a(references[i]);
        hyp_len += long(hyp.size());
        ref_len += long(ref.size());
        for (int n = 1; n <= 4; ++n) {
            if (int(hyp.size()) < n) continue;
            std::map<std::vector<std::string>, int> hyp_counts, ref_counts;
            for (size_t k = 0; k + n <= hyp.size(); ++k)
                hyp_counts[{hyp.begin() + k, hyp.begin() + k + n}]++;
            for (size_t k = 0; k + n <= ref.size(); ++k)
                ref_counts[{ref.begin() + k, ref.begin() + k + n}]++;
            for (const auto& [gram, count] : hyp_counts) {
                const auto it = ref_counts.find(gram);
                matches[n - 1] += std::min(count, it == ref_counts.end() ? 0 : it->second);
                totals[n - 1] += count;
            }
        }
    }
    if (hyp_len == 0) return 0.0;

    // levels with no n-grams at all are excluded, so identity stays at 100
    // even for corpora of short sentences
    double log_p = 0.0;
    int levels = 0;
    for (int n = 0; n < 4; ++n) {
        if (totals[n] == 0) continue;
        double m = double(matches[n]), t = double(totals[n]);
        if (smooth) {
            m += 1.0;
            t += 1.0;
        }
        if (m <= 0.0) return 0.0;
        log_p += std::log(m / t);
        ++levels;
    }
    if (levels == 0) return 0.0;
    const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - double(ref_len) / double(hyp_len));
    return 100.0 * bp * std::exp(log_p / double(levels));
}

// --------------------------- classification ---------------------------

// earliest normalized occurrence wins; ties go to label-set order; total
inline std::optional<std::string> classify_from_generation(
    const std::string& output, const std::vector<std::string>& label_set) {
    const std::string hay = normalize_for_match(output);
    std::optional<std::string> best;
    size_t best_pos = std::string::npos;
    for (const auto& label : label_set) {
        const std::string needle = normalize_for_match(label);
        if (needle.empty()) continue;
        const size_t pos = hay.find(needle);
        if (pos != std::string::npos && pos < best_pos) {
            best_pos = pos;
            best = label;
        }
    }
    return best;
}

// --------------------------- zero-shot runner ---------------------------

enum class SystemTag { TextLm, CascadeCtc, CascadeOracle, Blsp, BlspRp, AsrPretrain };

inline std::string system_tag_name(SystemTag t) {
    switch (t) {
        case SystemTag::TextLm: return "text+lm";
        case SystemTag::CascadeCtc: return "cascade_ctc";
        case SystemTag::CascadeOracle: return "cascade_oracle";
        case SystemTag::Blsp: return "blsp";
        case SystemTag::BlspRp: return "blsp_rp";
        case SystemTag::AsrPretrain: return "asr_pretrain";
    }
    throw ConfigError("unknown system tag");
}

inline SystemTag system_tag_from(const std::string& s) {
    for (SystemTag t : {SystemTag::TextLm, SystemTag::CascadeCtc, SystemTag::CascadeOracle,
                        SystemTag::Blsp, SystemTag::BlspRp, SystemTag::AsrPretrain})
        if (system_tag_name(t) == s) return t;
    throw ConfigError("unknown system tag: " + s);
}

struct EvalTask {
    enum class Kind { Asr, St, Ic, Sa, Qa };
    Kind kind = Kind::Asr;
    Instruction instruction;
    std::string name;

    static EvalTask asr(const InstructionCatalog& cat) {
        return {Kind::Asr, cat.lookup("repetition"), "asr"};
    }
    static EvalTask st(const InstructionCatalog& cat, const std::string& target = "German") {
        return {Kind::St, cat.st(target), "st_" + lowercase(target)};
    }
    static EvalTask ic_snips(const InstructionCatalog& cat) {
        return {Kind::Ic, cat.lookup("ic_snips"), "ic_snips"};
    }
    static EvalTask ic_fsc(const InstructionCatalog& cat) {
        return {Kind::Ic, cat.lookup("ic_fsc"), "ic_fsc"};
    }
    static EvalTask sa(const InstructionCatalog& cat) {
        return {Kind::Sa, cat.lookup("sa_slue"), "sa_slue"};
    }
};

struct EvalSample {
    std::string id;
    SpeechFeatures features;
    std::string transcript;
    std::string reference;           // expected output for the task metric
    std::string question;            // qa only
};

struct PerSample {
    std::string id;
    std::string hypothesis;
    std::string reference;
    double score = 0.0;
    bool failed = false;
};

struct EvalResult {
    std::string task_name;
    std::string metric_name;
    double value = 0.0;
    std::vector<PerSample> per_sample;
    std::string system_tag;
    nlohmann::json aux = nlohmann::json::object();

    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& p : per_sample)
            rows.push_back({{"id", p.id},
                            {"hypothesis", p.hypothesis},
                            {"reference", p.reference},
                            {"score", p.score},
                            {"failed", p.failed}});
        return {{"task", task_name},   {"metric", metric_name},   {"value", value},
                {"system", system_tag}, {"n", per_sample.size()}, {"aux", aux},
                {"per_sample", rows}};
    }
};

namespace detail {

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace detail

inline void write_eval_csv(const std::string& path, const EvalResult& r) {
    std::string out = "id,hypothesis,reference,score\n";
    for (const auto& p : r.per_sample) {
        char num[48];
        std::snprintf(num, sizeof(num), "%.9g", p.score);
        out += detail::csv_field(p.id) + "," + detail::csv_field(p.hypothesis) + "," +
               detail::csv_field(p.reference) + "," + num + "\n";
    }
    write_text_file(path, out);
}

inline void write_eval_json(const std::string& path, const EvalResult& r) {
    write_text_file(path, r.to_json().dump(2) + "\n");
}

// Runs one instructed task under one system. The bundle carries whichever
// checkpoint the tag refers to; cascade tags additionally need the CTC model
// (cascade_oracle substitutes the ground-truth transcript). Per-sample
// failures score as worst case and never abort the run.
inline EvalResult run_zero_shot(const ModelBundle& b, const InstructionCatalog& cat,
                                SystemTag tag, const EvalTask& task,
                                std::vector<EvalSample> samples,
                                const CtcAsr* ctc = nullptr,
                                const Decoding& dec = Decoding::greedy(),
                                int max_new_tokens = 96) {
    if ((tag == SystemTag::CascadeCtc) && !ctc)
        throw ConfigError("cascade_ctc needs a CTC model");
    std::sort(samples.begin(), samples.end(),
              [](const EvalSample& a, const EvalSample& x) { return a.id < x.id; });

    EvalResult r;
    r.task_name = task.name;
    r.system_tag = system_tag_name(tag);

    std::vector<std::pair<std::string, std::string>> asr_pairs;  // cascade aux
    for (const auto& s : samples) {
        PerSample p;
        p.id = s.id;
        p.reference = s.reference;
        try {
            const Instruction ins =
                task.kind == EvalTask::Kind::Qa ? InstructionCatalog::qa(s.question)
                                                : task.instruction;
            PromptInput in = PromptInput::speech(s.features);
            if (tag == SystemTag::TextLm) {
                in = PromptInput::text(s.transcript);
            } else if (tag == SystemTag::CascadeOracle) {
                in = PromptInput::text(s.transcript);
            } else if (tag == SystemTag::CascadeCtc) {
                const std::string decoded = ctc->transcribe(s.features);
                asr_pairs.emplace_back(decoded, s.transcript);
                if (decoded.empty()) throw EmptyTranscript("ctc produced nothing for " + s.id);
                in = PromptInput::text(decoded);
            }
            auto prompt = render_prompt(b, cat, ins, in);
            p.hypothesis = respond(b, prompt, dec, max_new_tokens).text;
        } catch (const std::exception& e) {
            p.failed = true;
            p.hypothesis.clear();
            r.aux["failures"].push_back({{"id", s.id}, {"error", e.what()}});
        }
        r.per_sample.push_back(std::move(p));
    }

    switch (task.kind) {
        case EvalTask::Kind::Asr: {
            std::vector<std::pair<std::string, std::string>> pairs;
            for (auto& p : r.per_sample) {
                p.score = wer(p.hypothesis, p.reference);
                pairs.emplace_back(p.hypothesis, p.reference);
            }
            r.metric_name = "WER";
            r.value = corpus_wer(pairs);
            break;
        }
        case EvalTask::Kind::St: {
            std::vector<std::string> hyps, refs;
            for (auto& p : r.per_sample) {
                p.score = bleu({p.hypothesis}, {p.reference}, true);
                hyps.push_back(p.hypothesis);
                refs.push_back(p.reference);
            }
            r.metric_name = "BLEU";
            r.value = bleu(hyps, refs);
            break;
        }
        case EvalTask::Kind::Ic:
        case EvalTask::Kind::Sa: {
            int correct = 0;
            for (auto& p : r.per_sample) {
                const auto got = classify_from_generation(p.hypothesis, task.instruction.label_set);
                p.score = got && *got == p.reference ? 1.0 : 0.0;
                correct += int(p.score);
            }
            r.metric_name = "accuracy";
            r.value = r.per_sample.empty() ? 0.0 : double(correct) / double(r.per_sample.size());
            break;
        }
        case EvalTask::Kind::Qa:
            // hypotheses only; acceptability is judged downstream
            r.metric_name = "accept_rate";
            r.value = 0.0;
            break;
    }

    if (tag == SystemTag::CascadeCtc && !asr_pairs.empty())
        r.aux["standalone_wer"] = corpus_wer(asr_pairs);
    if (tag == SystemTag::CascadeOracle) r.aux["standalone_wer"] = 0.0;
    return r;
}

}  // namespace blsp
