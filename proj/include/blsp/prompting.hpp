#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "blsp/common.hpp"
#include "blsp/model.hpp"
#include "blsp/tokenizer.hpp"

namespace blsp {

constexpr const char* kHumanTag = "###[Human]:";
constexpr const char* kAssistantTail = "\n\n\n###[Assistant]:";
constexpr const char* kStopString = "###";

enum class Task {
    Continuation,
    Repetition,
    Asr,
    St,
    IcSnips,
    IcFsc,
    SaSlue,
    Qa,
    AnalysisCw,
    AnalysisSa,
    AnalysisSr,
    AnalysisSt,
};

struct Instruction {
    std::string text;
    Task task = Task::Asr;
    std::string target_lang;             // st only
    std::vector<std::string> label_set;  // ic/sa only
};

inline std::string default_data_dir() {
#ifdef BLSP_DATA_DIR
    return BLSP_DATA_DIR;
#else
    return "data";
#endif
}

// verbatim task instruction catalog, loaded from the shipped JSON data file
struct InstructionCatalog {
    std::map<std::string, std::string> fixed;  // tag -> text
    std::string st_template;                   // contains "<target>"
    std::map<std::string, std::vector<std::string>> label_sets;
    std::vector<std::string> asr_paraphrases;

    static InstructionCatalog load(const std::string& dir = default_data_dir()) {
        const std::string path = dir + "/instructions.json";
        std::ifstream is(path);
        if (!is) throw IoError("cannot open instruction catalog: " + path);
        nlohmann::json j;
        try {
            is >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("bad instruction catalog: " + std::string(e.what()));
        }
        InstructionCatalog cat;
        for (const auto& [k, v] : j.at("instructions").items()) {
            if (k == "st_template")
                cat.st_template = v.get<std::string>();
            else
                cat.fixed[k] = v.get<std::string>();
        }
        for (const auto& [k, v] : j.at("label_sets").items())
            cat.label_sets[k] = v.get<std::vector<std::string>>();
        cat.asr_paraphrases = j.at("asr_paraphrases").get<std::vector<std::string>>();
        if (cat.st_template.find("<target>") == std::string::npos)
            throw ConfigError("st_template must contain <target>");
        return cat;
    }

    Instruction lookup(const std::string& tag) const {
        static const std::map<std::string, Task> tag_tasks = {
            {"continuation", Task::Continuation}, {"repetition", Task::Repetition},
            {"asr", Task::Asr},                   {"ic_snips", Task::IcSnips},
            {"ic_fsc", Task::IcFsc},              {"sa_slue", Task::SaSlue},
            {"analysis_cw", Task::AnalysisCw},    {"analysis_sa", Task::AnalysisSa},
            {"analysis_sr", Task::AnalysisSr},    {"analysis_st", Task::AnalysisSt},
        };
        auto tt = tag_tasks.find(tag);
        auto ft = fixed.find(tag);
        if (tt == tag_tasks.end() || ft == fixed.end())
            throw UnknownTask("no such instruction tag: " + tag);
        Instruction ins{ft->second, tt->second, "", {}};
        if (tag == "ic_snips") ins.label_set = label_sets.at("snips");
        if (tag == "ic_fsc") ins.label_set = label_sets.at("fsc");
        if (tag == "sa_slue") ins.label_set = label_sets.at("slue");
        return ins;
    }

    Instruction st(const std::string& target) const {
        if (target.empty()) throw ConfigError("st target must be nonempty");
        return {replace_all(st_template, "<target>", target), Task::St, target, {}};
    }

    // qa instructions carry the per-sample question as their text
    static Instruction qa(const std::string& question) {
        if (question.empty()) throw UnknownInstruction("qa question must be nonempty");
        return {question, Task::Qa, "", {}};
    }

    bool registered(const std::string& text) const {
        if (text.empty()) return false;
        for (const auto& [k, v] : fixed)
            if (v == text) return true;
        for (const auto& p : asr_paraphrases)
            if (p == text) return true;
        const auto cut = st_template.find("<target>");
        const std::string prefix = st_template.substr(0, cut);
        const std::string suffix = st_template.substr(cut + 8);
        if (text.size() > prefix.size() + suffix.size() && text.rfind(prefix, 0) == 0 &&
            text.compare(text.size() - suffix.size(), suffix.size(), suffix) == 0)
            return true;
        return false;
    }

    Instruction paraphrase(size_t idx) const {
        return {asr_paraphrases.at(idx), Task::Asr, "", {}};
    }
};

// ------------------------------ prompt assembly ------------------------------

struct PromptInput {
    bool is_speech = false;
    std::string transcript;  // text kind
    SpeechFeatures features;  // speech kind, raw encoder input

    static PromptInput text(std::string t) {
        PromptInput in;
        in.transcript = std::move(t);
        return in;
    }
    static PromptInput speech(SpeechFeatures f) {
        PromptInput in;
        in.is_speech = true;
        in.features = std::move(f);
        return in;
    }
};

struct PromptSlot {
    bool is_speech = false;
    std::vector<int> text_tokens;
    SpeechFeatures features;     // kept so training can backprop through the encoder
    AdaptedEmbeddings adapted;   // filled at render time

    int len() const { return is_speech ? adapted.vectors.rows() : int(text_tokens.size()); }
};

struct TurnBlock {
    std::vector<int> pre_tokens;   // "###[Human]:" + instruction
    PromptSlot slot;
    std::vector<int> post_tokens;  // "\n\n\n###[Assistant]:"
    std::vector<int> response_tokens;

    int len() const {
        return int(pre_tokens.size()) + slot.len() + int(post_tokens.size()) +
               int(response_tokens.size());
    }
};

struct AssembledPrompt {
    std::vector<TurnBlock> prior_turns;  // closed turns, multiturn only
    std::vector<int> pre_tokens;
    PromptSlot slot;
    std::vector<int> post_tokens;
    std::vector<int> response_tokens;  // training targets, ends with EOS
    bool has_response = false;
    std::vector<uint8_t> loss_mask;  // over total_len positions

    int total_len() const {
        int n = 0;
        for (const auto& t : prior_turns) n += t.len();
        return n + int(pre_tokens.size()) + slot.len() + int(post_tokens.size()) +
               int(response_tokens.size());
    }

    int response_start() const { return total_len() - int(response_tokens.size()); }

    std::string surface() const {
        std::string s;
        auto block = [&s](const std::vector<int>& pre, const PromptSlot& slot,
                          const std::vector<int>& post, const std::vector<int>& resp) {
            s += Tokenizer::decode(pre);
            s += slot.is_speech ? "<speech:" + std::to_string(slot.len()) + ">"
                                : Tokenizer::decode(slot.text_tokens);
            s += Tokenizer::decode(post);
            s += Tokenizer::decode(resp);
        };
        for (const auto& t : prior_turns) block(t.pre_tokens, t.slot, t.post_tokens, t.response_tokens);
        block(pre_tokens, slot, post_tokens, response_tokens);
        return s;
    }
};

namespace detail {

inline PromptSlot make_slot(const ModelBundle& b, const PromptInput& in) {
    PromptSlot slot;
    slot.is_speech = in.is_speech;
    if (in.is_speech) {
        slot.features = in.features;
        slot.adapted = b.adapter.adapt(b.encoder.encode(in.features));
    } else {
        if (in.transcript.empty()) throw EmptyInput("prompt input text is empty");
        slot.text_tokens = Tokenizer::encode(in.transcript);
    }
    return slot;
}

inline TurnBlock make_block(const ModelBundle& b, const InstructionCatalog& cat,
                            const Instruction& ins, const PromptInput& in) {
    if (ins.text.empty()) throw UnknownInstruction("instruction text is empty");
    if (ins.task != Task::Qa && !cat.registered(ins.text))
        throw UnknownInstruction("not in catalog: " + ins.text);
    TurnBlock t;
    t.pre_tokens = Tokenizer::encode(std::string(kHumanTag) + ins.text);
    t.slot = make_slot(b, in);
    t.post_tokens = Tokenizer::encode(kAssistantTail);
    return t;
}

}  // namespace detail

inline AssembledPrompt render_prompt(const ModelBundle& b, const InstructionCatalog& cat,
                                     const Instruction& ins, const PromptInput& in,
                                     const std::optional<std::string>& response = std::nullopt) {
    TurnBlock t = detail::make_block(b, cat, ins, in);
    AssembledPrompt p;
    p.pre_tokens = std::move(t.pre_tokens);
    p.slot = std::move(t.slot);
    p.post_tokens = std::move(t.post_tokens);
    if (response) {
        p.has_response = true;
        p.response_tokens = Tokenizer::encode(*response);
        p.response_tokens.push_back(Tokenizer::kEosId);
    }
    const int L = p.total_len();
    if (L > b.lm.cfg.max_seq_len)
        throw PromptTooLong("prompt length " + std::to_string(L) + " > max_seq_len " +
                            std::to_string(b.lm.cfg.max_seq_len));
    p.loss_mask.assign(size_t(L), 0);
    for (size_t i = p.response_tokens.size(); i >= 1; --i) p.loss_mask[size_t(L) - i] = 1;
    return p;
}

struct TurnInput {
    Instruction instruction;
    PromptInput input;
};

// prior turns serialize as instruction+input blocks followed by the assistant
// text; the next turn is left open for generation
inline AssembledPrompt build_multiturn(const ModelBundle& b, const InstructionCatalog& cat,
                                       const std::vector<std::pair<TurnInput, std::string>>& history,
                                       const TurnInput& next) {
    AssembledPrompt p = render_prompt(b, cat, next.instruction, next.input);
    for (const auto& [turn, assistant_text] : history) {
        if (assistant_text.empty()) throw EmptyInput("multiturn history response is empty");
        TurnBlock t = detail::make_block(b, cat, turn.instruction, turn.input);
        t.response_tokens = Tokenizer::encode(assistant_text);
        p.prior_turns.push_back(std::move(t));
    }
    const int L = p.total_len();
    if (L > b.lm.cfg.max_seq_len)
        throw PromptTooLong("prompt length " + std::to_string(L) + " > max_seq_len " +
                            std::to_string(b.lm.cfg.max_seq_len));
    p.loss_mask.assign(size_t(L), 0);
    return p;
}

// ------------------------------ embedding assembly ------------------------------

inline Tensor assemble_embeddings(const ModelBundle& b, const AssembledPrompt& p) {
    const int d = b.lm.cfg.d_model;
    Tensor out({p.total_len(), d});
    float* dst = out.v.data();
    auto put_tokens = [&](const std::vector<int>& ids) {
        Tensor rows = embed_rows(b.lm, ids);
        std::copy(rows.v.begin(), rows.v.end(), dst);
        dst += rows.v.size();
    };
    auto put_slot = [&](const PromptSlot& slot) {
        if (slot.is_speech) {
            // re-adapt from raw features so assembly always reflects the
            // current adapter weights, not the render-time snapshot
            Tensor rows = b.adapter.adapt(b.encoder.encode(slot.features)).vectors;
            std::copy(rows.v.begin(), rows.v.end(), dst);
            dst += rows.v.size();
        } else {
            put_tokens(slot.text_tokens);
        }
    };
    for (const auto& t : p.prior_turns) {
        put_tokens(t.pre_tokens);
        put_slot(t.slot);
        put_tokens(t.post_tokens);
        put_tokens(t.response_tokens);
    }
    put_tokens(p.pre_tokens);
    put_slot(p.slot);
    put_tokens(p.post_tokens);
    put_tokens(p.response_tokens);
    return out;
}

// graph variant: speech slots run encoder then adapter so gradients reach
// whatever the freeze plan left trainable
inline ag::NodePtr assemble_embeddings_graph(const ModelBundle& b, const AssembledPrompt& p) {
    std::vector<ag::NodePtr> parts;
    auto put_tokens = [&](const std::vector<int>& ids) {
        if (!ids.empty()) parts.push_back(b.lm.embed(ids));
    };
    auto put_slot = [&](const PromptSlot& slot) {
        if (slot.is_speech)
            parts.push_back(b.adapter.forward(b.encoder.forward(ag::leaf(slot.features.frames))));
        else
            put_tokens(slot.text_tokens);
    };
    for (const auto& t : p.prior_turns) {
        put_tokens(t.pre_tokens);
        put_slot(t.slot);
        put_tokens(t.post_tokens);
        put_tokens(t.response_tokens);
    }
    put_tokens(p.pre_tokens);
    put_slot(p.slot);
    put_tokens(p.post_tokens);
    put_tokens(p.response_tokens);
    return ag::concat_rows(parts);
}

}  // namespace blsp
