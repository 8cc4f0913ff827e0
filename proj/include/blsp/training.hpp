#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "blsp/ctc.hpp"
#include "blsp/model.hpp"
#include "blsp/optim.hpp"
#include "blsp/prompting.hpp"
#include "blsp/toyworld.hpp"

namespace blsp {

struct TrainConfig {
    double epochs = 1.0;
    int max_steps = 0;  // overrides the epoch count when positive
    int batch_size = 8;
    AdamWConfig opt;
    uint64_t seed = 1;
    int log_every = 10;

    int steps_for(size_t n_examples) const {
        if (max_steps > 0) return max_steps;
        if (batch_size < 1 || epochs <= 0) throw ConfigError("train: bad epochs/batch_size");
        return std::max(1, int(std::ceil(epochs * double(n_examples) / batch_size)));
    }

    nlohmann::json to_json() const {
        return {{"epochs", epochs},         {"max_steps", max_steps},
                {"batch_size", batch_size}, {"learning_rate", opt.lr},
                {"beta1", opt.beta1},       {"beta2", opt.beta2},
                {"weight_decay", opt.weight_decay}, {"grad_clip", opt.grad_clip},
                {"seed", seed},             {"log_every", log_every}};
    }
};

using LossCurve = std::vector<std::pair<int, float>>;

inline void write_curve_csv(const std::string& path, const LossCurve& curve,
                            const std::string& metric = "loss") {
    std::ostringstream os;
    os << "step," << metric << "\n";
    for (const auto& [step, v] : curve) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%d,%.9g\n", step, double(v));
        os << buf;
    }
    write_text_file(path, os.str());
}

// ------------------------------ lm loss ------------------------------

// mean NLL over masked positions
inline ag::NodePtr lm_loss(const ag::NodePtr& logits, const std::vector<int>& targets,
                           const std::vector<char>& mask) {
    int n_masked = 0;
    for (char m : mask) n_masked += m ? 1 : 0;
    if (n_masked == 0) throw EmptyMask("lm_loss: no masked positions");
    return ag::scale(ag::masked_nll_sum(logits, targets, mask), 1.0f / float(n_masked));
}

struct TrainExample {
    std::string id;
    AssembledPrompt prompt;
};

// next-token loss for one assembled prompt: logits row i is scored against
// the token at position i+1 wherever the loss mask covers position i+1
struct PromptLossParts {
    ag::NodePtr nll_sum;
    int n_masked = 0;
};

inline std::vector<int> prompt_token_ids(const AssembledPrompt& p) {
    std::vector<int> ids;
    auto put = [&ids](const std::vector<int>& v) { ids.insert(ids.end(), v.begin(), v.end()); };
    auto put_slot = [&ids](const PromptSlot& s) {
        if (s.is_speech)
            ids.insert(ids.end(), size_t(s.len()), 0);  // placeholder rows, never scored
        else
            ids.insert(ids.end(), s.text_tokens.begin(), s.text_tokens.end());
    };
    for (const auto& t : p.prior_turns) {
        put(t.pre_tokens);
        put_slot(t.slot);
        put(t.post_tokens);
        put(t.response_tokens);
    }
    put(p.pre_tokens);
    put_slot(p.slot);
    put(p.post_tokens);
    put(p.response_tokens);
    return ids;
}

inline PromptLossParts prompt_loss_parts(const ModelBundle& b, const AssembledPrompt& p) {
    const std::vector<int> ids = prompt_token_ids(p);
    const int L = int(ids.size());
    std::vector<int> targets(size_t(L), 0);
    std::vector<char> mask(size_t(L), 0);
    int n_masked = 0;
    for (int i = 0; i + 1 < L; ++i) {
        targets[size_t(i)] = ids[size_t(i) + 1];
        mask[size_t(i)] = p.loss_mask[size_t(i) + 1] ? 1 : 0;
        n_masked += mask[size_t(i)];
    }
    if (n_masked == 0) throw EmptyMask("prompt has no response positions to score");
    auto emb = assemble_embeddings_graph(b, p);
    auto logits = b.lm.forward(emb, true, b.lora.empty() ? nullptr : &b.lora);
    return {ag::masked_nll_sum(logits, targets, mask), n_masked};
}

inline ag::NodePtr prompt_loss(const ModelBundle& b, const AssembledPrompt& p) {
    auto parts = prompt_loss_parts(b, p);
    return ag::scale(parts.nll_sum, 1.0f / float(parts.n_masked));
}

// teacher-forced masked mean NLL over a whole set, no gradients kept
inline float dataset_loss(const ModelBundle& b, const std::vector<TrainExample>& data) {
    double total = 0.0;
    int64_t count = 0;
    for (const auto& ex : data) {
        auto parts = prompt_loss_parts(b, ex.prompt);
        total += double(parts.nll_sum->val.v[0]);
        count += parts.n_masked;
    }
    if (count == 0) throw EmptyMask("dataset has no scored positions");
    return float(total / double(count));
}

// ------------------------------ core loop ------------------------------

struct TrainOutcome {
    LossCurve curve;
    float initial_loss = 0.0f;
    float final_loss = 0.0f;
    int steps = 0;
};

// called after each optimizer step; lets callers snapshot checkpoint series
using StepHook = std::function<void(int step, float loss)>;

inline TrainOutcome train_prompts(ModelBundle& b, const FreezePlan& plan,
                                  const std::vector<TrainExample>& data,
                                  const TrainConfig& cfg, const StepHook& hook = {}) {
    if (data.empty()) throw EmptyInput("train: no examples");
    apply_freeze_plan(b, plan);
    auto nodes = trainable_nodes(b);
    if (nodes.empty()) throw ConfigError("train: freeze plan leaves nothing trainable");
    AdamW opt(nodes, cfg.opt);
    Rng rng(cfg.seed);
    const int steps = cfg.steps_for(data.size());

    TrainOutcome out;
    out.steps = steps;
    for (int step = 1; step <= steps; ++step) {
        opt.zero_grad();
        std::vector<ag::NodePtr> sums;
        std::vector<std::string> batch_ids;
        int n_masked = 0;
        for (int k = 0; k < cfg.batch_size; ++k) {
            const auto& ex = data[rng.below(data.size())];
            batch_ids.push_back(ex.id);
            auto parts = prompt_loss_parts(b, ex.prompt);
            sums.push_back(parts.nll_sum);
            n_masked += parts.n_masked;
        }
        auto loss = ag::scale(ag::add_scalars(sums), 1.0f / float(n_masked));
        const float loss_v = loss->val.v[0];
        if (!std::isfinite(loss_v)) {
            std::string ids;
            for (const auto& id : batch_ids) ids += (ids.empty() ? "" : ",") + id;
            throw NonFiniteLoss("step " + std::to_string(step) + ", batch ids: " + ids);
        }
        ag::backward(loss);
        opt.step();
        if (step == 1) out.initial_loss = loss_v;
        if (step % cfg.log_every == 0 || step == steps || step == 1)
            out.curve.emplace_back(step, loss_v);
        out.final_loss = loss_v;
        if (hook) hook(step, loss_v);
    }
    return out;
}

inline nlohmann::json outcome_meta(const TrainOutcome& o, const TrainConfig& cfg,
                                   const std::string& kind) {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& [s, l] : o.curve) curve.push_back({s, l});
    return {{"kind", kind},
            {"steps", o.steps},
            {"initial_loss", o.initial_loss},
            {"final_loss", o.final_loss},
            {"loss_curve", curve},
            {"train_config", cfg.to_json()}};
}

// ------------------------------ trainers ------------------------------

struct SpeechSample {
    std::string id;
    SpeechFeatures features;  // raw encoder input
    std::string transcript;
};

struct BehaviorExample {
    std::string utterance_id;
    std::string behavior;  // continuation | repetition
    std::string instruction;
    std::string response;
};

inline Task behavior_task(const std::string& behavior) {
    if (behavior == "continuation") return Task::Continuation;
    if (behavior == "repetition") return Task::Repetition;
    throw ConfigError("unknown behavior tag: " + behavior);
}

// renders behavior records into speech-slot training prompts
inline std::vector<TrainExample> behavior_train_examples(
    const ModelBundle& b, const InstructionCatalog& cat,
    const std::vector<BehaviorExample>& samples,
    const std::map<std::string, SpeechFeatures>& features_by_id) {
    std::vector<TrainExample> data;
    for (const auto& s : samples) {
        auto it = features_by_id.find(s.utterance_id);
        if (it == features_by_id.end())
            throw ConfigError("no features for utterance: " + s.utterance_id);
        Instruction ins{s.instruction, behavior_task(s.behavior), "", {}};
        data.push_back({s.utterance_id, render_prompt(b, cat, ins, PromptInput::speech(it->second),
                                                      s.response)});
    }
    return data;
}

// step two of the method: adapter-only supervision toward the step-one
// responses, speech in the input slot
inline Checkpoint train_blsp(ModelBundle& b, const InstructionCatalog& cat,
                             const std::vector<BehaviorExample>& samples,
                             const std::map<std::string, SpeechFeatures>& features_by_id,
                             const TrainConfig& cfg, TrainOutcome* outcome = nullptr,
                             const StepHook& hook = {}) {
    auto data = behavior_train_examples(b, cat, samples, features_by_id);
    auto out = train_prompts(b, FreezePlan::blsp(), data, cfg, hook);
    if (outcome) *outcome = out;
    Checkpoint c;
    c.meta_json = outcome_meta(out, cfg, "blsp").dump();
    c.tensors = snapshot_params(b, {"adapter"});
    return c;
}

// contrast baseline: same mechanics, targets are the transcripts, one
// catalog paraphrase sampled per example from the run seed
inline Checkpoint train_asr_pretraining(ModelBundle& b, const InstructionCatalog& cat,
                                        const std::vector<SpeechSample>& utterances,
                                        const TrainConfig& cfg, TrainOutcome* outcome = nullptr,
                                        const StepHook& hook = {}) {
    Rng pick(cfg.seed ^ 0x505245545241494eull);
    std::vector<TrainExample> data;
    for (const auto& u : utterances) {
        const auto& ins_text = cat.asr_paraphrases[pick.below(cat.asr_paraphrases.size())];
        Instruction ins{ins_text, Task::Asr, "", {}};
        data.push_back({u.id, render_prompt(b, cat, ins, PromptInput::speech(u.features),
                                            u.transcript)});
    }
    auto out = train_prompts(b, FreezePlan::blsp(), data, cfg, hook);
    if (outcome) *outcome = out;
    Checkpoint c;
    c.meta_json = outcome_meta(out, cfg, "asr_pretrain").dump();
    c.tensors = snapshot_params(b, {"adapter"});
    return c;
}

struct StPair {
    std::string id;
    SpeechFeatures features;
    std::string translation;
    std::string target_lang = "German";
};

// LoRA fine-tuning for ST: adapter, encoder and LoRA deltas move, LM base
// stays bitwise frozen
inline Checkpoint finetune_st(ModelBundle& b, const InstructionCatalog& cat,
                              const std::vector<StPair>& pairs, const TrainConfig& cfg,
                              const LoraSpec& lora_spec = LoraSpec{},
                              TrainOutcome* outcome = nullptr, const StepHook& hook = {}) {
    if (b.lora.empty()) apply_lora(b, lora_spec);
    std::vector<TrainExample> data;
    for (const auto& p : pairs)
        data.push_back({p.id, render_prompt(b, cat, cat.st(p.target_lang),
                                            PromptInput::speech(p.features), p.translation)});
    auto out = train_prompts(b, FreezePlan::st_finetune(), data, cfg, hook);
    if (outcome) *outcome = out;
    Checkpoint c;
    c.meta_json = outcome_meta(out, cfg, "finetune_st").dump();
    c.tensors = snapshot_params(b, {"adapter", "encoder", "lora"});
    return c;
}

// CTC baseline: frozen encoder, trainable adapter + projector
inline Checkpoint train_ctc_asr(CtcAsr& m, const std::vector<SpeechSample>& utterances,
                                const TrainConfig& cfg, TrainOutcome* outcome = nullptr) {
    if (utterances.empty()) throw EmptyInput("train: no examples");
    struct Item {
        const SpeechSample* u;
        std::vector<int> target;
    };
    std::vector<Item> items;
    for (const auto& u : utterances) items.push_back({&u, m.encode_target(u.transcript)});

    std::vector<ag::NodePtr> nodes;
    for (const auto& p : m.trainable_params()) nodes.push_back(p.node);
    AdamW opt(nodes, cfg.opt);
    Rng rng(cfg.seed);
    const int steps = cfg.steps_for(items.size());

    TrainOutcome out;
    out.steps = steps;
    for (int step = 1; step <= steps; ++step) {
        opt.zero_grad();
        std::vector<ag::NodePtr> losses;
        std::vector<std::string> batch_ids;
        for (int k = 0; k < cfg.batch_size; ++k) {
            const auto& it = items[rng.below(items.size())];
            batch_ids.push_back(it.u->id);
            losses.push_back(ctc_loss_node(m.log_probs(it.u->features), it.target));
        }
        auto loss = ag::scale(ag::add_scalars(losses), 1.0f / float(losses.size()));
        const float loss_v = loss->val.v[0];
        if (!std::isfinite(loss_v)) {
            std::string ids;
            for (const auto& id : batch_ids) ids += (ids.empty() ? "" : ",") + id;
            throw NonFiniteLoss("step " + std::to_string(step) + ", batch ids: " + ids);
        }
        ag::backward(loss);
        opt.step();
        if (step == 1) out.initial_loss = loss_v;
        if (step % cfg.log_every == 0 || step == steps || step == 1)
            out.curve.emplace_back(step, loss_v);
        out.final_loss = loss_v;
    }
    if (outcome) *outcome = out;

    Checkpoint c;
    nlohmann::json meta = outcome_meta(out, cfg, "ctc_asr");
    meta["vocab"] = m.vocab;
    c.meta_json = meta.dump();
    for (const auto& p : m.trainable_params()) c.tensors.emplace_back(p.name, p.node->val);
    return c;
}

// ------------------------------ fixture LM ------------------------------

// trains the toy LM itself on the synthetic instruction corpus; this is
// fixture building (we require an instruction-following LM), not a method step
inline TrainOutcome train_lm_fixture(ModelBundle& b, const InstructionCatalog& cat,
                                     const std::vector<toyworld::CorpusItem>& corpus,
                                     const TrainConfig& cfg) {
    std::vector<TrainExample> data;
    data.reserve(corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
        const auto& it = corpus[i];
        data.push_back({"corpus-" + std::to_string(i),
                        render_prompt(b, cat, cat.lookup(it.tag), PromptInput::text(it.input),
                                      it.response)});
    }
    return train_prompts(b, FreezePlan{{"lm"}}, data, cfg);
}

// greedy response to a single prompt
inline GenResult respond(const ModelBundle& b, const AssembledPrompt& p,
                         const Decoding& dec = Decoding{}, int max_new_tokens = 64) {
    return lm_generate(b.lm, assemble_embeddings(b, p), dec, max_new_tokens);
}

}  // namespace blsp
