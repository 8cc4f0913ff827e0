// Operator surface for the pipeline: synthetic data, behavior generation,
// mixing, the four trainers, evaluation, QA judging, analysis exports, and
// a scripted multi-turn chat REPL. Every run takes explicit seeds and
// writes a manifest of its inputs so artifacts are reproducible byte for
// byte. Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "blsp/analysis.hpp"
#include "blsp/behavior_data.hpp"
#include "blsp/config.hpp"
#include "blsp/ctc.hpp"
#include "blsp/evaluation.hpp"
#include "blsp/judge.hpp"
#include "blsp/model.hpp"
#include "blsp/speech.hpp"
#include "blsp/toyworld.hpp"
#include "blsp/training.hpp"

namespace fs = std::filesystem;
using namespace blsp;

namespace {

// ------------------------------ plumbing ------------------------------

void progress(const std::string& line) { std::cerr << "[blsp] " << line << "\n"; }

std::string hash_file(const std::string& path) {
    const std::string bytes = read_text_file(path);
    return hash_hex(fnv1a64(bytes.data(), bytes.size()));
}

// every run drops a manifest next to its outputs: which command ran, which
// input files (with content hashes), which settings and seeds
void write_run_manifest(const std::string& path, const std::string& command,
                        const std::vector<std::string>& inputs,
                        const std::vector<std::string>& outputs,
                        const nlohmann::json& settings) {
    nlohmann::json j;
    j["command"] = command;
    nlohmann::json in = nlohmann::json::object();
    for (const auto& p : inputs) in[p] = hash_file(p);
    j["inputs"] = in;
    j["outputs"] = outputs;
    j["settings"] = settings;
    write_text_file(path, j.dump(2) + "\n");
}

// audio_ref entries are stored relative to their manifest so datasets can move
std::string resolve_ref(const std::string& manifest_path, const std::string& ref) {
    fs::path p(ref);
    if (p.is_absolute()) return ref;
    return (fs::path(manifest_path).parent_path() / p).string();
}

SpeechFeatures load_raw_features(const std::string& path, int d_enc) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw IoError("cannot open: " + path);
    char magic[8] = {0};
    probe.read(magic, 8);
    probe.close();
    if (std::string(magic, 8) == kFeatureMagic) return read_features(path);
    return wav_to_features(path, d_enc);
}

std::map<std::string, SpeechFeatures> features_by_id(const std::string& manifest_path,
                                                     const std::vector<Utterance>& utts,
                                                     int d_enc) {
    std::map<std::string, SpeechFeatures> out;
    for (const auto& u : utts)
        out.emplace(u.id, load_raw_features(resolve_ref(manifest_path, u.audio_ref), d_enc));
    return out;
}

// restores a bundle checkpoint; LoRA tensors imply the deltas must exist first
void load_into_bundle(ModelBundle& b, const RunConfig& cfg, const std::string& path) {
    Checkpoint c = read_checkpoint(path);
    bool has_lora = false;
    for (const auto& [name, t] : c.tensors)
        if (name.rfind("lora.", 0) == 0) has_lora = true;
    if (has_lora && b.lora.empty()) apply_lora(b, cfg.lora);
    load_params(b, c);
}

CtcAsr load_ctc(const RunConfig& cfg, const std::string& path) {
    Checkpoint c = read_checkpoint(path);
    nlohmann::json meta = nlohmann::json::parse(c.meta_json);
    if (!meta.contains("vocab")) throw ConfigError("not a ctc checkpoint: " + path);
    CtcAsr m = CtcAsr::init(cfg.encoder, cfg.adapter,
                            meta.at("vocab").get<std::vector<std::string>>());
    std::map<std::string, ag::NodePtr> by_name;
    for (const auto& p : m.trainable_params()) by_name[p.name] = p.node;
    for (const auto& [name, t] : c.tensors) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ConfigError("ctc checkpoint tensor has no home: " + name);
        if (it->second->val.shape != t.shape)
            throw ConfigError("ctc checkpoint tensor shape mismatch: " + name);
        it->second->val.v = t.v;
    }
    return m;
}

std::unique_ptr<JudgeClient> make_judge(const RunConfig& cfg, const std::string& kind,
                                        uint64_t mock_seed) {
    if (kind == "mock") return std::make_unique<MockJudge>(mock_seed);
    auto j = std::make_unique<HttpJudge>();
    if (!cfg.judge_url.empty()) {
        j->url = cfg.judge_url;
        j->api_key = cfg.judge_api_key;
    } else {
        *j = HttpJudge::from_env();
    }
    return j;
}

std::vector<BehaviorExample> to_examples(const std::vector<BehaviorSample>& samples) {
    std::vector<BehaviorExample> out;
    out.reserve(samples.size());
    for (const auto& s : samples)
        out.push_back({s.utterance_id, s.behavior, s.instruction, s.response});
    return out;
}

std::string reference_for(const EvalTask& task, const InstructionCatalog& cat,
                          const std::string& transcript) {
    switch (task.kind) {
        case EvalTask::Kind::Asr: return transcript;
        case EvalTask::Kind::St: return toyworld::translate_de(transcript);
        case EvalTask::Kind::Ic:
            return toyworld::label_of(transcript, task.instruction.label_set);
        case EvalTask::Kind::Sa:
            return toyworld::label_of(transcript, cat.label_sets.at("slue"));
        case EvalTask::Kind::Qa: break;
    }
    throw ConfigError("eval: task has no reference rule");
}

// ------------------------------ synth-data ------------------------------

struct SynthOpts {
    std::string out_dir;
    int n = 20;
    uint64_t seed = 1;
    int d_enc = kDefaultDEnc;
    int min_words = 2;
    int max_words = 5;
    std::string prefix = "utt";
};

void run_synth_data(const SynthOpts& o) {
    fs::create_directories(fs::path(o.out_dir) / "feats");
    const auto transcripts = toyworld::sample_transcripts(o.n, o.seed, o.min_words, o.max_words);
    std::vector<Utterance> utts;
    for (int i = 0; i < o.n; ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "%s-%04d", o.prefix.c_str(), i);
        const std::string rel = "feats/" + std::string(name) + ".feat";
        Utterance u = synth_speech(transcripts[size_t(i)], o.seed + uint64_t(i),
                                   (fs::path(o.out_dir) / rel).string(), name, o.d_enc);
        u.audio_ref = rel;
        utts.push_back(u);
    }
    const std::string manifest = (fs::path(o.out_dir) / "utterances.jsonl").string();
    write_utterance_manifest(manifest, utts);
    write_run_manifest((fs::path(o.out_dir) / "run.json").string(), "synth-data", {},
                       {manifest},
                       {{"n", o.n}, {"seed", o.seed}, {"d_enc", o.d_enc},
                        {"min_words", o.min_words}, {"max_words", o.max_words}});
    progress("synth-data: wrote " + std::to_string(o.n) + " utterances to " + manifest);
}

// ------------------------------ gen-behaviors ------------------------------

struct GenOpts {
    std::string config, utterances, lm_checkpoint, out;
    std::string behavior = "continuation";
    int workers = 4;
    int max_new = 64;
};

void run_gen_behaviors(const GenOpts& o) {
    RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
    const std::string utt_path = o.utterances.empty() ? cfg.path("utterances") : o.utterances;
    const auto utts = read_utterance_manifest(utt_path);
    std::vector<BehaviorSample> samples;
    std::vector<std::string> inputs = {utt_path};
    if (o.behavior == "repetition") {
        InstructionCatalog cat = InstructionCatalog::load();
        samples = make_repetition_samples(cat, utts);
    } else {
        const std::string lm_path =
            o.lm_checkpoint.empty() ? cfg.path("lm_checkpoint") : o.lm_checkpoint;
        inputs.push_back(lm_path);
        ModelBundle b = ModelBundle::init(cfg.lm, cfg.encoder, cfg.adapter);
        load_into_bundle(b, cfg, lm_path);
        InstructionCatalog cat = InstructionCatalog::load();
        GenStats stats;
        samples = generate_continuations(b, cat, utts, Decoding::greedy(), o.workers,
                                         o.max_new, &stats);
        progress("gen-behaviors: " + std::to_string(samples.size()) + " responses, " +
                 std::to_string(stats.empty_dropped) + " empty, " +
                 std::to_string(stats.truncated) + " truncated, " +
                 std::to_string(stats.failures.size()) + " failed");
        for (const auto& [id, err] : stats.failures) progress("  failed " + id + ": " + err);
    }
    write_behavior_manifest(o.out, samples);
    write_run_manifest(o.out + ".run.json", "gen-behaviors", inputs, {o.out},
                       {{"behavior", o.behavior}, {"workers", o.workers},
                        {"max_new_tokens", o.max_new}});
    progress("gen-behaviors: wrote " + std::to_string(samples.size()) + " samples to " + o.out);
}

// ------------------------------ mix ------------------------------

struct MixOpts {
    std::string continuations, repetitions, out;
    int rep_parts = 1;
    int cont_parts = 9;
    uint64_t seed = 1;
};

void run_mix(const MixOpts& o) {
    std::vector<BehaviorSample> cont, rep;
    std::vector<std::string> inputs = {o.continuations};
    auto absorb = [&](const std::string& path) {
        for (auto& s : read_behavior_manifest(path))
            (s.behavior == "repetition" ? rep : cont).push_back(std::move(s));
    };
    absorb(o.continuations);
    if (!o.repetitions.empty()) {
        absorb(o.repetitions);
        inputs.push_back(o.repetitions);
    }
    MixSpec spec{o.rep_parts, o.cont_parts, o.seed};
    const auto mixed = mix_behaviors(cont, rep, spec);
    write_behavior_manifest(o.out, mixed);
    write_run_manifest(o.out + ".run.json", "mix", inputs, {o.out},
                       {{"repetition_parts", o.rep_parts}, {"continuation_parts", o.cont_parts},
                        {"shuffle_seed", o.seed}});
    progress("mix: " + std::to_string(mixed.size()) + " samples (" + std::to_string(rep.size()) +
             " repetition available) to " + o.out);
}

// ------------------------------ train ------------------------------

struct TrainOpts {
    std::string config;
    std::string out_dir;
    int save_every = 0;  // checkpoint series interval, 0 = off
};

void run_train(const std::string& variant, const TrainOpts& o) {
    RunConfig cfg = RunConfig::load(o.config);
    const std::string out_dir = o.out_dir.empty() ? cfg.path("out_dir") : o.out_dir;
    fs::create_directories(out_dir);
    InstructionCatalog cat = InstructionCatalog::load();

    const std::string utt_path = cfg.path("utterances");
    const auto utts = read_utterance_manifest(utt_path);
    auto feats = features_by_id(utt_path, utts, cfg.encoder.d_enc);
    std::vector<std::string> inputs = {o.config, utt_path};

    TrainOutcome out;
    Checkpoint ck;
    std::string ckpt_name = variant + ".ckpt";
    for (auto& c : ckpt_name)
        if (c == '-') c = '_';

    if (variant == "ctc") {
        std::vector<SpeechSample> data;
        for (const auto& u : utts) data.push_back({u.id, feats.at(u.id), u.transcript});
        CtcAsr m = CtcAsr::init(cfg.encoder, cfg.adapter, toyworld::lexicon());
        progress("train ctc: " + std::to_string(data.size()) + " utterances, " +
                 std::to_string(cfg.train.steps_for(data.size())) + " steps");
        ck = train_ctc_asr(m, data, cfg.train, &out);
    } else {
        ModelBundle b = ModelBundle::init(cfg.lm, cfg.encoder, cfg.adapter);
        const std::string lm_path = cfg.path("lm_checkpoint");
        inputs.push_back(lm_path);
        load_into_bundle(b, cfg, lm_path);
        if (cfg.paths.count("adapter_init")) {
            inputs.push_back(cfg.path("adapter_init"));
            load_into_bundle(b, cfg, cfg.path("adapter_init"));
        }

        const std::set<std::string> comps = variant == "finetune-st"
                                                ? std::set<std::string>{"adapter", "encoder", "lora"}
                                                : std::set<std::string>{"adapter"};
        StepHook hook = [&](int step, float loss) {
            if (cfg.train.log_every > 0 && step % cfg.train.log_every == 0)
                progress("step " + std::to_string(step) + " loss " + std::to_string(loss));
            if (o.save_every > 0 && step % o.save_every == 0) {
                Checkpoint snap;
                snap.meta_json =
                    nlohmann::json{{"kind", variant}, {"step", step}, {"loss", loss}}.dump();
                snap.tensors = snapshot_params(b, comps);
                char name[64];
                std::snprintf(name, sizeof(name), "ckpt-%06d.ckpt", step);
                write_checkpoint((fs::path(out_dir) / name).string(), snap);
            }
        };

        if (variant == "blsp" || variant == "blsp-rp") {
            const std::string beh_path = cfg.path("behaviors");
            inputs.push_back(beh_path);
            std::vector<BehaviorSample> cont, rep;
            for (auto& s : read_behavior_manifest(beh_path))
                (s.behavior == "repetition" ? rep : cont).push_back(std::move(s));
            std::vector<BehaviorSample> chosen;
            if (variant == "blsp-rp")
                chosen = mix_behaviors(cont, rep, cfg.mix);
            else
                chosen = std::move(cont);
            progress("train " + variant + ": " + std::to_string(chosen.size()) + " samples, " +
                     std::to_string(cfg.train.steps_for(chosen.size())) + " steps");
            ck = train_blsp(b, cat, to_examples(chosen), feats, cfg.train, &out, hook);
        } else if (variant == "asr-pretrain") {
            std::vector<SpeechSample> data;
            for (const auto& u : utts) data.push_back({u.id, feats.at(u.id), u.transcript});
            progress("train asr-pretrain: " + std::to_string(data.size()) + " utterances, " +
                     std::to_string(cfg.train.steps_for(data.size())) + " steps");
            ck = train_asr_pretraining(b, cat, data, cfg.train, &out, hook);
        } else {  // finetune-st
            std::vector<StPair> pairs;
            for (const auto& u : utts)
                pairs.push_back({u.id, feats.at(u.id), toyworld::translate_de(u.transcript)});
            progress("train finetune-st: " + std::to_string(pairs.size()) + " pairs, " +
                     std::to_string(cfg.train.steps_for(pairs.size())) + " steps");
            ck = finetune_st(b, cat, pairs, cfg.train, cfg.lora, &out, hook);
        }
    }

    const std::string ckpt_path = (fs::path(out_dir) / ckpt_name).string();
    write_checkpoint(ckpt_path, ck);
    const std::string curve_path = (fs::path(out_dir) / "curve.csv").string();
    write_curve_csv(curve_path, out.curve);
    write_run_manifest((fs::path(out_dir) / "run.json").string(), "train " + variant, inputs,
                       {ckpt_path, curve_path},
                       {{"config", cfg.to_json()}, {"save_every", o.save_every}});
    progress("train " + variant + ": " + std::to_string(out.steps) + " steps, loss " +
             std::to_string(out.initial_loss) + " -> " + std::to_string(out.final_loss));
    std::cout << ckpt_path << "\n";
}

// ------------------------------ eval ------------------------------

struct EvalOpts {
    std::string config, out_dir;
    std::string system = "blsp";
    std::string task = "asr";
    std::string checkpoint;  // adapter / st bundle checkpoint
    int max_new = 96;
};

void run_eval(const EvalOpts& o) {
    RunConfig cfg = RunConfig::load(o.config);
    const std::string out_dir = o.out_dir.empty() ? cfg.path("out_dir") : o.out_dir;
    fs::create_directories(out_dir);
    InstructionCatalog cat = InstructionCatalog::load();

    const SystemTag tag = system_tag_from(o.system);
    EvalTask task;
    if (o.task == "asr") task = EvalTask::asr(cat);
    else if (o.task == "st") task = EvalTask::st(cat);
    else if (o.task == "ic_snips") task = EvalTask::ic_snips(cat);
    else if (o.task == "ic_fsc") task = EvalTask::ic_fsc(cat);
    else if (o.task == "sa_slue") task = EvalTask::sa(cat);
    else throw ConfigError("eval: unknown task: " + o.task);

    const std::string utt_path = cfg.path("utterances");
    const auto utts = read_utterance_manifest(utt_path);
    std::vector<std::string> inputs = {o.config, utt_path};

    std::vector<EvalSample> samples;
    for (const auto& u : utts) {
        EvalSample s;
        s.id = u.id;
        s.features = load_raw_features(resolve_ref(utt_path, u.audio_ref), cfg.encoder.d_enc);
        s.transcript = u.transcript;
        s.reference = reference_for(task, cat, u.transcript);
        samples.push_back(std::move(s));
    }

    ModelBundle b = ModelBundle::init(cfg.lm, cfg.encoder, cfg.adapter);
    const std::string lm_path = cfg.path("lm_checkpoint");
    inputs.push_back(lm_path);
    load_into_bundle(b, cfg, lm_path);
    const std::string ad_path = !o.checkpoint.empty() ? o.checkpoint
                                                      : cfg.path_or("adapter_checkpoint", "");
    if (!ad_path.empty()) {
        inputs.push_back(ad_path);
        load_into_bundle(b, cfg, ad_path);
    }

    std::unique_ptr<CtcAsr> ctc;
    if (tag == SystemTag::CascadeCtc) {
        const std::string ctc_path = cfg.path("ctc_checkpoint");
        inputs.push_back(ctc_path);
        ctc = std::make_unique<CtcAsr>(load_ctc(cfg, ctc_path));
    }

    progress("eval: system " + o.system + ", task " + task.name + ", " +
             std::to_string(samples.size()) + " samples");
    EvalResult res = run_zero_shot(b, cat, tag, task, std::move(samples), ctc.get(),
                                   Decoding::greedy(), o.max_new);

    const std::string json_path = (fs::path(out_dir) / "eval.json").string();
    const std::string csv_path = (fs::path(out_dir) / "eval.csv").string();
    write_eval_json(json_path, res);
    write_eval_csv(csv_path, res);
    write_run_manifest((fs::path(out_dir) / "run.json").string(), "eval", inputs,
                       {json_path, csv_path},
                       {{"system", o.system}, {"task", o.task}, {"max_new_tokens", o.max_new},
                        {"config", cfg.to_json()}});
    char line[128];
    std::snprintf(line, sizeof(line), "%s %s %s = %.6g", o.system.c_str(), task.name.c_str(),
                  res.metric_name.c_str(), res.value);
    std::cout << line << "\n";
}

// ------------------------------ qa ------------------------------

struct QaMakeOpts {
    std::string config, utterances, out;
    std::string judge = "mock";
    uint64_t mock_seed = 1;
    int min_words = 40;
    int max_words = 60;
    int workers = 4;
};

void run_qa_make(const QaMakeOpts& o) {
    RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
    const std::string utt_path = o.utterances.empty() ? cfg.path("utterances") : o.utterances;
    const auto utts = read_utterance_manifest(utt_path);
    auto judge = make_judge(cfg, o.judge, o.mock_seed);
    const auto items = make_qa_set(utts, *judge, o.min_words, o.max_words, 3, o.workers);

    std::string lines;
    for (const auto& it : items)
        lines += nlohmann::json{{"utterance_id", it.utterance_id},
                                {"transcript", it.transcript},
                                {"question", it.question},
                                {"gold_answer", it.gold_answer}}
                     .dump() +
                 "\n";
    write_text_file(o.out, lines);
    write_run_manifest(o.out + ".run.json", "qa-make", {utt_path}, {o.out},
                       {{"judge", o.judge}, {"mock_seed", o.mock_seed},
                        {"min_words", o.min_words}, {"max_words", o.max_words}});
    progress("qa-make: " + std::to_string(items.size()) + " items to " + o.out);
}

std::vector<QaItem> read_qa_set(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    std::vector<QaItem> out;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            out.push_back({j.at("utterance_id").get<std::string>(),
                           j.at("transcript").get<std::string>(),
                           j.at("question").get<std::string>(),
                           j.value("gold_answer", std::string())});
        } catch (const nlohmann::json::exception& e) {
            throw MalformedLine(line_no, path + ": " + e.what());
        }
    }
    return out;
}

struct QaJudgeOpts {
    std::string config, qa, utterances, out_dir;
    std::string system = "blsp";
    std::string judge = "mock";
    std::string checkpoint;
    uint64_t mock_seed = 1;
    int max_new = 64;
};

void run_qa_judge(const QaJudgeOpts& o) {
    RunConfig cfg = RunConfig::load(o.config);
    const std::string qa_path = o.qa.empty() ? cfg.path("qa_set") : o.qa;
    const std::string utt_path = o.utterances.empty() ? cfg.path("utterances") : o.utterances;
    const std::string out_dir = o.out_dir.empty() ? cfg.path("out_dir") : o.out_dir;
    fs::create_directories(out_dir);
    if (o.system != "blsp" && o.system != "text+lm")
        throw ConfigError("qa-judge: system must be blsp or text+lm");

    const auto items = read_qa_set(qa_path);
    const auto utts = read_utterance_manifest(utt_path);
    auto feats = features_by_id(utt_path, utts, cfg.encoder.d_enc);

    ModelBundle b = ModelBundle::init(cfg.lm, cfg.encoder, cfg.adapter);
    std::vector<std::string> inputs = {o.config, qa_path, utt_path};
    const std::string lm_path = cfg.path("lm_checkpoint");
    inputs.push_back(lm_path);
    load_into_bundle(b, cfg, lm_path);
    const std::string ad_path = !o.checkpoint.empty() ? o.checkpoint
                                                      : cfg.path_or("adapter_checkpoint", "");
    if (!ad_path.empty()) {
        inputs.push_back(ad_path);
        load_into_bundle(b, cfg, ad_path);
    }
    InstructionCatalog cat = InstructionCatalog::load();
    auto judge = make_judge(cfg, o.judge, o.mock_seed);

    std::vector<JudgeVerdict> verdicts;
    std::string lines;
    for (const auto& it : items) {
        auto f = feats.find(it.utterance_id);
        if (f == feats.end()) throw ConfigError("qa item has no utterance: " + it.utterance_id);
        PromptInput in = o.system == "text+lm" ? PromptInput::text(it.transcript)
                                               : PromptInput::speech(f->second);
        auto prompt = render_prompt(b, cat, InstructionCatalog::qa(it.question), in);
        const std::string answer = respond(b, prompt, Decoding::greedy(), o.max_new).text;
        JudgeVerdict v = judge_qa(it.question, it.transcript, answer, *judge);
        lines += nlohmann::json{{"utterance_id", it.utterance_id},
                                {"question", v.question},
                                {"answer", v.answer},
                                {"acceptable", v.acceptable},
                                {"raw_reply", v.raw_reply}}
                     .dump() +
                 "\n";
        verdicts.push_back(std::move(v));
    }
    const double rate = accept_rate(verdicts);

    const std::string verdict_path = (fs::path(out_dir) / "verdicts.jsonl").string();
    write_text_file(verdict_path, lines);
    const std::string summary_path = (fs::path(out_dir) / "summary.json").string();
    write_text_file(summary_path, nlohmann::json{{"n", verdicts.size()},
                                                 {"accept_rate", rate},
                                                 {"system", o.system}}
                                          .dump(2) +
                                      "\n");
    write_run_manifest((fs::path(out_dir) / "run.json").string(), "qa-judge", inputs,
                       {verdict_path, summary_path},
                       {{"system", o.system}, {"judge", o.judge}, {"mock_seed", o.mock_seed},
                        {"max_new_tokens", o.max_new}});
    char line[64];
    std::snprintf(line, sizeof(line), "accept_rate = %.6g", rate);
    std::cout << line << "\n";
}

// ------------------------------ analyze ------------------------------

struct AnalyzeOpts {
    std::string config, out_dir;
    std::string checkpoint;
    int n = 8;
    double perplexity = 0.0;
    int iters = 500;
    uint64_t seed = 1;
    std::vector<std::string> checkpoints;  // curves: step=path
    std::string metric = "loss";
};

struct LoadedGrid {
    std::vector<RepresentationRecord> records;
    std::vector<std::string> inputs;
};

LoadedGrid build_grid(const RunConfig& cfg, const AnalyzeOpts& o, ModelBundle& b,
                      const InstructionCatalog& cat) {
    const std::string utt_path = cfg.path("utterances");
    auto utts = read_utterance_manifest(utt_path);
    if (int(utts.size()) > o.n) utts.resize(size_t(o.n));
    LoadedGrid g;
    g.inputs = {utt_path};
    for (const auto& u : utts) {
        auto f = load_raw_features(resolve_ref(utt_path, u.audio_ref), cfg.encoder.d_enc);
        auto recs = representation_grid(b, cat, u.id, u.transcript, f);
        g.records.insert(g.records.end(), recs.begin(), recs.end());
    }
    return g;
}

ModelBundle analysis_bundle(const RunConfig& cfg, const AnalyzeOpts& o,
                            std::vector<std::string>& inputs) {
    ModelBundle b = ModelBundle::init(cfg.lm, cfg.encoder, cfg.adapter);
    const std::string lm_path = cfg.path("lm_checkpoint");
    inputs.push_back(lm_path);
    load_into_bundle(b, cfg, lm_path);
    const std::string ad_path = !o.checkpoint.empty() ? o.checkpoint
                                                      : cfg.path_or("adapter_checkpoint", "");
    if (!ad_path.empty()) {
        inputs.push_back(ad_path);
        load_into_bundle(b, cfg, ad_path);
    }
    return b;
}

void run_analyze_reps(const AnalyzeOpts& o) {
    RunConfig cfg = RunConfig::load(o.config);
    const std::string out_dir = o.out_dir.empty() ? cfg.path("out_dir") : o.out_dir;
    fs::create_directories(out_dir);
    InstructionCatalog cat = InstructionCatalog::load();
    std::vector<std::string> inputs = {o.config};
    ModelBundle b = analysis_bundle(cfg, o, inputs);
    LoadedGrid g = build_grid(cfg, o, b, cat);
    inputs.insert(inputs.end(), g.inputs.begin(), g.inputs.end());

    SimilarityReport rep = similarity_report(g.records);
    const std::string report_path = (fs::path(out_dir) / "similarity.json").string();
    write_text_file(report_path, rep.to_json().dump(2) + "\n");
    write_run_manifest((fs::path(out_dir) / "run.json").string(), "analyze reps", inputs,
                       {report_path}, {{"n", o.n}});
    char line[128];
    std::snprintf(line, sizeof(line), "same_speech off-diagonal mean = %.6f, paired mean = %.6f",
                  rep.mean_off_diagonal(), rep.mean_paired());
    std::cout << line << "\n";
}

void run_analyze_tsne(const AnalyzeOpts& o) {
    RunConfig cfg = RunConfig::load(o.config);
    const std::string out_dir = o.out_dir.empty() ? cfg.path("out_dir") : o.out_dir;
    fs::create_directories(out_dir);
    InstructionCatalog cat = InstructionCatalog::load();
    std::vector<std::string> inputs = {o.config};
    ModelBundle b = analysis_bundle(cfg, o, inputs);
    LoadedGrid g = build_grid(cfg, o, b, cat);
    inputs.insert(inputs.end(), g.inputs.begin(), g.inputs.end());

    std::vector<std::vector<float>> x;
    x.reserve(g.records.size());
    for (const auto& r : g.records) x.push_back(r.vec);
    TsneConfig tc;
    tc.perplexity = o.perplexity;
    tc.iters = o.iters;
    tc.seed = o.seed;
    const auto coords = tsne_project(x, tc);

    const std::string coords_path = (fs::path(out_dir) / "tsne.csv").string();
    export_coords_csv(coords_path, g.records, coords);
    write_run_manifest((fs::path(out_dir) / "run.json").string(), "analyze tsne", inputs,
                       {coords_path},
                       {{"n", o.n}, {"perplexity", o.perplexity}, {"iters", o.iters},
                        {"seed", o.seed}});
    progress("analyze tsne: " + std::to_string(coords.size()) + " points to " + coords_path);
}

void run_analyze_curves(const AnalyzeOpts& o) {
    RunConfig cfg = RunConfig::load(o.config);
    const std::string out_dir = o.out_dir.empty() ? cfg.path("out_dir") : o.out_dir;
    fs::create_directories(out_dir);
    InstructionCatalog cat = InstructionCatalog::load();

    std::vector<std::pair<int, std::string>> series;
    for (const auto& spec : o.checkpoints) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos)
            throw ConfigError("curves: expected step=path, got: " + spec);
        series.emplace_back(std::stoi(spec.substr(0, eq)), spec.substr(eq + 1));
    }
    if (series.empty()) throw ConfigError("curves: no checkpoints given");

    const std::string utt_path = cfg.path("utterances");
    const std::string beh_path = cfg.path("behaviors");
    const auto utts = read_utterance_manifest(utt_path);
    auto feats = features_by_id(utt_path, utts, cfg.encoder.d_enc);
    std::vector<BehaviorSample> cont;
    for (auto& s : read_behavior_manifest(beh_path))
        if (s.behavior != "repetition") cont.push_back(std::move(s));

    std::vector<std::string> inputs = {o.config, utt_path, beh_path};
    ModelBundle b = ModelBundle::init(cfg.lm, cfg.encoder, cfg.adapter);
    const std::string lm_path = cfg.path("lm_checkpoint");
    inputs.push_back(lm_path);
    load_into_bundle(b, cfg, lm_path);
    const auto data = behavior_train_examples(b, cat, to_examples(cont), feats);

    const auto points = training_curve_eval(b, series, data, o.metric);
    const std::string curve_path = (fs::path(out_dir) / "curves.csv").string();
    export_curve_csv(curve_path, points);
    for (const auto& [step, path] : series) inputs.push_back(path);
    write_run_manifest((fs::path(out_dir) / "run.json").string(), "analyze curves", inputs,
                       {curve_path}, {{"metric", o.metric}});
    progress("analyze curves: " + std::to_string(points.size()) + " points to " + curve_path);
}

// ------------------------------ chat ------------------------------

struct ChatOpts {
    std::string config;
    std::string checkpoint;
    std::string script;  // replay commands from a file instead of stdin
    std::string log;
    std::string instruction = "continuation";
    int max_new = 64;
    float temperature = 0.0f;  // 0 = greedy
    uint64_t seed = 1;
};

void run_chat(const ChatOpts& o) {
    RunConfig cfg = RunConfig::load(o.config);
    InstructionCatalog cat = InstructionCatalog::load();
    ModelBundle b = ModelBundle::init(cfg.lm, cfg.encoder, cfg.adapter);
    load_into_bundle(b, cfg, cfg.path("lm_checkpoint"));
    if (cfg.paths.count("adapter_checkpoint"))
        load_into_bundle(b, cfg, cfg.path("adapter_checkpoint"));
    if (!o.checkpoint.empty()) load_into_bundle(b, cfg, o.checkpoint);
    const Instruction ins = cat.lookup(o.instruction);
    const Decoding dec = o.temperature > 0.0f ? Decoding::sample(o.temperature, o.seed)
                                              : Decoding::greedy();

    std::ifstream script;
    if (!o.script.empty()) {
        script.open(o.script);
        if (!script) throw IoError("cannot open script: " + o.script);
    }
    std::istream& in = o.script.empty() ? std::cin : script;

    std::ofstream log;
    if (!o.log.empty()) {
        log.open(o.log, std::ios::binary);
        if (!log) throw IoError("cannot open log: " + o.log);
    }
    auto emit = [&](const std::string& line) {
        std::cout << line << "\n";
        if (log.is_open()) log << line << "\n";
    };

    std::vector<std::pair<TurnInput, std::string>> history;
    AssembledPrompt last_prompt;
    bool have_prompt = false;

    emit("chat: :text <utterance> | :speech <path> | :dump | :quit");
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line == ":quit") break;
        if (line == ":dump") {
            if (!have_prompt) {
                emit("(no turns yet)");
            } else {
                emit("--- prompt ---");
                emit(last_prompt.surface());
                emit("--- end ---");
            }
            continue;
        }

        PromptInput turn_input;
        std::string shown;
        if (line.rfind(":text ", 0) == 0) {
            shown = line.substr(6);
            if (shown.empty()) {
                emit("error: empty utterance");
                continue;
            }
            turn_input = PromptInput::text(shown);
        } else if (line.rfind(":speech ", 0) == 0) {
            const std::string path = line.substr(8);
            shown = "<speech " + path + ">";
            try {
                turn_input = PromptInput::speech(load_raw_features(path, cfg.encoder.d_enc));
            } catch (const std::exception& e) {
                emit(std::string("error: ") + e.what());
                continue;
            }
        } else {
            emit("error: unknown command (use :text, :speech, :dump, :quit)");
            continue;
        }

        emit("you: " + shown);
        TurnInput turn{ins, turn_input};
        try {
            AssembledPrompt p = build_multiturn(b, cat, history, turn);
            GenResult g = respond(b, p, dec, o.max_new);
            emit("assistant: " + g.text);
            last_prompt = std::move(p);
            have_prompt = true;
            if (!g.text.empty()) history.emplace_back(std::move(turn), g.text);
        } catch (const std::exception& e) {
            emit(std::string("error: ") + e.what());
        }
    }
    emit("bye");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale speech-language alignment pipeline"};
    app.require_subcommand(1);

    SynthOpts synth;
    auto* sd = app.add_subcommand("synth-data", "synthesize an utterance manifest with features");
    sd->add_option("--out-dir", synth.out_dir, "output directory")->required();
    sd->add_option("--n", synth.n, "number of utterances");
    sd->add_option("--seed", synth.seed, "sampling seed");
    sd->add_option("--d-enc", synth.d_enc, "feature width");
    sd->add_option("--min-words", synth.min_words, "minimum words per transcript");
    sd->add_option("--max-words", synth.max_words, "maximum words per transcript");
    sd->add_option("--prefix", synth.prefix, "utterance id prefix");
    sd->callback([&] { run_synth_data(synth); });

    GenOpts gen;
    auto* gb = app.add_subcommand("gen-behaviors", "generate behavior responses from transcripts");
    gb->add_option("--config", gen.config, "run config JSON");
    gb->add_option("--utterances", gen.utterances, "utterance manifest");
    gb->add_option("--lm-checkpoint", gen.lm_checkpoint, "language model checkpoint");
    gb->add_option("--out", gen.out, "output behavior manifest")->required();
    gb->add_option("--behavior", gen.behavior, "continuation or repetition")
        ->check(CLI::IsMember({"continuation", "repetition"}));
    gb->add_option("--workers", gen.workers, "generation threads");
    gb->add_option("--max-new", gen.max_new, "response token cap");
    gb->callback([&] { run_gen_behaviors(gen); });

    MixOpts mix;
    auto* mx = app.add_subcommand("mix", "mix repetition into continuation data at a ratio");
    mx->add_option("--continuations", mix.continuations, "behavior manifest")->required();
    mx->add_option("--repetitions", mix.repetitions, "behavior manifest");
    mx->add_option("--out", mix.out, "output manifest")->required();
    mx->add_option("--rep-parts", mix.rep_parts, "repetition parts");
    mx->add_option("--cont-parts", mix.cont_parts, "continuation parts");
    mx->add_option("--seed", mix.seed, "shuffle seed");
    mx->callback([&] { run_mix(mix); });

    TrainOpts train;
    auto* tr = app.add_subcommand("train", "run a training stage");
    tr->require_subcommand(1);
    for (const std::string variant :
         {"blsp", "blsp-rp", "asr-pretrain", "ctc", "finetune-st"}) {
        auto* sub = tr->add_subcommand(variant, "train " + variant);
        sub->add_option("--config", train.config, "run config JSON")->required();
        sub->add_option("--out-dir", train.out_dir, "output directory override");
        sub->add_option("--save-every", train.save_every, "checkpoint series interval");
        sub->callback([&train, variant] { run_train(variant, train); });
    }

    EvalOpts ev;
    auto* el = app.add_subcommand("eval", "zero-shot evaluation of a system on a task");
    el->add_option("--config", ev.config, "run config JSON")->required();
    el->add_option("--out-dir", ev.out_dir, "output directory override");
    el->add_option("--system", ev.system, "system tag")
        ->check(CLI::IsMember({"text+lm", "cascade_ctc", "cascade_oracle", "blsp", "blsp_rp",
                               "asr_pretrain"}));
    el->add_option("--task", ev.task, "asr | st | ic_snips | ic_fsc | sa_slue");
    el->add_option("--checkpoint", ev.checkpoint, "adapter/st checkpoint override");
    el->add_option("--max-new", ev.max_new, "generation token cap");
    el->callback([&] { run_eval(ev); });

    QaMakeOpts qm;
    auto* qmk = app.add_subcommand("qa-make", "synthesize a QA set via the judge");
    qmk->add_option("--config", qm.config, "run config JSON");
    qmk->add_option("--utterances", qm.utterances, "utterance manifest");
    qmk->add_option("--out", qm.out, "output QA JSONL")->required();
    qmk->add_option("--judge", qm.judge, "mock or http")
        ->check(CLI::IsMember({"mock", "http"}));
    qmk->add_option("--mock-seed", qm.mock_seed, "mock judge seed");
    qmk->add_option("--min-words", qm.min_words, "minimum transcript words");
    qmk->add_option("--max-words", qm.max_words, "maximum transcript words");
    qmk->add_option("--workers", qm.workers, "judge request threads");
    qmk->callback([&] { run_qa_make(qm); });

    QaJudgeOpts qj;
    auto* qjd = app.add_subcommand("qa-judge", "answer a QA set and judge acceptability");
    qjd->add_option("--config", qj.config, "run config JSON")->required();
    qjd->add_option("--qa", qj.qa, "QA set JSONL");
    qjd->add_option("--utterances", qj.utterances, "utterance manifest");
    qjd->add_option("--out-dir", qj.out_dir, "output directory override");
    qjd->add_option("--system", qj.system, "blsp or text+lm");
    qjd->add_option("--judge", qj.judge, "mock or http")
        ->check(CLI::IsMember({"mock", "http"}));
    qjd->add_option("--checkpoint", qj.checkpoint, "adapter checkpoint override");
    qjd->add_option("--mock-seed", qj.mock_seed, "mock judge seed");
    qjd->add_option("--max-new", qj.max_new, "answer token cap");
    qjd->callback([&] { run_qa_judge(qj); });

    AnalyzeOpts an;
    auto* az = app.add_subcommand("analyze", "representation and curve analysis");
    az->require_subcommand(1);
    auto* reps = az->add_subcommand("reps", "similarity report over a representation grid");
    auto* tsne = az->add_subcommand("tsne", "2-D projection of the representation grid");
    auto* curves = az->add_subcommand("curves", "evaluate a checkpoint series");
    for (auto* sub : {reps, tsne, curves}) {
        sub->add_option("--config", an.config, "run config JSON")->required();
        sub->add_option("--out-dir", an.out_dir, "output directory override");
        sub->add_option("--checkpoint", an.checkpoint, "adapter checkpoint override");
    }
    reps->add_option("--n", an.n, "utterances in the grid");
    tsne->add_option("--n", an.n, "utterances in the grid");
    tsne->add_option("--perplexity", an.perplexity, "t-SNE perplexity (0 = auto)");
    tsne->add_option("--iters", an.iters, "t-SNE iterations");
    tsne->add_option("--seed", an.seed, "t-SNE init seed");
    curves->add_option("--ckpt", an.checkpoints, "step=path, repeatable")->required();
    curves->add_option("--metric", an.metric, "metric name for the CSV");
    reps->callback([&] { run_analyze_reps(an); });
    tsne->callback([&] { run_analyze_tsne(an); });
    curves->callback([&] { run_analyze_curves(an); });

    ChatOpts chat;
    auto* ch = app.add_subcommand("chat", "multi-turn REPL over the aligned model");
    ch->add_option("--config", chat.config, "run config JSON")->required();
    ch->add_option("--checkpoint", chat.checkpoint, "adapter checkpoint override");
    ch->add_option("--script", chat.script, "replay commands from file");
    ch->add_option("--log", chat.log, "write the session transcript here");
    ch->add_option("--instruction", chat.instruction, "catalog tag for each turn");
    ch->add_option("--max-new", chat.max_new, "response token cap");
    ch->add_option("--temperature", chat.temperature, "0 = greedy decoding");
    ch->add_option("--seed", chat.seed, "sampling seed");
    ch->callback([&] { run_chat(chat); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n\n" << app.help() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
