#include <algorithm>
#include <cstring>
#include <set>

#include <catch2/catch_amalgamated.hpp>

#include "blsp/behavior_data.hpp"
#include "blsp/training.hpp"
#include "test_util.hpp"

using namespace blsp;

namespace {

std::vector<Utterance> demo_utterances(int n, uint64_t seed = 77) {
    std::vector<Utterance> out;
    auto texts = toyworld::sample_transcripts(n, seed);
    for (int i = 0; i < n; ++i) {
        Utterance u;
        u.id = "utt-" + std::to_string(i);
        u.audio_ref = "mem://" + u.id;
        u.transcript = texts[i];
        u.language = "en";
        u.duration_s = 1.0;
        out.push_back(u);
    }
    return out;
}

}  // namespace

TEST_CASE("utterance manifests round-trip and validate") {
    auto dir = testutil::scratch_dir("uman");
    const std::string path = dir + "/utts.jsonl";
    auto utts = demo_utterances(5);
    write_utterance_manifest(path, utts);
    auto back = read_utterance_manifest(path);
    REQUIRE(back.size() == utts.size());
    for (size_t i = 0; i < utts.size(); ++i) {
        CHECK(back[i].id == utts[i].id);
        CHECK(back[i].transcript == utts[i].transcript);
        CHECK(back[i].language == utts[i].language);
    }

    SECTION("parse errors carry the line number") {
        write_text_file(path, R"({"id":"a","audio_ref":"x","transcript":"rain"})"
                              "\nnot json at all\n");
        try {
            read_utterance_manifest(path);
            FAIL("expected MalformedLine");
        } catch (const MalformedLine& e) {
            CHECK(e.line_no == 2);
        }
    }
    SECTION("an empty transcript is rejected") {
        write_text_file(path, R"({"id":"a","audio_ref":"x","transcript":""})" "\n");
        CHECK_THROWS_AS(read_utterance_manifest(path), MalformedLine);
    }
    SECTION("duplicate ids are rejected") {
        write_text_file(path,
                        R"({"id":"a","audio_ref":"x","transcript":"rain"})" "\n"
                        R"({"id":"a","audio_ref":"y","transcript":"sun"})" "\n");
        CHECK_THROWS_AS(read_utterance_manifest(path), DuplicateId);
    }
    SECTION("blank lines are skipped") {
        write_text_file(path, "\n" R"({"id":"a","audio_ref":"x","transcript":"rain"})" "\n\n");
        CHECK(read_utterance_manifest(path).size() == 1);
    }
}

TEST_CASE("behavior manifests preserve unknown fields") {
    auto dir = testutil::scratch_dir("bman");
    const std::string path = dir + "/beh.jsonl";
    auto cat = InstructionCatalog::load();

    BehaviorSample s;
    s.utterance_id = "utt-0";
    s.behavior = "continuation";
    s.instruction = cat.lookup("continuation").text;
    s.response = "falls on the stone";
    s.gen_meta = {{"decoding", "greedy"}, {"temperature", 0.0}};
    s.extra = {{"note", "hand checked"}, {"split", "dev"}};
    write_behavior_manifest(path, {s});

    auto back = read_behavior_manifest(path);
    REQUIRE(back.size() == 1);
    CHECK(back[0] == s);
    CHECK(back[0].extra["note"] == "hand checked");

    SECTION("missing response is malformed") {
        write_text_file(path, R"({"utterance_id":"a","behavior":"continuation",)"
                              R"("instruction":"i","response":""})" "\n");
        CHECK_THROWS_AS(read_behavior_manifest(path), MalformedLine);
    }
    SECTION("unknown behavior is malformed") {
        write_text_file(path, R"({"utterance_id":"a","behavior":"juggling",)"
                              R"("instruction":"i","response":"r"})" "\n");
        CHECK_THROWS_AS(read_behavior_manifest(path), MalformedLine);
    }
    SECTION("one utterance may carry several behaviors") {
        BehaviorSample r = s;
        r.behavior = "repetition";
        r.instruction = cat.lookup("repetition").text;
        r.response = "the sky";
        write_behavior_manifest(path, {s, r});
        CHECK(read_behavior_manifest(path).size() == 2);

        write_behavior_manifest(path, {s, s});
        CHECK_THROWS_AS(read_behavior_manifest(path), DuplicateId);
    }
}

TEST_CASE("repetition samples are transcript copies") {
    auto cat = InstructionCatalog::load();
    auto utts = demo_utterances(4);
    auto samples = make_repetition_samples(cat, utts);
    REQUIRE(samples.size() == utts.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        CHECK(samples[i].utterance_id == utts[i].id);
        CHECK(samples[i].behavior == "repetition");
        CHECK(samples[i].instruction == "Please repeat the following words.");
        CHECK(samples[i].response == utts[i].transcript);
        CHECK(samples[i].gen_meta["decoding"] == "shortcut");
    }
    utts[1].transcript = "";
    CHECK_THROWS_AS(make_repetition_samples(cat, utts), EmptyTranscript);
}

TEST_CASE("mix_behaviors enforces the ratio by subsampling repetitions") {
    auto cat = InstructionCatalog::load();
    auto utts = demo_utterances(90);
    std::vector<BehaviorSample> cont;
    for (const auto& u : utts)
        cont.push_back({u.id, "continuation", cat.lookup("continuation").text,
                        toyworld::continuation_of(u.transcript)});
    auto reps = make_repetition_samples(cat, demo_utterances(20, 5));

    SECTION("1:9 keeps all continuations and 10 repetitions") {
        auto mixed = mix_behaviors(cont, reps, MixSpec{});
        REQUIRE(mixed.size() == 100);
        int n_rep = 0, n_cont = 0;
        for (const auto& s : mixed) (s.behavior == "repetition" ? n_rep : n_cont)++;
        CHECK(n_rep == 10);
        CHECK(n_cont == 90);
    }
    SECTION("the mix is shuffled but deterministic") {
        auto a = mix_behaviors(cont, reps, MixSpec{});
        auto b = mix_behaviors(cont, reps, MixSpec{});
        REQUIRE(a.size() == b.size());
        bool same_order = true;
        for (size_t i = 0; i < a.size(); ++i) same_order = same_order && a[i] == b[i];
        CHECK(same_order);

        bool rep_spread = false;  // not all repetitions at the tail
        for (size_t i = 0; i + 10 < a.size(); ++i)
            rep_spread = rep_spread || a[i].behavior == "repetition";
        CHECK(rep_spread);

        MixSpec other;
        other.shuffle_seed = 2;
        auto c = mix_behaviors(cont, reps, other);
        bool differs = false;
        for (size_t i = 0; i < a.size(); ++i) differs = differs || !(a[i] == c[i]);
        CHECK(differs);
    }
    SECTION("0:1 yields continuations only") {
        MixSpec spec;
        spec.repetition_parts = 0;
        auto mixed = mix_behaviors(cont, reps, spec);
        CHECK(mixed.size() == cont.size());
        for (const auto& s : mixed) CHECK(s.behavior == "continuation");
    }
    SECTION("too few repetitions is an error") {
        auto few = make_repetition_samples(cat, demo_utterances(3, 6));
        CHECK_THROWS_AS(mix_behaviors(cont, few, MixSpec{}), InsufficientRepetitionData);
    }
    SECTION("empty continuations is an error") {
        CHECK_THROWS_AS(mix_behaviors({}, reps, MixSpec{}), EmptyInput);
    }
}

TEST_CASE("generate_continuations runs the lm over transcripts") {
    auto cat = InstructionCatalog::load();

    LmConfig lc;
    lc.d_model = 32;
    lc.n_layers = 2;
    lc.n_heads = 2;
    lc.max_seq_len = 160;
    EncoderConfig ec;
    ec.d_enc = 8;
    AdapterConfig ac;
    ac.d_enc = 8;
    ac.conv_channels = 32;
    ac.d_model = 32;
    ac.bottleneck_hidden = 8;
    auto b = ModelBundle::init(lc, ec, ac);

    // teach the tiny lm two continuations so generation is meaningful
    std::vector<TrainExample> data;
    const std::vector<std::pair<std::string, std::string>> facts = {
        {"rain", "falls"}, {"sun", "warms"}};
    for (size_t i = 0; i < facts.size(); ++i)
        data.push_back({"t-" + std::to_string(i),
                        render_prompt(b, cat, cat.lookup("continuation"),
                                      PromptInput::text(facts[i].first), facts[i].second)});
    TrainConfig cfg;
    cfg.max_steps = 500;
    cfg.batch_size = 2;
    cfg.opt.lr = 1e-2f;
    train_prompts(b, FreezePlan{{"lm"}}, data, cfg);

    std::vector<Utterance> utts;
    for (const auto& [text, cont] : facts) {
        Utterance u;
        u.id = "utt-" + text;
        u.audio_ref = "mem://" + text;
        u.transcript = text;
        utts.push_back(u);
    }

    GenStats stats;
    auto samples = generate_continuations(b, cat, utts, Decoding{}, 4, 64, &stats);
    REQUIRE(samples.size() == 2);
    CHECK(std::is_sorted(samples.begin(), samples.end(),
                         [](const BehaviorSample& a, const BehaviorSample& b) {
                             return a.utterance_id < b.utterance_id;
                         }));
    for (const auto& s : samples) {
        CHECK(s.behavior == "continuation");
        CHECK(s.instruction == cat.lookup("continuation").text);
        CHECK_FALSE(s.response.empty());
        CHECK(s.gen_meta["lm_fingerprint"] == hash_hex(b.lm.param_hash()));
    }
    CHECK(samples[0].response == "falls");
    CHECK(samples[1].response == "warms");
    CHECK(stats.failures.empty());

    SECTION("worker count does not change the output") {
        auto serial = generate_continuations(b, cat, utts, Decoding{}, 1, 64, nullptr);
        REQUIRE(serial.size() == samples.size());
        for (size_t i = 0; i < samples.size(); ++i) CHECK(serial[i] == samples[i]);
    }
    SECTION("a response cap marks truncation") {
        GenStats st;
        auto capped = generate_continuations(b, cat, utts, Decoding{}, 2, 1, &st);
        CHECK(st.truncated >= 1);
        for (const auto& s : capped) CHECK(s.gen_meta["max_new_tokens"] == 1);
    }
    SECTION("oversized transcripts are reported as failures, not crashes") {
        Utterance big;
        big.id = "utt-zzz-big";
        big.audio_ref = "mem://big";
        big.transcript = std::string(4000, 'x');
        auto with_big = utts;
        with_big.push_back(big);
        GenStats st;
        auto got = generate_continuations(b, cat, with_big, Decoding{}, 2, 8, &st);
        CHECK(got.size() == 2);
        REQUIRE(st.failures.size() == 1);
        CHECK(st.failures[0].first == "utt-zzz-big");
    }
}
