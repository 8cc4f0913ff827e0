#include <cstring>
#include <set>

#include <catch2/catch_amalgamated.hpp>

#include "blsp/prompting.hpp"
#include "test_util.hpp"

using namespace blsp;

namespace {

ModelBundle default_bundle() {
    return ModelBundle::init(LmConfig{}, EncoderConfig{}, AdapterConfig{});
}

size_t count_occurrences(const std::string& hay, const std::string& needle) {
    size_t n = 0;
    for (size_t pos = hay.find(needle); pos != std::string::npos;
         pos = hay.find(needle, pos + 1))
        ++n;
    return n;
}

}  // namespace

TEST_CASE("instruction catalog carries the verbatim task instructions") {
    auto cat = InstructionCatalog::load();

    CHECK(cat.lookup("continuation").text ==
          "Continue the following text in a coherent and engaging style with less than 40 "
          "words.");
    CHECK(cat.lookup("repetition").text == "Please repeat the following words.");
    CHECK(cat.lookup("asr").text == "Please repeat the following words.");
    CHECK(cat.st("German").text ==
          "Please translate the following English text into German text.");
    CHECK(cat.st("Swedish").text ==
          "Please translate the following English text into Swedish text.");
    CHECK(cat.lookup("analysis_cw").text == "Please continue the following sentence.");
    CHECK(cat.lookup("analysis_sa").text ==
          "Please classify the emotional tone of the following text.");
    CHECK(cat.lookup("analysis_sr").text ==
          "Please transcribe the following audio into English text.");
    CHECK(cat.lookup("analysis_st").text ==
          "Please translate the following English text into German text.");

    CHECK(cat.lookup("ic_snips").label_set.size() == 6);
    CHECK(cat.lookup("ic_fsc").label_set.size() == 18);
    CHECK(cat.lookup("sa_slue").label_set ==
          std::vector<std::string>{"positive", "negative", "neutral"});

    CHECK_THROWS_AS(cat.lookup("poetry"), UnknownTask);
    CHECK_THROWS_AS(cat.st(""), ConfigError);
    CHECK_THROWS_AS(InstructionCatalog::qa(""), UnknownInstruction);
    CHECK(InstructionCatalog::qa("What is said?").task == Task::Qa);
}

TEST_CASE("the asr paraphrase list has 100 distinct registered entries") {
    auto cat = InstructionCatalog::load();
    REQUIRE(cat.asr_paraphrases.size() == 100);
    std::set<std::string> uniq(cat.asr_paraphrases.begin(), cat.asr_paraphrases.end());
    CHECK(uniq.size() == 100);
    for (size_t i = 0; i < cat.asr_paraphrases.size(); ++i) {
        CHECK(cat.registered(cat.asr_paraphrases[i]));
        CHECK_FALSE(cat.paraphrase(i).text.empty());
    }
    CHECK(cat.registered("Please translate the following English text into Catalan text."));
    CHECK_FALSE(cat.registered("Please translate the following English text into  text."));
    CHECK_FALSE(cat.registered("Write a poem."));
    CHECK_FALSE(cat.registered(""));
}

TEST_CASE("render_prompt produces the documented surface form") {
    auto b = default_bundle();
    auto cat = InstructionCatalog::load();

    auto p = render_prompt(b, cat, cat.lookup("repetition"), PromptInput::text("hello"));
    CHECK(p.surface() ==
          "###[Human]:Please repeat the following words.hello\n\n\n###[Assistant]:");
    CHECK(p.prior_turns.empty());
    CHECK_FALSE(p.has_response);
    CHECK(p.response_tokens.empty());
    for (auto m : p.loss_mask) CHECK(m == 0);

    SECTION("post tokens are never empty") {
        CHECK(Tokenizer::decode(p.post_tokens) == "\n\n\n###[Assistant]:");
    }
}

TEST_CASE("loss mask covers response plus EOS and nothing else") {
    auto b = default_bundle();
    auto cat = InstructionCatalog::load();

    auto p = render_prompt(b, cat, cat.lookup("repetition"), PromptInput::text("hello"),
                           std::string("hello"));
    REQUIRE(p.has_response);
    const size_t want = Tokenizer::encode("hello").size() + 1;
    CHECK(p.response_tokens.size() == want);
    CHECK(p.response_tokens.back() == Tokenizer::kEosId);
    REQUIRE(p.loss_mask.size() == size_t(p.total_len()));
    size_t on = 0;
    for (size_t i = 0; i < p.loss_mask.size(); ++i) {
        if (p.loss_mask[i]) ++on;
        CHECK(bool(p.loss_mask[i]) == (i >= size_t(p.response_start())));
    }
    CHECK(on == want);
}

TEST_CASE("render_prompt rejects bad inputs") {
    auto b = default_bundle();
    auto cat = InstructionCatalog::load();

    CHECK_THROWS_AS(
        render_prompt(b, cat, Instruction{"Write a poem.", Task::Asr, "", {}},
                      PromptInput::text("hi")),
        UnknownInstruction);
    CHECK_THROWS_AS(
        render_prompt(b, cat, Instruction{"", Task::Asr, "", {}}, PromptInput::text("hi")),
        UnknownInstruction);
    CHECK_THROWS_AS(render_prompt(b, cat, cat.lookup("repetition"), PromptInput::text("")),
                    EmptyInput);

    LmConfig tiny;
    tiny.max_seq_len = 16;
    auto b2 = ModelBundle::init(tiny, EncoderConfig{}, AdapterConfig{});
    CHECK_THROWS_AS(render_prompt(b2, cat, cat.lookup("repetition"), PromptInput::text("hi")),
                    PromptTooLong);
}

TEST_CASE("qa instructions bypass the catalog membership check") {
    auto b = default_bundle();
    auto cat = InstructionCatalog::load();
    auto p = render_prompt(b, cat, InstructionCatalog::qa("What color is the sky?"),
                           PromptInput::text("the sky is blue"));
    CHECK(p.surface().rfind("###[Human]:What color is the sky?", 0) == 0);
}

TEST_CASE("assembled embeddings differ from a paired text prompt only in slot rows") {
    auto b = default_bundle();
    auto cat = InstructionCatalog::load();
    const std::string transcript = "hello world";
    auto ins = cat.lookup("repetition");

    auto pt = render_prompt(b, cat, ins, PromptInput::text(transcript));
    auto ps = render_prompt(b, cat, ins,
                            PromptInput::speech(synth_features(transcript, 42)));

    CHECK(pt.pre_tokens == ps.pre_tokens);
    CHECK(pt.post_tokens == ps.post_tokens);
    const int text_len = int(pt.slot.text_tokens.size());
    const int speech_len = ps.slot.len();
    CHECK(text_len == int(transcript.size()));
    CHECK(speech_len == subsampled_len(b.adapter.cfg, int(transcript.size()) * kFramesPerChar));

    auto et = assemble_embeddings(b, pt);
    auto es = assemble_embeddings(b, ps);
    CHECK(et.rows() - es.rows() == text_len - speech_len);

    const int d = b.lm.cfg.d_model;
    const int pre = int(pt.pre_tokens.size());
    REQUIRE(std::memcmp(et.v.data(), es.v.data(), size_t(pre) * d * 4) == 0);
    const size_t tail = size_t(pt.post_tokens.size()) * d;
    REQUIRE(std::memcmp(&et.v[size_t(pre + text_len) * d], &es.v[size_t(pre + speech_len) * d],
                        tail * 4) == 0);
}

TEST_CASE("graph assembly matches value assembly bitwise") {
    auto b = default_bundle();
    auto cat = InstructionCatalog::load();
    auto p = render_prompt(b, cat, cat.lookup("continuation"),
                           PromptInput::speech(synth_features("rain falls", 7)),
                           std::string("on stone"));
    auto val = assemble_embeddings(b, p);
    auto node = assemble_embeddings_graph(b, p);
    REQUIRE(node->val.shape == val.shape);
    REQUIRE(std::memcmp(node->val.v.data(), val.v.data(), val.v.size() * 4) == 0);
}

TEST_CASE("multiturn prompts concatenate per-turn blocks") {
    auto b = default_bundle();
    auto cat = InstructionCatalog::load();
    auto rep = cat.lookup("repetition");

    SECTION("empty history equals render_prompt") {
        TurnInput next{rep, PromptInput::text("hello")};
        auto m = build_multiturn(b, cat, {}, next);
        auto r = render_prompt(b, cat, rep, PromptInput::text("hello"));
        CHECK(m.surface() == r.surface());
        CHECK(m.total_len() == r.total_len());
    }

    SECTION("one prior turn yields exactly two human markers") {
        TurnInput first{rep, PromptInput::text("hello")};
        TurnInput next{rep, PromptInput::text("again")};
        auto m = build_multiturn(b, cat, {{first, "hello"}}, next);
        CHECK(count_occurrences(m.surface(), kHumanTag) == 2);
        CHECK(count_occurrences(m.surface(), "###[Assistant]:") == 2);
    }

    SECTION("history responses must be nonempty") {
        TurnInput first{rep, PromptInput::text("hello")};
        TurnInput next{rep, PromptInput::text("again")};
        CHECK_THROWS_AS(build_multiturn(b, cat, {{first, ""}}, next), EmptyInput);
    }

    SECTION("speech turns differ from text turns only in slot rows") {
        const std::string transcript = "rain falls";
        TurnInput speech_turn{rep, PromptInput::speech(synth_features(transcript, 9))};
        TurnInput text_turn{rep, PromptInput::text(transcript)};
        TurnInput next{rep, PromptInput::text("more words")};

        auto ms = build_multiturn(b, cat, {{speech_turn, "ok"}}, next);
        auto mt = build_multiturn(b, cat, {{text_turn, "ok"}}, next);
        auto es = assemble_embeddings(b, ms);
        auto et = assemble_embeddings(b, mt);

        const int d = b.lm.cfg.d_model;
        const int pre = int(ms.prior_turns[0].pre_tokens.size());
        const int slot_s = ms.prior_turns[0].slot.len();
        const int slot_t = mt.prior_turns[0].slot.len();
        CHECK(et.rows() - es.rows() == slot_t - slot_s);
        REQUIRE(std::memcmp(es.v.data(), et.v.data(), size_t(pre) * d * 4) == 0);
        const size_t tail = (size_t(et.rows()) - size_t(pre + slot_t)) * size_t(d);
        REQUIRE(std::memcmp(&es.v[size_t(pre + slot_s) * d], &et.v[size_t(pre + slot_t) * d],
                            tail * 4) == 0);
    }
}
