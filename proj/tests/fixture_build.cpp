// Builds (or revalidates) the cached instruction-following toy LM used by the
// heavier test binaries. Trains on the toyworld corpus until the model follows
// the repetition, continuation, and translation instructions on held-out
// transcripts, then freezes the weights under BLSP_FIXTURE_DIR keyed by the
// training recipe. Reruns are a cheap validate-and-exit.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "blsp/behavior_data.hpp"
#include "blsp/training.hpp"
#include "fixture.hpp"

using namespace blsp;

namespace {

struct ValReport {
    double repetition = 0.0, continuation = 0.0, translation = 0.0;
    bool pass(double bar) const {
        return repetition >= bar && continuation >= bar && translation >= bar;
    }
};

ValReport validate(const ModelBundle& b, const InstructionCatalog& cat,
                   const std::vector<std::string>& transcripts) {
    ValReport r;
    const double n = double(transcripts.size());
    for (const auto& text : transcripts) {
        auto ask = [&](const char* tag) {
            auto p = render_prompt(b, cat, cat.lookup(tag), PromptInput::text(text));
            return respond(b, p, Decoding::greedy(), 64).text;
        };
        r.repetition += ask("repetition") == text ? 1 : 0;
        r.continuation += ask("continuation") == toyworld::continuation_of(text) ? 1 : 0;
        r.translation += ask("analysis_st") == toyworld::translate_de(text) ? 1 : 0;
    }
    r.repetition /= n;
    r.continuation /= n;
    r.translation /= n;
    return r;
}

}  // namespace

int main() {
    const auto path = fixture::lm_checkpoint_path();
    auto cat = InstructionCatalog::load();
    const auto held_out = toyworld::sample_transcripts(40, 999);

    auto b = ModelBundle::init(fixture::lm_config(), fixture::encoder_config(),
                               fixture::adapter_config());

    if (std::filesystem::exists(path)) {
        load_params(b, read_checkpoint(path));
        const auto r = validate(b, cat, held_out);
        std::printf("cached lm: repetition %.2f continuation %.2f translation %.2f\n",
                    r.repetition, r.continuation, r.translation);
        if (r.pass(0.90)) {
            std::printf("fixture ok: %s\n", path.c_str());
            return 0;
        }
        std::printf("cached fixture fails validation, retraining\n");
        b = ModelBundle::init(fixture::lm_config(), fixture::encoder_config(),
                              fixture::adapter_config());
    }

    const auto corpus = toyworld::lm_corpus(fixture::kCorpusSize, fixture::kCorpusSeed);
    std::vector<TrainExample> data;
    data.reserve(corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i)
        data.push_back({"corpus-" + std::to_string(i),
                        render_prompt(b, cat, cat.lookup(corpus[i].tag),
                                      PromptInput::text(corpus[i].input), corpus[i].response)});

    ValReport r;
    int steps_done = 0;
    while (steps_done < fixture::kMaxSteps) {
        TrainConfig cfg;
        cfg.max_steps = fixture::kRoundSteps;
        cfg.batch_size = 8;
        cfg.opt.lr = fixture::kLearningRate;
        cfg.seed = fixture::kTrainSeed + uint64_t(steps_done);
        cfg.log_every = fixture::kRoundSteps;
        auto out = train_prompts(b, FreezePlan{{"lm"}}, data, cfg);
        steps_done += out.steps;
        r = validate(b, cat, held_out);
        std::printf("step %5d  loss %.4f  repetition %.2f continuation %.2f translation %.2f\n",
                    steps_done, out.final_loss, r.repetition, r.continuation, r.translation);
        std::fflush(stdout);
        if (r.pass(0.92)) break;
    }

    if (!r.pass(0.90)) {
        std::printf("fixture FAILED to reach 0.90 on all tasks after %d steps\n", steps_done);
        return 1;
    }

    Checkpoint c;
    nlohmann::json meta{{"kind", "lm_fixture"},
                        {"recipe", fixture::recipe()},
                        {"steps", steps_done},
                        {"repetition", r.repetition},
                        {"continuation", r.continuation},
                        {"translation", r.translation}};
    c.meta_json = meta.dump();
    c.tensors = snapshot_params(b, {"lm"});
    write_checkpoint(path, c);
    std::printf("fixture ok: %s\n", path.c_str());
    return 0;
}
