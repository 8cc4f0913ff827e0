#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "blsp/lm.hpp"
#include "blsp/optim.hpp"
#include "test_util.hpp"

using namespace blsp;

namespace {

LmConfig tiny_cfg() {
    LmConfig c;
    c.d_model = 32;
    c.n_layers = 2;
    c.n_heads = 2;
    c.max_seq_len = 64;
    c.seed = 7;
    return c;
}

Tensor random_emb(int L, int d, uint64_t seed) {
    Tensor e({L, d});
    Rng rng(seed);
    e.fill_uniform(rng, -0.5f, 0.5f);
    return e;
}

// one AdamW pass over (ids, prompt_len) pairs: next-token loss on the
// response span only
void overfit(Lm& lm, const std::vector<std::pair<std::vector<int>, int>>& pairs, int steps,
             float lr) {
    std::vector<ag::NodePtr> nodes;
    for (auto& p : lm.params()) nodes.push_back(p.node);
    AdamWConfig oc;
    oc.lr = lr;
    AdamW opt(nodes, oc);
    for (int s = 0; s < steps; ++s) {
        opt.zero_grad();
        std::vector<ag::NodePtr> losses;
        for (const auto& [ids, prompt_len] : pairs) {
            std::vector<int> input(ids.begin(), ids.end() - 1);
            std::vector<int> targets(ids.begin() + 1, ids.end());
            std::vector<char> mask(targets.size(), 0);
            int cnt = 0;
            for (size_t i = size_t(prompt_len) - 1; i < targets.size(); ++i, ++cnt)
                mask[i] = 1;
            auto logits = lm.forward(lm.embed(input));
            losses.push_back(ag::scale(ag::masked_nll_sum(logits, targets, mask), 1.0f / cnt));
        }
        auto total = ag::scale(ag::add_scalars(losses), 1.0f / float(losses.size()));
        ag::backward(total);
        opt.step();
    }
}

}  // namespace

TEST_CASE("lm_forward is causal") {
    Lm lm = Lm::init(tiny_cfg());
    const int L = 9, j = 5;
    Tensor emb = random_emb(L, lm.cfg.d_model, 11);
    auto base = lm.forward(ag::leaf(emb));

    Tensor pert = emb;
    for (int c = 0; c < pert.cols(); ++c) pert.at(j, c) += 0.37f;
    auto moved = lm.forward(ag::leaf(pert));

    const int V = lm.cfg.vocab_size;
    REQUIRE(std::memcmp(base->val.v.data(), moved->val.v.data(),
                        size_t(j) * V * sizeof(float)) == 0);
    bool later_changed = false;
    for (int i = j; i < L && !later_changed; ++i)
        for (int c = 0; c < V; ++c)
            if (base->val.at(i, c) != moved->val.at(i, c)) {
                later_changed = true;
                break;
            }
    REQUIRE(later_changed);
}

TEST_CASE("lm_forward length limit and determinism") {
    Lm lm = Lm::init(tiny_cfg());
    Tensor too_long = random_emb(lm.cfg.max_seq_len + 1, lm.cfg.d_model, 3);
    REQUIRE_THROWS_AS(lm.forward(ag::leaf(too_long)), SequenceTooLong);

    Tensor emb = random_emb(12, lm.cfg.d_model, 5);
    auto a = lm.forward(ag::leaf(emb));
    auto b = lm.forward(ag::leaf(emb));
    REQUIRE(std::memcmp(a->val.v.data(), b->val.v.data(), a->val.v.size() * sizeof(float)) == 0);

    Lm lm2 = Lm::init(tiny_cfg());
    auto c = lm2.forward(ag::leaf(emb));
    REQUIRE(std::memcmp(a->val.v.data(), c->val.v.data(), a->val.v.size() * sizeof(float)) == 0);
}

TEST_CASE("incremental decoding matches the graph forward bitwise") {
    Lm lm = Lm::init(tiny_cfg());
    const int L = 13, d = lm.cfg.d_model, V = lm.cfg.vocab_size;
    Tensor emb = random_emb(L, d, 21);
    auto graph = lm.forward(ag::leaf(emb));

    KvCache cache = make_cache(lm);
    for (int i = 0; i < L; ++i) {
        auto row = lm_step(lm, &emb.v[size_t(i) * d], cache);
        REQUIRE(std::memcmp(row.data(), &graph->val.v[size_t(i) * V], size_t(V) * sizeof(float)) ==
                0);
    }
}

TEST_CASE("lm_generate stops and is reproducible") {
    Lm lm = Lm::init(tiny_cfg());
    Tensor prefix = random_emb(4, lm.cfg.d_model, 2);

    REQUIRE(lm_generate(lm, prefix, Decoding::greedy(), 0).text.empty());
    REQUIRE_THROWS_AS(lm_generate(lm, Tensor({0, lm.cfg.d_model}), Decoding::greedy(), 4),
                      EmptyInput);

    auto g1 = lm_generate(lm, prefix, Decoding::greedy(), 16);
    auto g2 = lm_generate(lm, prefix, Decoding::greedy(), 16);
    REQUIRE(g1.text == g2.text);
    REQUIRE(g1.steps <= 16);

    auto s1 = lm_generate(lm, prefix, Decoding::sample(0.8f, 99), 16);
    auto s2 = lm_generate(lm, prefix, Decoding::sample(0.8f, 99), 16);
    REQUIRE(s1.text == s2.text);
}

TEST_CASE("overfit fixture maps prompt to response and honors stop string") {
    LmConfig cfg = tiny_cfg();
    Lm lm = Lm::init(cfg);

    auto make_pair = [](const std::string& prompt, const std::string& resp, bool eos) {
        std::vector<int> ids = Tokenizer::encode(prompt);
        const int plen = int(ids.size());
        for (int id : Tokenizer::encode(resp)) ids.push_back(id);
        if (eos) ids.push_back(Tokenizer::kEosId);
        return std::make_pair(ids, plen);
    };
    std::vector<std::pair<std::vector<int>, int>> pairs = {
        make_pair("ping:", "pong", true),
        make_pair("stop:", "ab###", true),
    };
    overfit(lm, pairs, 250, 1e-2f);

    auto g = lm_generate(lm, text_prefix(lm, "ping:"), Decoding::greedy(), 12);
    REQUIRE(g.text == "pong");
    REQUIRE(g.hit_eos);

    auto h = lm_generate(lm, text_prefix(lm, "stop:"), Decoding::greedy(), 12);
    REQUIRE(h.text == "ab");
    REQUIRE(h.hit_stop);
}
