#include <cstring>
#include <filesystem>

#include <catch2/catch_amalgamated.hpp>
#include <json.hpp>

#include "blsp/model.hpp"
#include "test_util.hpp"

using namespace blsp;

namespace {

ModelBundle small_bundle(uint64_t seed = 3) {
    LmConfig lc;
    lc.d_model = 32;
    lc.n_layers = 2;
    lc.n_heads = 2;
    lc.max_seq_len = 96;
    lc.seed = seed;
    EncoderConfig ec;
    ec.d_enc = 8;
    ec.seed = seed + 1;
    AdapterConfig ac;
    ac.d_enc = 8;
    ac.conv_channels = 32;
    ac.d_model = 32;
    ac.bottleneck_hidden = 8;
    ac.seed = seed + 2;
    return ModelBundle::init(lc, ec, ac);
}

}  // namespace

TEST_CASE("freeze plans gate exactly the planned components") {
    auto b = small_bundle();
    apply_lora(b, {2, 2.0f, {"query", "value"}, 11});

    apply_freeze_plan(b, FreezePlan::blsp());
    for (const auto& p : b.params()) {
        const bool adapter = p.name.rfind("adapter.", 0) == 0;
        CHECK(p.node->requires_grad == adapter);
    }
    auto nodes = trainable_nodes(b);
    REQUIRE(nodes.size() == b.adapter.params().size());

    apply_freeze_plan(b, FreezePlan::st_finetune());
    for (const auto& p : b.params()) {
        const bool lm = p.name.rfind("lm.", 0) == 0;
        CHECK(p.node->requires_grad == !lm);
    }

    auto report = trainable_parameter_report(b);
    REQUIRE(report.size() == 4);
    int64_t adapter_count = 0;
    for (const auto& r : report) {
        if (r.component == "adapter") {
            adapter_count = r.param_count;
            CHECK(r.trainable);
        }
        if (r.component == "lm") CHECK_FALSE(r.trainable);
        if (r.component == "lora") CHECK(r.trainable);
    }
    CHECK(adapter_count == adapter_param_count(b.adapter.cfg));
}

TEST_CASE("fresh lora deltas leave the forward pass unchanged") {
    auto b = small_bundle();
    Rng rng(5);
    Tensor emb({12, b.lm.cfg.d_model});
    emb.fill_normal(rng, 1.0f);

    auto plain = b.lm.forward(ag::leaf(emb))->val;
    apply_lora(b, {4, 4.0f, {"query", "key", "value", "output"}, 11});
    REQUIRE(b.lora.size() == size_t(4 * b.lm.cfg.n_layers));
    auto with_lora = b.lm.forward(ag::leaf(emb), true, &b.lora)->val;

    REQUIRE(plain.shape == with_lora.shape);
    float max_diff = 0.0f;
    for (size_t i = 0; i < plain.v.size(); ++i)
        max_diff = std::max(max_diff, std::abs(plain.v[i] - with_lora.v[i]));
    CHECK(max_diff <= 1e-6f);
}

TEST_CASE("lora merge reproduces the rank-1 worked example") {
    // W = I, A = [[1, 0]], B = [[0], [1]], alpha = rank = 1
    LmConfig lc;
    lc.d_model = 2;
    lc.n_layers = 1;
    lc.n_heads = 1;
    lc.max_seq_len = 8;
    EncoderConfig ec;
    ec.d_enc = 8;
    AdapterConfig ac;
    ac.d_enc = 8;
    ac.conv_channels = 2;
    ac.d_model = 2;
    ac.bottleneck_hidden = 2;
    auto b = ModelBundle::init(lc, ec, ac);

    auto& wq = b.lm.layers[0].wq->val;
    wq.v = {1.0f, 0.0f, 0.0f, 1.0f};
    LoraPair pair;
    pair.a = ag::leaf(Tensor({1, 2}), true);
    pair.a->val.v = {1.0f, 0.0f};
    pair.b = ag::leaf(Tensor({2, 1}), true);
    pair.b->val.v = {0.0f, 1.0f};
    pair.scale = 1.0f;
    b.lora["layers.0.attn.wq"] = pair;

    merge_lora(b);
    CHECK(b.lora.empty());
    CHECK(wq.v == std::vector<float>{1.0f, 0.0f, 1.0f, 1.0f});
}

TEST_CASE("lora rejects unknown targets") {
    auto b = small_bundle();
    CHECK_THROWS_AS(apply_lora(b, {2, 2.0f, {"gate"}, 1}), UnknownTarget);
    LoraPair pair;
    pair.a = ag::leaf(Tensor({1, 2}), true);
    pair.b = ag::leaf(Tensor({2, 1}), true);
    b.lora["layers.9.attn.wq"] = pair;
    CHECK_THROWS_AS(merge_lora(b), UnknownTarget);
}

TEST_CASE("checkpoints round-trip parameters and metadata") {
    auto dir = testutil::scratch_dir("ckpt");
    const std::string path = dir + "/a.ckpt";

    auto b = small_bundle(7);
    Checkpoint out;
    nlohmann::json meta;
    meta["step"] = 42;
    meta["loss_curve"] = {{1, 2.5}, {2, 1.25}};
    out.meta_json = meta.dump();
    out.tensors = snapshot_params(b, {"adapter"});
    REQUIRE(out.tensors.size() == b.adapter.params().size());
    write_checkpoint(path, out);

    auto in = read_checkpoint(path);
    auto meta2 = nlohmann::json::parse(in.meta_json);
    CHECK(meta2["step"] == 42);
    REQUIRE(in.tensors.size() == out.tensors.size());

    auto b2 = small_bundle(8);
    REQUIRE(b2.adapter.param_hash() != b.adapter.param_hash());
    load_params(b2, in);
    CHECK(b2.adapter.param_hash() == b.adapter.param_hash());
    CHECK(b2.lm.param_hash() != b.lm.param_hash());
}

TEST_CASE("checkpoint errors are typed") {
    auto dir = testutil::scratch_dir("ckpt_err");
    CHECK_THROWS_AS(read_checkpoint(dir + "/missing.ckpt"), MissingCheckpoint);

    const std::string junk = dir + "/junk.ckpt";
    write_text_file(junk, "definitely not a checkpoint");
    CHECK_THROWS_AS(read_checkpoint(junk), IoError);

    auto b = small_bundle();
    Checkpoint c;
    c.meta_json = "{}";
    c.tensors.emplace_back("nobody.home", Tensor({2, 2}));
    const std::string path = dir + "/alien.ckpt";
    write_checkpoint(path, c);
    auto in = read_checkpoint(path);
    CHECK_THROWS_AS(load_params(b, in), ConfigError);
}
