#pragma once

// Shared handle to the pre-trained instruction-following toy LM that the
// heavier tests build once per build tree (see fixture_build.cpp).

#include <cstdlib>
#include <string>

#include "blsp/model.hpp"
#include "blsp/toyworld.hpp"
#include "blsp/training.hpp"

namespace fixture {

inline std::string dir() {
    if (const char* d = std::getenv("BLSP_FIXTURE_DIR")) return d;
    return ".";
}

inline blsp::LmConfig lm_config() {
    blsp::LmConfig c;
    c.d_model = 64;
    c.n_layers = 2;
    c.n_heads = 4;
    c.max_seq_len = 512;
    c.seed = 7;
    return c;
}

inline blsp::EncoderConfig encoder_config() {
    blsp::EncoderConfig c;
    c.d_enc = 16;
    c.seed = 8;
    return c;
}

inline blsp::AdapterConfig adapter_config() {
    blsp::AdapterConfig c;
    c.d_enc = 16;
    c.conv_channels = 64;
    c.d_model = 64;
    c.bottleneck_hidden = 16;
    c.seed = 9;
    return c;
}

constexpr int kCorpusSize = 3000;
constexpr uint64_t kCorpusSeed = 101;
constexpr int kMaxSteps = 12000;
constexpr int kRoundSteps = 500;
constexpr float kLearningRate = 1.5e-3f;
constexpr uint64_t kTrainSeed = 13;

inline std::string recipe() {
    const auto c = lm_config();
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "lm:v%d,d%d,l%d,h%d,s%d,seed%llu|corpus:n%d,seed%llu|train:lr%g,seed%llu",
                  c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.max_seq_len,
                  (unsigned long long)c.seed, kCorpusSize, (unsigned long long)kCorpusSeed,
                  double(kLearningRate), (unsigned long long)kTrainSeed);
    return buf;
}

inline std::string lm_checkpoint_path() {
    const std::string r = recipe();
    return dir() + "/lm-" + blsp::hash_hex(blsp::fnv1a64(r.data(), r.size())) + ".ckpt";
}

// trained LM plus freshly initialized encoder/adapter
inline blsp::ModelBundle bundle() {
    auto b = blsp::ModelBundle::init(lm_config(), encoder_config(), adapter_config());
    blsp::load_params(b, blsp::read_checkpoint(lm_checkpoint_path()));
    return b;
}

}  // namespace fixture
