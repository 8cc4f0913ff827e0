#pragma once

#include <cstdlib>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "blsp/behavior_data.hpp"
#include "blsp/common.hpp"
#include "blsp/model.hpp"
#include "blsp/training.hpp"

namespace blsp {

// One JSON file drives a run. Every seed lives in the file; nothing defaults
// to wall clock. The only environment hooks are JUDGE_URL / JUDGE_API_KEY,
// which override the judge section so credentials stay out of configs.
struct RunConfig {
    LmConfig lm;
    EncoderConfig encoder;
    AdapterConfig adapter;
    TrainConfig train;
    MixSpec mix;
    LoraSpec lora;
    std::map<std::string, std::string> paths;  // role -> file or directory
    std::string judge_url;
    std::string judge_api_key;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["lm"] = {{"vocab_size", lm.vocab_size}, {"d_model", lm.d_model},
                   {"n_layers", lm.n_layers},     {"n_heads", lm.n_heads},
                   {"max_seq_len", lm.max_seq_len}, {"seed", lm.seed}};
        j["encoder"] = {{"d_enc", encoder.d_enc},
                        {"n_layers", encoder.n_layers},
                        {"kernel", encoder.kernel},
                        {"seed", encoder.seed}};
        j["adapter"] = {{"n_conv_layers", adapter.n_conv_layers},
                        {"stride", adapter.stride},
                        {"kernel", adapter.kernel},
                        {"pad", adapter.pad},
                        {"conv_channels", adapter.conv_channels},
                        {"bottleneck_hidden", adapter.bottleneck_hidden},
                        {"d_enc", adapter.d_enc},
                        {"d_model", adapter.d_model},
                        {"seed", adapter.seed}};
        j["train"] = train.to_json();
        j["mix"] = {{"repetition_parts", mix.repetition_parts},
                    {"continuation_parts", mix.continuation_parts},
                    {"shuffle_seed", mix.shuffle_seed}};
        j["lora"] = {{"rank", lora.rank},
                     {"alpha", lora.alpha},
                     {"targets", std::vector<std::string>(lora.targets.begin(),
                                                          lora.targets.end())},
                     {"seed", lora.seed}};
        j["paths"] = paths;
        j["judge"] = {{"url", judge_url}, {"api_key", judge_api_key}};
        return j;
    }

    static RunConfig from_json(const nlohmann::json& j) {
        static const std::set<std::string> known = {"lm",   "encoder", "adapter", "train",
                                                    "mix",  "lora",    "paths",   "judge"};
        if (!j.is_object()) throw ConfigError("config: expected a JSON object");
        for (const auto& [k, v] : j.items())
            if (!known.count(k)) throw ConfigError("config: unknown section: " + k);
        RunConfig c;
        try {
            if (j.contains("lm")) {
                const auto& s = j.at("lm");
                c.lm.vocab_size = s.value("vocab_size", c.lm.vocab_size);
                c.lm.d_model = s.value("d_model", c.lm.d_model);
                c.lm.n_layers = s.value("n_layers", c.lm.n_layers);
                c.lm.n_heads = s.value("n_heads", c.lm.n_heads);
                c.lm.max_seq_len = s.value("max_seq_len", c.lm.max_seq_len);
                c.lm.seed = s.value("seed", c.lm.seed);
            }
            if (j.contains("encoder")) {
                const auto& s = j.at("encoder");
                c.encoder.d_enc = s.value("d_enc", c.encoder.d_enc);
                c.encoder.n_layers = s.value("n_layers", c.encoder.n_layers);
                c.encoder.kernel = s.value("kernel", c.encoder.kernel);
                c.encoder.seed = s.value("seed", c.encoder.seed);
            }
            if (j.contains("adapter")) {
                const auto& s = j.at("adapter");
                c.adapter.n_conv_layers = s.value("n_conv_layers", c.adapter.n_conv_layers);
                c.adapter.stride = s.value("stride", c.adapter.stride);
                c.adapter.kernel = s.value("kernel", c.adapter.kernel);
                c.adapter.pad = s.value("pad", c.adapter.pad);
                c.adapter.conv_channels = s.value("conv_channels", c.adapter.conv_channels);
                c.adapter.bottleneck_hidden =
                    s.value("bottleneck_hidden", c.adapter.bottleneck_hidden);
                c.adapter.d_enc = s.value("d_enc", c.adapter.d_enc);
                c.adapter.d_model = s.value("d_model", c.adapter.d_model);
                c.adapter.seed = s.value("seed", c.adapter.seed);
            }
            if (j.contains("train")) {
                const auto& s = j.at("train");
                c.train.epochs = s.value("epochs", c.train.epochs);
                c.train.max_steps = s.value("max_steps", c.train.max_steps);
                c.train.batch_size = s.value("batch_size", c.train.batch_size);
                c.train.opt.lr = s.value("learning_rate", c.train.opt.lr);
                c.train.opt.beta1 = s.value("beta1", c.train.opt.beta1);
                c.train.opt.beta2 = s.value("beta2", c.train.opt.beta2);
                c.train.opt.weight_decay = s.value("weight_decay", c.train.opt.weight_decay);
                c.train.opt.grad_clip = s.value("grad_clip", c.train.opt.grad_clip);
                c.train.seed = s.value("seed", c.train.seed);
                c.train.log_every = s.value("log_every", c.train.log_every);
            }
            if (j.contains("mix")) {
                const auto& s = j.at("mix");
                c.mix.repetition_parts = s.value("repetition_parts", c.mix.repetition_parts);
                c.mix.continuation_parts = s.value("continuation_parts", c.mix.continuation_parts);
                c.mix.shuffle_seed = s.value("shuffle_seed", c.mix.shuffle_seed);
            }
            if (j.contains("lora")) {
                const auto& s = j.at("lora");
                c.lora.rank = s.value("rank", c.lora.rank);
                c.lora.alpha = s.value("alpha", c.lora.alpha);
                if (s.contains("targets")) {
                    c.lora.targets.clear();
                    for (const auto& t : s.at("targets"))
                        c.lora.targets.insert(t.get<std::string>());
                }
                c.lora.seed = s.value("seed", c.lora.seed);
            }
            if (j.contains("paths"))
                c.paths = j.at("paths").get<std::map<std::string, std::string>>();
            if (j.contains("judge")) {
                const auto& s = j.at("judge");
                c.judge_url = s.value("url", std::string());
                c.judge_api_key = s.value("api_key", std::string());
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config: " + std::string(e.what()));
        }
        return c;
    }

    static RunConfig load(const std::string& path) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_text_file(path));
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config " + path + ": " + std::string(e.what()));
        }
        RunConfig c = from_json(j);
        if (const char* url = std::getenv("JUDGE_URL")) c.judge_url = url;
        if (const char* key = std::getenv("JUDGE_API_KEY")) c.judge_api_key = key;
        return c;
    }

    void save(const std::string& path) const { write_text_file(path, to_json().dump(2) + "\n"); }

    const std::string& path(const std::string& role) const {
        auto it = paths.find(role);
        if (it == paths.end() || it->second.empty())
            throw ConfigError("config: missing path: " + role);
        return it->second;
    }

    std::string path_or(const std::string& role, const std::string& fallback) const {
        auto it = paths.find(role);
        return it == paths.end() ? fallback : it->second;
    }

    bool operator==(const RunConfig& o) const { return to_json() == o.to_json(); }
};

}  // namespace blsp
