#pragma once

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "blsp/adapter.hpp"
#include "blsp/common.hpp"
#include "blsp/lm.hpp"
#include "blsp/speech.hpp"

namespace blsp {

// frozen LM + frozen encoder + trainable adapter (+ optional LoRA deltas)
struct ModelBundle {
    Lm lm;
    ToyEncoder encoder;
    Adapter adapter;
    LoraSet lora;

    static ModelBundle init(const LmConfig& lm_cfg, const EncoderConfig& enc_cfg,
                            const AdapterConfig& ad_cfg) {
        ModelBundle b;
        b.lm = Lm::init(lm_cfg);
        b.encoder = ToyEncoder::init(enc_cfg);
        b.adapter = Adapter::init(ad_cfg);
        return b;
    }

    std::vector<NamedParam> params() const {
        std::vector<NamedParam> ps;
        for (const auto& p : lm.params()) ps.push_back({"lm." + p.name, p.node});
        for (const auto& p : encoder.params()) ps.push_back({"encoder." + p.name, p.node});
        for (const auto& p : adapter.params()) ps.push_back({"adapter." + p.name, p.node});
        for (const auto& [target, pair] : lora) {
            ps.push_back({"lora." + target + ".a", pair.a});
            ps.push_back({"lora." + target + ".b", pair.b});
        }
        return ps;
    }

    uint64_t lora_hash() const {
        uint64_t h = 1469598103934665603ull;
        for (const auto& [target, pair] : lora) {
            uint64_t ha = pair.a->val.content_hash(), hb = pair.b->val.content_hash();
            h = fnv1a64(&ha, sizeof(ha), h);
            h = fnv1a64(&hb, sizeof(hb), h);
        }
        return h;
    }
};

// ------------------------------ freeze plans ------------------------------

struct FreezePlan {
    std::set<std::string> trainable;  // subset of {adapter, encoder, lm, lora}

    static FreezePlan blsp() { return {{"adapter"}}; }
    static FreezePlan st_finetune() { return {{"adapter", "encoder", "lora"}}; }
};

inline void apply_freeze_plan(ModelBundle& b, const FreezePlan& plan) {
    auto set_component = [&plan](const std::vector<NamedParam>& ps, const std::string& name) {
        const bool on = plan.trainable.count(name) > 0;
        for (const auto& p : ps) p.node->requires_grad = on;
    };
    set_component(b.lm.params(), "lm");
    set_component(b.encoder.params(), "encoder");
    set_component(b.adapter.params(), "adapter");
    const bool lora_on = plan.trainable.count("lora") > 0;
    for (auto& [target, pair] : b.lora) {
        pair.a->requires_grad = lora_on;
        pair.b->requires_grad = lora_on;
    }
}

inline std::vector<ag::NodePtr> trainable_nodes(const ModelBundle& b) {
    std::vector<ag::NodePtr> out;
    for (const auto& p : b.params())
        if (p.node->requires_grad) out.push_back(p.node);
    return out;
}

struct ComponentReport {
    std::string component;
    int64_t param_count = 0;
    bool trainable = false;
};

inline std::vector<ComponentReport> trainable_parameter_report(const ModelBundle& b) {
    auto count = [](const std::vector<NamedParam>& ps) {
        int64_t n = 0;
        for (const auto& p : ps) n += p.node->val.numel();
        return n;
    };
    auto flag = [](const std::vector<NamedParam>& ps) {
        for (const auto& p : ps)
            if (p.node->requires_grad) return true;
        return false;
    };
    std::vector<ComponentReport> out;
    out.push_back({"encoder", count(b.encoder.params()), flag(b.encoder.params())});
    out.push_back({"adapter", count(b.adapter.params()), flag(b.adapter.params())});
    out.push_back({"lm", count(b.lm.params()), flag(b.lm.params())});
    if (!b.lora.empty()) {
        int64_t n = 0;
        bool on = false;
        for (const auto& [t, pair] : b.lora) {
            n += pair.a->val.numel() + pair.b->val.numel();
            on = on || pair.a->requires_grad;
        }
        out.push_back({"lora", n, on});
    }
    return out;
}

// ------------------------------ LoRA ------------------------------

struct LoraSpec {
    int rank = 16;
    float alpha = 16.0f;
    std::set<std::string> targets = {"query", "key", "value", "output"};
    uint64_t seed = 23;
};

inline std::string lora_target_suffix(const std::string& t) {
    if (t == "query") return "wq";
    if (t == "key") return "wk";
    if (t == "value") return "wv";
    if (t == "output") return "wo";
    throw UnknownTarget("lora target: " + t);
}

// attaches zero-delta low-rank adapters to the attention projections;
// W_eff = W + (alpha/rank) * B @ A with B zero-initialized
inline void apply_lora(ModelBundle& b, const LoraSpec& spec) {
    if (spec.rank < 1) throw ConfigError("lora rank must be >= 1");
    if (spec.targets.empty()) throw ConfigError("lora targets must be nonempty");
    Rng rng(spec.seed);
    const float scale = spec.alpha / float(spec.rank);
    const int d = b.lm.cfg.d_model;
    b.lora.clear();
    for (int li = 0; li < b.lm.cfg.n_layers; ++li)
        for (const auto& t : spec.targets) {
            const std::string name =
                "layers." + std::to_string(li) + ".attn." + lora_target_suffix(t);
            LoraPair pair;
            Tensor a({spec.rank, d});
            a.fill_normal(rng, 0.02f);
            pair.a = ag::leaf(std::move(a), true);
            pair.b = ag::leaf(Tensor({d, spec.rank}), true);
            pair.scale = scale;
            b.lora[name] = std::move(pair);
        }
}

// folds every delta into its base weight and clears the LoRA set
inline void merge_lora(ModelBundle& b) {
    for (auto& [name, pair] : b.lora) {
        ag::NodePtr base;
        for (const auto& p : b.lm.params())
            if (p.name == name) base = p.node;
        if (!base) throw UnknownTarget("merge_lora: no such weight: " + name);
        const int out = pair.b->val.rows(), r = pair.b->val.cols(), in = pair.a->val.cols();
        Tensor delta({out, in});
        gemm_nn(pair.b->val.v.data(), pair.a->val.v.data(), delta.v.data(), out, r, in);
        for (size_t i = 0; i < base->val.v.size(); ++i)
            base->val.v[i] += pair.scale * delta.v[i];
    }
    b.lora.clear();
}

// ------------------------------ checkpoints ------------------------------
// single archive: magic, version, JSON metadata (configs, step count, loss
// curve), then named tensors in the feature-file binary layout

constexpr const char* kCheckpointMagic = "BLSPCKPT";

struct Checkpoint {
    std::string meta_json;  // configs, step count, loss curve
    std::vector<std::pair<std::string, Tensor>> tensors;
};

inline void write_checkpoint(const std::string& path, const Checkpoint& c) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write(kCheckpointMagic, 8);
    write_u32(os, 1);
    write_string(os, c.meta_json);
    write_u32(os, uint32_t(c.tensors.size()));
    for (const auto& [name, t] : c.tensors) {
        write_string(os, name);
        write_u32(os, uint32_t(t.shape.size()));
        for (int d : t.shape) write_u32(os, uint32_t(d));
        write_f32_array(os, t.v.data(), t.v.size());
    }
    if (!os) throw IoError("write failed: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingCheckpoint("cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != kCheckpointMagic)
        throw IoError("not a checkpoint: " + path);
    if (read_u32(is) != 1) throw IoError("unsupported checkpoint version: " + path);
    Checkpoint c;
    c.meta_json = read_string(is);
    const uint32_t n = read_u32(is);
    for (uint32_t i = 0; i < n; ++i) {
        std::string name = read_string(is);
        const uint32_t ndim = read_u32(is);
        std::vector<int> shape;
        for (uint32_t k = 0; k < ndim; ++k) shape.push_back(int(read_u32(is)));
        Tensor t(shape);
        read_f32_array(is, t.v.data(), t.v.size());
        if (!is) throw IoError("truncated checkpoint: " + path);
        c.tensors.emplace_back(std::move(name), std::move(t));
    }
    return c;
}

// snapshot of the bundle's parameters for the given component prefixes
inline std::vector<std::pair<std::string, Tensor>> snapshot_params(
    const ModelBundle& b, const std::set<std::string>& components) {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& p : b.params()) {
        const auto dot = p.name.find('.');
        if (components.count(p.name.substr(0, dot))) out.emplace_back(p.name, p.node->val);
    }
    return out;
}

// copies matching tensors back into the bundle; unknown names are an error,
// missing components are fine (partial checkpoints)
inline void load_params(ModelBundle& b, const Checkpoint& c) {
    std::map<std::string, ag::NodePtr> by_name;
    for (const auto& p : b.params()) by_name[p.name] = p.node;
    for (const auto& [name, t] : c.tensors) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ConfigError("checkpoint tensor has no home: " + name);
        if (it->second->val.shape != t.shape)
            throw ConfigError("checkpoint tensor shape mismatch: " + name);
        it->second->val.v = t.v;
    }
}

}  // namespace blsp
