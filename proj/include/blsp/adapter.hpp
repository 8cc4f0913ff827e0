#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "blsp/common.hpp"
#include "blsp/speech.hpp"
#include "blsp/tensor.hpp"

namespace blsp {

// Three strided 1-D convolutions (~8x length reduction) followed by a
// position-wise bottleneck with residual, mapping encoder features into the
// LM embedding space. The third conv outputs conv_channels == d_model so the
// bottleneck wraps an identity path.
struct AdapterConfig {
    int n_conv_layers = 3;
    int stride = 2;
    int kernel = 5;
    int pad = 2;
    int conv_channels = 64;
    int bottleneck_hidden = 32;
    int d_enc = kDefaultDEnc;
    int d_model = 64;
    uint64_t seed = 5;
};

inline void validate(const AdapterConfig& c) {
    if (c.n_conv_layers < 1 || c.stride < 1 || c.kernel < 1 || c.conv_channels < 1 ||
        c.bottleneck_hidden < 1 || c.d_enc < 1 || c.d_model < 1)
        throw ConfigError("adapter: all dimensions must be positive");
    if (c.kernel % 2 == 0) throw ConfigError("adapter: kernel must be odd");
    if (c.pad != (c.kernel - 1) / 2) throw ConfigError("adapter: pad must be (kernel-1)/2");
    if (c.conv_channels != c.d_model)
        throw ConfigError("adapter: conv_channels must equal d_model");
}

inline int conv_out_len(int L, int kernel, int stride, int pad) {
    return (L + 2 * pad - kernel) / stride + 1;
}

inline int subsampled_len(const AdapterConfig& cfg, int T) {
    int L = T;
    for (int i = 0; i < cfg.n_conv_layers; ++i) L = conv_out_len(L, cfg.kernel, cfg.stride, cfg.pad);
    return L;
}

struct AdaptedEmbeddings {
    Tensor vectors;  // [T', d_model]
    int source_frames = 0;
};

class Adapter {
public:
    AdapterConfig cfg;
    std::vector<ag::NodePtr> conv_w, conv_b;  // conv_w[i] [out, in, kernel]
    ag::NodePtr down_w, down_b, up_w, up_b;

    static Adapter init(const AdapterConfig& cfg) {
        validate(cfg);
        Adapter a;
        a.cfg = cfg;
        Rng rng(cfg.seed);
        auto uniform_fan_in = [&rng](std::vector<int> shape, int fan_in) {
            Tensor t(std::move(shape));
            const float bound = 1.0f / std::sqrt(float(fan_in));
            t.fill_uniform(rng, -bound, bound);
            return ag::leaf(std::move(t), true);
        };
        for (int i = 0; i < cfg.n_conv_layers; ++i) {
            const int in = i == 0 ? cfg.d_enc : cfg.conv_channels;
            a.conv_w.push_back(uniform_fan_in({cfg.conv_channels, in, cfg.kernel},
                                              in * cfg.kernel));
            a.conv_b.push_back(ag::leaf(Tensor({cfg.conv_channels}), true));
        }
        a.down_w = uniform_fan_in({cfg.bottleneck_hidden, cfg.d_model}, cfg.d_model);
        a.down_b = ag::leaf(Tensor({cfg.bottleneck_hidden}), true);
        a.up_w = ag::leaf(Tensor({cfg.d_model, cfg.bottleneck_hidden}), true);
        a.up_b = ag::leaf(Tensor({cfg.d_model}), true);
        return a;
    }

    std::vector<NamedParam> params() const {
        std::vector<NamedParam> ps;
        for (size_t i = 0; i < conv_w.size(); ++i) {
            ps.push_back({"conv" + std::to_string(i) + ".w", conv_w[i]});
            ps.push_back({"conv" + std::to_string(i) + ".b", conv_b[i]});
        }
        ps.push_back({"bottleneck.down.w", down_w});
        ps.push_back({"bottleneck.down.b", down_b});
        ps.push_back({"bottleneck.up.w", up_w});
        ps.push_back({"bottleneck.up.b", up_b});
        return ps;
    }

    uint64_t param_hash() const {
        uint64_t h = 1469598103934665603ull;
        for (const auto& p : params()) {
            uint64_t ph = p.node->val.content_hash();
            h = fnv1a64(&ph, sizeof(ph), h);
        }
        return h;
    }

    ag::NodePtr conv_subsample(const ag::NodePtr& x) const {
        auto h = x;
        for (size_t i = 0; i < conv_w.size(); ++i)
            h = ag::gelu(ag::conv1d(h, conv_w[i], conv_b[i], cfg.stride, cfg.pad));
        return h;
    }

    ag::NodePtr bottleneck_forward(const ag::NodePtr& x) const {
        auto mid = ag::gelu(ag::linear(x, down_w, down_b));
        return ag::add(x, ag::linear(mid, up_w, up_b));
    }

    ag::NodePtr forward(const ag::NodePtr& features) const {
        return bottleneck_forward(conv_subsample(features));
    }

    AdaptedEmbeddings adapt(const SpeechFeatures& f) const {
        AdaptedEmbeddings out;
        out.vectors = forward(ag::leaf(f.frames))->val;
        out.source_frames = f.T();
        return out;
    }
};

inline int64_t adapter_param_count(const AdapterConfig& cfg) {
    int64_t n = 0;
    for (int i = 0; i < cfg.n_conv_layers; ++i) {
        const int in = i == 0 ? cfg.d_enc : cfg.conv_channels;
        n += int64_t(cfg.conv_channels) * in * cfg.kernel + cfg.conv_channels;
    }
    n += int64_t(cfg.bottleneck_hidden) * cfg.d_model + cfg.bottleneck_hidden;
    n += int64_t(cfg.d_model) * cfg.bottleneck_hidden + cfg.d_model;
    return n;
}

}  // namespace blsp
