#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "blsp/common.hpp"
#include "blsp/tensor.hpp"
#include "blsp/tokenizer.hpp"

namespace blsp {

// Decoder-only transformer with RMSNorm, GELU MLP (4x), ALiBi position bias
// and an untied output head. Stands in for the frozen LLM; small enough to
// train from scratch in seconds but honors the same interface contracts.
struct LmConfig {
    int vocab_size = Tokenizer::vocab_size();
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int max_seq_len = 512;
    uint64_t seed = 1;
};

// Low-rank delta for one weight: W_eff = W + scale * B @ A with A [r, in]
// and B [out, r]. Keyed by the owning parameter's name.
struct LoraPair {
    ag::NodePtr a, b;
    float scale = 1.0f;
};
using LoraSet = std::map<std::string, LoraPair>;

inline std::vector<float> alibi_slopes(int n_heads) {
    std::vector<float> s(static_cast<size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h)
        s[size_t(h)] = std::pow(2.0f, -8.0f * float(h + 1) / float(n_heads));
    return s;
}

inline Tensor alibi_bias(int L, float slope, bool causal) {
    Tensor b({L, L});
    const float ninf = -std::numeric_limits<float>::infinity();
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j)
            b.at(i, j) = (causal && j > i) ? ninf : -slope * float(std::abs(i - j));
    return b;
}

struct LmLayer {
    ag::NodePtr ln1_g, wq, wk, wv, wo, ln2_g, w1, b1, w2, b2;
};

class Lm {
public:
    LmConfig cfg;
    ag::NodePtr tok_emb;  // [vocab, d]
    std::vector<LmLayer> layers;
    ag::NodePtr lnf_g;
    ag::NodePtr head;  // [vocab, d]

    static Lm init(const LmConfig& cfg) {
        Lm lm;
        lm.cfg = cfg;
        Rng rng(cfg.seed);
        const int d = cfg.d_model, hid = 4 * cfg.d_model;
        const float sg = 0.05f;
        const float sr = sg / std::sqrt(2.0f * float(cfg.n_layers));
        auto normal = [&rng](std::vector<int> shape, float sigma) {
            Tensor t(std::move(shape));
            t.fill_normal(rng, sigma);
            return ag::leaf(std::move(t), true);
        };
        auto ones = [](int n) {
            Tensor t({n});
            std::fill(t.v.begin(), t.v.end(), 1.0f);
            return ag::leaf(std::move(t), true);
        };
        auto zeros = [](int n) { return ag::leaf(Tensor({n}), true); };
        lm.tok_emb = normal({cfg.vocab_size, d}, sg);
        for (int i = 0; i < cfg.n_layers; ++i) {
            LmLayer ly;
            ly.ln1_g = ones(d);
            ly.wq = normal({d, d}, sg);
            ly.wk = normal({d, d}, sg);
            ly.wv = normal({d, d}, sg);
            ly.wo = normal({d, d}, sr);
            ly.ln2_g = ones(d);
            ly.w1 = normal({hid, d}, sg);
            ly.b1 = zeros(hid);
            ly.w2 = normal({d, hid}, sr);
            ly.b2 = zeros(d);
            lm.layers.push_back(std::move(ly));
        }
        lm.lnf_g = ones(d);
        lm.head = normal({cfg.vocab_size, d}, sg);
        return lm;
    }

    std::vector<NamedParam> params() const {
        std::vector<NamedParam> ps;
        ps.push_back({"tok_emb", tok_emb});
        for (size_t i = 0; i < layers.size(); ++i) {
            const auto& ly = layers[i];
            const std::string p = "layers." + std::to_string(i) + ".";
            ps.push_back({p + "ln1_g", ly.ln1_g});
            ps.push_back({p + "attn.wq", ly.wq});
            ps.push_back({p + "attn.wk", ly.wk});
            ps.push_back({p + "attn.wv", ly.wv});
            ps.push_back({p + "attn.wo", ly.wo});
            ps.push_back({p + "ln2_g", ly.ln2_g});
            ps.push_back({p + "mlp.w1", ly.w1});
            ps.push_back({p + "mlp.b1", ly.b1});
            ps.push_back({p + "mlp.w2", ly.w2});
            ps.push_back({p + "mlp.b2", ly.b2});
        }
        ps.push_back({"lnf_g", lnf_g});
        ps.push_back({"head", head});
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

    ag::NodePtr embed(const std::vector<int>& ids) const { return ag::embed_gather(tok_emb, ids); }

    // final hidden states [L, d] (post final norm, pre head)
    ag::NodePtr hidden(const ag::NodePtr& emb, bool causal = true,
                       const LoraSet* lora = nullptr) const {
        const int L = emb->val.rows();
        if (L > cfg.max_seq_len)
            throw SequenceTooLong("lm_forward: L=" + std::to_string(L) + " > max_seq_len=" +
                                  std::to_string(cfg.max_seq_len));
        const int H = cfg.n_heads, dh = cfg.d_model / H;
        const float inv = 1.0f / std::sqrt(float(dh));
        const auto slopes = alibi_slopes(H);
        std::vector<Tensor> bias;
        bias.reserve(size_t(H));
        for (int h = 0; h < H; ++h) bias.push_back(alibi_bias(L, slopes[size_t(h)], causal));
        auto x = emb;
        for (size_t li = 0; li < layers.size(); ++li) {
            const auto& ly = layers[li];
            const std::string pfx = "layers." + std::to_string(li) + ".attn.";
            auto h1 = ag::rmsnorm(x, ly.ln1_g);
            auto q = proj(h1, ly.wq, lora, pfx + "wq");
            auto k = proj(h1, ly.wk, lora, pfx + "wk");
            auto v = proj(h1, ly.wv, lora, pfx + "wv");
            std::vector<ag::NodePtr> ctx;
            ctx.reserve(size_t(H));
            for (int h = 0; h < H; ++h) {
                auto qh = ag::slice_cols(q, h * dh, dh);
                auto kh = ag::slice_cols(k, h * dh, dh);
                auto vh = ag::slice_cols(v, h * dh, dh);
                auto att = ag::softmax_rows_bias(ag::scale(ag::matmul_nt(qh, kh), inv),
                                                 bias[size_t(h)]);
                ctx.push_back(ag::matmul(att, vh));
            }
            x = ag::add(x, proj(ag::concat_cols(ctx), ly.wo, lora, pfx + "wo"));
            auto h2 = ag::rmsnorm(x, ly.ln2_g);
            auto mid = ag::gelu(ag::linear(h2, ly.w1, ly.b1));
            x = ag::add(x, ag::linear(mid, ly.w2, ly.b2));
        }
        return ag::rmsnorm(x, lnf_g);
    }

    // logits [L, vocab]
    ag::NodePtr forward(const ag::NodePtr& emb, bool causal = true,
                        const LoraSet* lora = nullptr) const {
        return ag::matmul_nt(hidden(emb, causal, lora), head);
    }

private:
    ag::NodePtr proj(const ag::NodePtr& x, const ag::NodePtr& w, const LoraSet* lora,
                     const std::string& name) const {
        auto y = ag::matmul_nt(x, w);
        if (lora) {
            auto it = lora->find(name);
            if (it != lora->end())
                y = ag::add(y, ag::scale(ag::matmul_nt(ag::matmul_nt(x, it->second.a),
                                                       it->second.b),
                                         it->second.scale));
        }
        return y;
    }
};

// ------------------------- incremental inference -------------------------
// KV cache holds per-layer, per-head contiguous [t, d_head] blocks so the
// no-grad path can feed the exact kernels the graph path uses; teacher-forced
// logits and incremental decoding then agree bitwise.
struct KvCache {
    int t = 0;
    std::vector<std::vector<std::vector<float>>> k, v;  // [layer][head] flat [t, dh]
};

inline KvCache make_cache(const Lm& lm) {
    KvCache c;
    c.k.assign(size_t(lm.cfg.n_layers), std::vector<std::vector<float>>(size_t(lm.cfg.n_heads)));
    c.v = c.k;
    return c;
}

// Feeds one embedding row (length d_model); returns the logits row unless
// want_logits is false (prefill positions whose logits are never read).
// Base weights only: merge LoRA deltas before decoding.
inline std::vector<float> lm_step(const Lm& lm, const float* emb, KvCache& cache,
                                  bool want_logits = true) {
    const int d = lm.cfg.d_model, H = lm.cfg.n_heads, dh = d / H;
    if (cache.t + 1 > lm.cfg.max_seq_len)
        throw SequenceTooLong("lm_step: sequence exceeds max_seq_len=" +
                              std::to_string(lm.cfg.max_seq_len));
    const float inv = 1.0f / std::sqrt(float(dh));
    const auto slopes = alibi_slopes(H);
    const int t = cache.t;
    std::vector<float> x(emb, emb + d);
    std::vector<float> h1(static_cast<size_t>(d)), qrow(h1), krow(h1), vrow(h1), ctx(h1), tmp(h1);
    std::vector<float> att(static_cast<size_t>(t + 1)), biasrow(att);
    for (int li = 0; li < lm.cfg.n_layers; ++li) {
        const auto& ly = lm.layers[size_t(li)];
        rmsnorm_row(x.data(), ly.ln1_g->val.v.data(), h1.data(), d, 1e-5f);
        std::fill(qrow.begin(), qrow.end(), 0.0f);
        std::fill(krow.begin(), krow.end(), 0.0f);
        std::fill(vrow.begin(), vrow.end(), 0.0f);
        gemm_nt(h1.data(), ly.wq->val.v.data(), qrow.data(), 1, d, d);
        gemm_nt(h1.data(), ly.wk->val.v.data(), krow.data(), 1, d, d);
        gemm_nt(h1.data(), ly.wv->val.v.data(), vrow.data(), 1, d, d);
        for (int h = 0; h < H; ++h) {
            auto& kc = cache.k[size_t(li)][size_t(h)];
            auto& vc = cache.v[size_t(li)][size_t(h)];
            kc.insert(kc.end(), krow.begin() + h * dh, krow.begin() + (h + 1) * dh);
            vc.insert(vc.end(), vrow.begin() + h * dh, vrow.begin() + (h + 1) * dh);
        }
        std::fill(ctx.begin(), ctx.end(), 0.0f);
        for (int h = 0; h < H; ++h) {
            const float* qh = qrow.data() + h * dh;
            const auto& kc = cache.k[size_t(li)][size_t(h)];
            for (int j = 0; j <= t; ++j)
                att[size_t(j)] = dot8(qh, kc.data() + size_t(j) * dh, dh) * inv;
            for (int j = 0; j <= t; ++j) biasrow[size_t(j)] = -slopes[size_t(h)] * float(t - j);
            softmax_row_bias(att.data(), biasrow.data(), t + 1);
            gemm_nn(att.data(), cache.v[size_t(li)][size_t(h)].data(), ctx.data() + h * dh, 1,
                    t + 1, dh);
        }
        std::fill(tmp.begin(), tmp.end(), 0.0f);
        gemm_nt(ctx.data(), ly.wo->val.v.data(), tmp.data(), 1, d, d);
        for (int j = 0; j < d; ++j) x[size_t(j)] += tmp[size_t(j)];
        rmsnorm_row(x.data(), ly.ln2_g->val.v.data(), h1.data(), d, 1e-5f);
        const int hid = ly.w1->val.rows();
        std::vector<float> mid(size_t(hid), 0.0f);
        gemm_nt(h1.data(), ly.w1->val.v.data(), mid.data(), 1, d, hid);
        for (int j = 0; j < hid; ++j) mid[size_t(j)] += ly.b1->val.v[size_t(j)];
        for (int j = 0; j < hid; ++j) mid[size_t(j)] = gelu_scalar(mid[size_t(j)]);
        std::fill(tmp.begin(), tmp.end(), 0.0f);
        gemm_nt(mid.data(), ly.w2->val.v.data(), tmp.data(), 1, hid, d);
        for (int j = 0; j < d; ++j) x[size_t(j)] += tmp[size_t(j)] + ly.b2->val.v[size_t(j)];
    }
    cache.t += 1;
    std::vector<float> logits;
    if (want_logits) {
        rmsnorm_row(x.data(), lm.lnf_g->val.v.data(), h1.data(), d, 1e-5f);
        logits.assign(size_t(lm.cfg.vocab_size), 0.0f);
        gemm_nt(h1.data(), lm.head->val.v.data(), logits.data(), 1, d, lm.cfg.vocab_size);
    }
    return logits;
}

struct Decoding {
    enum class Kind { Greedy, Sample };
    Kind kind = Kind::Greedy;
    float temperature = 1.0f;
    uint64_t seed = 0;
    static Decoding greedy() { return {}; }
    static Decoding sample(float temperature, uint64_t seed) {
        return {Kind::Sample, temperature, seed};
    }
};

struct GenResult {
    std::string text;
    std::vector<int> ids;
    bool hit_eos = false;
    bool hit_stop = false;
    int steps = 0;
};

inline int pick_token(const std::vector<float>& logits, const Decoding& dec, Rng& rng) {
    if (dec.kind == Decoding::Kind::Greedy) {
        int best = 0;
        for (int j = 1; j < int(logits.size()); ++j)
            if (logits[size_t(j)] > logits[size_t(best)]) best = j;
        return best;
    }
    const float tau = dec.temperature > 0.0f ? dec.temperature : 1.0f;
    std::vector<float> p(logits.size());
    for (size_t j = 0; j < logits.size(); ++j) p[j] = logits[j] / tau;
    std::vector<float> zero(logits.size(), 0.0f);
    softmax_row_bias(p.data(), zero.data(), int(p.size()));
    const double u = rng.uniform();
    double acc = 0.0;
    for (size_t j = 0; j < p.size(); ++j) {
        acc += double(p[j]);
        if (u < acc) return int(j);
    }
    return int(p.size()) - 1;
}

// Decodes until EOS, the stop string, or max_new_tokens, whichever first.
// The stop string is stripped from the returned text.
inline GenResult lm_generate(const Lm& lm, const Tensor& prefix_emb, const Decoding& dec,
                             int max_new_tokens, const std::string& stop = "###") {
    if (prefix_emb.rows() < 1) throw EmptyInput("lm_generate: empty prefix");
    GenResult r;
    if (max_new_tokens <= 0) return r;
    KvCache cache = make_cache(lm);
    const int L = prefix_emb.rows(), d = lm.cfg.d_model;
    std::vector<float> logits;
    for (int i = 0; i < L; ++i)
        logits = lm_step(lm, &prefix_emb.v[size_t(i) * size_t(d)], cache, i == L - 1);
    Rng rng(dec.seed);
    while (r.steps < max_new_tokens) {
        const int id = pick_token(logits, dec, rng);
        ++r.steps;
        if (id == Tokenizer::kEosId) {
            r.hit_eos = true;
            break;
        }
        r.ids.push_back(id);
        r.text += Tokenizer::surface(id);
        if (!stop.empty() && r.text.size() >= stop.size() &&
            r.text.compare(r.text.size() - stop.size(), stop.size(), stop) == 0) {
            r.hit_stop = true;
            r.text.erase(r.text.size() - stop.size());
            r.ids.resize(r.ids.size() - stop.size());
            break;
        }
        if (r.steps == max_new_tokens) break;
        logits = lm_step(lm, &lm.tok_emb->val.v[size_t(id) * size_t(d)], cache);
    }
    return r;
}

// token-id rows of the embedding table as a raw tensor (prefix building)
inline Tensor embed_rows(const Lm& lm, const std::vector<int>& ids) {
    const int d = lm.cfg.d_model;
    Tensor e({int(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(&lm.tok_emb->val.v[size_t(ids[i]) * size_t(d)], d, &e.v[i * size_t(d)]);
    return e;
}

inline Tensor text_prefix(const Lm& lm, const std::string& text) {
    return embed_rows(lm, Tokenizer::encode(text));
}

}  // namespace blsp
