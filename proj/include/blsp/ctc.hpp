#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "blsp/adapter.hpp"
#include "blsp/common.hpp"
#include "blsp/speech.hpp"
#include "blsp/tensor.hpp"

namespace blsp {

namespace detail {

constexpr double kLogZero = -std::numeric_limits<double>::infinity();

inline double logadd(double a, double b) {
    if (a == kLogZero) return b;
    if (b == kLogZero) return a;
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace detail

// -log sum over all blank-augmented alignments, computed in double log space.
// log_probs is [T, V+1] with the last class as blank. grad, when non-null,
// receives dloss/dlog_probs (the negative state posteriors).
inline double ctc_loss_value(const Tensor& log_probs, const std::vector<int>& target,
                             Tensor* grad = nullptr) {
    const int T = log_probs.rows(), width = log_probs.cols();
    const int V = width - 1, blank = V;
    if (T < 1 || V < 1) throw ConfigError("ctc: need T >= 1 and V >= 1");
    const int U = int(target.size());
    for (int y : target)
        if (y < 0 || y >= V) throw ConfigError("ctc: target id out of range");

    int min_T = U;
    for (int i = 0; i + 1 < U; ++i)
        if (target[i] == target[i + 1]) ++min_T;
    if (T < min_T)
        throw ImpossibleAlignment("ctc: T=" + std::to_string(T) + " < minimal path length " +
                                  std::to_string(min_T));

    const int S = 2 * U + 1;
    std::vector<int> z(size_t(S), blank);
    for (int u = 0; u < U; ++u) z[size_t(2 * u + 1)] = target[size_t(u)];
    auto lp = [&](int t, int s) { return double(log_probs.v[size_t(t) * width + z[size_t(s)]]); };
    auto allows_skip = [&](int s) {
        return z[size_t(s)] != blank && s >= 2 && z[size_t(s)] != z[size_t(s - 2)];
    };

    std::vector<std::vector<double>> alpha(size_t(T),
                                           std::vector<double>(size_t(S), detail::kLogZero));
    alpha[0][0] = lp(0, 0);
    if (S > 1) alpha[0][1] = lp(0, 1);
    for (int t = 1; t < T; ++t)
        for (int s = 0; s < S; ++s) {
            double a = alpha[size_t(t - 1)][size_t(s)];
            if (s >= 1) a = detail::logadd(a, alpha[size_t(t - 1)][size_t(s - 1)]);
            if (allows_skip(s)) a = detail::logadd(a, alpha[size_t(t - 1)][size_t(s - 2)]);
            if (a != detail::kLogZero) alpha[size_t(t)][size_t(s)] = a + lp(t, s);
        }

    double log_p = alpha[size_t(T - 1)][size_t(S - 1)];
    if (S > 1) log_p = detail::logadd(log_p, alpha[size_t(T - 1)][size_t(S - 2)]);
    if (log_p == detail::kLogZero)
        throw ImpossibleAlignment("ctc: no path has nonzero probability");

    if (grad) {
        std::vector<std::vector<double>> beta(size_t(T),
                                              std::vector<double>(size_t(S), detail::kLogZero));
        beta[size_t(T - 1)][size_t(S - 1)] = lp(T - 1, S - 1);
        if (S > 1) beta[size_t(T - 1)][size_t(S - 2)] = lp(T - 1, S - 2);
        for (int t = T - 2; t >= 0; --t)
            for (int s = S - 1; s >= 0; --s) {
                double b = beta[size_t(t + 1)][size_t(s)];
                if (s + 1 < S) b = detail::logadd(b, beta[size_t(t + 1)][size_t(s + 1)]);
                if (s + 2 < S && allows_skip(s + 2))
                    b = detail::logadd(b, beta[size_t(t + 1)][size_t(s + 2)]);
                if (b != detail::kLogZero) beta[size_t(t)][size_t(s)] = b + lp(t, s);
            }
        *grad = Tensor({T, width});
        for (int t = 0; t < T; ++t)
            for (int s = 0; s < S; ++s) {
                const double ab = alpha[size_t(t)][size_t(s)] + beta[size_t(t)][size_t(s)];
                if (ab == detail::kLogZero) continue;
                const double gamma = std::exp(ab - lp(t, s) - log_p);
                grad->v[size_t(t) * width + z[size_t(s)]] -= float(gamma);
            }
    }
    return -log_p;
}

inline ag::NodePtr ctc_loss_node(const ag::NodePtr& log_probs, const std::vector<int>& target) {
    Tensor grad_cache;
    const double loss = ctc_loss_value(log_probs->val, target, &grad_cache);
    Tensor out({1});
    out.v[0] = float(loss);
    return ag::make_op(std::move(out), {log_probs}, [grad_cache](ag::Node& self) {
        ag::Node& in = *self.parents[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        const float g = self.grad[0];
        for (size_t i = 0; i < grad_cache.v.size(); ++i) in.grad[i] += g * grad_cache.v[i];
    });
}

// ------------------------------ decoding ------------------------------

inline std::vector<int> greedy_ctc_ids(const Tensor& log_probs) {
    const int T = log_probs.rows(), width = log_probs.cols(), blank = width - 1;
    std::vector<int> out;
    int prev = -1;
    for (int t = 0; t < T; ++t) {
        int best = 0;
        for (int k = 1; k < width; ++k)
            if (log_probs.v[size_t(t) * width + k] > log_probs.v[size_t(t) * width + best])
                best = k;
        if (best != prev && best != blank) out.push_back(best);
        prev = best;
    }
    return out;
}

// single-character vocabularies concatenate, word vocabularies join on spaces
inline std::string ctc_ids_to_text(const std::vector<int>& ids,
                                   const std::vector<std::string>& vocab) {
    bool chars = true;
    for (const auto& w : vocab) chars = chars && w.size() == 1;
    std::string out;
    for (int id : ids) {
        if (!chars && !out.empty()) out += ' ';
        out += vocab.at(size_t(id));
    }
    return out;
}

inline std::string greedy_ctc_decode(const Tensor& log_probs,
                                     const std::vector<std::string>& vocab) {
    return ctc_ids_to_text(greedy_ctc_ids(log_probs), vocab);
}

// ------------------------------ CTC ASR model ------------------------------
// frozen encoder, trainable adapter, linear projector onto vocab + blank

struct CtcAsr {
    ToyEncoder encoder;
    Adapter adapter;
    ag::NodePtr proj_w, proj_b;  // [V+1, d_model], [V+1]
    std::vector<std::string> vocab;

    static CtcAsr init(const EncoderConfig& ec, const AdapterConfig& ac,
                       std::vector<std::string> vocab, uint64_t seed = 29) {
        CtcAsr m;
        m.encoder = ToyEncoder::init(ec);
        m.adapter = Adapter::init(ac);
        m.vocab = std::move(vocab);
        if (m.vocab.empty()) throw ConfigError("ctc: empty vocab");
        const int width = int(m.vocab.size()) + 1;
        Rng rng(seed);
        Tensor w({width, ac.d_model});
        w.fill_uniform(rng, -1.0f / std::sqrt(float(ac.d_model)),
                       1.0f / std::sqrt(float(ac.d_model)));
        m.proj_w = ag::leaf(std::move(w), true);
        m.proj_b = ag::leaf(Tensor({width}), true);
        return m;
    }

    int token_id(const std::string& w) const {
        for (size_t i = 0; i < vocab.size(); ++i)
            if (vocab[i] == w) return int(i);
        throw ConfigError("ctc: word not in vocab: " + w);
    }

    std::vector<int> encode_target(const std::string& transcript) const {
        std::vector<int> ids;
        for (const auto& w : split_ws(transcript)) ids.push_back(token_id(w));
        if (ids.empty()) throw EmptyTranscript("ctc: empty target");
        return ids;
    }

    // [T', V+1] normalized log probabilities
    ag::NodePtr log_probs(const SpeechFeatures& raw) const {
        auto enc = encoder.forward(ag::leaf(raw.frames));
        auto x = adapter.forward(enc);
        return ag::log_softmax_rows(ag::linear(x, proj_w, proj_b));
    }

    std::vector<NamedParam> trainable_params() const {
        std::vector<NamedParam> ps;
        for (const auto& p : adapter.params()) ps.push_back({"adapter." + p.name, p.node});
        ps.push_back({"proj.w", proj_w});
        ps.push_back({"proj.b", proj_b});
        return ps;
    }

    std::string transcribe(const SpeechFeatures& raw) const {
        return greedy_ctc_decode(log_probs(raw)->val, vocab);
    }
};

}  // namespace blsp
