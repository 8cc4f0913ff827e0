#pragma once

#include <cmath>
#include <vector>

#include "blsp/tensor.hpp"

namespace blsp {

struct AdamWConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
    float grad_clip = 1.0f;  // global norm; <= 0 disables clipping
};

// Adam with decoupled weight decay over an explicit trainable set. Build it
// after applying a freeze plan; frozen parameters simply stay out of the list.
class AdamW {
public:
    AdamW(std::vector<ag::NodePtr> params, AdamWConfig cfg = {})
        : cfg_(cfg), params_(std::move(params)) {
        for (const auto& p : params_) {
            m_.emplace_back(p->val.v.size(), 0.0f);
            v_.emplace_back(p->val.v.size(), 0.0f);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

    double grad_norm() const {
        double ss = 0.0;
        for (const auto& p : params_) {
            if (p->grad.empty()) continue;
            for (float g : p->grad) ss += double(g) * double(g);
        }
        return std::sqrt(ss);
    }

    // clips by global norm, applies one update, returns the pre-clip norm
    double step() {
        ++t_;
        const double norm = grad_norm();
        float scale = 1.0f;
        if (cfg_.grad_clip > 0.0f && norm > double(cfg_.grad_clip))
            scale = float(double(cfg_.grad_clip) / norm);
        const float bc1 = 1.0f - std::pow(cfg_.beta1, float(t_));
        const float bc2 = 1.0f - std::pow(cfg_.beta2, float(t_));
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            auto& p = *params_[pi];
            if (p.grad.empty()) continue;
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (size_t i = 0; i < p.val.v.size(); ++i) {
                const float g = p.grad[i] * scale;
                m[i] = cfg_.beta1 * m[i] + (1.0f - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0f - cfg_.beta2) * g * g;
                const float mhat = m[i] / bc1;
                const float vhat = v[i] / bc2;
                p.val.v[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                         cfg_.weight_decay * p.val.v[i]);
            }
        }
        return norm;
    }

    int64_t steps_taken() const { return t_; }
    const std::vector<ag::NodePtr>& params() const { return params_; }

private:
    AdamWConfig cfg_;
    std::vector<ag::NodePtr> params_;
    std::vector<std::vector<float>> m_, v_;
    int64_t t_ = 0;
};

}  // namespace blsp
