#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "blsp/common.hpp"

namespace blsp {

// ----------------------------- tensor -----------------------------
// Flat float32 storage, row-major. Rank 1 or 2 everywhere except conv
// weights, which are [out, in, k].
struct Tensor {
    std::vector<int> shape;
    std::vector<float> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(size_t(numel_of(shape)), 0.0f) {}
    Tensor(std::vector<int> s, std::vector<float> data) : shape(std::move(s)), v(std::move(data)) {
        assert(int64_t(v.size()) == numel_of(shape));
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    int64_t numel() const { return int64_t(v.size()); }
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    float& at(int i, int j) { return v[size_t(i) * size_t(cols()) + size_t(j)]; }
    float at(int i, int j) const { return v[size_t(i) * size_t(cols()) + size_t(j)]; }

    bool finite() const {
        for (float x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    uint64_t content_hash() const { return fnv1a64(v.data(), v.size() * sizeof(float)); }

    void fill_uniform(Rng& rng, float lo, float hi) {
        for (float& x : v) x = float(rng.uniform(lo, hi));
    }
    void fill_normal(Rng& rng, float stddev) {
        for (float& x : v) x = float(rng.normal() * stddev);
    }
};

// ----------------------------- raw kernels -----------------------------
// Shared by the autograd forward pass and the no-grad inference path so
// both produce bit-identical values. The reduction kernels are noinline:
// a single compiled body per kernel keeps rounding identical across call
// sites regardless of how the optimizer treats each site.
#if defined(_MSC_VER)
#define BLSP_NOINLINE __declspec(noinline)
#else
#define BLSP_NOINLINE __attribute__((noinline))
#endif

// C[m,n] += A[m,k] * B[k,n]
BLSP_NOINLINE inline void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + size_t(i) * k;
        float* crow = c + size_t(i) * n;
        for (int p = 0; p < k; ++p) {
            const float av = arow[p];
            const float* brow = b + size_t(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dot product with 8 explicit accumulator chains so the compiler can
// vectorize the reduction without reassociation flags
BLSP_NOINLINE inline float dot8(const float* a, const float* b, int k) {
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    int p = 0;
    for (; p + 8 <= k; p += 8)
        for (int u = 0; u < 8; ++u) acc[u] += a[p + u] * b[p + u];
    float tail = 0.0f;
    for (; p < k; ++p) tail += a[p] * b[p];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// C[m,n] += A[m,k] * B[n,k]^T
BLSP_NOINLINE inline void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + size_t(i) * k;
        float* crow = c + size_t(i) * n;
        for (int j = 0; j < n; ++j) crow[j] += dot8(arow, b + size_t(j) * k, k);
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
BLSP_NOINLINE inline void gemm_tn(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + size_t(i) * k;
        const float* brow = b + size_t(i) * n;
        for (int p = 0; p < k; ++p) {
            const float av = arow[p];
            float* crow = c + size_t(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline float gelu_scalar(float x) {
    // tanh approximation
    const float c = 0.7978845608028654f;  // sqrt(2/pi)
    float t = std::tanh(c * (x + 0.044715f * x * x * x));
    return 0.5f * x * (1.0f + t);
}

inline float gelu_grad_scalar(float x) {
    const float c = 0.7978845608028654f;
    float u = c * (x + 0.044715f * x * x * x);
    float t = std::tanh(u);
    float du = c * (1.0f + 3.0f * 0.044715f * x * x);
    return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

BLSP_NOINLINE inline void rmsnorm_row(const float* x, const float* g, float* y, int n, float eps) {
    float ss = 0.0f;
    for (int j = 0; j < n; ++j) ss += x[j] * x[j];
    float inv = 1.0f / std::sqrt(ss / float(n) + eps);
    for (int j = 0; j < n; ++j) y[j] = x[j] * inv * g[j];
}

// in-place softmax over row[0..n), with additive bias applied first
BLSP_NOINLINE inline void softmax_row_bias(float* row, const float* bias, int n) {
    float mx = -std::numeric_limits<float>::infinity();
    for (int j = 0; j < n; ++j) {
        row[j] += bias[j];
        mx = std::max(mx, row[j]);
    }
    float sum = 0.0f;
    for (int j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    float inv = 1.0f / sum;
    for (int j = 0; j < n; ++j) row[j] *= inv;
}

// log-softmax of one row into y
BLSP_NOINLINE inline void log_softmax_row(const float* x, float* y, int n) {
    float mx = -std::numeric_limits<float>::infinity();
    for (int j = 0; j < n; ++j) mx = std::max(mx, x[j]);
    float sum = 0.0f;
    for (int j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
    float lse = mx + std::log(sum);
    for (int j = 0; j < n; ++j) y[j] = x[j] - lse;
}

namespace ag {
struct Node;
}

// named handle to a learnable tensor; components expose their weights this
// way for freeze plans, hashing and checkpointing
struct NamedParam {
    std::string name;
    std::shared_ptr<ag::Node> node;
};

// ----------------------------- autograd tape -----------------------------
namespace ag {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    std::vector<float> grad;  // allocated by backward() when needed
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != val.v.size()) grad.assign(val.v.size(), 0.0f);
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }
};

inline NodePtr leaf(Tensor t, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    return n;
}

inline NodePtr make_op(Tensor out, std::vector<NodePtr> parents,
                       std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->val = std::move(out);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backward_fn = std::move(backward_fn);
    return n;
}

// y = x @ W^T + b; x [m,in], W [out,in], b [out] (b may be null)
inline NodePtr linear(const NodePtr& x, const NodePtr& w, const NodePtr& b) {
    const int m = x->val.rows(), in = x->val.cols(), out = w->val.rows();
    assert(w->val.cols() == in);
    Tensor y({m, out});
    gemm_nt(x->val.v.data(), w->val.v.data(), y.v.data(), m, in, out);
    if (b) {
        assert(b->val.numel() == out);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < out; ++j) y.at(i, j) += b->val.v[size_t(j)];
    }
    std::vector<NodePtr> parents = b ? std::vector<NodePtr>{x, w, b} : std::vector<NodePtr>{x, w};
    return make_op(std::move(y), std::move(parents), [m, in, out](Node& self) {
        Node& xp = *self.parents[0];
        Node& wp = *self.parents[1];
        if (xp.requires_grad) {
            xp.ensure_grad();
            gemm_nn(self.grad.data(), wp.val.v.data(), xp.grad.data(), m, out, in);
        }
        if (wp.requires_grad) {
            wp.ensure_grad();
            gemm_tn(self.grad.data(), xp.val.v.data(), wp.grad.data(), m, out, in);
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            Node& bp = *self.parents[2];
            bp.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < out; ++j) bp.grad[size_t(j)] += self.grad[size_t(i) * out + j];
        }
    });
}

// C = A @ B, A [m,k], B [k,n]
inline NodePtr matmul(const NodePtr& a, const NodePtr& b) {
    const int m = a->val.rows(), k = a->val.cols(), n = b->val.cols();
    assert(b->val.rows() == k);
    Tensor y({m, n});
    gemm_nn(a->val.v.data(), b->val.v.data(), y.v.data(), m, k, n);
    return make_op(std::move(y), {a, b}, [m, k, n](Node& self) {
        Node& ap = *self.parents[0];
        Node& bp = *self.parents[1];
        if (ap.requires_grad) {
            ap.ensure_grad();
            gemm_nt(self.grad.data(), bp.val.v.data(), ap.grad.data(), m, n, k);
        }
        if (bp.requires_grad) {
            bp.ensure_grad();
            gemm_tn(ap.val.v.data(), self.grad.data(), bp.grad.data(), m, k, n);
        }
    });
}

// C = A @ B^T, A [m,k], B [n,k]
inline NodePtr matmul_nt(const NodePtr& a, const NodePtr& b) {
    const int m = a->val.rows(), k = a->val.cols(), n = b->val.rows();
    assert(b->val.cols() == k);
    Tensor y({m, n});
    gemm_nt(a->val.v.data(), b->val.v.data(), y.v.data(), m, k, n);
    return make_op(std::move(y), {a, b}, [m, k, n](Node& self) {
        Node& ap = *self.parents[0];
        Node& bp = *self.parents[1];
        if (ap.requires_grad) {
            ap.ensure_grad();
            gemm_nn(self.grad.data(), bp.val.v.data(), ap.grad.data(), m, n, k);
        }
        if (bp.requires_grad) {
            bp.ensure_grad();
            gemm_tn(self.grad.data(), ap.val.v.data(), bp.grad.data(), m, n, k);
        }
    });
}

inline NodePtr add(const NodePtr& a, const NodePtr& b) {
    assert(a->val.shape == b->val.shape);
    Tensor y = a->val;
    for (size_t i = 0; i < y.v.size(); ++i) y.v[i] += b->val.v[i];
    return make_op(std::move(y), {a, b}, [](Node& self) {
        for (int pi = 0; pi < 2; ++pi) {
            Node& p = *self.parents[size_t(pi)];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
        }
    });
}

inline NodePtr scale(const NodePtr& a, float s) {
    Tensor y = a->val;
    for (float& x : y.v) x *= s;
    return make_op(std::move(y), {a}, [s](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += s * self.grad[i];
    });
}

inline NodePtr gelu(const NodePtr& a) {
    Tensor y = a->val;
    for (float& x : y.v) x = gelu_scalar(x);
    return make_op(std::move(y), {a}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            p.grad[i] += self.grad[i] * gelu_grad_scalar(p.val.v[i]);
    });
}

// row-wise rms norm with gain g [n]
inline NodePtr rmsnorm(const NodePtr& x, const NodePtr& g, float eps = 1e-5f) {
    const int m = x->val.rows(), n = x->val.cols();
    assert(g->val.numel() == n);
    Tensor y({m, n});
    for (int i = 0; i < m; ++i)
        rmsnorm_row(&x->val.v[size_t(i) * n], g->val.v.data(), &y.v[size_t(i) * n], n, eps);
    return make_op(std::move(y), {x, g}, [m, n, eps](Node& self) {
        Node& xp = *self.parents[0];
        Node& gp = *self.parents[1];
        for (int i = 0; i < m; ++i) {
            const float* xr = &xp.val.v[size_t(i) * n];
            const float* dy = &self.grad[size_t(i) * n];
            float ss = 0.0f;
            for (int j = 0; j < n; ++j) ss += xr[j] * xr[j];
            float ms = ss / float(n) + eps;
            float inv = 1.0f / std::sqrt(ms);
            if (gp.requires_grad) {
                gp.ensure_grad();
                for (int j = 0; j < n; ++j) gp.grad[size_t(j)] += dy[j] * xr[j] * inv;
            }
            if (xp.requires_grad) {
                xp.ensure_grad();
                float* dx = &xp.grad[size_t(i) * n];
                // d/dx_j of x_k*inv: inv*delta_jk - x_j*x_k*inv^3/n
                float dot = 0.0f;
                for (int j = 0; j < n; ++j) dot += dy[j] * gp.val.v[size_t(j)] * xr[j];
                float coef = dot * inv * inv * inv / float(n);
                for (int j = 0; j < n; ++j)
                    dx[j] += dy[j] * gp.val.v[size_t(j)] * inv - coef * xr[j];
            }
        }
    });
}

// softmax over each row after adding a constant bias matrix (causal mask +
// attention position bias live in `bias`)
inline NodePtr softmax_rows_bias(const NodePtr& scores, const Tensor& bias) {
    const int m = scores->val.rows(), n = scores->val.cols();
    assert(bias.rows() == m && bias.cols() == n);
    Tensor y = scores->val;
    for (int i = 0; i < m; ++i)
        softmax_row_bias(&y.v[size_t(i) * n], &bias.v[size_t(i) * n], n);
    return make_op(std::move(y), {scores}, [m, n](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int i = 0; i < m; ++i) {
            const float* pr = &self.val.v[size_t(i) * n];
            const float* dy = &self.grad[size_t(i) * n];
            float dot = 0.0f;
            for (int j = 0; j < n; ++j) dot += dy[j] * pr[j];
            float* dx = &p.grad[size_t(i) * n];
            for (int j = 0; j < n; ++j) dx[j] += pr[j] * (dy[j] - dot);
        }
    });
}

inline NodePtr slice_cols(const NodePtr& x, int c0, int width) {
    const int m = x->val.rows(), n = x->val.cols();
    assert(c0 >= 0 && c0 + width <= n);
    Tensor y({m, width});
    for (int i = 0; i < m; ++i)
        std::copy_n(&x->val.v[size_t(i) * n + c0], width, &y.v[size_t(i) * width]);
    return make_op(std::move(y), {x}, [m, n, c0, width](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < width; ++j)
                p.grad[size_t(i) * n + c0 + j] += self.grad[size_t(i) * width + j];
    });
}

inline NodePtr concat_cols(const std::vector<NodePtr>& parts) {
    assert(!parts.empty());
    const int m = parts[0]->val.rows();
    int n = 0;
    for (const auto& p : parts) {
        assert(p->val.rows() == m);
        n += p->val.cols();
    }
    Tensor y({m, n});
    int off = 0;
    for (const auto& p : parts) {
        const int w = p->val.cols();
        for (int i = 0; i < m; ++i)
            std::copy_n(&p->val.v[size_t(i) * w], w, &y.v[size_t(i) * n + off]);
        off += w;
    }
    return make_op(std::move(y), parts, [m, n](Node& self) {
        int off2 = 0;
        for (auto& pp : self.parents) {
            Node& p = *pp;
            const int w = p.val.cols();
            if (p.requires_grad) {
                p.ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < w; ++j)
                        p.grad[size_t(i) * w + j] += self.grad[size_t(i) * n + off2 + j];
            }
            off2 += w;
        }
    });
}

inline NodePtr concat_rows(const std::vector<NodePtr>& parts) {
    assert(!parts.empty());
    const int n = parts[0]->val.cols();
    int m = 0;
    for (const auto& p : parts) {
        assert(p->val.cols() == n);
        m += p->val.rows();
    }
    Tensor y({m, n});
    int off = 0;
    for (const auto& p : parts) {
        std::copy(p->val.v.begin(), p->val.v.end(), y.v.begin() + size_t(off) * n);
        off += p->val.rows();
    }
    return make_op(std::move(y), parts, [n](Node& self) {
        size_t off2 = 0;
        for (auto& pp : self.parents) {
            Node& p = *pp;
            const size_t cnt = p.val.v.size();
            if (p.requires_grad) {
                p.ensure_grad();
                for (size_t i = 0; i < cnt; ++i) p.grad[i] += self.grad[off2 + i];
            }
            off2 += cnt;
        }
    });
}

// gather rows of an embedding table by token id
inline NodePtr embed_gather(const NodePtr& table, std::vector<int> ids) {
    const int d = table->val.cols();
    Tensor y({int(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        assert(ids[i] >= 0 && ids[i] < table->val.rows());
        std::copy_n(&table->val.v[size_t(ids[i]) * d], d, &y.v[i * size_t(d)]);
    }
    return make_op(std::move(y), {table}, [ids = std::move(ids), d](Node& self) {
        Node& t = *self.parents[0];
        if (!t.requires_grad) return;
        t.ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < d; ++j)
                t.grad[size_t(ids[i]) * d + j] += self.grad[i * size_t(d) + j];
    });
}

// sum over masked positions of -log softmax(logits[i])[target[i]].
// Returns a scalar node; divide by the mask count for a mean.
inline NodePtr masked_nll_sum(const NodePtr& logits, std::vector<int> targets,
                              std::vector<char> mask) {
    const int m = logits->val.rows(), n = logits->val.cols();
    assert(int(targets.size()) == m && int(mask.size()) == m);
    double total = 0.0;
    std::vector<float> lsm(size_t(m) * n);
    for (int i = 0; i < m; ++i) {
        if (!mask[size_t(i)]) continue;
        log_softmax_row(&logits->val.v[size_t(i) * n], &lsm[size_t(i) * n], n);
        total -= double(lsm[size_t(i) * n + targets[size_t(i)]]);
    }
    Tensor y({1});
    y.v[0] = float(total);
    return make_op(std::move(y), {logits},
                   [m, n, targets = std::move(targets), mask = std::move(mask)](Node& self) {
                       Node& p = *self.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       const float g = self.grad[0];
                       std::vector<float> sm(static_cast<size_t>(n));
                       for (int i = 0; i < m; ++i) {
                           if (!mask[size_t(i)]) continue;
                           log_softmax_row(&p.val.v[size_t(i) * n], sm.data(), n);
                           float* dx = &p.grad[size_t(i) * n];
                           for (int j = 0; j < n; ++j) {
                               float prob = std::exp(sm[size_t(j)]);
                               dx[j] += g * (prob - (j == targets[size_t(i)] ? 1.0f : 0.0f));
                           }
                       }
                   });
}

inline NodePtr log_softmax_rows(const NodePtr& x) {
    const int m = x->val.rows(), n = x->val.cols();
    Tensor y({m, n});
    for (int i = 0; i < m; ++i)
        log_softmax_row(&x->val.v[size_t(i) * n], &y.v[size_t(i) * n], n);
    return make_op(std::move(y), {x}, [m, n](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int i = 0; i < m; ++i) {
            const float* ly = &self.val.v[size_t(i) * n];
            const float* dy = &self.grad[size_t(i) * n];
            float sum = 0.0f;
            for (int j = 0; j < n; ++j) sum += dy[j];
            float* dx = &p.grad[size_t(i) * n];
            for (int j = 0; j < n; ++j) dx[j] += dy[j] - std::exp(ly[j]) * sum;
        }
    });
}

// scalar s = sum_i x_i * w_i with constant weights (gradcheck losses,
// weighted pools)
inline NodePtr weighted_sum(const NodePtr& x, Tensor w) {
    assert(w.v.size() == x->val.v.size());
    double s = 0.0;
    for (size_t i = 0; i < w.v.size(); ++i) s += double(x->val.v[i]) * double(w.v[i]);
    Tensor y({1});
    y.v[0] = float(s);
    return make_op(std::move(y), {x}, [w = std::move(w)](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const float g = self.grad[0];
        for (size_t i = 0; i < w.v.size(); ++i) p.grad[i] += g * w.v[i];
    });
}

inline NodePtr add_scalars(const std::vector<NodePtr>& xs) {
    assert(!xs.empty());
    Tensor y({1});
    for (const auto& x : xs) {
        assert(x->val.numel() == 1);
        y.v[0] += x->val.v[0];
    }
    return make_op(std::move(y), xs, [](Node& self) {
        for (auto& pp : self.parents) {
            if (!pp->requires_grad) continue;
            pp->ensure_grad();
            pp->grad[0] += self.grad[0];
        }
    });
}

// 1-D convolution along rows: x [T, in], w [out, in, k], b [out] -> [T', out]
inline NodePtr conv1d(const NodePtr& x, const NodePtr& w, const NodePtr& b, int stride, int pad) {
    const int T = x->val.rows(), in = x->val.cols();
    const int out = w->val.shape[0], k = w->val.shape[2];
    assert(w->val.shape[1] == in);
    const int To = (T + 2 * pad - k) / stride + 1;
    assert(To >= 1);
    Tensor y({To, out});
    for (int t = 0; t < To; ++t) {
        for (int o = 0; o < out; ++o) {
            float acc = b ? b->val.v[size_t(o)] : 0.0f;
            const float* wrow = &w->val.v[size_t(o) * in * k];
            for (int dk = 0; dk < k; ++dk) {
                const int src = t * stride + dk - pad;
                if (src < 0 || src >= T) continue;
                const float* xr = &x->val.v[size_t(src) * in];
                const float* wk = wrow + dk;  // stride k over channels
                for (int c = 0; c < in; ++c) acc += xr[c] * wk[size_t(c) * k];
            }
            y.at(t, o) = acc;
        }
    }
    std::vector<NodePtr> parents = b ? std::vector<NodePtr>{x, w, b} : std::vector<NodePtr>{x, w};
    return make_op(std::move(y), std::move(parents), [T, in, out, k, stride, pad, To](Node& self) {
        Node& xp = *self.parents[0];
        Node& wp = *self.parents[1];
        Node* bp = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
        if (xp.requires_grad) xp.ensure_grad();
        if (wp.requires_grad) wp.ensure_grad();
        if (bp && bp->requires_grad) bp->ensure_grad();
        for (int t = 0; t < To; ++t) {
            for (int o = 0; o < out; ++o) {
                const float dy = self.grad[size_t(t) * out + o];
                if (dy == 0.0f) continue;
                if (bp && bp->requires_grad) bp->grad[size_t(o)] += dy;
                const float* wrow = &wp.val.v[size_t(o) * in * k];
                float* dwrow = wp.requires_grad ? &wp.grad[size_t(o) * in * k] : nullptr;
                for (int dk = 0; dk < k; ++dk) {
                    const int src = t * stride + dk - pad;
                    if (src < 0 || src >= T) continue;
                    const float* xr = &xp.val.v[size_t(src) * in];
                    if (dwrow)
                        for (int c = 0; c < in; ++c) dwrow[size_t(c) * k + dk] += dy * xr[c];
                    if (xp.requires_grad) {
                        float* dxr = &xp.grad[size_t(src) * in];
                        for (int c = 0; c < in; ++c) dxr[c] += dy * wrow[size_t(c) * k + dk];
                    }
                }
            }
        }
    });
}

// reverse-mode sweep from a scalar root
inline void backward(const NodePtr& root) {
    assert(root->val.numel() == 1);
    if (!root->requires_grad) return;
    // iterative topological order
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* next = node->parents[idx++].get();
            if (next->requires_grad && !visited.count(next)) {
                visited.insert(next);
                stack.push_back({next, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

}  // namespace ag
}  // namespace blsp
