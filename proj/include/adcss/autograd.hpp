#pragma once

// Reverse-mode automatic differentiation over Tensor. Each op builds a graph
// node holding the forward value and a closure that routes the adjoint to its
// parents. Heavyweight primitives (layer norm, softmax, LSTM) are fused with
// hand-written backward passes; everything else composes from elementwise and
// matmul nodes. Graphs are thread-local by construction: ops never mutate
// their inputs, so parameter nodes can be shared read-only across threads as
// long as each thread backpropagates into its own GradSink.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "adcss/tensor.hpp"

namespace adcss::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad; // empty means zero
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn; // null for leaves
};

// ---- grad-tracking switch ---------------------------------------------------

inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// ---- leaves -----------------------------------------------------------------

inline Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

inline Var param(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    return n;
}

// Gradients for shared leaves can be redirected into a per-thread sink so
// concurrent backward passes never write to the same Node.
using GradSink = std::unordered_map<Node*, Tensor>;

inline GradSink*& current_sink() {
    thread_local GradSink* sink = nullptr;
    return sink;
}

inline void accumulate(Tensor& slot, const Tensor& delta) {
    if (slot.empty()) {
        slot = delta;
    } else {
        slot.add_(delta);
    }
}

// All backward closures push adjoints through this.
inline void add_grad(const Var& target, const Tensor& delta) {
    if (!target->requires_grad) return;
    GradSink* sink = current_sink();
    if (sink != nullptr && !target->backward_fn) {
        accumulate((*sink)[target.get()], delta);
    } else {
        accumulate(target->grad, delta);
    }
}

namespace detail {

inline Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (grad_enabled()) {
        for (const Var& p : parents) {
            if (p->requires_grad) {
                n->requires_grad = true;
                break;
            }
        }
    }
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward);
    }
    return n;
}

} // namespace detail

// ---- engine -----------------------------------------------------------------

// Backpropagate from a scalar root. If `sink` is given, leaf gradients are
// collected there instead of in Node::grad (thread-safe against other threads
// doing the same over shared parameter leaves).
inline void backward(const Var& root, GradSink* sink = nullptr) {
    ADCSS_CHECK_INPUT(root->value.numel() == 1, "backward: root must be scalar");
    if (!root->requires_grad) return;

    // Iterative post-order topological sort.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        bool descended = false;
        while (next_child < node->parents.size()) {
            Node* child = node->parents[next_child++].get();
            if (child->requires_grad && child->backward_fn && visited.insert(child).second) {
                stack.emplace_back(child, 0);
                descended = true;
                break;
            }
        }
        if (!descended && (stack.back().second >= stack.back().first->parents.size())) {
            order.push_back(stack.back().first);
            stack.pop_back();
        }
    }

    GradSink* prev = current_sink();
    current_sink() = sink;
    root->grad = Tensor::full(root->value.shape(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    current_sink() = prev;
}

inline void zero_grad(const Var& v) { v->grad = Tensor(); }

// ---- broadcasting helpers ---------------------------------------------------

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t n = std::max(a.size(), b.size());
    Shape out(n, 1);
    for (size_t i = 0; i < n; ++i) {
        int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
        int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
        ADCSS_CHECK_INPUT(da == db || da == 1 || db == 1,
                          "broadcast: incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Row-major strides with 0 on broadcast dims, right-aligned to out rank.
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<int64_t> strides(out.size(), 0);
    int64_t s = 1;
    for (size_t i = in.size(); i-- > 0;) {
        size_t oi = i + (out.size() - in.size());
        strides[oi] = (in[i] == 1 && out[oi] != 1) ? 0 : s;
        s *= in[i];
    }
    return strides;
}

// Sum `g` (shaped like `from`) down to `to` (broadcast-compatible).
inline Tensor reduce_to_shape(const Tensor& g, const Shape& to) {
    if (g.shape() == to) return g;
    Tensor out(to);
    const Shape& from = g.shape();
    std::vector<int64_t> strides = broadcast_strides(to, from);
    std::vector<int64_t> idx(from.size(), 0);
    const int64_t n = g.numel();
    int64_t off = 0;
    for (int64_t flat = 0; flat < n; ++flat) {
        out[off] += g[flat];
        for (size_t d = from.size(); d-- > 0;) {
            if (++idx[d] < from[d]) {
                off += strides[d];
                break;
            }
            idx[d] = 0;
            off -= strides[d] * (from[d] - 1);
        }
    }
    return out;
}

template <typename F>
Tensor elementwise_bc(const Tensor& a, const Tensor& b, const Shape& out_shape, F&& f) {
    Tensor out(out_shape);
    if (a.shape() == b.shape()) {
        const int64_t n = a.numel();
        for (int64_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
        return out;
    }
    std::vector<int64_t> sa = broadcast_strides(a.shape(), out_shape);
    std::vector<int64_t> sb = broadcast_strides(b.shape(), out_shape);
    std::vector<int64_t> idx(out_shape.size(), 0);
    int64_t oa = 0, ob = 0;
    const int64_t n = out.numel();
    for (int64_t flat = 0; flat < n; ++flat) {
        out[flat] = f(a[oa], b[ob]);
        for (size_t d = out_shape.size(); d-- > 0;) {
            if (++idx[d] < out_shape[d]) {
                oa += sa[d];
                ob += sb[d];
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * (out_shape[d] - 1);
            ob -= sb[d] * (out_shape[d] - 1);
        }
    }
    return out;
}

} // namespace detail

// ---- elementwise binary ops ---------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    Shape os = detail::broadcast_shape(a->value.shape(), b->value.shape());
    Tensor v = detail::elementwise_bc(a->value, b->value, os, [](double x, double y) { return x + y; });
    return detail::make_node(std::move(v), {a, b}, [a, b](Node& n) {
        add_grad(a, detail::reduce_to_shape(n.grad, a->value.shape()));
        add_grad(b, detail::reduce_to_shape(n.grad, b->value.shape()));
    });
}

inline Var sub(const Var& a, const Var& b) {
    Shape os = detail::broadcast_shape(a->value.shape(), b->value.shape());
    Tensor v = detail::elementwise_bc(a->value, b->value, os, [](double x, double y) { return x - y; });
    return detail::make_node(std::move(v), {a, b}, [a, b](Node& n) {
        add_grad(a, detail::reduce_to_shape(n.grad, a->value.shape()));
        Tensor neg = n.grad;
        neg.scale_(-1.0);
        add_grad(b, detail::reduce_to_shape(neg, b->value.shape()));
    });
}

inline Var mul(const Var& a, const Var& b) {
    Shape os = detail::broadcast_shape(a->value.shape(), b->value.shape());
    Tensor v = detail::elementwise_bc(a->value, b->value, os, [](double x, double y) { return x * y; });
    return detail::make_node(std::move(v), {a, b}, [a, b, os](Node& n) {
        Tensor da = detail::elementwise_bc(n.grad, b->value, os, [](double g, double y) { return g * y; });
        Tensor db = detail::elementwise_bc(n.grad, a->value, os, [](double g, double x) { return g * x; });
        add_grad(a, detail::reduce_to_shape(da, a->value.shape()));
        add_grad(b, detail::reduce_to_shape(db, b->value.shape()));
    });
}

inline Var div(const Var& a, const Var& b) {
    Shape os = detail::broadcast_shape(a->value.shape(), b->value.shape());
    Tensor v = detail::elementwise_bc(a->value, b->value, os, [](double x, double y) { return x / y; });
    return detail::make_node(std::move(v), {a, b}, [a, b, os](Node& n) {
        Tensor da = detail::elementwise_bc(n.grad, b->value, os, [](double g, double y) { return g / y; });
        Tensor gb = detail::elementwise_bc(n.grad, a->value, os, [](double g, double x) { return g * x; });
        Tensor db = detail::elementwise_bc(gb, b->value, os, [](double g, double y) { return -g / (y * y); });
        add_grad(a, detail::reduce_to_shape(da, a->value.shape()));
        add_grad(b, detail::reduce_to_shape(db, b->value.shape()));
    });
}

// ---- scalar and unary ops -----------------------------------------------------

namespace detail {

template <typename Fwd, typename Bwd>
Var unary(const Var& a, Fwd&& fwd, Bwd&& bwd_from_xy) {
    Tensor v(a->value.shape());
    const int64_t n = a->value.numel();
    for (int64_t i = 0; i < n; ++i) v[i] = fwd(a->value[i]);
    return make_node(std::move(v), {a}, [a, bwd = std::forward<Bwd>(bwd_from_xy)](Node& node) {
        Tensor da(a->value.shape());
        const int64_t m = a->value.numel();
        for (int64_t i = 0; i < m; ++i) da[i] = node.grad[i] * bwd(a->value[i], node.value[i]);
        add_grad(a, da);
    });
}

} // namespace detail

inline Var neg(const Var& a) {
    return detail::unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}
inline Var add_scalar(const Var& a, double s) {
    return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}
inline Var mul_scalar(const Var& a, double s) {
    return detail::unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}
inline Var relu(const Var& a) {
    return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                         [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
inline Var sigmoid(const Var& a) {
    return detail::unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                         [](double, double y) { return y * (1.0 - y); });
}
inline Var tanh_(const Var& a) {
    return detail::unary(a, [](double x) { return std::tanh(x); },
                         [](double, double y) { return 1.0 - y * y; });
}
inline Var exp_(const Var& a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Var log_(const Var& a) {
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Var sqrt_(const Var& a) {
    return detail::unary(a, [](double x) { return std::sqrt(x); },
                         [](double, double y) { return 0.5 / y; });
}
inline Var square(const Var& a) {
    return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
inline Var clamp(const Var& a, double lo, double hi) {
    return detail::unary(a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
                         [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---- reductions -----------------------------------------------------------------

inline Var sum_all(const Var& a) {
    double s = 0.0;
    for (int64_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
    return detail::make_node(Tensor::scalar(s), {a}, [a](Node& n) {
        add_grad(a, Tensor::full(a->value.shape(), n.grad[0]));
    });
}

inline Var mean_all(const Var& a) {
    ADCSS_CHECK_INPUT(a->value.numel() > 0, "mean_all: empty tensor");
    const double inv = 1.0 / static_cast<double>(a->value.numel());
    double s = 0.0;
    for (int64_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
    return detail::make_node(Tensor::scalar(s * inv), {a}, [a, inv](Node& n) {
        add_grad(a, Tensor::full(a->value.shape(), n.grad[0] * inv));
    });
}

// ---- shape ops ------------------------------------------------------------------

inline Var reshape(const Var& a, Shape shape) {
    Tensor v = a->value.reshaped(shape);
    return detail::make_node(std::move(v), {a}, [a](Node& n) {
        add_grad(a, n.grad.reshaped(a->value.shape()));
    });
}

namespace detail {

inline Tensor permute_tensor(const Tensor& in, const std::vector<int64_t>& axes) {
    const Shape& is = in.shape();
    ADCSS_CHECK_INPUT(axes.size() == is.size(), "permute: rank mismatch");
    Shape os(is.size());
    for (size_t i = 0; i < axes.size(); ++i) os[i] = is[static_cast<size_t>(axes[i])];
    Tensor out(os);
    std::vector<int64_t> in_strides(is.size(), 1);
    for (size_t i = is.size() - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * is[i + 1];
    std::vector<int64_t> strides(os.size());
    for (size_t i = 0; i < axes.size(); ++i) strides[i] = in_strides[static_cast<size_t>(axes[i])];
    std::vector<int64_t> idx(os.size(), 0);
    int64_t off = 0;
    const int64_t n = out.numel();
    for (int64_t flat = 0; flat < n; ++flat) {
        out[flat] = in[off];
        for (size_t d = os.size(); d-- > 0;) {
            if (++idx[d] < os[d]) {
                off += strides[d];
                break;
            }
            idx[d] = 0;
            off -= strides[d] * (os[d] - 1);
        }
    }
    return out;
}

} // namespace detail

inline Var permute(const Var& a, std::vector<int64_t> axes) {
    Tensor v = detail::permute_tensor(a->value, axes);
    return detail::make_node(std::move(v), {a}, [a, axes](Node& n) {
        std::vector<int64_t> inv(axes.size());
        for (size_t i = 0; i < axes.size(); ++i) inv[static_cast<size_t>(axes[i])] = static_cast<int64_t>(i);
        add_grad(a, detail::permute_tensor(n.grad, inv));
    });
}

inline Var reverse_axis(const Var& a, int64_t axis) {
    const Shape& s = a->value.shape();
    ADCSS_CHECK_INPUT(axis >= 0 && axis < a->value.ndim(), "reverse_axis: bad axis");
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (int64_t i = axis + 1; i < a->value.ndim(); ++i) inner *= s[static_cast<size_t>(i)];
    const int64_t len = s[static_cast<size_t>(axis)];
    auto flip = [outer, inner, len](const Tensor& in) {
        Tensor out(in.shape());
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t l = 0; l < len; ++l) {
                const double* src = in.data() + (o * len + l) * inner;
                double* dst = out.data() + (o * len + (len - 1 - l)) * inner;
                std::copy(src, src + inner, dst);
            }
        return out;
    };
    return detail::make_node(flip(a->value), {a}, [a, flip](Node& n) { add_grad(a, flip(n.grad)); });
}

// Slice along `axis`, [start, start+len).
inline Var slice(const Var& a, int64_t axis, int64_t start, int64_t len) {
    const Shape& s = a->value.shape();
    ADCSS_CHECK_INPUT(axis >= 0 && axis < a->value.ndim(), "slice: bad axis");
    ADCSS_CHECK_INPUT(start >= 0 && len >= 0 && start + len <= s[static_cast<size_t>(axis)],
                      "slice: out of range");
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (int64_t i = axis + 1; i < a->value.ndim(); ++i) inner *= s[static_cast<size_t>(i)];
    const int64_t alen = s[static_cast<size_t>(axis)];
    Shape os = s;
    os[static_cast<size_t>(axis)] = len;
    Tensor out(os);
    for (int64_t o = 0; o < outer; ++o) {
        const double* src = a->value.data() + (o * alen + start) * inner;
        std::copy(src, src + len * inner, out.data() + o * len * inner);
    }
    return detail::make_node(std::move(out), {a}, [a, axis, start, len, outer, inner, alen](Node& n) {
        Tensor da(a->value.shape());
        for (int64_t o = 0; o < outer; ++o) {
            const double* src = n.grad.data() + o * len * inner;
            std::copy(src, src + len * inner, da.data() + (o * alen + start) * inner);
        }
        add_grad(a, da);
    });
}

inline Var concat(const std::vector<Var>& parts, int64_t axis) {
    ADCSS_CHECK_INPUT(!parts.empty(), "concat: no inputs");
    const Shape& s0 = parts[0]->value.shape();
    ADCSS_CHECK_INPUT(axis >= 0 && axis < parts[0]->value.ndim(), "concat: bad axis");
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
    for (int64_t i = axis + 1; i < parts[0]->value.ndim(); ++i) inner *= s0[static_cast<size_t>(i)];
    int64_t total = 0;
    for (const Var& p : parts) {
        Shape ps = p->value.shape();
        Shape ref = s0;
        ref[static_cast<size_t>(axis)] = ps[static_cast<size_t>(axis)];
        ADCSS_CHECK_INPUT(ps == ref, "concat: incompatible shapes");
        total += ps[static_cast<size_t>(axis)];
    }
    Shape os = s0;
    os[static_cast<size_t>(axis)] = total;
    Tensor out(os);
    int64_t off = 0;
    std::vector<int64_t> lens;
    for (const Var& p : parts) {
        int64_t len = p->value.dim(axis);
        lens.push_back(len);
        for (int64_t o = 0; o < outer; ++o) {
            const double* src = p->value.data() + o * len * inner;
            std::copy(src, src + len * inner, out.data() + (o * total + off) * inner);
        }
        off += len;
    }
    return detail::make_node(std::move(out), parts, [parts, lens, outer, inner, total](Node& n) {
        int64_t start = 0;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            int64_t len = lens[pi];
            Tensor dp(parts[pi]->value.shape());
            for (int64_t o = 0; o < outer; ++o) {
                const double* src = n.grad.data() + (o * total + start) * inner;
                std::copy(src, src + len * inner, dp.data() + o * len * inner);
            }
            add_grad(parts[pi], dp);
            start += len;
        }
    });
}

// ---- matrix products -------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    ADCSS_CHECK_INPUT(a->value.ndim() == 2 && b->value.ndim() == 2, "matmul: need 2-D operands");
    const int64_t m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    ADCSS_CHECK_INPUT(b->value.dim(0) == k, "matmul: inner dim mismatch");
    Tensor out({m, n});
    out.mat(m, n).noalias() = a->value.mat(m, k) * b->value.mat(k, n);
    return detail::make_node(std::move(out), {a, b}, [a, b, m, k, n](Node& node) {
        Tensor da({m, k});
        da.mat(m, k).noalias() = node.grad.mat(m, n) * b->value.mat(k, n).transpose();
        add_grad(a, da);
        Tensor db({k, n});
        db.mat(k, n).noalias() = a->value.mat(m, k).transpose() * node.grad.mat(m, n);
        add_grad(b, db);
    });
}

// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n].
inline Var bmm(const Var& a, const Var& b) {
    ADCSS_CHECK_INPUT(a->value.ndim() == 3 && b->value.ndim() == 3, "bmm: need 3-D operands");
    const int64_t B = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2), n = b->value.dim(2);
    ADCSS_CHECK_INPUT(b->value.dim(0) == B && b->value.dim(1) == k, "bmm: shape mismatch");
    Tensor out({B, m, n});
    for (int64_t i = 0; i < B; ++i) {
        Tensor::ConstMatView av(a->value.data() + i * m * k, m, k);
        Tensor::ConstMatView bv(b->value.data() + i * k * n, k, n);
        Tensor::MatView ov(out.data() + i * m * n, m, n);
        ov.noalias() = av * bv;
    }
    return detail::make_node(std::move(out), {a, b}, [a, b, B, m, k, n](Node& node) {
        Tensor da({B, m, k}), db({B, k, n});
        for (int64_t i = 0; i < B; ++i) {
            Tensor::ConstMatView gv(node.grad.data() + i * m * n, m, n);
            Tensor::ConstMatView av(a->value.data() + i * m * k, m, k);
            Tensor::ConstMatView bv(b->value.data() + i * k * n, k, n);
            Tensor::MatView dav(da.data() + i * m * k, m, k);
            Tensor::MatView dbv(db.data() + i * k * n, k, n);
            dav.noalias() = gv * bv.transpose();
            dbv.noalias() = av.transpose() * gv;
        }
        add_grad(a, da);
        add_grad(b, db);
    });
}

// Swap the last two axes of a 3-D tensor.
inline Var transpose_last2(const Var& a) {
    ADCSS_CHECK_INPUT(a->value.ndim() == 3, "transpose_last2: need 3-D");
    return permute(a, {0, 2, 1});
}

// ---- fused softmax over the last axis ----------------------------------------------

inline Var softmax_lastdim(const Var& a) {
    const Shape& s = a->value.shape();
    const int64_t d = s.back();
    const int64_t rows = a->value.numel() / d;
    Tensor out(s);
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = a->value.data() + r * d;
        double* y = out.data() + r * d;
        double mx = x[0];
        for (int64_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
        double sum = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            y[i] = std::exp(x[i] - mx);
            sum += y[i];
        }
        const double inv = 1.0 / sum;
        for (int64_t i = 0; i < d; ++i) y[i] *= inv;
    }
    return detail::make_node(std::move(out), {a}, [a, rows, d](Node& n) {
        Tensor da(a->value.shape());
        for (int64_t r = 0; r < rows; ++r) {
            const double* y = n.value.data() + r * d;
            const double* g = n.grad.data() + r * d;
            double dot = 0.0;
            for (int64_t i = 0; i < d; ++i) dot += y[i] * g[i];
            double* o = da.data() + r * d;
            for (int64_t i = 0; i < d; ++i) o[i] = y[i] * (g[i] - dot);
        }
        add_grad(a, da);
    });
}

// ---- fused layer norm over the last axis -------------------------------------------

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const Shape& s = x->value.shape();
    const int64_t d = s.back();
    ADCSS_CHECK_INPUT(gamma->value.numel() == d && beta->value.numel() == d,
                      "layer_norm: gamma/beta must match last dim");
    const int64_t rows = x->value.numel() / d;
    Tensor out(s);
    auto xhat = std::make_shared<Tensor>(s);
    auto inv_std = std::make_shared<Tensor>(Shape{rows});
    for (int64_t r = 0; r < rows; ++r) {
        const double* xv = x->value.data() + r * d;
        double mu = 0.0;
        for (int64_t i = 0; i < d; ++i) mu += xv[i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) var += (xv[i] - mu) * (xv[i] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        double* xh = xhat->data() + r * d;
        double* y = out.data() + r * d;
        for (int64_t i = 0; i < d; ++i) {
            xh[i] = (xv[i] - mu) * is;
            y[i] = gamma->value[i] * xh[i] + beta->value[i];
        }
    }
    return detail::make_node(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, rows,
                                                                d](Node& n) {
        Tensor dx(x->value.shape());
        Tensor dgamma({d}), dbeta({d});
        for (int64_t r = 0; r < rows; ++r) {
            const double* xh = xhat->data() + r * d;
            const double* g = n.grad.data() + r * d;
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (int64_t i = 0; i < d; ++i) {
                const double dxh = g[i] * gamma->value[i];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * xh[i];
                dgamma[i] += g[i] * xh[i];
                dbeta[i] += g[i];
            }
            mean_dxhat /= static_cast<double>(d);
            mean_dxhat_xhat /= static_cast<double>(d);
            const double is = (*inv_std)[r];
            double* o = dx.data() + r * d;
            for (int64_t i = 0; i < d; ++i) {
                const double dxh = g[i] * gamma->value[i];
                o[i] = is * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
            }
        }
        add_grad(x, dx);
        add_grad(gamma, dgamma);
        add_grad(beta, dbeta);
    });
}

// ---- fused LSTM ---------------------------------------------------------------------
//
// gx: input-side pre-activations for every step, [Tl, B, 4H] (x_t @ Wx + b,
// computed by the caller in one matmul). wh: recurrent weights [H, 4H].
// h0/c0: initial state [B, H]. Output: [Tl, B, 2H], each step's h and c
// concatenated on the feature axis. Gate order i, f, g, o.
inline Var lstm(const Var& gx, const Var& wh, const Var& h0, const Var& c0) {
    ADCSS_CHECK_INPUT(gx->value.ndim() == 3, "lstm: gx must be [T,B,4H]");
    const int64_t Tl = gx->value.dim(0), B = gx->value.dim(1), H4 = gx->value.dim(2);
    ADCSS_CHECK_INPUT(H4 % 4 == 0, "lstm: gate dim not divisible by 4");
    const int64_t H = H4 / 4;
    ADCSS_CHECK_INPUT(wh->value.ndim() == 2 && wh->value.dim(0) == H && wh->value.dim(1) == H4,
                      "lstm: wh must be [H,4H]");
    ADCSS_CHECK_INPUT(h0->value.shape() == Shape({B, H}) && c0->value.shape() == Shape({B, H}),
                      "lstm: h0/c0 must be [B,H]");

    Tensor out({Tl, B, 2 * H});
    auto gates = std::make_shared<Tensor>(Shape{Tl, B, H4}); // post-activation
    Tensor h = h0->value, c = c0->value;
    Tensor pre({B, H4});
    for (int64_t t = 0; t < Tl; ++t) {
        std::copy(gx->value.data() + t * B * H4, gx->value.data() + (t + 1) * B * H4, pre.data());
        pre.mat(B, H4).noalias() += h.mat(B, H) * wh->value.mat(H, H4);
        double* gt = gates->data() + t * B * H4;
        double* ot = out.data() + t * B * 2 * H;
        for (int64_t b = 0; b < B; ++b) {
            const double* p = pre.data() + b * H4;
            double* g = gt + b * H4;
            double* hrow = ot + b * 2 * H;
            double* crow = hrow + H;
            for (int64_t j = 0; j < H; ++j) {
                const double iv = 1.0 / (1.0 + std::exp(-p[j]));
                const double fv = 1.0 / (1.0 + std::exp(-p[H + j]));
                const double gv = std::tanh(p[2 * H + j]);
                const double ov = 1.0 / (1.0 + std::exp(-p[3 * H + j]));
                g[j] = iv;
                g[H + j] = fv;
                g[2 * H + j] = gv;
                g[3 * H + j] = ov;
                const double cv = fv * c[b * H + j] + iv * gv;
                crow[j] = cv;
                hrow[j] = ov * std::tanh(cv);
            }
        }
        // Stage h/c for the next step.
        for (int64_t b = 0; b < B; ++b) {
            std::copy(ot + b * 2 * H, ot + b * 2 * H + H, h.data() + b * H);
            std::copy(ot + b * 2 * H + H, ot + b * 2 * H + 2 * H, c.data() + b * H);
        }
    }

    return detail::make_node(
        std::move(out), {gx, wh, h0, c0}, [gx, wh, h0, c0, gates, Tl, B, H, H4](Node& n) {
            Tensor dgx({Tl, B, H4});
            Tensor dwh({H, H4});
            Tensor dh({B, H}), dc({B, H});
            Tensor dpre({B, H4});
            Tensor hprev({B, H});
            for (int64_t t = Tl - 1; t >= 0; --t) {
                const double* gt = gates->data() + t * B * H4;
                const double* ot = n.value.data() + t * B * 2 * H;
                const double* gradt = n.grad.data() + t * B * 2 * H;
                const double* cprev =
                    t > 0 ? n.value.data() + (t - 1) * B * 2 * H : c0->value.data();
                const int64_t cprev_stride = t > 0 ? 2 * H : H;
                const int64_t cprev_off = t > 0 ? H : 0;
                for (int64_t b = 0; b < B; ++b) {
                    const double* g = gt + b * H4;
                    const double* crow = ot + b * 2 * H + H;
                    const double* cp = cprev + b * cprev_stride + cprev_off;
                    double* dp = dpre.data() + b * H4;
                    for (int64_t j = 0; j < H; ++j) {
                        const double dh_t = gradt[b * 2 * H + j] + dh[b * H + j];
                        double dc_t = gradt[b * 2 * H + H + j] + dc[b * H + j];
                        const double iv = g[j], fv = g[H + j], gv = g[2 * H + j], ov = g[3 * H + j];
                        const double tc = std::tanh(crow[j]);
                        const double dov = dh_t * tc;
                        dc_t += dh_t * ov * (1.0 - tc * tc);
                        const double div_ = dc_t * gv;
                        const double dgv = dc_t * iv;
                        const double dfv = dc_t * cp[j];
                        dc[b * H + j] = dc_t * fv;
                        dp[j] = div_ * iv * (1.0 - iv);
                        dp[H + j] = dfv * fv * (1.0 - fv);
                        dp[2 * H + j] = dgv * (1.0 - gv * gv);
                        dp[3 * H + j] = dov * ov * (1.0 - ov);
                    }
                }
                std::copy(dpre.data(), dpre.data() + B * H4, dgx.data() + t * B * H4);
                if (t > 0) {
                    const double* prev = n.value.data() + (t - 1) * B * 2 * H;
                    for (int64_t b = 0; b < B; ++b)
                        std::copy(prev + b * 2 * H, prev + b * 2 * H + H, hprev.data() + b * H);
                } else {
                    hprev = h0->value;
                }
                dwh.mat(H, H4).noalias() += hprev.mat(B, H).transpose() * dpre.mat(B, H4);
                dh.mat(B, H).noalias() = dpre.mat(B, H4) * wh->value.mat(H, H4).transpose();
            }
            add_grad(gx, dgx);
            add_grad(wh, dwh);
            add_grad(h0, dh);
            add_grad(c0, dc);
        });
}

// ---- frame/unfold ops ----------------------------------------------------------------

// w: [N] -> frames [T, L] with T = floor((N-L)/hop)+1; trailing samples beyond
// the last full frame are dropped.
inline Var unfold1d(const Var& w, int64_t L, int64_t hop) {
    ADCSS_CHECK_INPUT(w->value.ndim() == 1, "unfold1d: need 1-D input");
    const int64_t N = w->value.dim(0);
    ADCSS_CHECK_INPUT(N >= L, "unfold1d: input shorter than one frame");
    const int64_t T = (N - L) / hop + 1;
    Tensor out({T, L});
    for (int64_t t = 0; t < T; ++t)
        std::copy(w->value.data() + t * hop, w->value.data() + t * hop + L, out.data() + t * L);
    return detail::make_node(std::move(out), {w}, [w, L, hop, T](Node& n) {
        Tensor dw(w->value.shape());
        for (int64_t t = 0; t < T; ++t)
            for (int64_t l = 0; l < L; ++l) dw[t * hop + l] += n.grad[t * L + l];
        add_grad(w, dw);
    });
}

// frames: [T, L] -> signal [N] by summing overlapping frames at stride `hop`,
// N = (T-1)*hop + L (transposed-convolution style overlap).
inline Var fold1d_sum(const Var& frames, int64_t hop) {
    ADCSS_CHECK_INPUT(frames->value.ndim() == 2, "fold1d_sum: need [T,L]");
    const int64_t T = frames->value.dim(0), L = frames->value.dim(1);
    const int64_t N = (T - 1) * hop + L;
    Tensor out({N});
    for (int64_t t = 0; t < T; ++t)
        for (int64_t l = 0; l < L; ++l) out[t * hop + l] += frames->value[t * L + l];
    return detail::make_node(std::move(out), {frames}, [frames, hop, T, L](Node& n) {
        Tensor df({T, L});
        for (int64_t t = 0; t < T; ++t)
            std::copy(n.grad.data() + t * hop, n.grad.data() + t * hop + L, df.data() + t * L);
        add_grad(frames, df);
    });
}

// ---- chunking ops ----------------------------------------------------------------------

struct ChunkDims {
    int64_t num_chunks; // S
    int64_t pad_len;    // zero frames appended before chunking
};

inline ChunkDims chunk_dims(int64_t T, int64_t K) {
    ADCSS_CHECK_CONFIG(K >= 2 && K % 2 == 0, "chunk: K must be even and >= 2");
    ADCSS_CHECK_INPUT(T >= 1, "chunk: empty sequence");
    const int64_t hop = K / 2;
    const int64_t S = T <= K ? 1 : (T - K + hop - 1) / hop + 1;
    const int64_t pad = (S - 1) * hop + K - T;
    return {S, pad};
}

// x: [T, D] -> [S, K, D], hop K/2, zero-padded tail.
inline Var chunk_seq(const Var& x, int64_t K) {
    ADCSS_CHECK_INPUT(x->value.ndim() == 2, "chunk_seq: need [T,D]");
    const int64_t T = x->value.dim(0), D = x->value.dim(1);
    const auto dims = chunk_dims(T, K);
    const int64_t hop = K / 2, S = dims.num_chunks;
    Tensor out({S, K, D});
    for (int64_t s = 0; s < S; ++s)
        for (int64_t k = 0; k < K; ++k) {
            const int64_t t = s * hop + k;
            if (t < T)
                std::copy(x->value.data() + t * D, x->value.data() + (t + 1) * D,
                          out.data() + (s * K + k) * D);
        }
    return detail::make_node(std::move(out), {x}, [x, K, hop, S, T, D](Node& n) {
        Tensor dx({T, D});
        for (int64_t s = 0; s < S; ++s)
            for (int64_t k = 0; k < K; ++k) {
                const int64_t t = s * hop + k;
                if (t >= T) continue;
                const double* src = n.grad.data() + (s * K + k) * D;
                double* dst = dx.data() + t * D;
                for (int64_t d = 0; d < D; ++d) dst[d] += src[d];
            }
        add_grad(x, dx);
    });
}

// ct: [S, K, D] -> [T, D]. Frames covered by multiple chunks are averaged;
// the zero padding recorded by chunk_seq is trimmed so the pair round-trips
// exactly.
inline Var overlap_add_seq(const Var& ct, int64_t T) {
    ADCSS_CHECK_INPUT(ct->value.ndim() == 3, "overlap_add_seq: need [S,K,D]");
    const int64_t S = ct->value.dim(0), K = ct->value.dim(1), D = ct->value.dim(2);
    const int64_t hop = K / 2;
    ADCSS_CHECK_INPUT(T >= 1 && T <= (S - 1) * hop + K, "overlap_add_seq: bad target length");
    auto coverage = std::make_shared<std::vector<double>>(static_cast<size_t>(T), 0.0);
    for (int64_t s = 0; s < S; ++s)
        for (int64_t k = 0; k < K; ++k) {
            const int64_t t = s * hop + k;
            if (t < T) (*coverage)[static_cast<size_t>(t)] += 1.0;
        }
    Tensor out({T, D});
    for (int64_t s = 0; s < S; ++s)
        for (int64_t k = 0; k < K; ++k) {
            const int64_t t = s * hop + k;
            if (t >= T) continue;
            const double* src = ct->value.data() + (s * K + k) * D;
            double* dst = out.data() + t * D;
            for (int64_t d = 0; d < D; ++d) dst[d] += src[d];
        }
    for (int64_t t = 0; t < T; ++t) {
        const double inv = 1.0 / (*coverage)[static_cast<size_t>(t)];
        double* row = out.data() + t * D;
        for (int64_t d = 0; d < D; ++d) row[d] *= inv;
    }
    return detail::make_node(std::move(out), {ct}, [ct, coverage, S, K, D, hop, T](Node& n) {
        Tensor dct({S, K, D});
        for (int64_t s = 0; s < S; ++s)
            for (int64_t k = 0; k < K; ++k) {
                const int64_t t = s * hop + k;
                if (t >= T) continue;
                const double inv = 1.0 / (*coverage)[static_cast<size_t>(t)];
                const double* src = n.grad.data() + t * D;
                double* dst = dct.data() + (s * K + k) * D;
                for (int64_t d = 0; d < D; ++d) dst[d] = src[d] * inv;
            }
        add_grad(ct, dct);
    });
}

// ---- small conveniences -----------------------------------------------------------------

// x: [..., Din] flattened to rows, times w [Din, Dout], plus bias [Dout].
inline Var affine(const Var& x, const Var& w, const Var& b) {
    const int64_t din = w->value.dim(0), dout = w->value.dim(1);
    Shape in_shape = x->value.shape();
    ADCSS_CHECK_INPUT(in_shape.back() == din, "affine: feature dim mismatch");
    const int64_t rows = x->value.numel() / din;
    Var flat = reshape(x, {rows, din});
    Var y = add(matmul(flat, w), b);
    Shape out_shape = in_shape;
    out_shape.back() = dout;
    return reshape(y, out_shape);
}

inline double scalar_value(const Var& v) {
    ADCSS_CHECK_INPUT(v->value.numel() == 1, "scalar_value: not a scalar");
    return v->value[0];
}

} // namespace adcss::ag
