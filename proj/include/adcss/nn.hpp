#pragma once

// Shared neural building blocks: parameter registry, initializers, affine and
// layer-norm layers, multi-head attention, LSTM wrappers, and the two
// transformer block flavors used by the embedding and separator stacks.

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "adcss/autograd.hpp"
#include "adcss/rng.hpp"
#include "adcss/tensor.hpp"

namespace adcss::nn {

namespace ag = adcss::ag;

// ---- parameter registry ------------------------------------------------------

// Owns every trainable parameter under a stable hierarchical name. Insertion
// order is the canonical order for checkpoints and optimizer state.
class ParamRegistry {
  public:
    ag::Var add(const std::string& name, Tensor init) {
        ADCSS_CHECK_CONFIG(index_.find(name) == index_.end(),
                           "ParamRegistry: duplicate parameter " + name);
        ag::Var v = ag::param(std::move(init));
        index_[name] = items_.size();
        items_.emplace_back(name, v);
        return v;
    }

    const ag::Var& at(const std::string& name) const {
        auto it = index_.find(name);
        ADCSS_CHECK_INPUT(it != index_.end(), "ParamRegistry: unknown parameter " + name);
        return items_[it->second].second;
    }

    bool contains(const std::string& name) const { return index_.find(name) != index_.end(); }

    const std::vector<std::pair<std::string, ag::Var>>& items() const { return items_; }

    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& [name, v] : items_) n += v->value.numel();
        return n;
    }

  private:
    std::vector<std::pair<std::string, ag::Var>> items_;
    std::unordered_map<std::string, size_t> index_;
};

// Scaled-Gaussian initialization: stddev 1/sqrt(fan_in).
inline Tensor init_weight(int64_t fan_in, Shape shape, Rng& rng) {
    return Tensor::randn(std::move(shape), rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

// ---- basic layers --------------------------------------------------------------

struct Affine {
    ag::Var w; // [din, dout]
    ag::Var b; // [dout]

    Affine() = default;
    Affine(ParamRegistry& reg, const std::string& prefix, int64_t din, int64_t dout, Rng& rng)
        : w(reg.add(prefix + ".w", init_weight(din, {din, dout}, rng))),
          b(reg.add(prefix + ".b", Tensor::zeros({dout}))) {}

    ag::Var operator()(const ag::Var& x) const { return ag::affine(x, w, b); }
};

struct LayerNorm {
    ag::Var gamma;
    ag::Var beta;

    LayerNorm() = default;
    LayerNorm(ParamRegistry& reg, const std::string& prefix, int64_t d)
        : gamma(reg.add(prefix + ".gamma", Tensor::full({d}, 1.0))),
          beta(reg.add(prefix + ".beta", Tensor::zeros({d}))) {}

    ag::Var operator()(const ag::Var& x) const { return ag::layer_norm(x, gamma, beta); }
};

// ---- multi-head attention -------------------------------------------------------

// Self- or cross-attention over [B, N, D] with num_heads heads of width
// D / num_heads each.
struct MultiHeadAttention {
    int64_t dim = 0;
    int64_t num_heads = 0;
    Affine wq, wk, wv, wo;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamRegistry& reg, const std::string& prefix, int64_t d, int64_t heads,
                       Rng& rng)
        : dim(d), num_heads(heads), wq(reg, prefix + ".wq", d, d, rng),
          wk(reg, prefix + ".wk", d, d, rng), wv(reg, prefix + ".wv", d, d, rng),
          wo(reg, prefix + ".wo", d, d, rng) {
        ADCSS_CHECK_CONFIG(heads >= 1 && d % heads == 0,
                           "attention: dim must be divisible by num_heads");
    }

    // query: [B, Nq, D]; memory: [B, Nk, D].
    ag::Var operator()(const ag::Var& query, const ag::Var& memory) const {
        const int64_t B = query->value.dim(0), Nq = query->value.dim(1);
        const int64_t Nk = memory->value.dim(1);
        const int64_t h = num_heads, dh = dim / num_heads;

        auto split_heads = [&](const ag::Var& x, int64_t N) {
            // [B, N, D] -> [B*h, N, dh]
            return ag::reshape(ag::permute(ag::reshape(x, {B, N, h, dh}), {0, 2, 1, 3}),
                               {B * h, N, dh});
        };
        ag::Var q = split_heads(wq(query), Nq);
        ag::Var k = split_heads(wk(memory), Nk);
        ag::Var v = split_heads(wv(memory), Nk);

        ag::Var scores = ag::mul_scalar(ag::bmm(q, ag::transpose_last2(k)),
                                        1.0 / std::sqrt(static_cast<double>(dh)));
        ag::Var attn = ag::softmax_lastdim(scores);
        ag::Var ctx = ag::bmm(attn, v); // [B*h, Nq, dh]
        ctx = ag::reshape(ag::permute(ag::reshape(ctx, {B, h, Nq, dh}), {0, 2, 1, 3}),
                          {B, Nq, dim});
        return wo(ctx);
    }

    ag::Var operator()(const ag::Var& x) const { return (*this)(x, x); }
};

// ---- recurrent wrappers -----------------------------------------------------------

// Unidirectional LSTM over [B, N, D] with hidden width H; returns per-step
// hidden states [B, N, H]. Gate layout i, f, g, o; forget-gate bias starts at 1.
struct Lstm {
    int64_t hidden = 0;
    ag::Var wx; // [D, 4H]
    ag::Var wh; // [H, 4H]
    ag::Var b;  // [4H]

    Lstm() = default;
    Lstm(ParamRegistry& reg, const std::string& prefix, int64_t din, int64_t h, Rng& rng)
        : hidden(h), wx(reg.add(prefix + ".wx", init_weight(din, {din, 4 * h}, rng))),
          wh(reg.add(prefix + ".wh", init_weight(h, {h, 4 * h}, rng))) {
        Tensor bias = Tensor::zeros({4 * h});
        for (int64_t j = 0; j < h; ++j) bias[h + j] = 1.0;
        b = reg.add(prefix + ".b", std::move(bias));
    }

    // Returns [N, B, 2H] (h and c stacked on the feature axis), time-major.
    ag::Var run_time_major(const ag::Var& x_tm) const {
        const int64_t N = x_tm->value.dim(0), B = x_tm->value.dim(1);
        ag::Var gx = ag::affine(x_tm, wx, b);
        ag::Var h0 = ag::constant(Tensor::zeros({B, hidden}));
        ag::Var c0 = ag::constant(Tensor::zeros({B, hidden}));
        (void)N;
        return ag::lstm(gx, wh, h0, c0);
    }

    // x: [B, N, D] -> hidden states [B, N, H].
    ag::Var operator()(const ag::Var& x) const {
        ag::Var hc = run_time_major(ag::permute(x, {1, 0, 2}));
        ag::Var h = ag::slice(hc, 2, 0, hidden);
        return ag::permute(h, {1, 0, 2});
    }
};

// Bidirectional LSTM over [B, N, D]; concatenates the two directions into
// [B, N, 2H].
struct Blstm {
    Lstm fwd, bwd;

    Blstm() = default;
    Blstm(ParamRegistry& reg, const std::string& prefix, int64_t din, int64_t h, Rng& rng)
        : fwd(reg, prefix + ".fwd", din, h, rng), bwd(reg, prefix + ".bwd", din, h, rng) {}

    ag::Var operator()(const ag::Var& x) const {
        ag::Var f = fwd(x);
        ag::Var b = bwd(ag::reverse_axis(x, 1));
        return ag::concat({f, ag::reverse_axis(b, 1)}, 2);
    }

    // Final states of both directions: h [B, 2H], c [B, 2H]. The backward
    // direction's final state summarizes the sequence read right to left.
    struct Summary {
        ag::Var h;
        ag::Var c;
    };

    Summary summarize(const ag::Var& x) const {
        const int64_t N = x->value.dim(1);
        ag::Var hc_f = fwd.run_time_major(ag::permute(x, {1, 0, 2}));
        ag::Var hc_b = bwd.run_time_major(ag::permute(ag::reverse_axis(x, 1), {1, 0, 2}));
        auto last = [N](const ag::Var& hc) { return ag::reshape(ag::slice(hc, 0, N - 1, 1),
                                                                {hc->value.dim(1), hc->value.dim(2)}); };
        ag::Var last_f = last(hc_f); // [B, 2H]
        ag::Var last_b = last(hc_b);
        const int64_t H = fwd.hidden;
        ag::Var h = ag::concat({ag::slice(last_f, 1, 0, H), ag::slice(last_b, 1, 0, H)}, 1);
        ag::Var c = ag::concat({ag::slice(last_f, 1, H, H), ag::slice(last_b, 1, H, H)}, 1);
        return {h, c};
    }
};

// ---- transformer blocks -------------------------------------------------------------

// Pre-norm self-attention + pre-norm feed-forward, both residual.
struct TransformerBlock {
    LayerNorm norm_attn, norm_ff;
    MultiHeadAttention attn;
    Affine ff1, ff2;

    TransformerBlock() = default;
    TransformerBlock(ParamRegistry& reg, const std::string& prefix, int64_t d, int64_t heads,
                     int64_t ff_dim, Rng& rng)
        : norm_attn(reg, prefix + ".norm_attn", d), norm_ff(reg, prefix + ".norm_ff", d),
          attn(reg, prefix + ".attn", d, heads, rng), ff1(reg, prefix + ".ff1", d, ff_dim, rng),
          ff2(reg, prefix + ".ff2", ff_dim, d, rng) {}

    ag::Var operator()(const ag::Var& x) const {
        ag::Var y = ag::add(x, attn(norm_attn(x)));
        return ag::add(y, ff2(ag::relu(ff1(norm_ff(y)))));
    }
};

// Pre-norm self-attention + pre-norm bidirectional LSTM (reduced 2H -> D),
// both residual.
struct TransformerLstmBlock {
    LayerNorm norm_attn, norm_rnn;
    MultiHeadAttention attn;
    Blstm rnn;
    Affine reduce;

    TransformerLstmBlock() = default;
    TransformerLstmBlock(ParamRegistry& reg, const std::string& prefix, int64_t d, int64_t heads,
                         Rng& rng)
        : norm_attn(reg, prefix + ".norm_attn", d), norm_rnn(reg, prefix + ".norm_rnn", d),
          attn(reg, prefix + ".attn", d, heads, rng), rnn(reg, prefix + ".rnn", d, d, rng),
          reduce(reg, prefix + ".reduce", 2 * d, d, rng) {}

    ag::Var operator()(const ag::Var& x) const {
        ag::Var y = ag::add(x, attn(norm_attn(x)));
        return ag::add(y, reduce(rnn(norm_rnn(y))));
    }
};

// Sinusoidal positional encoding table for positions [0, n) at width d.
inline Tensor sinusoidal_positions(int64_t n, int64_t d) {
    Tensor pe({n, d});
    for (int64_t t = 0; t < n; ++t)
        for (int64_t i = 0; i < d; ++i) {
            const double rate = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) /
                                                      static_cast<double>(d));
            pe[t * d + i] = (i % 2 == 0) ? std::sin(static_cast<double>(t) * rate)
                                         : std::cos(static_cast<double>(t) * rate);
        }
    return pe;
}

} // namespace adcss::nn
