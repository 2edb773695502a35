#pragma once

// Attractor module: source-level vectors decoded from the embedding sequence,
// existence probabilities for counting, frame-activity probabilities for
// diarization, and FiLM conditioning of the chunked features.

#include <string>
#include <vector>

#include "adcss/frontend.hpp"
#include "adcss/nn.hpp"

namespace adcss::attractor {

namespace ag = adcss::ag;
namespace fe = adcss::frontend;

struct AttractorSet {
    ag::Var vectors;   // [J+1, D]
    ag::Var existence; // [J+1] probabilities
};

struct RecurrentSummary {
    ag::Var h; // [1, D]
    ag::Var c; // [1, D]
};

// Recurrent head: BLSTM encoder summarizes the sequence; its reduced final
// state seeds a unidirectional decoder stepped on zero inputs, one attractor
// per step. With zero inputs the decoder's input path contributes only a
// bias, so no input weight matrix is kept.
struct RnnHead {
    int64_t dim = 0;
    nn::Blstm encoder;
    nn::Affine reduce_h, reduce_c; // 2D -> D
    ag::Var dec_wh;                // [D, 4D]
    ag::Var dec_b;                 // [4D]

    RnnHead() = default;
    RnnHead(nn::ParamRegistry& reg, const std::string& prefix, int64_t d, Rng& rng)
        : dim(d), encoder(reg, prefix + ".encoder", d, d, rng),
          reduce_h(reg, prefix + ".reduce_h", 2 * d, d, rng),
          reduce_c(reg, prefix + ".reduce_c", 2 * d, d, rng),
          dec_wh(reg.add(prefix + ".dec_wh", nn::init_weight(d, {d, 4 * d}, rng))) {
        Tensor bias = Tensor::zeros({4 * d});
        for (int64_t j = 0; j < d; ++j) bias[d + j] = 1.0;
        dec_b = reg.add(prefix + ".dec_b", std::move(bias));
    }

    RecurrentSummary summarize(const ag::Var& d_seq) const {
        auto s = encoder.summarize(ag::reshape(d_seq, {1, d_seq->value.dim(0), dim}));
        return {reduce_h(s.h), reduce_c(s.c)};
    }

    // d_seq: [T, D] -> [J+1, D] attractors.
    ag::Var generate(const ag::Var& d_seq, int64_t J) const {
        RecurrentSummary s = summarize(d_seq);
        ag::Var gx = ag::add(ag::constant(Tensor::zeros({J + 1, 1, 4 * dim})), dec_b);
        ag::Var hc = ag::lstm(gx, dec_wh, s.h, s.c);
        return ag::reshape(ag::slice(hc, 2, 0, dim), {J + 1, dim});
    }
};

// Query-based head: learned per-slot queries cross-attend to the embedding
// sequence through one pre-norm transformer block.
struct QueryHead {
    int64_t dim = 0;
    int64_t max_slots = 0;
    ag::Var queries; // [J_max + 1, D]
    nn::LayerNorm norm_q, norm_mem, norm_ff;
    nn::MultiHeadAttention cross;
    nn::Affine ff1, ff2;

    QueryHead() = default;
    QueryHead(nn::ParamRegistry& reg, const std::string& prefix, int64_t d, int64_t j_max,
              int64_t heads, int64_t ff_dim, Rng& rng)
        : dim(d), max_slots(j_max + 1),
          queries(reg.add(prefix + ".queries", Tensor::randn({j_max + 1, d}, rng))),
          norm_q(reg, prefix + ".norm_q", d), norm_mem(reg, prefix + ".norm_mem", d),
          norm_ff(reg, prefix + ".norm_ff", d), cross(reg, prefix + ".cross", d, heads, rng),
          ff1(reg, prefix + ".ff1", d, ff_dim, rng), ff2(reg, prefix + ".ff2", ff_dim, d, rng) {}

    ag::Var generate(const ag::Var& d_seq, int64_t J) const {
        ADCSS_CHECK_CONFIG(J + 1 <= max_slots,
                           "query attractor head: J exceeds the learned slot count");
        ag::Var q = ag::reshape(ag::slice(queries, 0, 0, J + 1), {1, J + 1, dim});
        ag::Var mem = ag::reshape(d_seq, {1, d_seq->value.dim(0), dim});
        ag::Var y = ag::add(q, cross(norm_q(q), norm_mem(mem)));
        y = ag::add(y, ff2(ag::relu(ff1(norm_ff(y)))));
        return ag::reshape(y, {J + 1, dim});
    }
};

enum class HeadStyle { rnn, transformer };

inline HeadStyle head_style_from_string(const std::string& s) {
    if (s == "rnn") return HeadStyle::rnn;
    if (s == "transformer") return HeadStyle::transformer;
    throw InvalidConfig("attractor_style must be 'rnn' or 'transformer', got '" + s + "'");
}

struct AttractorNet {
    HeadStyle style = HeadStyle::rnn;
    RnnHead rnn;
    QueryHead query;
    nn::Affine exist_head;  // D -> 1
    ag::Var diar_w, diar_b; // shared scalar affine on the inner products
    nn::Affine film_gamma, film_beta; // D -> D each

    AttractorNet() = default;
    AttractorNet(nn::ParamRegistry& reg, const std::string& prefix, int64_t d, int64_t j_max,
                 int64_t heads, int64_t ff_dim, HeadStyle s, Rng& rng)
        : style(s), exist_head(reg, prefix + ".exist", d, 1, rng),
          diar_w(reg.add(prefix + ".diar_w", Tensor::full({1}, 1.0))),
          diar_b(reg.add(prefix + ".diar_b", Tensor::zeros({1}))),
          film_gamma(reg, prefix + ".film_gamma", d, d, rng),
          film_beta(reg, prefix + ".film_beta", d, d, rng) {
        if (style == HeadStyle::rnn)
            rnn = RnnHead(reg, prefix + ".rnn", d, rng);
        else
            query = QueryHead(reg, prefix + ".query", d, j_max, heads, ff_dim, rng);
    }

    // d_seq: [T, D]; J sources plus the terminator slot.
    AttractorSet generate_attractors(const ag::Var& d_seq, int64_t J) const {
        ADCSS_CHECK_CONFIG(J >= 1, "generate_attractors: J must be >= 1");
        ADCSS_CHECK_INPUT(d_seq->value.dim(0) >= 1, "generate_attractors: empty sequence");
        ag::Var vectors = style == HeadStyle::rnn ? rnn.generate(d_seq, J)
                                                  : query.generate(d_seq, J);
        ag::Var q = ag::sigmoid(ag::reshape(exist_head(vectors), {J + 1}));
        return {vectors, q};
    }

    // First J attractors against every frame: probs[j][t] = sigmoid(w * (a_j . d_t) + b).
    ag::Var diarize(const AttractorSet& attr, const ag::Var& d_seq, int64_t J) const {
        ag::Var first = ag::slice(attr.vectors, 0, 0, J);
        ag::Var raw = ag::matmul(first, ag::permute(d_seq, {1, 0})); // [J, T]
        return ag::sigmoid(ag::add(ag::mul(raw, diar_w), diar_b));
    }

    // T_in[j] = gamma_j * D_out + beta_j, broadcast over chunks and positions.
    ag::Var film_condition(const fe::ChunkTensor& d_out, const AttractorSet& attr,
                           int64_t J) const {
        ADCSS_CHECK_INPUT(attr.vectors->value.dim(1) == d_out.feat_dim,
                          "film_condition: attractor dim does not match features");
        ag::Var first = ag::slice(attr.vectors, 0, 0, J);
        ag::Var gamma = ag::reshape(film_gamma(first), {J, 1, 1, d_out.feat_dim});
        ag::Var beta = ag::reshape(film_beta(first), {J, 1, 1, d_out.feat_dim});
        return ag::add(ag::mul(gamma, d_out.values), beta); // [J, S, K, D]
    }
};

// Prefix counting: the estimate is the length of the initial run of
// existence probabilities >= tau, looking at the first j_max slots only.
inline int64_t count_speakers(const Tensor& existence, double tau_exist, int64_t j_max) {
    ADCSS_CHECK_INPUT(existence.numel() == j_max + 1,
                      "count_speakers: expected J_max + 1 probabilities");
    ADCSS_CHECK_CONFIG(tau_exist > 0.0 && tau_exist < 1.0,
                       "count_speakers: tau_exist must lie in (0, 1)");
    int64_t c = 0;
    while (c < j_max && existence[c] >= tau_exist) ++c;
    return c;
}

// Elementwise threshold; probabilities exactly at tau count as active.
inline Tensor binarize(const Tensor& probs, double tau_diar) {
    ADCSS_CHECK_CONFIG(tau_diar > 0.0 && tau_diar < 1.0, "binarize: tau_diar must lie in (0, 1)");
    Tensor out(probs.shape());
    for (int64_t i = 0; i < probs.numel(); ++i) out[i] = probs[i] >= tau_diar ? 1.0 : 0.0;
    return out;
}

} // namespace adcss::attractor
