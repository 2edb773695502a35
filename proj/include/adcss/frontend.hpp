#pragma once

// Waveform <-> latent conversions: learned conv encoder/decoder plus the
// deterministic chunk / overlap-add pair shared by every downstream stage.

#include <vector>

#include "adcss/nn.hpp"
#include "adcss/wav.hpp"

namespace adcss::frontend {

namespace ag = adcss::ag;
using wavio::Waveform;

// Encoded T x F grid with its framing geometry.
struct FeatureMap {
    ag::Var values; // [T, F]
    int64_t frame_len = 0;
    int64_t frame_hop = 0;

    int64_t frames() const { return values->value.dim(0); }
    int64_t feat_dim() const { return values->value.dim(1); }
};

// Chunked sequence, stored chunk-major as [S, K, D]; pad_len zero frames were
// appended before chunking so overlap_add can trim back to exactly seq_len.
struct ChunkTensor {
    ag::Var values; // [S, K, D]
    int64_t chunk_len = 0;
    int64_t num_chunks = 0;
    int64_t feat_dim = 0;
    int64_t pad_len = 0;
    int64_t seq_len = 0;
};

struct EncoderParams {
    int64_t frame_len = 0;
    ag::Var weight; // [L, F]
    ag::Var bias;   // [F]

    EncoderParams() = default;
    EncoderParams(nn::ParamRegistry& reg, const std::string& prefix, int64_t L, int64_t F,
                  Rng& rng)
        : frame_len(L), weight(reg.add(prefix + ".weight", nn::init_weight(L, {L, F}, rng))),
          bias(reg.add(prefix + ".bias", Tensor::zeros({F}))) {}
};

struct DecoderParams {
    int64_t frame_len = 0;
    ag::Var weight; // [F, L]
    ag::Var bias;   // [1], added to every output sample

    DecoderParams() = default;
    DecoderParams(nn::ParamRegistry& reg, const std::string& prefix, int64_t F, int64_t L,
                  Rng& rng)
        : frame_len(L), weight(reg.add(prefix + ".weight", nn::init_weight(F, {F, L}, rng))),
          bias(reg.add(prefix + ".bias", Tensor::zeros({1}))) {}
};

inline int64_t encoded_frames(int64_t num_samples, int64_t L) {
    ADCSS_CHECK_INPUT(num_samples >= L, "encode: input shorter than one frame");
    return (num_samples - L) / (L / 2) + 1;
}

inline int64_t decoded_samples(int64_t frames, int64_t L) { return (frames - 1) * (L / 2) + L; }

// Strided conv (kernel L, stride L/2, F output channels) with ReLU.
inline FeatureMap encode(const Waveform& w, const EncoderParams& params) {
    const int64_t L = params.frame_len;
    ADCSS_CHECK_CONFIG(L >= 2 && L % 2 == 0, "encode: frame length must be even and >= 2");
    ADCSS_CHECK_INPUT(static_cast<int64_t>(w.samples.size()) >= L,
                      "encode: input shorter than one frame");
    ag::Var x = ag::constant(
        Tensor::from_vector(w.samples, {static_cast<int64_t>(w.samples.size())}));
    ag::Var frames = ag::unfold1d(x, L, L / 2);
    ag::Var y = ag::relu(ag::add(ag::matmul(frames, params.weight), params.bias));
    return {y, L, L / 2};
}

// Transposed conv back to the time domain; raw amplitudes, no nonlinearity.
// Accepts any T x F grid so separator outputs can be decoded directly.
inline ag::Var decode(const ag::Var& grid, const DecoderParams& params) {
    ADCSS_CHECK_INPUT(grid->value.ndim() == 2, "decode: need a [T,F] grid");
    ADCSS_CHECK_INPUT(grid->value.dim(1) == params.weight->value.dim(0),
                      "decode: feature dim does not match decoder weights");
    ag::Var frames = ag::matmul(grid, params.weight);
    return ag::add(ag::fold1d_sum(frames, params.frame_len / 2), params.bias);
}

inline ChunkTensor chunk(const ag::Var& seq, int64_t K) {
    ADCSS_CHECK_INPUT(seq->value.ndim() == 2, "chunk: need a [T,D] grid");
    const int64_t T = seq->value.dim(0), D = seq->value.dim(1);
    const auto dims = ag::chunk_dims(T, K);
    return {ag::chunk_seq(seq, K), K, dims.num_chunks, D, dims.pad_len, T};
}

inline ag::Var overlap_add(const ChunkTensor& ct) {
    return ag::overlap_add_seq(ct.values, ct.seq_len);
}

} // namespace adcss::frontend
