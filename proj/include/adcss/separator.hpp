#pragma once

// Triple-path separator: stacked intra-chunk / inter-chunk / inter-speaker
// modules over the [J, S, K, D] tensor, then projection back to the encoder
// feature width and per-speaker decoding.

#include <vector>

#include "adcss/frontend.hpp"
#include "adcss/nn.hpp"

namespace adcss::separator {

namespace ag = adcss::ag;
namespace fe = adcss::frontend;

// The intra and inter paths use transformer-LSTM blocks. The inter-speaker
// path must commute with reordering of the speaker axis, and a recurrence
// over that axis would not, so it uses an attention-only transformer block.
struct TriplePathModule {
    nn::TransformerLstmBlock intra, inter;
    nn::TransformerBlock speaker;

    TriplePathModule() = default;
    TriplePathModule(nn::ParamRegistry& reg, const std::string& prefix, int64_t d, int64_t heads,
                     int64_t ff_dim, Rng& rng)
        : intra(reg, prefix + ".intra", d, heads, rng),
          inter(reg, prefix + ".inter", d, heads, rng),
          speaker(reg, prefix + ".speaker", d, heads, ff_dim, rng) {}

    // x: [J, S, K, D] -> same shape.
    ag::Var operator()(const ag::Var& x) const {
        const int64_t J = x->value.dim(0), S = x->value.dim(1), K = x->value.dim(2),
                      D = x->value.dim(3);
        ag::Var y = ag::reshape(intra(ag::reshape(x, {J * S, K, D})), {J, S, K, D});
        y = ag::permute(y, {0, 2, 1, 3}); // [J, K, S, D]
        y = ag::reshape(inter(ag::reshape(y, {J * K, S, D})), {J, K, S, D});
        y = ag::permute(y, {0, 2, 1, 3}); // [J, S, K, D]
        y = ag::permute(y, {1, 2, 0, 3}); // [S, K, J, D]
        y = ag::reshape(speaker(ag::reshape(y, {S * K, J, D})), {S, K, J, D});
        return ag::permute(y, {2, 0, 1, 3});
    }
};

struct SeparatorNet {
    std::vector<TriplePathModule> modules;
    nn::Affine out_proj; // D -> F

    SeparatorNet() = default;
    SeparatorNet(nn::ParamRegistry& reg, const std::string& prefix, int64_t d, int64_t F,
                 int64_t n_triple, int64_t heads, int64_t ff_dim, Rng& rng)
        : out_proj(reg, prefix + ".out_proj", d, F, rng) {
        ADCSS_CHECK_CONFIG(n_triple >= 1, "separator: N_triple must be >= 1");
        for (int64_t i = 0; i < n_triple; ++i)
            modules.emplace_back(reg, prefix + ".triple" + std::to_string(i), d, heads, ff_dim,
                                 rng);
    }

    // t_in: [J, S, K, D] conditioned features; geometry carries the chunking
    // of the source sequence. Returns one waveform per speaker.
    std::vector<ag::Var> separate(const ag::Var& t_in, const fe::ChunkTensor& geometry,
                                  const fe::DecoderParams& decoder) const {
        ADCSS_CHECK_INPUT(t_in->value.ndim() == 4, "separate: need a [J,S,K,D] tensor");
        const int64_t J = t_in->value.dim(0), S = t_in->value.dim(1), K = t_in->value.dim(2),
                      D = t_in->value.dim(3);
        ADCSS_CHECK_INPUT(S == geometry.num_chunks && K == geometry.chunk_len &&
                              D == geometry.feat_dim,
                          "separate: tensor does not match the chunk geometry");
        ag::Var y = t_in;
        for (const TriplePathModule& m : modules) y = m(y);

        std::vector<ag::Var> waves;
        waves.reserve(static_cast<size_t>(J));
        for (int64_t j = 0; j < J; ++j) {
            fe::ChunkTensor slice_ct = geometry;
            slice_ct.values = ag::reshape(ag::slice(y, 0, j, 1), {S, K, D});
            ag::Var seq = fe::overlap_add(slice_ct);   // [T, D]
            ag::Var grid = out_proj(seq);              // [T, F]
            waves.push_back(fe::decode(grid, decoder));
        }
        return waves;
    }
};

} // namespace adcss::separator
