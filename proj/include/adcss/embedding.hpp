#pragma once

// Dual-path embedding: per-frame projection into the model width, chunking,
// stacked intra-/inter-chunk transformer modules, and the overlap-added
// sequence consumed by the attractor module.

#include <vector>

#include "adcss/frontend.hpp"
#include "adcss/nn.hpp"

namespace adcss::embed {

namespace ag = adcss::ag;
namespace fe = adcss::frontend;

struct DualPathConfig {
    int64_t depth_dual = 2;
    int64_t num_heads = 4;
    int64_t ff_dim = 0; // 0 means 4 * D
    int64_t K = 96;
    bool pos_enc = true;
};

// One dual-path module: an intra-chunk transformer block over the K axis,
// then an inter-chunk block over the S axis.
struct DualPathModule {
    nn::TransformerBlock intra, inter;

    DualPathModule() = default;
    DualPathModule(nn::ParamRegistry& reg, const std::string& prefix, int64_t d, int64_t heads,
                   int64_t ff_dim, Rng& rng)
        : intra(reg, prefix + ".intra", d, heads, ff_dim, rng),
          inter(reg, prefix + ".inter", d, heads, ff_dim, rng) {}

    // values: [S, K, D] -> same shape.
    ag::Var operator()(const ag::Var& values) const {
        const int64_t S = values->value.dim(0), K = values->value.dim(1),
                      D = values->value.dim(2);
        ag::Var x = intra(values); // chunks are the batch, K is the length
        x = ag::permute(x, {1, 0, 2});
        x = inter(x); // positions are the batch, S is the length
        x = ag::permute(x, {1, 0, 2});
        ADCSS_CHECK_INPUT(x->value.shape() == Shape({S, K, D}),
                          "dual-path module changed its shape");
        return x;
    }
};

struct EmbeddingNet {
    DualPathConfig cfg;
    nn::Affine proj; // F -> D
    std::vector<DualPathModule> modules;

    EmbeddingNet() = default;
    EmbeddingNet(nn::ParamRegistry& reg, const std::string& prefix, int64_t F, int64_t D,
                 DualPathConfig config, Rng& rng)
        : cfg(config), proj(reg, prefix + ".proj", F, D, rng) {
        ADCSS_CHECK_CONFIG(cfg.depth_dual >= 1, "embedding: depth_dual must be >= 1");
        if (cfg.ff_dim == 0) cfg.ff_dim = 4 * D;
        for (int64_t i = 0; i < cfg.depth_dual; ++i)
            modules.emplace_back(reg, prefix + ".dual" + std::to_string(i), D, cfg.num_heads,
                                 cfg.ff_dim, rng);
    }

    ag::Var project(const fe::FeatureMap& fm) const { return proj(fm.values); }

    struct Output {
        fe::ChunkTensor d_out;  // [S, K, D] for FiLM fusion
        ag::Var d;              // [T, D] sequence for the attractor module
    };

    Output embed(const fe::FeatureMap& fm) const {
        ag::Var seq = project(fm);
        if (cfg.pos_enc) {
            seq = ag::add(seq, ag::constant(nn::sinusoidal_positions(seq->value.dim(0),
                                                                     seq->value.dim(1))));
        }
        fe::ChunkTensor ct = fe::chunk(seq, cfg.K);
        for (const DualPathModule& m : modules) ct.values = m(ct.values);
        return {ct, fe::overlap_add(ct)};
    }
};

} // namespace adcss::embed
