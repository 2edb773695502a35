#include <catch2/catch_amalgamated.hpp>

#include "adcss/nn.hpp"
#include "test_support.hpp"

using adcss::Rng;
using adcss::Shape;
using adcss::Tensor;
namespace ag = adcss::ag;
namespace nn = adcss::nn;

TEST_CASE("registry keeps insertion order and rejects duplicates") {
    nn::ParamRegistry reg;
    Rng rng(50);
    nn::Affine a(reg, "layer0", 3, 4, rng);
    nn::LayerNorm ln(reg, "layer1", 4);
    REQUIRE(reg.items().size() == 4);
    CHECK(reg.items()[0].first == "layer0.w");
    CHECK(reg.items()[1].first == "layer0.b");
    CHECK(reg.items()[2].first == "layer1.gamma");
    CHECK(reg.at("layer1.beta")->value.numel() == 4);
    CHECK(reg.total_size() == 3 * 4 + 4 + 4 + 4);
    CHECK_THROWS_AS(reg.add("layer0.w", Tensor::zeros({1})), adcss::InvalidConfig);
    CHECK_THROWS_AS(reg.at("missing"), adcss::InvalidInput);
}

TEST_CASE("attention over a single token is its value-output path") {
    nn::ParamRegistry reg;
    Rng rng(51);
    nn::MultiHeadAttention mha(reg, "attn", 6, 2, rng);
    auto x = ag::constant(Tensor::randn({1, 1, 6}, rng));
    ag::Var y = mha(x);
    // With one key the attention weights are 1, so the context is just the
    // value projection; the output is wo(wv(x)).
    ag::Var expect = mha.wo(mha.wv(x));
    REQUIRE(y->value.shape() == Shape({1, 1, 6}));
    for (int64_t i = 0; i < 6; ++i)
        CHECK(y->value[i] == Catch::Approx(expect->value[i]).margin(1e-12));
}

TEST_CASE("attention rejects head mismatch") {
    nn::ParamRegistry reg;
    Rng rng(52);
    CHECK_THROWS_AS(nn::MultiHeadAttention(reg, "attn", 6, 4, rng), adcss::InvalidConfig);
}

TEST_CASE("attention gradients match finite differences") {
    nn::ParamRegistry reg;
    Rng rng(53);
    nn::MultiHeadAttention mha(reg, "attn", 4, 2, rng);
    auto x = ag::param(Tensor::randn({2, 3, 4}, rng));
    std::vector<ag::Var> leaves = {x, mha.wq.w, mha.wk.w, mha.wv.w, mha.wo.w, mha.wq.b, mha.wo.b};
    auto rep = testsup::fd_compare(leaves, [&] { return ag::sum_all(ag::square(mha(x))); }, 10);
    CHECK(rep.max_rel < 1e-5);
}

TEST_CASE("attention is equivariant to token order") {
    nn::ParamRegistry reg;
    Rng rng(54);
    nn::MultiHeadAttention mha(reg, "attn", 6, 3, rng);
    Tensor x = Tensor::randn({1, 4, 6}, rng);
    Tensor xp({1, 4, 6});
    const int64_t perm[4] = {2, 0, 3, 1};
    for (int64_t t = 0; t < 4; ++t)
        for (int64_t d = 0; d < 6; ++d) xp.at({0, t, d}) = x.at({0, perm[t], d});
    ag::Var y = mha(ag::constant(x));
    ag::Var yp = mha(ag::constant(xp));
    for (int64_t t = 0; t < 4; ++t)
        for (int64_t d = 0; d < 6; ++d)
            CHECK(yp->value.at({0, t, d}) ==
                  Catch::Approx(y->value.at({0, perm[t], d})).margin(1e-10));
}

TEST_CASE("transformer block is the identity when residual branches are zeroed") {
    nn::ParamRegistry reg;
    Rng rng(55);
    nn::TransformerBlock block(reg, "blk", 8, 2, 16, rng);
    block.attn.wo.w->value.fill(0.0);
    block.attn.wo.b->value.fill(0.0);
    block.ff2.w->value.fill(0.0);
    block.ff2.b->value.fill(0.0);
    auto x = ag::constant(Tensor::randn({2, 5, 8}, rng));
    ag::Var y = block(x);
    for (int64_t i = 0; i < x->value.numel(); ++i) CHECK(y->value[i] == x->value[i]);
}

TEST_CASE("transformer-lstm block is the identity when residual branches are zeroed") {
    nn::ParamRegistry reg;
    Rng rng(56);
    nn::TransformerLstmBlock block(reg, "blk", 6, 2, rng);
    block.attn.wo.w->value.fill(0.0);
    block.attn.wo.b->value.fill(0.0);
    block.reduce.w->value.fill(0.0);
    block.reduce.b->value.fill(0.0);
    auto x = ag::constant(Tensor::randn({3, 4, 6}, rng));
    ag::Var y = block(x);
    for (int64_t i = 0; i < x->value.numel(); ++i) CHECK(y->value[i] == x->value[i]);
}

TEST_CASE("transformer-lstm block keeps shape and differentiates") {
    nn::ParamRegistry reg;
    Rng rng(57);
    nn::TransformerLstmBlock block(reg, "blk", 4, 2, rng);
    auto x = ag::param(Tensor::randn({2, 5, 4}, rng, 0.5));
    ag::Var y = block(x);
    REQUIRE(y->value.shape() == x->value.shape());
    std::vector<ag::Var> leaves = {x, block.rnn.fwd.wx, block.rnn.bwd.wh, block.reduce.w,
                                   block.norm_rnn.gamma};
    auto rep = testsup::fd_compare(leaves, [&] { return ag::sum_all(ag::square(block(x))); }, 8);
    CHECK(rep.max_rel < 1e-5);
}

TEST_CASE("blstm output stacks both directions") {
    nn::ParamRegistry reg;
    Rng rng(58);
    nn::Blstm rnn(reg, "rnn", 3, 5, rng);
    auto x = ag::constant(Tensor::randn({2, 7, 3}, rng));
    ag::Var y = rnn(x);
    REQUIRE(y->value.shape() == Shape({2, 7, 10}));

    // Forward half equals the unidirectional run.
    ag::Var f = rnn.fwd(x);
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t t = 0; t < 7; ++t)
            for (int64_t j = 0; j < 5; ++j)
                CHECK(y->value.at({b, t, j}) == f->value.at({b, t, j}));
}

TEST_CASE("blstm summary exposes the final states of both directions") {
    nn::ParamRegistry reg;
    Rng rng(59);
    nn::Blstm rnn(reg, "rnn", 3, 4, rng);
    auto x = ag::constant(Tensor::randn({2, 6, 3}, rng));
    auto summary = rnn.summarize(x);
    REQUIRE(summary.h->value.shape() == Shape({2, 8}));
    REQUIRE(summary.c->value.shape() == Shape({2, 8}));

    ag::Var seq = rnn(x);
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t j = 0; j < 4; ++j) {
            CHECK(summary.h->value.at({b, j}) == seq->value.at({b, 5, j}));      // fwd at last step
            CHECK(summary.h->value.at({b, 4 + j}) == seq->value.at({b, 0, 4 + j})); // bwd at first
        }
}

TEST_CASE("time reversal swaps the direction summaries when weights are shared") {
    nn::ParamRegistry reg;
    Rng rng(60);
    nn::Blstm rnn(reg, "rnn", 2, 3, rng);
    rnn.bwd.wx->value = rnn.fwd.wx->value;
    rnn.bwd.wh->value = rnn.fwd.wh->value;
    rnn.bwd.b->value = rnn.fwd.b->value;
    auto x = ag::constant(Tensor::randn({1, 2, 2}, rng));
    auto fwd_summary = rnn.summarize(x);
    auto rev_summary = rnn.summarize(ag::reverse_axis(x, 1));
    for (int64_t j = 0; j < 3; ++j) {
        CHECK(rev_summary.h->value.at({0, j}) ==
              Catch::Approx(fwd_summary.h->value.at({0, 3 + j})).margin(1e-12));
        CHECK(rev_summary.h->value.at({0, 3 + j}) ==
              Catch::Approx(fwd_summary.h->value.at({0, j})).margin(1e-12));
        CHECK(rev_summary.c->value.at({0, j}) ==
              Catch::Approx(fwd_summary.c->value.at({0, 3 + j})).margin(1e-12));
    }
}

TEST_CASE("sinusoidal table starts at sin(0), cos(0) and stays bounded") {
    Tensor pe = nn::sinusoidal_positions(10, 6);
    CHECK(pe.at({0, 0}) == 0.0);
    CHECK(pe.at({0, 1}) == 1.0);
    CHECK(pe.at({0, 4}) == 0.0);
    for (int64_t i = 0; i < pe.numel(); ++i) {
        CHECK(pe[i] <= 1.0);
        CHECK(pe[i] >= -1.0);
    }
    CHECK(pe.at({3, 0}) == Catch::Approx(std::sin(3.0)));
}
