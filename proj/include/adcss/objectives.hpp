#pragma once

// Training objectives: scale-invariant SDR with permutation-invariant
// matching, frame-activity cross entropy, attractor-existence cross entropy,
// and their weighted combination.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "adcss/autograd.hpp"

namespace adcss::objectives {

namespace ag = adcss::ag;

inline constexpr double kSiSdrClampDb = 30.0;
inline constexpr double kBceEps = 1e-7;

struct LossWeights {
    double lambda_s = 0.8;
    double lambda_d = 0.1;
    double lambda_e = 0.1;

    void validate() const {
        ADCSS_CHECK_CONFIG(lambda_s >= 0.0 && lambda_d >= 0.0 && lambda_e >= 0.0,
                           "loss weights must be nonnegative");
        ADCSS_CHECK_CONFIG(lambda_s + lambda_d + lambda_e > 0.0,
                           "loss weights must not all be zero");
    }
};

struct PermutationAssignment {
    std::vector<int> mapping; // mapping[c] = estimate index assigned to reference c
    double cost = 0.0;        // summed pairwise score under the mapping
};

namespace detail {

inline std::vector<std::vector<int>> permutations(int n) {
    std::vector<int> p(static_cast<size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    std::vector<std::vector<int>> out;
    do {
        out.push_back(p);
    } while (std::next_permutation(p.begin(), p.end()));
    return out;
}

} // namespace detail

// Plain-arithmetic SI-SDR in dB. Both signals are mean-subtracted; the result
// is clamped to +-30 dB. A reference (or estimate) with zero energy cannot be
// scored and returns the floor; `degenerate` reports the reference case.
inline double si_sdr_db(const std::vector<double>& est, const std::vector<double>& ref,
                        bool* degenerate = nullptr) {
    ADCSS_CHECK_INPUT(est.size() == ref.size() && !ref.empty(),
                      "si_sdr: signals must have equal nonzero length");
    if (degenerate != nullptr) *degenerate = false;
    const double n = static_cast<double>(ref.size());
    double me = 0.0, mr = 0.0;
    for (size_t i = 0; i < ref.size(); ++i) {
        me += est[i];
        mr += ref[i];
    }
    me /= n;
    mr /= n;
    double dot = 0.0, rr = 0.0, ee = 0.0;
    for (size_t i = 0; i < ref.size(); ++i) {
        const double e0 = est[i] - me, r0 = ref[i] - mr;
        dot += e0 * r0;
        rr += r0 * r0;
        ee += e0 * e0;
    }
    if (rr <= 0.0) {
        if (degenerate != nullptr) *degenerate = true;
        return -kSiSdrClampDb;
    }
    if (ee <= 0.0) return -kSiSdrClampDb;
    const double alpha = dot / rr;
    double sig = 0.0, err = 0.0;
    for (size_t i = 0; i < ref.size(); ++i) {
        const double t = alpha * (ref[i] - mr);
        sig += t * t;
        const double e = t - (est[i] - me);
        err += e * e;
    }
    const double db = 10.0 * std::log10((sig + 1e-30) / (err + 1e-30));
    return std::clamp(db, -kSiSdrClampDb, kSiSdrClampDb);
}

// Differentiable SI-SDR of an estimate against a fixed reference.
inline ag::Var si_sdr(const ag::Var& est, const std::vector<double>& ref) {
    ADCSS_CHECK_INPUT(est->value.ndim() == 1 &&
                          est->value.numel() == static_cast<int64_t>(ref.size()),
                      "si_sdr: estimate and reference lengths differ");
    const int64_t n = est->value.numel();
    double mr = 0.0;
    for (double v : ref) mr += v;
    mr /= static_cast<double>(n);
    Tensor ref0({n});
    double rr = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        ref0[i] = ref[static_cast<size_t>(i)] - mr;
        rr += ref0[i] * ref0[i];
    }
    if (rr <= 0.0) return ag::constant(Tensor::scalar(-kSiSdrClampDb));

    ag::Var mean = ag::mul_scalar(ag::sum_all(est), 1.0 / static_cast<double>(n));
    ag::Var est0 = ag::sub(est, mean);
    ag::Var r0 = ag::constant(std::move(ref0));
    ag::Var alpha = ag::mul_scalar(ag::sum_all(ag::mul(est0, r0)), 1.0 / rr);
    ag::Var target = ag::mul(alpha, r0);
    ag::Var sig = ag::sum_all(ag::square(target));
    ag::Var err = ag::sum_all(ag::square(ag::sub(target, est0)));
    ag::Var ratio = ag::div(ag::add_scalar(sig, 1e-30), ag::add_scalar(err, 1e-30));
    ag::Var db = ag::mul_scalar(ag::log_(ratio), 10.0 / std::log(10.0));
    return ag::clamp(db, -kSiSdrClampDb, kSiSdrClampDb);
}

// Negative mean SI-SDR under the best channel assignment, searched
// exhaustively. Ties resolve to the lexicographically smallest permutation.
inline std::pair<ag::Var, PermutationAssignment> pit_si_sdr_loss(
    const std::vector<ag::Var>& ests, const std::vector<std::vector<double>>& refs) {
    const int C = static_cast<int>(refs.size());
    ADCSS_CHECK_INPUT(static_cast<int>(ests.size()) == C, "pit_si_sdr_loss: channel count mismatch");
    ADCSS_CHECK_INPUT(C >= 1 && C <= 5, "pit_si_sdr_loss: channel count outside {1..5}");

    std::vector<std::vector<ag::Var>> score(static_cast<size_t>(C));
    for (int i = 0; i < C; ++i)
        for (int j = 0; j < C; ++j)
            score[static_cast<size_t>(i)].push_back(
                si_sdr(ests[static_cast<size_t>(i)], refs[static_cast<size_t>(j)]));

    PermutationAssignment best;
    best.cost = -std::numeric_limits<double>::infinity();
    for (const auto& perm : detail::permutations(C)) {
        double s = 0.0;
        for (int c = 0; c < C; ++c)
            s += ag::scalar_value(score[static_cast<size_t>(perm[static_cast<size_t>(c)])]
                                       [static_cast<size_t>(c)]);
        if (s > best.cost) {
            best.cost = s;
            best.mapping = perm;
        }
    }
    std::vector<ag::Var> picked;
    for (int c = 0; c < C; ++c)
        picked.push_back(score[static_cast<size_t>(best.mapping[static_cast<size_t>(c)])]
                              [static_cast<size_t>(c)]);
    ag::Var sum = picked[0];
    for (size_t i = 1; i < picked.size(); ++i) sum = ag::add(sum, picked[i]);
    return {ag::mul_scalar(sum, -1.0 / static_cast<double>(C)), best};
}

namespace detail {

// Pairwise summed BCE between every estimated activity row and every
// reference row: bce[j][c] = sum_t BCE(ref[c,t], probs[j,t]).
inline ag::Var bce_row_matrix(const ag::Var& probs, const Tensor& ref) {
    const int64_t J = probs->value.dim(0), T = probs->value.dim(1);
    ag::Var p = ag::clamp(probs, kBceEps, 1.0 - kBceEps);
    ag::Var log_p = ag::log_(p);
    ag::Var log_1p = ag::log_(ag::sub(ag::constant(Tensor::full({J, T}, 1.0)), p));
    Tensor ref_t({T, ref.dim(0)}), ref_not_t({T, ref.dim(0)});
    for (int64_t c = 0; c < ref.dim(0); ++c)
        for (int64_t t = 0; t < T; ++t) {
            ref_t.at({t, c}) = ref.at({c, t});
            ref_not_t.at({t, c}) = 1.0 - ref.at({c, t});
        }
    ag::Var pos = ag::matmul(log_p, ag::constant(std::move(ref_t)));
    ag::Var neg = ag::matmul(log_1p, ag::constant(std::move(ref_not_t)));
    return ag::neg(ag::add(pos, neg)); // [J estimates, C references]
}

} // namespace detail

// Permutation-minimal frame-activity BCE, averaged per frame and speaker.
inline std::pair<ag::Var, PermutationAssignment> pit_diar_loss(const ag::Var& probs,
                                                               const Tensor& ref) {
    ADCSS_CHECK_INPUT(probs->value.ndim() == 2 && probs->value.shape() == ref.shape(),
                      "pit_diar_loss: activity shapes differ");
    const int J = static_cast<int>(ref.dim(0));
    const int64_t T = ref.dim(1);
    ADCSS_CHECK_INPUT(J >= 1 && J <= 5, "pit_diar_loss: speaker count outside {1..5}");

    ag::Var bce = detail::bce_row_matrix(probs, ref);
    PermutationAssignment best;
    best.cost = std::numeric_limits<double>::infinity();
    for (const auto& perm : detail::permutations(J)) {
        double s = 0.0;
        for (int c = 0; c < J; ++c)
            s += bce->value.at({perm[static_cast<size_t>(c)], c});
        if (s < best.cost) {
            best.cost = s;
            best.mapping = perm;
        }
    }
    std::vector<ag::Var> picked;
    for (int c = 0; c < J; ++c) {
        ag::Var row = ag::slice(bce, 0, best.mapping[static_cast<size_t>(c)], 1);
        picked.push_back(ag::slice(row, 1, c, 1));
    }
    ag::Var sum = picked[0];
    for (size_t i = 1; i < picked.size(); ++i) sum = ag::add(sum, picked[i]);
    ag::Var loss = ag::mul_scalar(ag::reshape(sum, {1}),
                                  1.0 / static_cast<double>(J * T));
    return {loss, best};
}

// BCE of the existence probabilities against [1, ..., 1, 0] (C ones).
inline ag::Var exist_loss(const ag::Var& q, int64_t C) {
    ADCSS_CHECK_INPUT(q->value.ndim() == 1 && q->value.numel() == C + 1,
                      "exist_loss: expected C + 1 probabilities");
    Tensor target({C + 1});
    for (int64_t i = 0; i < C; ++i) target[i] = 1.0;
    ag::Var p = ag::clamp(q, kBceEps, 1.0 - kBceEps);
    ag::Var ones = ag::constant(Tensor::full({C + 1}, 1.0));
    ag::Var tgt = ag::constant(std::move(target));
    ag::Var bce = ag::neg(ag::add(ag::mul(tgt, ag::log_(p)),
                                  ag::mul(ag::sub(ones, tgt), ag::log_(ag::sub(ones, p)))));
    return ag::mean_all(bce);
}

// Weighted combination of the three parts.
inline ag::Var joint_loss(const ag::Var& sep, const ag::Var& diar, const ag::Var& exist,
                          const LossWeights& w) {
    w.validate();
    return ag::add(ag::add(ag::mul_scalar(sep, w.lambda_s), ag::mul_scalar(diar, w.lambda_d)),
                   ag::mul_scalar(exist, w.lambda_e));
}

// Tied-permutation variant: one assignment minimizes the weighted sum of the
// separation and diarization terms and is applied to both.
struct TiedPitResult {
    ag::Var sep_loss;
    ag::Var diar_loss;
    PermutationAssignment perm;
};

inline TiedPitResult tied_pit_losses(const std::vector<ag::Var>& ests,
                                     const std::vector<std::vector<double>>& refs,
                                     const ag::Var& probs, const Tensor& ref_activity,
                                     const LossWeights& w) {
    const int C = static_cast<int>(refs.size());
    ADCSS_CHECK_INPUT(static_cast<int>(ests.size()) == C && ref_activity.dim(0) == C &&
                          probs->value.dim(0) == C,
                      "tied_pit_losses: channel counts differ");
    ADCSS_CHECK_INPUT(C >= 1 && C <= 5, "tied_pit_losses: channel count outside {1..5}");
    const int64_t T = ref_activity.dim(1);

    std::vector<std::vector<ag::Var>> score(static_cast<size_t>(C));
    for (int i = 0; i < C; ++i)
        for (int j = 0; j < C; ++j)
            score[static_cast<size_t>(i)].push_back(
                si_sdr(ests[static_cast<size_t>(i)], refs[static_cast<size_t>(j)]));
    ag::Var bce = detail::bce_row_matrix(probs, ref_activity);

    PermutationAssignment best;
    double best_objective = std::numeric_limits<double>::infinity();
    for (const auto& perm : detail::permutations(C)) {
        double si = 0.0, d = 0.0;
        for (int c = 0; c < C; ++c) {
            const int j = perm[static_cast<size_t>(c)];
            si += ag::scalar_value(score[static_cast<size_t>(j)][static_cast<size_t>(c)]);
            d += bce->value.at({j, c});
        }
        const double objective = w.lambda_s * (-si / C) + w.lambda_d * (d / static_cast<double>(C * T));
        if (objective < best_objective) {
            best_objective = objective;
            best.mapping = perm;
            best.cost = si;
        }
    }

    std::vector<ag::Var> si_picked, d_picked;
    for (int c = 0; c < C; ++c) {
        const int j = best.mapping[static_cast<size_t>(c)];
        si_picked.push_back(score[static_cast<size_t>(j)][static_cast<size_t>(c)]);
        d_picked.push_back(ag::slice(ag::slice(bce, 0, j, 1), 1, c, 1));
    }
    ag::Var si_sum = si_picked[0];
    ag::Var d_sum = d_picked[0];
    for (int c = 1; c < C; ++c) {
        si_sum = ag::add(si_sum, si_picked[static_cast<size_t>(c)]);
        d_sum = ag::add(d_sum, d_picked[static_cast<size_t>(c)]);
    }
    return {ag::mul_scalar(si_sum, -1.0 / C),
            ag::mul_scalar(ag::reshape(d_sum, {1}), 1.0 / static_cast<double>(C * T)), best};
}

} // namespace adcss::objectives
