#pragma once

// Evaluation metrics: SI-SDR improvement over the mixture, diarization error
// rate with optimal speaker mapping, speaker counting accuracy, and a JSONL
// report writer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adcss/objectives.hpp"
#include "adcss/tensor.hpp"

namespace adcss::metrics {

// ---------------------------------------------------------------------------
// SI-SDR improvement
// ---------------------------------------------------------------------------

struct DeltaSiSdr {
    double delta_db = 0.0;                // mean improvement over scored pairs
    std::vector<int> mapping;             // estimate index assigned to each reference
    std::vector<double> per_channel_db;   // improvement per reference (0 when silent)
    int64_t scored_refs = 0;
    int64_t silent_refs = 0;
};

// Matches estimates to references with an exhaustive search over the padded
// square assignment (missing channels become zero waveforms), then averages
// the per-reference improvement of SI-SDR over the unprocessed mixture.
// References with zero energy cannot be scored; they contribute zero and are
// tallied separately.
inline DeltaSiSdr delta_si_sdr(const std::vector<std::vector<double>>& ests,
                               const std::vector<std::vector<double>>& refs,
                               const std::vector<double>& mixture) {
    ADCSS_CHECK_INPUT(!refs.empty(), "delta_si_sdr: no reference channels");
    ADCSS_CHECK_INPUT(!mixture.empty(), "delta_si_sdr: empty mixture");
    for (const auto& r : refs)
        ADCSS_CHECK_INPUT(r.size() == mixture.size(), "delta_si_sdr: reference length mismatch");
    for (const auto& e : ests)
        ADCSS_CHECK_INPUT(e.size() == mixture.size(), "delta_si_sdr: estimate length mismatch");

    const int n = static_cast<int>(std::max(ests.size(), refs.size()));
    ADCSS_CHECK_INPUT(n <= 8, "delta_si_sdr: too many channels for exhaustive matching");
    const std::vector<double> zeros(mixture.size(), 0.0);
    auto est_at = [&](int i) -> const std::vector<double>& {
        return i < static_cast<int>(ests.size()) ? ests[static_cast<size_t>(i)] : zeros;
    };
    auto ref_at = [&](int j) -> const std::vector<double>& {
        return j < static_cast<int>(refs.size()) ? refs[static_cast<size_t>(j)] : zeros;
    };

    std::vector<std::vector<double>> score(static_cast<size_t>(n),
                                           std::vector<double>(static_cast<size_t>(n)));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            score[static_cast<size_t>(i)][static_cast<size_t>(j)] = objectives::si_sdr_db(est_at(i), ref_at(j));

    std::vector<int> best;
    double best_sum = -std::numeric_limits<double>::infinity();
    for (const auto& perm : objectives::detail::permutations(n)) {
        double s = 0.0;
        for (int j = 0; j < n; ++j)
            s += score[static_cast<size_t>(perm[static_cast<size_t>(j)])][static_cast<size_t>(j)];
        if (s > best_sum) {
            best_sum = s;
            best = perm;
        }
    }

    DeltaSiSdr out;
    out.mapping.assign(best.begin(), best.begin() + static_cast<int>(refs.size()));
    double total = 0.0;
    for (int j = 0; j < static_cast<int>(refs.size()); ++j) {
        bool degenerate = false;
        const double after =
            objectives::si_sdr_db(est_at(best[static_cast<size_t>(j)]), refs[static_cast<size_t>(j)], &degenerate);
        if (degenerate) {
            out.per_channel_db.push_back(0.0);
            ++out.silent_refs;
            continue;
        }
        const double before = objectives::si_sdr_db(mixture, refs[static_cast<size_t>(j)]);
        out.per_channel_db.push_back(after - before);
        total += after - before;
        ++out.scored_refs;
    }
    out.delta_db = out.scored_refs > 0 ? total / static_cast<double>(out.scored_refs) : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Diarization error rate
// ---------------------------------------------------------------------------

struct DerResult {
    double der = 0.0;
    int64_t missed = 0;      // active reference frames with no matched hypothesis
    int64_t false_alarm = 0; // active hypothesis frames with no reference to cover
    int64_t confusion = 0;   // overlapped frames attributed to the wrong speaker
    int64_t total = 0;       // active reference speaker-frames
};

// Frame-level DER with the speaker mapping chosen to maximize matched
// activity. Rows are binary activity tracks over a shared frame grid.
inline DerResult der(const Tensor& ref, const Tensor& hyp) {
    ADCSS_CHECK_INPUT(ref.ndim() == 2 && hyp.ndim() == 2, "der: activity must be [speakers, frames]");
    ADCSS_CHECK_INPUT(ref.dim(1) == hyp.dim(1), "der: frame counts differ");
    const int64_t T = ref.dim(1);
    const int n = static_cast<int>(std::max(ref.dim(0), hyp.dim(0)));
    ADCSS_CHECK_INPUT(n >= 1 && n <= 8, "der: too many speakers for exhaustive matching");

    auto ref_val = [&](int c, int64_t t) {
        return c < ref.dim(0) ? (ref.at({c, t}) != 0.0 ? 1 : 0) : 0;
    };
    auto hyp_val = [&](int k, int64_t t) {
        return k < hyp.dim(0) ? (hyp.at({k, t}) != 0.0 ? 1 : 0) : 0;
    };

    std::vector<std::vector<int64_t>> overlap(static_cast<size_t>(n),
                                              std::vector<int64_t>(static_cast<size_t>(n), 0));
    for (int c = 0; c < n; ++c)
        for (int k = 0; k < n; ++k) {
            int64_t o = 0;
            for (int64_t t = 0; t < T; ++t) o += ref_val(c, t) * hyp_val(k, t);
            overlap[static_cast<size_t>(c)][static_cast<size_t>(k)] = o;
        }

    std::vector<int> best;
    int64_t best_matched = -1;
    for (const auto& perm : objectives::detail::permutations(n)) {
        int64_t m = 0;
        for (int c = 0; c < n; ++c) m += overlap[static_cast<size_t>(c)][static_cast<size_t>(perm[static_cast<size_t>(c)])];
        if (m > best_matched) {
            best_matched = m;
            best = perm;
        }
    }

    DerResult out;
    for (int64_t t = 0; t < T; ++t) {
        int64_t r = 0, h = 0, matched = 0;
        for (int c = 0; c < n; ++c) {
            r += ref_val(c, t);
            h += hyp_val(c, t);
            matched += ref_val(c, t) * hyp_val(best[static_cast<size_t>(c)], t);
        }
        const int64_t miss = std::max<int64_t>(0, r - h);
        const int64_t fa = std::max<int64_t>(0, h - r);
        const int64_t conf = std::min(r, h) - matched;
        out.missed += miss;
        out.false_alarm += fa;
        out.confusion += conf;
        out.total += r;
    }
    const int64_t errors = out.missed + out.false_alarm + out.confusion;
    if (out.total == 0)
        out.der = errors == 0 ? 0.0 : std::numeric_limits<double>::infinity();
    else
        out.der = static_cast<double>(errors) / static_cast<double>(out.total);
    return out;
}

// ---------------------------------------------------------------------------
// Speaker counting accuracy
// ---------------------------------------------------------------------------

// Fraction of mixtures whose estimated count matches the reference count.
inline double sca(const std::vector<std::pair<int, int>>& counts) {
    ADCSS_CHECK_INPUT(!counts.empty(), "sca: no mixtures");
    int64_t hits = 0;
    for (const auto& [est, ref] : counts)
        if (est == ref) ++hits;
    return static_cast<double>(hits) / static_cast<double>(counts.size());
}

// ---------------------------------------------------------------------------
// Interval rasterization
// ---------------------------------------------------------------------------

// Converts per-speaker utterance intervals (seconds) to a binary activity
// matrix on the frame grid: frame t covers samples [t*hop, (t+1)*hop) and is
// active when any interval overlaps that window.
inline Tensor rasterize_intervals(const std::vector<std::vector<std::pair<double, double>>>& intervals,
                                  int64_t frames, int64_t hop_samples, int sample_rate) {
    ADCSS_CHECK_INPUT(frames >= 1 && hop_samples >= 1 && sample_rate >= 1,
                      "rasterize_intervals: invalid grid");
    Tensor out({static_cast<int64_t>(intervals.size()), frames});
    for (size_t c = 0; c < intervals.size(); ++c)
        for (const auto& [begin_s, end_s] : intervals[c]) {
            ADCSS_CHECK_INPUT(end_s >= begin_s, "rasterize_intervals: interval ends before it begins");
            if (end_s <= begin_s) continue;
            const double begin = begin_s * sample_rate;
            const double end = end_s * sample_rate;
            const int64_t first = std::max<int64_t>(0, static_cast<int64_t>(std::floor(begin / static_cast<double>(hop_samples))));
            for (int64_t t = first; t < frames; ++t) {
                const double win_begin = static_cast<double>(t * hop_samples);
                if (win_begin >= end) break;
                if (begin < win_begin + static_cast<double>(hop_samples))
                    out.at({static_cast<int64_t>(c), t}) = 1.0;
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

struct MixtureRecord {
    std::string id;
    int ref_count = 0;
    int est_count = 0;
    double delta_si_sdr_db = 0.0;
    int64_t scored_refs = 0;
    int64_t silent_refs = 0;
    double der = 0.0;
    int64_t der_missed = 0;
    int64_t der_false_alarm = 0;
    int64_t der_confusion = 0;
    int64_t der_total = 0;
    std::string warning;
};

struct EvalReport {
    std::vector<MixtureRecord> mixtures;

    double mean_delta_si_sdr_db() const {
        double sum = 0.0;
        int64_t scored = 0;
        for (const auto& m : mixtures)
            if (m.scored_refs > 0) {
                sum += m.delta_si_sdr_db;
                ++scored;
            }
        return scored > 0 ? sum / static_cast<double>(scored) : 0.0;
    }

    // Pooled over mixtures: summed error frames over summed reference frames.
    double pooled_der() const {
        int64_t err = 0, total = 0;
        for (const auto& m : mixtures) {
            err += m.der_missed + m.der_false_alarm + m.der_confusion;
            total += m.der_total;
        }
        if (total == 0) return err == 0 ? 0.0 : std::numeric_limits<double>::infinity();
        return static_cast<double>(err) / static_cast<double>(total);
    }

    double counting_accuracy() const {
        std::vector<std::pair<int, int>> counts;
        for (const auto& m : mixtures) counts.emplace_back(m.est_count, m.ref_count);
        return sca(counts);
    }
};

// One JSON object per line: each mixture, then a trailing summary record.
inline void write_report(const std::string& path, const EvalReport& report) {
    std::ofstream out(path);
    ADCSS_CHECK_INPUT(out.good(), "write_report: cannot open " + path);
    for (const auto& m : report.mixtures) {
        nlohmann::json j;
        j["type"] = "mixture";
        j["id"] = m.id;
        j["ref_count"] = m.ref_count;
        j["est_count"] = m.est_count;
        j["delta_si_sdr_db"] = m.delta_si_sdr_db;
        j["scored_refs"] = m.scored_refs;
        j["silent_refs"] = m.silent_refs;
        j["der"] = m.der;
        j["der_missed"] = m.der_missed;
        j["der_false_alarm"] = m.der_false_alarm;
        j["der_confusion"] = m.der_confusion;
        j["der_total"] = m.der_total;
        if (!m.warning.empty()) j["warning"] = m.warning;
        out << j.dump() << "\n";
    }
    nlohmann::json s;
    s["type"] = "summary";
    s["num_mixtures"] = report.mixtures.size();
    s["delta_si_sdr_db"] = report.mean_delta_si_sdr_db();
    s["der"] = report.pooled_der();
    s["sca"] = report.counting_accuracy();
    out << s.dump() << "\n";
    ADCSS_CHECK_INPUT(out.good(), "write_report: write failed for " + path);
}

inline EvalReport read_report(const std::string& path) {
    std::ifstream in(path);
    ADCSS_CHECK_INPUT(in.good(), "read_report: cannot open " + path);
    EvalReport report;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        if (j.value("type", "") != "mixture") continue;
        MixtureRecord m;
        m.id = j.value("id", "");
        m.ref_count = j.value("ref_count", 0);
        m.est_count = j.value("est_count", 0);
        m.delta_si_sdr_db = j.value("delta_si_sdr_db", 0.0);
        m.scored_refs = j.value("scored_refs", static_cast<int64_t>(0));
        m.silent_refs = j.value("silent_refs", static_cast<int64_t>(0));
        m.der = j.value("der", 0.0);
        m.der_missed = j.value("der_missed", static_cast<int64_t>(0));
        m.der_false_alarm = j.value("der_false_alarm", static_cast<int64_t>(0));
        m.der_confusion = j.value("der_confusion", static_cast<int64_t>(0));
        m.der_total = j.value("der_total", static_cast<int64_t>(0));
        m.warning = j.value("warning", "");
        report.mixtures.push_back(std::move(m));
    }
    return report;
}

} // namespace adcss::metrics
