#pragma once

// Training and evaluation: Adam over the shared parameter registry, gradient
// accumulation to an effective batch, segment-level data pipeline over
// synthesized manifests, versioned binary checkpoints with bit-exact
// round-trips, and a per-mixture evaluation driver.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "adcss/config.hpp"
#include "adcss/forge.hpp"
#include "adcss/metrics.hpp"
#include "adcss/model.hpp"
#include "adcss/objectives.hpp"
#include "adcss/wav.hpp"

namespace adcss::train {

namespace ag = adcss::ag;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
  public:
    Adam() = default;
    Adam(const nn::ParamRegistry& params, AdamConfig cfg) : cfg_(cfg) {
        for (const auto& [name, v] : params.items()) {
            m_.push_back(Tensor::zeros(v->value.shape()));
            v_.push_back(Tensor::zeros(v->value.shape()));
        }
    }

    const AdamConfig& config() const { return cfg_; }
    int64_t steps() const { return steps_; }
    const std::vector<Tensor>& first_moments() const { return m_; }
    const std::vector<Tensor>& second_moments() const { return v_; }

    void load_state(std::vector<Tensor> m, std::vector<Tensor> v, int64_t steps) {
        ADCSS_CHECK_INPUT(m.size() == m_.size() && v.size() == v_.size(),
                          "Adam: moment count mismatch");
        for (size_t i = 0; i < m.size(); ++i)
            ADCSS_CHECK_INPUT(m[i].same_shape(m_[i]) && v[i].same_shape(v_[i]),
                              "Adam: moment shape mismatch");
        m_ = std::move(m);
        v_ = std::move(v);
        steps_ = steps;
    }

    // One update from accumulated leaf gradients. Parameters without a sink
    // entry step with g = 0 so the moment decay stays uniform.
    void step(const nn::ParamRegistry& params, const ag::GradSink& grads) {
        ADCSS_CHECK_INPUT(params.items().size() == m_.size(), "Adam: registry size changed");
        ++steps_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
        for (size_t i = 0; i < params.items().size(); ++i) {
            const ag::Var& p = params.items()[i].second;
            const auto it = grads.find(p.get());
            const double* g = nullptr;
            if (it != grads.end()) {
                ADCSS_CHECK_INPUT(it->second.same_shape(p->value), "Adam: gradient shape mismatch");
                g = it->second.data();
            }
            double* pv = p->value.data();
            double* pm = m_[i].data();
            double* ps = v_[i].data();
            for (int64_t k = 0; k < p->value.numel(); ++k) {
                const double gk = g ? g[k] : 0.0;
                pm[k] = cfg_.beta1 * pm[k] + (1.0 - cfg_.beta1) * gk;
                ps[k] = cfg_.beta2 * ps[k] + (1.0 - cfg_.beta2) * gk * gk;
                pv[k] -= cfg_.lr * (pm[k] / bc1) / (std::sqrt(ps[k] / bc2) + cfg_.eps);
            }
        }
    }

  private:
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    int64_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr uint64_t kCheckpointVersion = 1;

struct Checkpoint {
    std::string model_config; // flat key-value snapshot of the model fields
    std::string rng_state;
    int64_t phase = 1;
    int64_t epoch = 0; // completed epochs
    int64_t opt_steps = 0;
    double best_valid = std::numeric_limits<double>::infinity();
    int64_t epochs_since_best = 0;
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<std::pair<std::string, Tensor>> adam_m;
    std::vector<std::pair<std::string, Tensor>> adam_v;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'A', 'D', 'C', 'S', 'S', 'C', 'K', 'P'};

inline void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint64_t take_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    ADCSS_CHECK_INPUT(is.good(), "checkpoint: truncated file");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void put_i64(std::ostream& os, int64_t v) { put_u64(os, static_cast<uint64_t>(v)); }
inline int64_t take_i64(std::istream& is) { return static_cast<int64_t>(take_u64(is)); }

inline void put_f64(std::ostream& os, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_u64(os, bits);
}

inline double take_f64(std::istream& is) {
    const uint64_t bits = take_u64(is);
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
}

inline void put_str(std::ostream& os, const std::string& s) {
    put_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string take_str(std::istream& is) {
    const uint64_t n = take_u64(is);
    ADCSS_CHECK_INPUT(n <= (1ull << 32), "checkpoint: implausible string length");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    ADCSS_CHECK_INPUT(!is.fail(), "checkpoint: truncated file");
    return s;
}

inline void put_tensor(std::ostream& os, const Tensor& t) {
    put_u64(os, static_cast<uint64_t>(t.ndim()));
    for (int64_t i = 0; i < t.ndim(); ++i) put_i64(os, t.dim(i));
    for (int64_t k = 0; k < t.numel(); ++k) put_f64(os, t.data()[k]);
}

inline Tensor take_tensor(std::istream& is) {
    const uint64_t nd = take_u64(is);
    ADCSS_CHECK_INPUT(nd <= 8, "checkpoint: implausible tensor rank");
    Shape shape(nd);
    for (auto& d : shape) {
        d = take_i64(is);
        ADCSS_CHECK_INPUT(d >= 0 && d <= (int64_t{1} << 32), "checkpoint: implausible dimension");
    }
    Tensor t = Tensor::zeros(shape);
    for (int64_t k = 0; k < t.numel(); ++k) t.data()[k] = take_f64(is);
    return t;
}

inline void put_named(std::ostream& os, const std::vector<std::pair<std::string, Tensor>>& v) {
    put_u64(os, v.size());
    for (const auto& [name, t] : v) {
        put_str(os, name);
        put_tensor(os, t);
    }
}

inline std::vector<std::pair<std::string, Tensor>> take_named(std::istream& is) {
    const uint64_t n = take_u64(is);
    ADCSS_CHECK_INPUT(n <= (1ull << 24), "checkpoint: implausible entry count");
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(n);
    for (uint64_t i = 0; i < n; ++i) {
        std::string name = take_str(is);
        out.emplace_back(std::move(name), take_tensor(is));
    }
    return out;
}

// Copies named tensors into a registry, demanding an exact one-to-one match.
inline void load_named_parameters(const nn::ParamRegistry& reg,
                                  const std::vector<std::pair<std::string, Tensor>>& named) {
    ADCSS_CHECK_INPUT(named.size() == reg.items().size(),
                      "checkpoint: parameter count differs from the model");
    for (const auto& [name, t] : named) {
        ADCSS_CHECK_INPUT(reg.contains(name), "checkpoint: unknown parameter " + name);
        const ag::Var& p = reg.at(name);
        ADCSS_CHECK_INPUT(t.same_shape(p->value), "checkpoint: shape mismatch for " + name);
        p->value = t;
    }
}

} // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    ADCSS_CHECK_INPUT(os.good(), "checkpoint: cannot open " + path + " for writing");
    os.write(detail::kCheckpointMagic, 8);
    detail::put_u64(os, kCheckpointVersion);
    detail::put_str(os, ck.model_config);
    detail::put_str(os, ck.rng_state);
    detail::put_i64(os, ck.phase);
    detail::put_i64(os, ck.epoch);
    detail::put_i64(os, ck.opt_steps);
    detail::put_f64(os, ck.best_valid);
    detail::put_i64(os, ck.epochs_since_best);
    detail::put_named(os, ck.params);
    detail::put_named(os, ck.adam_m);
    detail::put_named(os, ck.adam_v);
    os.flush();
    ADCSS_CHECK_INPUT(os.good(), "checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    ADCSS_CHECK_INPUT(is.good(), "checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    ADCSS_CHECK_INPUT(is.good() && std::memcmp(magic, detail::kCheckpointMagic, 8) == 0,
                      "checkpoint: bad magic in " + path);
    const uint64_t version = detail::take_u64(is);
    ADCSS_CHECK_INPUT(version == kCheckpointVersion,
                      "checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    ck.model_config = detail::take_str(is);
    ck.rng_state = detail::take_str(is);
    ck.phase = detail::take_i64(is);
    ck.epoch = detail::take_i64(is);
    ck.opt_steps = detail::take_i64(is);
    ck.best_valid = detail::take_f64(is);
    ck.epochs_since_best = detail::take_i64(is);
    ck.params = detail::take_named(is);
    ck.adam_m = detail::take_named(is);
    ck.adam_v = detail::take_named(is);
    is.peek();
    ADCSS_CHECK_INPUT(is.eof(), "checkpoint: trailing bytes in " + path);
    return ck;
}

// Rebuilds the model configuration embedded in a checkpoint.
inline model::ModelConfig config_from_checkpoint(const Checkpoint& ck) {
    auto map = config::ConfigMap::from_text(ck.model_config, "<checkpoint>");
    const int64_t version = map.get_int("config_version", config::kConfigVersion);
    ADCSS_CHECK_CONFIG(version == config::kConfigVersion,
                       "checkpoint: unsupported config version");
    auto cfg = model::ModelConfig::from_config(map);
    map.finish();
    return cfg;
}

// Reconstructs a ready-to-run model from a checkpoint.
inline model::AdcssModel model_from_checkpoint(const Checkpoint& ck) {
    const auto cfg = config_from_checkpoint(ck);
    Rng rng(1);
    model::AdcssModel m(cfg, rng);
    detail::load_named_parameters(m.params(), ck.params);
    return m;
}

// ---------------------------------------------------------------------------
// Manifest-backed datasets
// ---------------------------------------------------------------------------

struct DatasetItem {
    std::string id;
    std::vector<double> mixture;
    std::vector<std::vector<double>> refs;
    std::vector<std::vector<forge::Interval>> intervals; // per speaker, seconds
};

struct Dataset {
    forge::ManifestHeader header;
    std::vector<DatasetItem> items;
};

// Loads every mixture and reference referred to by a manifest; paths resolve
// relative to the manifest's directory.
inline Dataset load_dataset(const std::string& manifest_path) {
    const forge::Manifest man = forge::read_manifest(manifest_path);
    const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
    Dataset out;
    out.header = man.header;
    out.items.reserve(man.records.size());
    for (const auto& rec : man.records) {
        DatasetItem item;
        item.id = rec.id;
        try {
            item.mixture = wavio::read_wav((base / rec.mixture_path).string()).samples;
            for (const auto& rp : rec.ref_paths)
                item.refs.push_back(wavio::read_wav((base / rp).string()).samples);
        } catch (const std::exception& e) {
            throw InvalidInput("dataset: mixture " + rec.id + ": " + e.what());
        }
        item.intervals = rec.intervals;
        out.items.push_back(std::move(item));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

struct SegmentRef {
    size_t item = 0;
    int64_t begin = 0;
    int64_t len = 0;
};

// Items shorter than one segment are kept whole; longer items are cut into
// full segments, and the tail survives only above the minimum fraction.
inline std::vector<SegmentRef> make_segments(const Dataset& ds, int64_t seg_len, double min_frac,
                                             int64_t min_len) {
    ADCSS_CHECK_INPUT(seg_len >= 1 && min_len >= 1, "make_segments: invalid lengths");
    std::vector<SegmentRef> out;
    for (size_t i = 0; i < ds.items.size(); ++i) {
        const int64_t n = static_cast<int64_t>(ds.items[i].mixture.size());
        if (n <= seg_len) {
            if (n >= min_len) out.push_back({i, 0, n});
            continue;
        }
        const int64_t full = n / seg_len;
        for (int64_t k = 0; k < full; ++k) out.push_back({i, k * seg_len, seg_len});
        const int64_t tail = n - full * seg_len;
        if (tail >= min_len && static_cast<double>(tail) >= min_frac * static_cast<double>(seg_len))
            out.push_back({i, full * seg_len, tail});
    }
    return out;
}

struct TrainSample {
    std::vector<double> mixture;
    std::vector<std::vector<double>> refs;
    std::vector<std::vector<forge::Interval>> intervals; // shifted into the segment
};

inline TrainSample cut_segment(const DatasetItem& item, int64_t begin, int64_t len,
                               int sample_rate) {
    ADCSS_CHECK_INPUT(begin >= 0 && len >= 1 &&
                          begin + len <= static_cast<int64_t>(item.mixture.size()),
                      "cut_segment: range outside the mixture");
    TrainSample s;
    s.mixture.assign(item.mixture.begin() + begin, item.mixture.begin() + begin + len);
    for (const auto& r : item.refs) {
        ADCSS_CHECK_INPUT(static_cast<int64_t>(r.size()) >= begin + len,
                          "cut_segment: reference shorter than the mixture");
        s.refs.emplace_back(r.begin() + begin, r.begin() + begin + len);
    }
    const double t0 = static_cast<double>(begin) / sample_rate;
    const double span = static_cast<double>(len) / sample_rate;
    s.intervals.resize(item.intervals.size());
    for (size_t c = 0; c < item.intervals.size(); ++c)
        for (const auto& [b, e] : item.intervals[c]) {
            const double nb = std::max(0.0, b - t0);
            const double ne = std::min(span, e - t0);
            if (ne > nb) s.intervals[c].push_back({nb, ne});
        }
    return s;
}

// ---------------------------------------------------------------------------
// Per-sample loss
// ---------------------------------------------------------------------------

// Joint loss for one segment at its true speaker count. Branches disabled by
// the configuration contribute a zero constant.
inline ag::Var sample_loss(const model::AdcssModel& m, const TrainSample& s) {
    const model::ModelConfig& cfg = m.config();
    const int64_t C = static_cast<int64_t>(s.refs.size());
    ADCSS_CHECK_INPUT(C >= 1, "sample_loss: no reference channels");
    auto fw = m.forward_train(s.mixture, C);

    std::vector<std::vector<double>> refs;
    refs.reserve(s.refs.size());
    for (const auto& r : s.refs) refs.emplace_back(r.begin(), r.begin() + fw.trimmed_len);

    const ag::Var zero = ag::constant(Tensor::zeros({1}));
    ag::Var sep, diar = zero, exist = zero;
    if (cfg.diar_branch && cfg.attractor_enabled) {
        const Tensor act =
            metrics::rasterize_intervals(s.intervals, fw.frames, fw.frame_hop, cfg.sample_rate);
        if (cfg.tied_pit) {
            auto tied = objectives::tied_pit_losses(fw.waveforms, refs, fw.activity, act, cfg.weights);
            sep = tied.sep_loss;
            diar = tied.diar_loss;
        } else {
            sep = objectives::pit_si_sdr_loss(fw.waveforms, refs).first;
            diar = objectives::pit_diar_loss(fw.activity, act).first;
        }
    } else {
        sep = objectives::pit_si_sdr_loss(fw.waveforms, refs).first;
    }
    if (cfg.attractor_enabled) exist = objectives::exist_loss(fw.existence, C);
    return objectives::joint_loss(sep, diar, exist, cfg.weights);
}

// ---------------------------------------------------------------------------
// Options
// ---------------------------------------------------------------------------

struct TrainOptions {
    std::string train_manifest;
    std::string valid_manifest;
    std::string out_dir;
    int64_t phase = 1;
    double lr = 1e-3;
    int64_t batch_size = 4;
    double segment_s = 10.0;
    double min_segment_frac = 0.25;
    int64_t max_epochs = 200;
    int64_t patience = 10;
    uint64_t seed = 1;
    int64_t max_steps_per_epoch = 0; // 0 runs every batch

    void validate() const {
        ADCSS_CHECK_CONFIG(phase == 1 || phase == 2, "train: phase must be 1 or 2");
        ADCSS_CHECK_CONFIG(lr > 0.0, "train: lr must be positive");
        ADCSS_CHECK_CONFIG(batch_size >= 1, "train: batch_size must be >= 1");
        ADCSS_CHECK_CONFIG(segment_s > 0.0, "train: segment_s must be positive");
        ADCSS_CHECK_CONFIG(min_segment_frac >= 0.0 && min_segment_frac <= 1.0,
                           "train: min_segment_frac must lie in [0, 1]");
        ADCSS_CHECK_CONFIG(max_epochs >= 1, "train: max_epochs must be >= 1");
        ADCSS_CHECK_CONFIG(patience >= 1, "train: patience must be >= 1");
        ADCSS_CHECK_CONFIG(max_steps_per_epoch >= 0, "train: max_steps_per_epoch must be >= 0");
    }

    // Reads the training keys from a flat config. Manifests accept per-phase
    // overrides (train_manifest_phase2, ...) falling back to the shared key.
    static TrainOptions from_config(const config::ConfigMap& map, int64_t phase) {
        auto pick = [&](const std::string& key) {
            const std::string p1 = key + "_phase1";
            const std::string p2 = key + "_phase2";
            const std::string shared = map.get_string(key, "");
            const std::string v1 = map.get_string(p1, shared);
            const std::string v2 = map.get_string(p2, shared);
            const std::string chosen = phase == 1 ? v1 : v2;
            ADCSS_CHECK_CONFIG(!chosen.empty(), "train: missing " + key + " for phase " +
                                                    std::to_string(phase));
            return chosen;
        };
        TrainOptions o;
        o.phase = phase;
        o.train_manifest = pick("train_manifest");
        o.valid_manifest = pick("valid_manifest");
        o.out_dir = map.require_string("out_dir");
        const double lr1 = map.get_double("lr_phase1", 1e-3);
        const double lr2 = map.get_double("lr_phase2", 1e-5);
        o.lr = phase == 1 ? lr1 : lr2;
        o.batch_size = map.get_int("batch_size", o.batch_size);
        o.segment_s = map.get_double("segment_s", o.segment_s);
        o.min_segment_frac = map.get_double("min_segment_frac", o.min_segment_frac);
        o.max_epochs = map.get_int("max_epochs", o.max_epochs);
        o.patience = map.get_int("patience", o.patience);
        o.seed = map.get_uint64("train_seed", o.seed);
        o.max_steps_per_epoch = map.get_int("max_steps_per_epoch", o.max_steps_per_epoch);
        o.validate();
        return o;
    }
};

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct EpochStats {
    int64_t epoch = 0; // 1-based, after completion
    double train_loss = 0.0;
    double valid_loss = 0.0;
    bool improved = false;
};

struct TrainResult {
    std::vector<EpochStats> history;
    double best_valid = std::numeric_limits<double>::infinity();
    std::string best_path;
    std::string last_path;
    bool stopped_early = false;
};

class Trainer {
  public:
    Trainer(const model::ModelConfig& cfg, const TrainOptions& opt)
        : opt_(opt), root_(opt.seed), model_(make_model(cfg, opt.seed)),
          adam_(model_.params(), AdamConfig{opt.lr}) {
        opt_.validate();
    }

    const TrainOptions& options() const { return opt_; }
    model::AdcssModel& model() { return model_; }
    const model::AdcssModel& model() const { return model_; }
    const Adam& optimizer() const { return adam_; }
    int64_t epoch() const { return epoch_; }
    double best_valid() const { return best_valid_; }

    std::string phase_dir() const {
        return (std::filesystem::path(opt_.out_dir) / ("phase" + std::to_string(opt_.phase)))
            .string();
    }

    std::string config_text() const {
        config::ConfigWriter w;
        w.add("config_version", static_cast<int64_t>(config::kConfigVersion));
        model_.config().to_writer(w);
        return w.text();
    }

    Checkpoint snapshot() const {
        Checkpoint ck;
        ck.model_config = config_text();
        ck.rng_state = root_.serialize();
        ck.phase = opt_.phase;
        ck.epoch = epoch_;
        ck.opt_steps = adam_.steps();
        ck.best_valid = best_valid_;
        ck.epochs_since_best = since_best_;
        const auto& items = model_.params().items();
        for (size_t i = 0; i < items.size(); ++i) {
            ck.params.emplace_back(items[i].first, items[i].second->value);
            ck.adam_m.emplace_back(items[i].first, adam_.first_moments()[i]);
            ck.adam_v.emplace_back(items[i].first, adam_.second_moments()[i]);
        }
        return ck;
    }

    // Parameter-only warm start (phase 2 from the phase 1 best).
    void load_parameters(const Checkpoint& ck) {
        detail::load_named_parameters(model_.params(), ck.params);
    }

    // Full resume at an epoch boundary.
    void restore(const Checkpoint& ck) {
        ADCSS_CHECK_INPUT(ck.model_config == config_text(),
                          "resume: checkpoint was built with a different model configuration");
        ADCSS_CHECK_INPUT(ck.phase == opt_.phase, "resume: checkpoint phase differs");
        load_parameters(ck);
        const auto& items = model_.params().items();
        ADCSS_CHECK_INPUT(ck.adam_m.size() == items.size() && ck.adam_v.size() == items.size(),
                          "resume: optimizer state size differs");
        std::vector<Tensor> m, v;
        for (size_t i = 0; i < items.size(); ++i) {
            ADCSS_CHECK_INPUT(ck.adam_m[i].first == items[i].first &&
                                  ck.adam_v[i].first == items[i].first,
                              "resume: optimizer state order differs");
            m.push_back(ck.adam_m[i].second);
            v.push_back(ck.adam_v[i].second);
        }
        adam_.load_state(std::move(m), std::move(v), ck.opt_steps);
        epoch_ = ck.epoch;
        best_valid_ = ck.best_valid;
        since_best_ = ck.epochs_since_best;
        root_ = Rng::deserialize(ck.rng_state);
    }

    // Runs epochs until the cap or the early-stopping patience is exhausted,
    // checkpointing every epoch plus the running best.
    TrainResult fit(const Dataset& train_ds, const Dataset& valid_ds,
                    std::ostream* log = nullptr) {
        const model::ModelConfig& cfg = model_.config();
        const int64_t seg_len = std::llround(opt_.segment_s * cfg.sample_rate);
        const auto train_segs = make_segments(train_ds, seg_len, opt_.min_segment_frac, cfg.frame_len);
        const auto valid_segs = make_segments(valid_ds, seg_len, opt_.min_segment_frac, cfg.frame_len);
        ADCSS_CHECK_INPUT(!train_segs.empty(), "train: no usable training segments");
        ADCSS_CHECK_INPUT(!valid_segs.empty(), "train: no usable validation segments");
        std::filesystem::create_directories(phase_dir());

        TrainResult res;
        res.best_path = (std::filesystem::path(phase_dir()) / "best.ckpt").string();
        while (epoch_ < opt_.max_epochs && since_best_ < opt_.patience) {
            const double train_loss = run_epoch(train_ds, train_segs);
            const double valid_loss = run_validation(valid_ds, valid_segs);
            ++epoch_;
            EpochStats st{epoch_, train_loss, valid_loss, valid_loss < best_valid_};
            if (st.improved) {
                best_valid_ = valid_loss;
                since_best_ = 0;
            } else {
                ++since_best_;
            }
            if (st.improved) save_checkpoint(res.best_path, snapshot());
            std::ostringstream name;
            name << "epoch_" << std::setw(4) << std::setfill('0') << epoch_ << ".ckpt";
            res.last_path = (std::filesystem::path(phase_dir()) / name.str()).string();
            save_checkpoint(res.last_path, snapshot());
            res.history.push_back(st);
            if (log)
                *log << "phase " << opt_.phase << " epoch " << epoch_ << " train " << train_loss
                     << " valid " << valid_loss << (st.improved ? " *" : "") << "\n";
        }
        res.stopped_early = since_best_ >= opt_.patience && epoch_ < opt_.max_epochs;
        res.best_valid = best_valid_;
        return res;
    }

  private:
    static model::AdcssModel make_model(const model::ModelConfig& cfg, uint64_t seed) {
        Rng init = Rng(seed).fork("model_init");
        return model::AdcssModel(cfg, init);
    }

    double run_epoch(const Dataset& ds, const std::vector<SegmentRef>& segs) {
        const model::ModelConfig& cfg = model_.config();
        std::vector<size_t> order(segs.size());
        std::iota(order.begin(), order.end(), size_t{0});
        Rng shuffle = root_.fork("epoch" + std::to_string(epoch_));
        for (size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<size_t>(shuffle.uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }
        double total = 0.0;
        int64_t counted = 0, steps = 0;
        size_t pos = 0;
        while (pos < order.size()) {
            if (opt_.max_steps_per_epoch > 0 && steps >= opt_.max_steps_per_epoch) break;
            const size_t take = std::min(static_cast<size_t>(opt_.batch_size), order.size() - pos);
            ag::GradSink sink;
            for (size_t b = 0; b < take; ++b) {
                const SegmentRef& sr = segs[order[pos + b]];
                const TrainSample s = cut_segment(ds.items[sr.item], sr.begin, sr.len, cfg.sample_rate);
                const ag::Var loss = sample_loss(model_, s);
                total += ag::scalar_value(loss);
                ++counted;
                ag::backward(ag::mul_scalar(loss, 1.0 / static_cast<double>(take)), &sink);
            }
            adam_.step(model_.params(), sink);
            ++steps;
            pos += take;
        }
        return counted > 0 ? total / static_cast<double>(counted) : 0.0;
    }

    double run_validation(const Dataset& ds, const std::vector<SegmentRef>& segs) const {
        ag::NoGradGuard guard;
        const model::ModelConfig& cfg = model_.config();
        double total = 0.0;
        for (const auto& sr : segs) {
            const TrainSample s = cut_segment(ds.items[sr.item], sr.begin, sr.len, cfg.sample_rate);
            total += ag::scalar_value(sample_loss(model_, s));
        }
        return total / static_cast<double>(segs.size());
    }

    TrainOptions opt_;
    Rng root_;
    model::AdcssModel model_;
    Adam adam_;
    int64_t epoch_ = 0;
    double best_valid_ = std::numeric_limits<double>::infinity();
    int64_t since_best_ = 0;
};

// Resume semantics for the CLI: a checkpoint from the same phase resumes in
// place; one from another phase only seeds the parameters.
inline void apply_resume(Trainer& tr, const Checkpoint& ck) {
    if (ck.phase == tr.options().phase)
        tr.restore(ck);
    else
        tr.load_parameters(ck);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Scores one mixture given estimates and their binarized activity; the
// estimate side may come from inference or from a test bypass.
inline metrics::MixtureRecord score_mixture(const std::string& id,
                                            const std::vector<double>& mixture,
                                            const std::vector<std::vector<double>>& refs,
                                            const std::vector<std::vector<forge::Interval>>& intervals,
                                            const std::vector<std::vector<double>>& ests,
                                            const Tensor& est_activity, int64_t frames,
                                            int64_t frame_hop, int sample_rate,
                                            const std::string& warning = "") {
    metrics::MixtureRecord rec;
    rec.id = id;
    rec.ref_count = static_cast<int>(refs.size());
    rec.est_count = static_cast<int>(ests.size());
    const auto ds = metrics::delta_si_sdr(ests, refs, mixture);
    rec.delta_si_sdr_db = ds.delta_db;
    rec.scored_refs = ds.scored_refs;
    rec.silent_refs = ds.silent_refs;
    const Tensor ref_act = metrics::rasterize_intervals(intervals, frames, frame_hop, sample_rate);
    const auto dr = metrics::der(ref_act, est_activity);
    rec.der = dr.der;
    rec.der_missed = dr.missed;
    rec.der_false_alarm = dr.false_alarm;
    rec.der_confusion = dr.confusion;
    rec.der_total = dr.total;
    rec.warning = warning;
    return rec;
}

// Runs inference over a dataset and aggregates metrics; per-mixture failures
// are recorded and evaluation continues.
inline metrics::EvalReport evaluate(const model::AdcssModel& m, const Dataset& ds) {
    metrics::EvalReport report;
    const model::ModelConfig& cfg = m.config();
    for (const auto& item : ds.items) {
        metrics::MixtureRecord rec;
        try {
            const auto inf = m.infer(item.mixture);
            rec = score_mixture(item.id, item.mixture, item.refs, item.intervals, inf.waveforms,
                                inf.activity, inf.frames, inf.frame_hop, cfg.sample_rate,
                                inf.empty_warning ? "no attractor crossed the existence threshold"
                                                  : "");
        } catch (const std::exception& e) {
            rec = metrics::MixtureRecord{};
            rec.id = item.id;
            rec.ref_count = static_cast<int>(item.refs.size());
            rec.est_count = -1;
            rec.warning = e.what();
        }
        report.mixtures.push_back(std::move(rec));
    }
    return report;
}

} // namespace adcss::train
