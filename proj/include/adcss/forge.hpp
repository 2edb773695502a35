#pragma once

// Mixture synthesis: multi-utterance speaker tracks over a pluggable
// utterance corpus, mixed in four conditions (anechoic, noisy, reverberant,
// noisy reverberant) with manifests carrying diarization labels.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <fftw3.h>
#include <nlohmann/json.hpp>

#include "adcss/config.hpp"
#include "adcss/error.hpp"
#include "adcss/rng.hpp"
#include "adcss/wav.hpp"

namespace adcss::forge {

inline constexpr double kSpeedOfSound = 343.0;

// ---------------------------------------------------------------------------
// Small signal helpers
// ---------------------------------------------------------------------------

// Collapses a double signal onto the 32-bit float grid used on disk, so that
// in-memory components and their WAV files are the same numbers.
inline void quantize_f32(std::vector<double>& x) {
    for (auto& v : x) v = static_cast<double>(static_cast<float>(v));
}

// Full linear convolution via FFT. Output length is |a| + |b| - 1.
inline std::vector<double> fft_convolve(const std::vector<double>& a,
                                        const std::vector<double>& b) {
    ADCSS_CHECK_INPUT(!a.empty() && !b.empty(), "fft_convolve: empty operand");
    const size_t out_len = a.size() + b.size() - 1;
    size_t n = 1;
    while (n < out_len) n <<= 1;

    double* ta = fftw_alloc_real(n);
    double* tb = fftw_alloc_real(n);
    fftw_complex* fa = fftw_alloc_complex(n / 2 + 1);
    fftw_complex* fb = fftw_alloc_complex(n / 2 + 1);
    std::fill(ta, ta + n, 0.0);
    std::fill(tb, tb + n, 0.0);
    std::copy(a.begin(), a.end(), ta);
    std::copy(b.begin(), b.end(), tb);

    fftw_plan pa = fftw_plan_dft_r2c_1d(static_cast<int>(n), ta, fa, FFTW_ESTIMATE);
    fftw_plan pb = fftw_plan_dft_r2c_1d(static_cast<int>(n), tb, fb, FFTW_ESTIMATE);
    fftw_execute(pa);
    fftw_execute(pb);
    for (size_t i = 0; i < n / 2 + 1; ++i) {
        const double re = fa[i][0] * fb[i][0] - fa[i][1] * fb[i][1];
        const double im = fa[i][0] * fb[i][1] + fa[i][1] * fb[i][0];
        fa[i][0] = re;
        fa[i][1] = im;
    }
    fftw_plan pc = fftw_plan_dft_c2r_1d(static_cast<int>(n), fa, tb, FFTW_ESTIMATE);
    fftw_execute(pc);

    std::vector<double> out(out_len);
    for (size_t i = 0; i < out_len; ++i) out[i] = tb[i] / static_cast<double>(n);

    fftw_destroy_plan(pa);
    fftw_destroy_plan(pb);
    fftw_destroy_plan(pc);
    fftw_free(ta);
    fftw_free(tb);
    fftw_free(fa);
    fftw_free(fb);
    return out;
}

// One RBJ constant-peak band-pass biquad.
struct Biquad {
    double b0, b1, b2, a1, a2;

    static Biquad band_pass(double center_hz, double q, int sample_rate) {
        const double w0 = 2.0 * M_PI * center_hz / sample_rate;
        const double alpha = std::sin(w0) / (2.0 * q);
        const double a0 = 1.0 + alpha;
        return {alpha / a0, 0.0, -alpha / a0, -2.0 * std::cos(w0) / a0, (1.0 - alpha) / a0};
    }

    void apply(std::vector<double>& x) const {
        double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
        for (auto& v : x) {
            const double y = b0 * v + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = v;
            y2 = y1;
            y1 = y;
            v = y;
        }
    }
};

// ---------------------------------------------------------------------------
// Utterance corpora
// ---------------------------------------------------------------------------

class UtteranceProvider {
public:
    virtual ~UtteranceProvider() = default;
    virtual int num_speakers() const = 0;
    virtual std::string speaker_id(int speaker) const = 0;
    virtual std::vector<double> sample_utterance(int speaker, Rng& rng) const = 0;
    // Whether two speakers are separable enough to share a mixture.
    virtual bool distinct(int a, int b) const { return a != b; }
};

struct ToyCorpusConfig {
    int num_speakers = 24;
    int sample_rate = 16000;
    double min_utterance_s = 0.5;
    double max_utterance_s = 2.0;
    double min_center_hz = 400.0;
    double max_center_hz = 3600.0;
    double min_center_ratio = 1.3; // pairwise spectral separation within one mixture

    static ToyCorpusConfig from_config(const config::ConfigMap& map) {
        ToyCorpusConfig c;
        c.num_speakers = static_cast<int>(map.get_int("toy_num_speakers", c.num_speakers));
        c.sample_rate = static_cast<int>(map.get_int("sample_rate", c.sample_rate));
        c.min_utterance_s = map.get_double("toy_min_utterance_s", c.min_utterance_s);
        c.max_utterance_s = map.get_double("toy_max_utterance_s", c.max_utterance_s);
        c.min_center_hz = map.get_double("toy_min_center_hz", c.min_center_hz);
        c.max_center_hz = map.get_double("toy_max_center_hz", c.max_center_hz);
        c.min_center_ratio = map.get_double("toy_min_center_ratio", c.min_center_ratio);
        return c;
    }
};

// Synthetic voices: band-limited modulated noise. Each speaker owns a fixed
// center frequency spread log-uniformly over the band by the golden-ratio
// sequence, so any subset is roughly evenly spaced.
class ToyCorpus final : public UtteranceProvider {
public:
    explicit ToyCorpus(ToyCorpusConfig cfg = {}) : cfg_(cfg) {
        ADCSS_CHECK_CONFIG(cfg_.num_speakers >= 1, "toy corpus: need at least one speaker");
        ADCSS_CHECK_CONFIG(cfg_.min_utterance_s > 0.0 &&
                               cfg_.max_utterance_s >= cfg_.min_utterance_s,
                           "toy corpus: bad utterance duration range");
        ADCSS_CHECK_CONFIG(cfg_.min_center_hz > 0.0 && cfg_.max_center_hz > cfg_.min_center_hz &&
                               cfg_.max_center_hz < cfg_.sample_rate / 2.0,
                           "toy corpus: bad center frequency band");
    }

    int num_speakers() const override { return cfg_.num_speakers; }

    std::string speaker_id(int speaker) const override {
        return "toy" + std::to_string(speaker);
    }

    double center_hz(int speaker) const {
        ADCSS_CHECK_INPUT(speaker >= 0 && speaker < cfg_.num_speakers, "toy corpus: bad speaker");
        const double phi = 0.6180339887498949;
        const double u = std::fmod(phi * static_cast<double>(speaker + 1), 1.0);
        return cfg_.min_center_hz * std::pow(cfg_.max_center_hz / cfg_.min_center_hz, u);
    }

    bool distinct(int a, int b) const override {
        if (a == b) return false;
        const double fa = center_hz(a), fb = center_hz(b);
        return std::max(fa, fb) / std::min(fa, fb) >= cfg_.min_center_ratio;
    }

    std::vector<double> sample_utterance(int speaker, Rng& rng) const override {
        const double dur = rng.uniform(cfg_.min_utterance_s, cfg_.max_utterance_s);
        const int64_t n = std::max<int64_t>(8, std::llround(dur * cfg_.sample_rate));
        const double mod_hz = rng.uniform(2.0, 6.0);
        const double mod_phase = rng.uniform(0.0, 2.0 * M_PI);

        std::vector<double> x(static_cast<size_t>(n));
        for (auto& v : x) v = rng.normal();
        const Biquad bp = Biquad::band_pass(center_hz(speaker), 4.0, cfg_.sample_rate);
        bp.apply(x);
        bp.apply(x);

        const int64_t ramp = std::min<int64_t>(n / 4, cfg_.sample_rate / 200); // 5 ms edges
        for (int64_t i = 0; i < n; ++i) {
            const double t = static_cast<double>(i) / cfg_.sample_rate;
            double g = 0.55 + 0.45 * std::sin(2.0 * M_PI * mod_hz * t + mod_phase);
            if (i < ramp) g *= 0.5 - 0.5 * std::cos(M_PI * (i + 1) / static_cast<double>(ramp + 1));
            const int64_t from_end = n - 1 - i;
            if (from_end < ramp)
                g *= 0.5 - 0.5 * std::cos(M_PI * (from_end + 1) / static_cast<double>(ramp + 1));
            x[static_cast<size_t>(i)] *= g;
        }

        double power = 0.0;
        for (double v : x) power += v * v;
        power /= static_cast<double>(n);
        if (power > 0.0) {
            const double scale = 1.0 / std::sqrt(power);
            for (auto& v : x) v *= scale;
        }
        return x;
    }

private:
    ToyCorpusConfig cfg_;
};

// Reads a directory tree with one subdirectory per speaker, each holding
// mono 16 kHz WAV utterances.
class WavDirCorpus final : public UtteranceProvider {
public:
    explicit WavDirCorpus(const std::string& root) {
        namespace fs = std::filesystem;
        ADCSS_CHECK_CONFIG(fs::is_directory(root), "wav corpus: not a directory: " + root);
        std::vector<fs::path> dirs;
        for (const auto& entry : fs::directory_iterator(root))
            if (entry.is_directory()) dirs.push_back(entry.path());
        std::sort(dirs.begin(), dirs.end());
        for (const auto& dir : dirs) {
            std::vector<std::string> files;
            for (const auto& entry : fs::directory_iterator(dir))
                if (entry.is_regular_file() && entry.path().extension() == ".wav")
                    files.push_back(entry.path().string());
            std::sort(files.begin(), files.end());
            if (files.empty()) continue;
            ids_.push_back(dir.filename().string());
            files_.push_back(std::move(files));
        }
        ADCSS_CHECK_CONFIG(!ids_.empty(), "wav corpus: no speaker directories with WAVs in " + root);
    }

    int num_speakers() const override { return static_cast<int>(ids_.size()); }

    std::string speaker_id(int speaker) const override {
        ADCSS_CHECK_INPUT(speaker >= 0 && speaker < num_speakers(), "wav corpus: bad speaker");
        return ids_[static_cast<size_t>(speaker)];
    }

    std::vector<double> sample_utterance(int speaker, Rng& rng) const override {
        ADCSS_CHECK_INPUT(speaker >= 0 && speaker < num_speakers(), "wav corpus: bad speaker");
        const auto& files = files_[static_cast<size_t>(speaker)];
        const auto idx = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(files.size()) - 1));
        return wavio::read_wav(files[idx]).samples;
    }

private:
    std::vector<std::string> ids_;
    std::vector<std::vector<std::string>> files_;
};

// ---------------------------------------------------------------------------
// Noise sources
// ---------------------------------------------------------------------------

class NoiseSource {
public:
    virtual ~NoiseSource() = default;
    // Must return at least `len` samples.
    virtual std::vector<double> sample_segment(int64_t len, Rng& rng) const = 0;
};

class WhiteNoise final : public NoiseSource {
public:
    std::vector<double> sample_segment(int64_t len, Rng& rng) const override {
        std::vector<double> out(static_cast<size_t>(len));
        for (auto& v : out) v = rng.normal();
        return out;
    }
};

// ---------------------------------------------------------------------------
// Speaker tracks
// ---------------------------------------------------------------------------

using Interval = std::pair<double, double>; // seconds, half-open

struct SpeakerTrack {
    wavio::Waveform waveform;
    std::vector<Interval> intervals; // non-overlapping, ascending
    std::string speaker_id;
};

namespace detail {

inline std::vector<Interval> merge_intervals(std::vector<Interval> v) {
    std::sort(v.begin(), v.end());
    std::vector<Interval> out;
    for (const auto& iv : v) {
        if (!out.empty() && iv.first <= out.back().second)
            out.back().second = std::max(out.back().second, iv.second);
        else
            out.push_back(iv);
    }
    return out;
}

inline int64_t to_sample(double seconds, int sample_rate) {
    return std::llround(seconds * sample_rate);
}

// Root-mean-square over the samples inside the intervals.
inline double active_rms(const SpeakerTrack& track) {
    double energy = 0.0;
    int64_t count = 0;
    const auto n = static_cast<int64_t>(track.waveform.samples.size());
    for (const auto& [s, e] : track.intervals) {
        const int64_t a = std::clamp<int64_t>(to_sample(s, track.waveform.sample_rate), 0, n);
        const int64_t b = std::clamp<int64_t>(to_sample(e, track.waveform.sample_rate), 0, n);
        for (int64_t i = a; i < b; ++i) energy += track.waveform.samples[static_cast<size_t>(i)] *
                                                  track.waveform.samples[static_cast<size_t>(i)];
        count += b - a;
    }
    return count > 0 ? std::sqrt(energy / static_cast<double>(count)) : 0.0;
}

} // namespace detail

struct TrackParams {
    int min_utterances = 1;
    int max_utterances = 5;
    double min_silence_s = 0.0;
    double max_silence_s = 3.0;
    int sample_rate = 16000;

    void validate() const {
        ADCSS_CHECK_CONFIG(min_utterances >= 1 && max_utterances >= min_utterances,
                           "track params: bad utterance count range");
        ADCSS_CHECK_CONFIG(min_silence_s >= 0.0 && max_silence_s >= min_silence_s,
                           "track params: bad silence range");
        ADCSS_CHECK_CONFIG(sample_rate >= 1, "track params: bad sample rate");
    }
};

// Concatenates a uniformly chosen number of utterances, each preceded by a
// uniformly drawn silence, and records the utterance spans.
inline SpeakerTrack sample_track(const UtteranceProvider& corpus, int speaker, Rng& rng,
                                 const TrackParams& params = {}) {
    params.validate();
    ADCSS_CHECK_CONFIG(speaker >= 0 && speaker < corpus.num_speakers(),
                       "sample_track: speaker outside corpus");
    SpeakerTrack track;
    track.speaker_id = corpus.speaker_id(speaker);
    track.waveform.sample_rate = params.sample_rate;

    const auto count = rng.uniform_int(params.min_utterances, params.max_utterances);
    for (int64_t u = 0; u < count; ++u) {
        const double silence = rng.uniform(params.min_silence_s, params.max_silence_s);
        std::vector<double> utt = corpus.sample_utterance(speaker, rng);
        ADCSS_CHECK_CONFIG(!utt.empty(), "sample_track: corpus produced an empty utterance");
        const int64_t start =
            static_cast<int64_t>(track.waveform.samples.size()) +
            detail::to_sample(silence, params.sample_rate);
        track.waveform.samples.resize(static_cast<size_t>(start), 0.0);
        track.waveform.samples.insert(track.waveform.samples.end(), utt.begin(), utt.end());
        track.intervals.emplace_back(
            static_cast<double>(start) / params.sample_rate,
            static_cast<double>(start + static_cast<int64_t>(utt.size())) / params.sample_rate);
    }
    return track;
}

// ---------------------------------------------------------------------------
// Rooms and impulse responses
// ---------------------------------------------------------------------------

struct RoomSpec {
    double length_m = 0, width_m = 0, height_m = 0;
    double rt60_s = 0;
    std::array<double, 3> mic_pos_m{};
    std::vector<std::array<double, 3>> speaker_pos_m;
};

namespace detail {

inline double distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

} // namespace detail

// Draws room dimensions, a reverberation time, and microphone/speaker
// positions that keep 0.5 m clearance from walls and from each other.
inline RoomSpec sample_room(Rng& rng, int num_speakers, int max_attempts = 1000) {
    ADCSS_CHECK_CONFIG(num_speakers >= 1, "sample_room: need at least one speaker");
    RoomSpec room;
    room.length_m = rng.uniform(4.0, 8.0);
    room.width_m = rng.uniform(4.0, 8.0);
    room.height_m = rng.uniform(3.0, 4.0);
    room.rt60_s = rng.uniform(0.2, 0.6);

    for (int attempt = 0; attempt < max_attempts; ++attempt) {
        room.mic_pos_m = {rng.uniform(0.5, room.length_m - 0.5),
                          rng.uniform(0.5, room.width_m - 0.5), rng.uniform(1.0, 1.5)};
        room.speaker_pos_m.clear();
        for (int s = 0; s < num_speakers; ++s)
            room.speaker_pos_m.push_back({rng.uniform(0.5, room.length_m - 0.5),
                                          rng.uniform(0.5, room.width_m - 0.5),
                                          rng.uniform(1.5, 2.0)});
        bool ok = true;
        for (int s = 0; s < num_speakers && ok; ++s) {
            if (detail::distance(room.mic_pos_m, room.speaker_pos_m[static_cast<size_t>(s)]) < 0.5)
                ok = false;
            for (int t = s + 1; t < num_speakers && ok; ++t)
                if (detail::distance(room.speaker_pos_m[static_cast<size_t>(s)],
                                     room.speaker_pos_m[static_cast<size_t>(t)]) < 0.5)
                    ok = false;
        }
        if (ok) return room;
    }
    throw SamplingError("sample_room: no valid placement after bounded retries");
}

// Direct-path impulse at the propagation delay with 1/distance amplitude,
// followed by sign-flipped exponentially decaying noise whose -60 dB point is
// rt60 and whose total energy equals the direct path's.
inline std::vector<double> synth_rir(const RoomSpec& room, int src_index, Rng& rng,
                                     int sample_rate = 16000) {
    ADCSS_CHECK_INPUT(src_index >= 0 &&
                          src_index < static_cast<int>(room.speaker_pos_m.size()),
                      "synth_rir: bad source index");
    const double dist =
        detail::distance(room.mic_pos_m, room.speaker_pos_m[static_cast<size_t>(src_index)]);
    ADCSS_CHECK_INPUT(dist > 0.0, "synth_rir: source sits on the microphone");
    const int64_t delay = std::llround(dist / kSpeedOfSound * sample_rate);
    const double amp = 1.0 / dist;
    const int64_t tail_len =
        room.rt60_s > 0.01 ? std::llround(1.1 * room.rt60_s * sample_rate) : 0;

    std::vector<double> rir(static_cast<size_t>(delay + 1 + tail_len), 0.0);
    rir[static_cast<size_t>(delay)] = amp;
    if (tail_len > 0) {
        double energy = 0.0;
        for (int64_t k = 1; k <= tail_len; ++k) {
            const double t = static_cast<double>(k) / sample_rate;
            const double env = std::pow(10.0, -3.0 * t / room.rt60_s);
            const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
            rir[static_cast<size_t>(delay + k)] = sign * env;
            energy += env * env;
        }
        const double scale = amp / std::sqrt(energy);
        for (int64_t k = 1; k <= tail_len; ++k) rir[static_cast<size_t>(delay + k)] *= scale;
    }
    return rir;
}

// Convolves a track with an RIR, widens the activity spans by the RIR support
// so reverberant tails count as activity, and forces exact silence outside
// them (FFT convolution otherwise leaves rounding dust there).
inline SpeakerTrack apply_reverb(const SpeakerTrack& track, const std::vector<double>& rir) {
    ADCSS_CHECK_INPUT(!rir.empty(), "apply_reverb: empty impulse response");
    const int sr = track.waveform.sample_rate;
    int64_t onset = 0;
    while (onset < static_cast<int64_t>(rir.size()) && rir[static_cast<size_t>(onset)] == 0.0)
        ++onset;

    SpeakerTrack out;
    out.speaker_id = track.speaker_id;
    out.waveform.sample_rate = sr;
    out.waveform.samples = fft_convolve(track.waveform.samples, rir);

    std::vector<Interval> widened;
    for (const auto& [s, e] : track.intervals) {
        const int64_t a = detail::to_sample(s, sr) + onset;
        const int64_t b = detail::to_sample(e, sr) + static_cast<int64_t>(rir.size()) - 1;
        widened.emplace_back(static_cast<double>(a) / sr, static_cast<double>(b) / sr);
    }
    out.intervals = detail::merge_intervals(std::move(widened));

    const auto n = static_cast<int64_t>(out.waveform.samples.size());
    int64_t cursor = 0;
    for (const auto& [s, e] : out.intervals) {
        const int64_t a = std::clamp<int64_t>(detail::to_sample(s, sr), 0, n);
        const int64_t b = std::clamp<int64_t>(detail::to_sample(e, sr), 0, n);
        for (int64_t i = cursor; i < a; ++i) out.waveform.samples[static_cast<size_t>(i)] = 0.0;
        cursor = std::max(cursor, b);
    }
    for (int64_t i = cursor; i < n; ++i) out.waveform.samples[static_cast<size_t>(i)] = 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Mixing
// ---------------------------------------------------------------------------

struct MixtureMeta {
    double snr_db = std::numeric_limits<double>::quiet_NaN();
    bool snr_defined = false;
    double rt60_s = std::numeric_limits<double>::quiet_NaN();
    bool reverberant = false;
    std::array<double, 3> room_dims_m{};
    std::array<double, 3> mic_pos_m{};
    std::vector<std::array<double, 3>> speaker_pos_m;
    std::vector<double> relative_gains_db;
    uint64_t seed = 0;
};

struct MixtureSample {
    wavio::Waveform mixture;
    std::vector<SpeakerTrack> tracks; // post-gain, post-reverb references
    std::vector<double> noise;        // empty when the condition has none
    MixtureMeta meta;
};

namespace detail {

// The on-disk identity: every component is float32, and the mixture is the
// float32 rounding of their left-to-right double sum (tracks, then noise).
inline void rebuild_mixture(MixtureSample& mix) {
    const size_t n = mix.tracks.empty() ? mix.noise.size() : mix.tracks[0].waveform.samples.size();
    mix.mixture.samples.assign(n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (const auto& t : mix.tracks) acc += t.waveform.samples[i];
        if (!mix.noise.empty()) acc += mix.noise[i];
        mix.mixture.samples[i] = static_cast<double>(static_cast<float>(acc));
    }
}

} // namespace detail

// Pads tracks to a common length, normalizes each to unit RMS over its active
// spans, applies relative gains (the first speaker anchors at 0 dB, the rest
// draw from [-5, 0] dB), quantizes, and sums.
inline MixtureSample mix_anechoic(std::vector<SpeakerTrack> tracks, Rng& rng,
                                  double gain_spread_db = 5.0) {
    ADCSS_CHECK_INPUT(!tracks.empty(), "mix_anechoic: no tracks");
    ADCSS_CHECK_CONFIG(gain_spread_db >= 0.0, "mix_anechoic: negative gain spread");
    const int sr = tracks[0].waveform.sample_rate;
    size_t max_len = 0;
    for (const auto& t : tracks) {
        ADCSS_CHECK_INPUT(t.waveform.sample_rate == sr, "mix_anechoic: sample rate mismatch");
        max_len = std::max(max_len, t.waveform.samples.size());
    }

    MixtureSample out;
    out.mixture.sample_rate = sr;
    for (size_t c = 0; c < tracks.size(); ++c) {
        SpeakerTrack t = std::move(tracks[c]);
        t.waveform.samples.resize(max_len, 0.0);
        const double rms = detail::active_rms(t);
        ADCSS_CHECK_INPUT(rms > 0.0, "mix_anechoic: track " + t.speaker_id + " is silent");
        const double gain_db = c == 0 ? 0.0 : rng.uniform(-gain_spread_db, 0.0);
        const double scale = std::pow(10.0, gain_db / 20.0) / rms;
        for (auto& v : t.waveform.samples) v *= scale;
        quantize_f32(t.waveform.samples);
        out.meta.relative_gains_db.push_back(gain_db);
        out.tracks.push_back(std::move(t));
    }
    detail::rebuild_mixture(out);
    return out;
}

// Adds noise at a target SNR drawn uniformly from [snr_min, snr_max]. The
// signal level is the mean over speakers of each speaker's full-length power
// in dB. A zero-power noise source leaves the mixture unchanged with the SNR
// flagged undefined.
inline void add_noise(MixtureSample& mix, const NoiseSource& source, Rng& rng,
                      double snr_min_db = 0.0, double snr_max_db = 10.0) {
    ADCSS_CHECK_CONFIG(snr_max_db >= snr_min_db, "add_noise: bad SNR range");
    ADCSS_CHECK_INPUT(!mix.tracks.empty(), "add_noise: mixture has no tracks");
    const auto n = static_cast<int64_t>(mix.mixture.samples.size());
    const double target = rng.uniform(snr_min_db, snr_max_db);
    std::vector<double> noise = source.sample_segment(n, rng);
    ADCSS_CHECK_INPUT(static_cast<int64_t>(noise.size()) >= n,
                      "add_noise: noise segment shorter than the mixture");
    noise.resize(static_cast<size_t>(n));

    double signal_level_db = 0.0;
    for (const auto& t : mix.tracks) {
        double p = 0.0;
        for (double v : t.waveform.samples) p += v * v;
        p /= static_cast<double>(n);
        ADCSS_CHECK_INPUT(p > 0.0, "add_noise: silent reference track");
        signal_level_db += 10.0 * std::log10(p);
    }
    signal_level_db /= static_cast<double>(mix.tracks.size());

    double noise_power = 0.0;
    for (double v : noise) noise_power += v * v;
    noise_power /= static_cast<double>(n);
    if (noise_power <= 0.0) {
        mix.meta.snr_defined = false;
        mix.meta.snr_db = std::numeric_limits<double>::quiet_NaN();
        return;
    }
    const double noise_level_db = 10.0 * std::log10(noise_power);
    const double scale = std::pow(10.0, (signal_level_db - target - noise_level_db) / 20.0);
    for (auto& v : noise) v *= scale;
    quantize_f32(noise);

    mix.noise = std::move(noise);
    mix.meta.snr_db = target;
    mix.meta.snr_defined = true;
    detail::rebuild_mixture(mix);
}

// ---------------------------------------------------------------------------
// Dataset construction
// ---------------------------------------------------------------------------

enum class Condition { anechoic, noisy, reverb, noisy_reverb };

inline Condition condition_from_string(const std::string& s) {
    if (s == "anechoic") return Condition::anechoic;
    if (s == "noisy") return Condition::noisy;
    if (s == "reverb") return Condition::reverb;
    if (s == "noisy_reverb") return Condition::noisy_reverb;
    throw InvalidConfig("unknown condition: " + s);
}

inline std::string to_string(Condition c) {
    switch (c) {
        case Condition::anechoic: return "anechoic";
        case Condition::noisy: return "noisy";
        case Condition::reverb: return "reverb";
        case Condition::noisy_reverb: return "noisy_reverb";
    }
    return "anechoic";
}

inline bool has_noise(Condition c) {
    return c == Condition::noisy || c == Condition::noisy_reverb;
}

inline bool has_reverb(Condition c) {
    return c == Condition::reverb || c == Condition::noisy_reverb;
}

struct ForgeConfig {
    int num_mixtures = 100;
    int min_speakers = 2;
    int max_speakers = 3;
    Condition condition = Condition::anechoic;
    uint64_t seed = 1;
    // Speaker pool [begin, end) within the provider; (0, 0) means every speaker.
    int pool_begin = 0;
    int pool_end = 0;
    TrackParams track;
    double gain_spread_db = 5.0;
    double snr_min_db = 0.0;
    double snr_max_db = 10.0;

    void validate() const {
        ADCSS_CHECK_CONFIG(num_mixtures >= 1, "forge: need at least one mixture");
        ADCSS_CHECK_CONFIG(min_speakers >= 1 && max_speakers >= min_speakers,
                           "forge: bad speaker count range");
        ADCSS_CHECK_CONFIG(pool_begin >= 0 && pool_end >= 0, "forge: bad speaker pool");
        track.validate();
    }

    static ForgeConfig from_config(const config::ConfigMap& map) {
        ForgeConfig c;
        c.num_mixtures = static_cast<int>(map.get_int("num_mixtures", c.num_mixtures));
        c.min_speakers = static_cast<int>(map.get_int("min_speakers", c.min_speakers));
        c.max_speakers = static_cast<int>(map.get_int("max_speakers", c.max_speakers));
        c.condition = condition_from_string(map.get_string("condition", "anechoic"));
        c.seed = map.get_uint64("seed", c.seed);
        c.pool_begin = static_cast<int>(map.get_int("pool_begin", c.pool_begin));
        c.pool_end = static_cast<int>(map.get_int("pool_end", c.pool_end));
        c.track.min_utterances = static_cast<int>(map.get_int("min_utterances", c.track.min_utterances));
        c.track.max_utterances = static_cast<int>(map.get_int("max_utterances", c.track.max_utterances));
        c.track.min_silence_s = map.get_double("min_silence_s", c.track.min_silence_s);
        c.track.max_silence_s = map.get_double("max_silence_s", c.track.max_silence_s);
        c.track.sample_rate = static_cast<int>(map.get_int("sample_rate", c.track.sample_rate));
        c.gain_spread_db = map.get_double("gain_spread_db", c.gain_spread_db);
        c.snr_min_db = map.get_double("snr_min_db", c.snr_min_db);
        c.snr_max_db = map.get_double("snr_max_db", c.snr_max_db);
        c.validate();
        return c;
    }
};

// Deterministic per-mixture seed so synthesis is order-independent.
inline uint64_t mixture_seed(uint64_t master, int64_t index) {
    return splitmix64(splitmix64(master) ^
                      (0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(index + 1)));
}

struct ManifestRecord {
    std::string id;
    std::string mixture_path;
    std::vector<std::string> ref_paths;
    std::vector<std::vector<Interval>> intervals;
    std::vector<std::string> speaker_ids;
    std::string condition;
    double snr_db = std::numeric_limits<double>::quiet_NaN();
    bool snr_defined = false;
    double rt60_s = std::numeric_limits<double>::quiet_NaN();
    bool reverberant = false;
    std::array<double, 3> room_dims_m{};
    std::vector<double> relative_gains_db;
    uint64_t seed = 0;
    std::string noise_path; // empty when absent
};

struct ManifestHeader {
    int version = 1;
    int sample_rate = 16000;
    std::string condition;
    int num_mixtures = 0;
    uint64_t seed = 0;
    double overlap_ratio = 0.0; // fraction of time with two or more speakers active
};

struct Manifest {
    ManifestHeader header;
    std::vector<ManifestRecord> records;
};

namespace detail {

// Fraction of the summed mixture duration during which at least two speakers
// are active, from the labeled intervals.
inline double overlap_ratio(const std::vector<ManifestRecord>& records,
                            const std::vector<double>& durations) {
    double overlapped = 0.0, total = 0.0;
    for (size_t m = 0; m < records.size(); ++m) {
        total += durations[m];
        std::vector<std::pair<double, int>> events;
        for (const auto& spk : records[m].intervals)
            for (const auto& [s, e] : spk) {
                events.emplace_back(s, +1);
                events.emplace_back(e, -1);
            }
        std::sort(events.begin(), events.end());
        int active = 0;
        double prev = 0.0;
        for (const auto& [t, delta] : events) {
            if (active >= 2) overlapped += t - prev;
            active += delta;
            prev = t;
        }
    }
    return total > 0.0 ? overlapped / total : 0.0;
}

inline nlohmann::json record_to_json(const ManifestRecord& r) {
    nlohmann::json j;
    j["type"] = "mixture";
    j["id"] = r.id;
    j["mixture"] = r.mixture_path;
    j["refs"] = r.ref_paths;
    nlohmann::json iv = nlohmann::json::array();
    for (const auto& spk : r.intervals) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& [s, e] : spk) rows.push_back({s, e});
        iv.push_back(rows);
    }
    j["intervals"] = iv;
    j["speaker_ids"] = r.speaker_ids;
    j["condition"] = r.condition;
    if (r.snr_defined)
        j["snr_db"] = r.snr_db;
    else
        j["snr_db"] = nullptr;
    if (r.reverberant) {
        j["rt60_s"] = r.rt60_s;
        j["room_dims_m"] = {r.room_dims_m[0], r.room_dims_m[1], r.room_dims_m[2]};
    } else {
        j["rt60_s"] = nullptr;
        j["room_dims_m"] = nullptr;
    }
    j["relative_gains_db"] = r.relative_gains_db;
    j["seed"] = r.seed;
    if (!r.noise_path.empty())
        j["noise"] = r.noise_path;
    else
        j["noise"] = nullptr;
    return j;
}

inline ManifestRecord record_from_json(const nlohmann::json& j) {
    ManifestRecord r;
    r.id = j.value("id", "");
    r.mixture_path = j.value("mixture", "");
    r.ref_paths = j.value("refs", std::vector<std::string>{});
    for (const auto& spk : j.at("intervals")) {
        std::vector<Interval> rows;
        for (const auto& iv : spk) rows.emplace_back(iv.at(0).get<double>(), iv.at(1).get<double>());
        r.intervals.push_back(std::move(rows));
    }
    r.speaker_ids = j.value("speaker_ids", std::vector<std::string>{});
    r.condition = j.value("condition", "anechoic");
    if (j.contains("snr_db") && !j["snr_db"].is_null()) {
        r.snr_db = j["snr_db"].get<double>();
        r.snr_defined = true;
    }
    if (j.contains("rt60_s") && !j["rt60_s"].is_null()) {
        r.rt60_s = j["rt60_s"].get<double>();
        r.reverberant = true;
        const auto& dims = j.at("room_dims_m");
        r.room_dims_m = {dims.at(0).get<double>(), dims.at(1).get<double>(), dims.at(2).get<double>()};
    }
    r.relative_gains_db = j.value("relative_gains_db", std::vector<double>{});
    r.seed = j.value("seed", static_cast<uint64_t>(0));
    if (j.contains("noise") && !j["noise"].is_null()) r.noise_path = j["noise"].get<std::string>();
    return r;
}

} // namespace detail

// Synthesizes one mixture from its own seed; used by build_dataset and safe
// to call in parallel for distinct indices.
inline MixtureSample synthesize_mixture(const UtteranceProvider& corpus, const ForgeConfig& cfg,
                                        int64_t index) {
    cfg.validate();
    const int pool_begin = cfg.pool_begin;
    const int pool_end = cfg.pool_end > 0 ? cfg.pool_end : corpus.num_speakers();
    ADCSS_CHECK_CONFIG(pool_begin < pool_end && pool_end <= corpus.num_speakers(),
                       "forge: speaker pool outside corpus");
    const int pool_size = pool_end - pool_begin;
    ADCSS_CHECK_CONFIG(pool_size >= cfg.max_speakers,
                       "forge: speaker pool smaller than the mixture speaker count");

    const uint64_t seed = mixture_seed(cfg.seed, index);
    Rng rng(seed);
    const auto C = static_cast<int>(rng.uniform_int(cfg.min_speakers, cfg.max_speakers));

    std::vector<int> speakers;
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
        speakers.clear();
        while (static_cast<int>(speakers.size()) < C) {
            const auto cand = static_cast<int>(rng.uniform_int(pool_begin, pool_end - 1));
            if (std::find(speakers.begin(), speakers.end(), cand) == speakers.end())
                speakers.push_back(cand);
        }
        placed = true;
        for (size_t a = 0; a < speakers.size() && placed; ++a)
            for (size_t b = a + 1; b < speakers.size() && placed; ++b)
                if (!corpus.distinct(speakers[a], speakers[b])) placed = false;
    }
    if (!placed) throw SamplingError("forge: no mutually distinct speaker set in the pool");

    std::vector<SpeakerTrack> tracks;
    for (int spk : speakers) tracks.push_back(sample_track(corpus, spk, rng, cfg.track));

    MixtureMeta room_meta;
    if (has_reverb(cfg.condition)) {
        RoomSpec room = sample_room(rng, C);
        for (auto& t : tracks) {
            const auto rir = synth_rir(room, static_cast<int>(&t - tracks.data()), rng,
                                       cfg.track.sample_rate);
            t = apply_reverb(t, rir);
        }
        room_meta.rt60_s = room.rt60_s;
        room_meta.reverberant = true;
        room_meta.room_dims_m = {room.length_m, room.width_m, room.height_m};
        room_meta.mic_pos_m = room.mic_pos_m;
        room_meta.speaker_pos_m = room.speaker_pos_m;
    }

    MixtureSample mix = mix_anechoic(std::move(tracks), rng, cfg.gain_spread_db);
    if (has_noise(cfg.condition)) {
        WhiteNoise noise;
        add_noise(mix, noise, rng, cfg.snr_min_db, cfg.snr_max_db);
    }
    mix.meta.seed = seed;
    mix.meta.rt60_s = room_meta.rt60_s;
    mix.meta.reverberant = room_meta.reverberant;
    mix.meta.room_dims_m = room_meta.room_dims_m;
    mix.meta.mic_pos_m = room_meta.mic_pos_m;
    mix.meta.speaker_pos_m = room_meta.speaker_pos_m;
    return mix;
}

// Writes WAVs plus a line-delimited manifest (header first) under out_dir.
inline Manifest build_dataset(const UtteranceProvider& corpus, const ForgeConfig& cfg,
                              const std::string& out_dir) {
    cfg.validate();
    namespace fs = std::filesystem;
    const fs::path root(out_dir);
    const fs::path audio = root / "audio";
    std::error_code ec;
    fs::create_directories(audio, ec);
    ADCSS_CHECK_INPUT(!ec, "forge: cannot create " + audio.string());

    Manifest manifest;
    manifest.header.sample_rate = cfg.track.sample_rate;
    manifest.header.condition = to_string(cfg.condition);
    manifest.header.num_mixtures = cfg.num_mixtures;
    manifest.header.seed = cfg.seed;

    std::vector<double> durations;
    for (int64_t i = 0; i < cfg.num_mixtures; ++i) {
        MixtureSample mix = synthesize_mixture(corpus, cfg, i);

        char tag[16];
        std::snprintf(tag, sizeof(tag), "mix_%05lld", static_cast<long long>(i));
        ManifestRecord rec;
        rec.id = tag;
        rec.mixture_path = "audio/" + rec.id + ".wav";
        wavio::write_wav((root / rec.mixture_path).string(), mix.mixture);
        for (size_t c = 0; c < mix.tracks.size(); ++c) {
            const std::string ref = "audio/" + rec.id + "_spk" + std::to_string(c) + ".wav";
            wavio::write_wav((root / ref).string(), mix.tracks[c].waveform);
            rec.ref_paths.push_back(ref);
            rec.intervals.push_back(mix.tracks[c].intervals);
            rec.speaker_ids.push_back(mix.tracks[c].speaker_id);
        }
        if (!mix.noise.empty()) {
            rec.noise_path = "audio/" + rec.id + "_noise.wav";
            wavio::Waveform nw;
            nw.sample_rate = mix.mixture.sample_rate;
            nw.samples = mix.noise;
            wavio::write_wav((root / rec.noise_path).string(), nw);
        }
        rec.condition = to_string(cfg.condition);
        rec.snr_db = mix.meta.snr_db;
        rec.snr_defined = mix.meta.snr_defined;
        rec.rt60_s = mix.meta.rt60_s;
        rec.reverberant = mix.meta.reverberant;
        rec.room_dims_m = mix.meta.room_dims_m;
        rec.relative_gains_db = mix.meta.relative_gains_db;
        rec.seed = mix.meta.seed;
        durations.push_back(static_cast<double>(mix.mixture.samples.size()) /
                            mix.mixture.sample_rate);
        manifest.records.push_back(std::move(rec));
    }
    manifest.header.overlap_ratio = detail::overlap_ratio(manifest.records, durations);

    std::ofstream out((root / "manifest.jsonl").string());
    ADCSS_CHECK_INPUT(out.good(), "forge: cannot open manifest for writing");
    nlohmann::json h;
    h["type"] = "header";
    h["version"] = manifest.header.version;
    h["sample_rate"] = manifest.header.sample_rate;
    h["condition"] = manifest.header.condition;
    h["num_mixtures"] = manifest.header.num_mixtures;
    h["seed"] = manifest.header.seed;
    h["overlap_ratio"] = manifest.header.overlap_ratio;
    out << h.dump() << "\n";
    for (const auto& rec : manifest.records) out << detail::record_to_json(rec).dump() << "\n";
    ADCSS_CHECK_INPUT(out.good(), "forge: manifest write failed");
    return manifest;
}

inline Manifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    ADCSS_CHECK_INPUT(in.good(), "read_manifest: cannot open " + path);
    Manifest manifest;
    std::string line;
    bool saw_header = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        const std::string type = j.value("type", "");
        if (type == "header") {
            manifest.header.version = j.value("version", 1);
            ADCSS_CHECK_INPUT(manifest.header.version == 1,
                              "read_manifest: unsupported manifest version");
            manifest.header.sample_rate = j.value("sample_rate", 16000);
            manifest.header.condition = j.value("condition", "anechoic");
            manifest.header.num_mixtures = j.value("num_mixtures", 0);
            manifest.header.seed = j.value("seed", static_cast<uint64_t>(0));
            manifest.header.overlap_ratio = j.value("overlap_ratio", 0.0);
            saw_header = true;
        } else if (type == "mixture") {
            manifest.records.push_back(detail::record_from_json(j));
        }
    }
    ADCSS_CHECK_INPUT(saw_header, "read_manifest: missing header line in " + path);
    return manifest;
}

} // namespace adcss::forge
