#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "adcss/forge.hpp"
#include "adcss/metrics.hpp"
#include "test_support.hpp"

using namespace adcss;
namespace fg = adcss::forge;
namespace fs = std::filesystem;

namespace {

// Fixed-content corpus for tests that only exercise track assembly.
class StubCorpus final : public fg::UtteranceProvider {
public:
    explicit StubCorpus(int64_t utterance_len = 800, int speakers = 4)
        : len_(utterance_len), speakers_(speakers) {}
    int num_speakers() const override { return speakers_; }
    std::string speaker_id(int speaker) const override { return "stub" + std::to_string(speaker); }
    std::vector<double> sample_utterance(int speaker, Rng& rng) const override {
        std::vector<double> out(static_cast<size_t>(len_));
        for (size_t i = 0; i < out.size(); ++i)
            out[i] = std::sin(0.02 * (speaker + 1) * static_cast<double>(i)) + 0.1 * rng.normal();
        return out;
    }

private:
    int64_t len_;
    int speakers_;
};

class ZeroNoise final : public fg::NoiseSource {
public:
    std::vector<double> sample_segment(int64_t len, Rng&) const override {
        return std::vector<double>(static_cast<size_t>(len), 0.0);
    }
};

class ShortNoise final : public fg::NoiseSource {
public:
    std::vector<double> sample_segment(int64_t len, Rng&) const override {
        return std::vector<double>(static_cast<size_t>(len > 0 ? len - 1 : 0), 0.5);
    }
};

double active_rms_db(const fg::SpeakerTrack& t) {
    double energy = 0.0;
    int64_t count = 0;
    for (const auto& [s, e] : t.intervals) {
        const auto a = static_cast<int64_t>(std::llround(s * t.waveform.sample_rate));
        const auto b = static_cast<int64_t>(std::llround(e * t.waveform.sample_rate));
        for (int64_t i = a; i < b && i < static_cast<int64_t>(t.waveform.samples.size()); ++i)
            energy += t.waveform.samples[static_cast<size_t>(i)] *
                      t.waveform.samples[static_cast<size_t>(i)];
        count += b - a;
    }
    return 10.0 * std::log10(energy / static_cast<double>(count));
}

bool zero_outside_intervals(const fg::SpeakerTrack& t) {
    std::vector<bool> active(t.waveform.samples.size(), false);
    for (const auto& [s, e] : t.intervals) {
        const auto a = static_cast<int64_t>(std::llround(s * t.waveform.sample_rate));
        const auto b = static_cast<int64_t>(std::llround(e * t.waveform.sample_rate));
        for (int64_t i = std::max<int64_t>(0, a);
             i < std::min<int64_t>(b, static_cast<int64_t>(active.size())); ++i)
            active[static_cast<size_t>(i)] = true;
    }
    for (size_t i = 0; i < active.size(); ++i)
        if (!active[i] && t.waveform.samples[i] != 0.0) return false;
    return true;
}

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("adcss_forge_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

} // namespace

TEST_CASE("fft_convolve matches direct convolution") {
    Rng rng(950);
    for (int trial = 0; trial < 10; ++trial) {
        const auto na = static_cast<size_t>(rng.uniform_int(1, 64));
        const auto nb = static_cast<size_t>(rng.uniform_int(1, 32));
        std::vector<double> a(na), b(nb);
        for (auto& v : a) v = rng.normal();
        for (auto& v : b) v = rng.normal();
        auto got = fg::fft_convolve(a, b);
        REQUIRE(got.size() == na + nb - 1);
        for (size_t k = 0; k < got.size(); ++k) {
            double want = 0.0;
            for (size_t i = 0; i < na; ++i)
                if (k >= i && k - i < nb) want += a[i] * b[k - i];
            REQUIRE(got[k] == Catch::Approx(want).margin(1e-9));
        }
    }
}

TEST_CASE("toy corpus voices are band-limited and separable") {
    fg::ToyCorpus corpus;
    for (int s = 0; s < corpus.num_speakers(); ++s) {
        const double f = corpus.center_hz(s);
        REQUIRE(f >= 400.0);
        REQUIRE(f <= 3600.0);
    }
    REQUIRE_FALSE(corpus.distinct(3, 3));

    // Spectral centroid of an utterance should sit near the speaker's band.
    Rng rng(951);
    for (int s : {0, 5, 11}) {
        auto utt = corpus.sample_utterance(s, rng);
        REQUIRE(utt.size() >= 8000);
        double num = 0.0, den = 0.0, prev = 0.0;
        // Zero-crossing rate as a cheap frequency proxy.
        for (double v : utt) {
            if (prev < 0.0 && v >= 0.0) num += 1.0;
            prev = v;
            den += 1.0;
        }
        const double zc_hz = num / (den / 16000.0);
        const double f = corpus.center_hz(s);
        REQUIRE(zc_hz > 0.4 * f);
        REQUIRE(zc_hz < 2.5 * f);
    }

    // Unit RMS on emission.
    auto utt = corpus.sample_utterance(2, rng);
    double p = 0.0;
    for (double v : utt) p += v * v;
    REQUIRE(std::sqrt(p / static_cast<double>(utt.size())) == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("sample_track draws counts uniformly and records intervals") {
    StubCorpus corpus(160);
    Rng rng(952);
    fg::TrackParams params;
    params.max_silence_s = 0.05;
    std::map<int64_t, int> histogram;
    for (int i = 0; i < 2000; ++i) {
        auto track = fg::sample_track(corpus, 0, rng, params);
        ++histogram[static_cast<int64_t>(track.intervals.size())];
        REQUIRE_FALSE(track.intervals.empty());
        for (size_t k = 1; k < track.intervals.size(); ++k)
            REQUIRE(track.intervals[k].first >= track.intervals[k - 1].second);
        REQUIRE(zero_outside_intervals(track));
    }
    for (int64_t c = 1; c <= 5; ++c) {
        const double freq = histogram[c] / 2000.0;
        REQUIRE(freq > 0.2 - 0.035);
        REQUIRE(freq < 0.2 + 0.035);
    }
}

TEST_CASE("sample_track degenerate randomness") {
    StubCorpus corpus(16000);
    Rng rng(953);
    fg::TrackParams params;
    params.min_utterances = params.max_utterances = 1;
    params.min_silence_s = params.max_silence_s = 0.0;
    auto track = fg::sample_track(corpus, 1, rng, params);
    REQUIRE(track.waveform.samples.size() == 16000);
    REQUIRE(track.intervals.size() == 1);
    REQUIRE(track.intervals[0].first == 0.0);
    REQUIRE(track.intervals[0].second == Catch::Approx(1.0));
    REQUIRE(track.speaker_id == "stub1");
}

TEST_CASE("sample_track is deterministic under a fixed seed") {
    fg::ToyCorpus corpus;
    Rng a(954), b(954);
    auto ta = fg::sample_track(corpus, 2, a);
    auto tb = fg::sample_track(corpus, 2, b);
    REQUIRE(ta.waveform.samples == tb.waveform.samples);
    REQUIRE(ta.intervals == tb.intervals);
}

TEST_CASE("mix_anechoic levels span a 5 dB window") {
    StubCorpus corpus(4000);
    for (uint64_t seed : {1ull, 2ull, 3ull, 4ull}) {
        Rng rng(955 + seed);
        std::vector<fg::SpeakerTrack> tracks;
        for (int c = 0; c < 3; ++c) tracks.push_back(fg::sample_track(corpus, c, rng));
        auto mix = fg::mix_anechoic(std::move(tracks), rng);
        REQUIRE(mix.meta.relative_gains_db[0] == 0.0);
        for (size_t c = 0; c < mix.tracks.size(); ++c) {
            const double g = mix.meta.relative_gains_db[c];
            REQUIRE(g <= 0.0);
            REQUIRE(g >= -5.0);
            // Active level realizes the drawn gain.
            REQUIRE(active_rms_db(mix.tracks[c]) == Catch::Approx(g).margin(1e-3));
        }
        for (size_t a = 0; a < mix.tracks.size(); ++a)
            for (size_t b = a + 1; b < mix.tracks.size(); ++b) {
                const double diff = std::abs(active_rms_db(mix.tracks[a]) - active_rms_db(mix.tracks[b]));
                REQUIRE(diff >= 0.0);
                REQUIRE(diff <= 5.0 + 1e-6);
            }
    }
}

TEST_CASE("mix_anechoic with one speaker returns that track") {
    StubCorpus corpus(2000);
    Rng rng(956);
    std::vector<fg::SpeakerTrack> tracks{fg::sample_track(corpus, 0, rng)};
    auto mix = fg::mix_anechoic(std::move(tracks), rng);
    REQUIRE(mix.mixture.samples == mix.tracks[0].waveform.samples);
}

TEST_CASE("mixture equals the componentwise float sum exactly") {
    StubCorpus corpus(3000);
    Rng rng(957);
    std::vector<fg::SpeakerTrack> tracks;
    for (int c = 0; c < 3; ++c) tracks.push_back(fg::sample_track(corpus, c, rng));
    auto mix = fg::mix_anechoic(std::move(tracks), rng);
    fg::WhiteNoise noise;
    fg::add_noise(mix, noise, rng);
    for (size_t i = 0; i < mix.mixture.samples.size(); ++i) {
        double acc = 0.0;
        for (const auto& t : mix.tracks) acc += t.waveform.samples[i];
        acc += mix.noise[i];
        REQUIRE(mix.mixture.samples[i] == static_cast<double>(static_cast<float>(acc)));
    }
}

TEST_CASE("add_noise hits the requested SNR under the average-power rule") {
    StubCorpus corpus(5000);
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(958 + seed);
        std::vector<fg::SpeakerTrack> tracks;
        for (int c = 0; c < 2; ++c) tracks.push_back(fg::sample_track(corpus, c, rng));
        auto mix = fg::mix_anechoic(std::move(tracks), rng);
        fg::WhiteNoise noise;
        fg::add_noise(mix, noise, rng);
        REQUIRE(mix.meta.snr_defined);
        REQUIRE(mix.meta.snr_db >= 0.0);
        REQUIRE(mix.meta.snr_db <= 10.0);

        // Recompute from the emitted components.
        const auto n = static_cast<double>(mix.mixture.samples.size());
        double signal_db = 0.0;
        for (const auto& t : mix.tracks) {
            double p = 0.0;
            for (double v : t.waveform.samples) p += v * v;
            signal_db += 10.0 * std::log10(p / n);
        }
        signal_db /= static_cast<double>(mix.tracks.size());
        double noise_p = 0.0;
        for (double v : mix.noise) noise_p += v * v;
        const double measured = signal_db - 10.0 * std::log10(noise_p / n);
        REQUIRE(measured == Catch::Approx(mix.meta.snr_db).margin(0.1));
    }
}

TEST_CASE("add_noise degenerate cases") {
    StubCorpus corpus(2000);
    Rng rng(959);
    std::vector<fg::SpeakerTrack> tracks{fg::sample_track(corpus, 0, rng)};
    auto mix = fg::mix_anechoic(std::move(tracks), rng);
    const auto before = mix.mixture.samples;

    ZeroNoise zero;
    fg::add_noise(mix, zero, rng);
    REQUIRE_FALSE(mix.meta.snr_defined);
    REQUIRE(mix.noise.empty());
    REQUIRE(mix.mixture.samples == before);

    ShortNoise tiny;
    REQUIRE_THROWS_AS(fg::add_noise(mix, tiny, rng), InvalidInput);
}

TEST_CASE("sample_room invariants hold across many draws") {
    Rng rng(960);
    bool saw_tight_room = false;
    for (int i = 0; i < 3000; ++i) {
        auto room = fg::sample_room(rng, 3);
        REQUIRE(room.length_m >= 4.0);
        REQUIRE(room.length_m <= 8.0);
        REQUIRE(room.width_m >= 4.0);
        REQUIRE(room.width_m <= 8.0);
        REQUIRE(room.height_m >= 3.0);
        REQUIRE(room.height_m <= 4.0);
        REQUIRE(room.rt60_s >= 0.2);
        REQUIRE(room.rt60_s <= 0.6);
        REQUIRE(room.mic_pos_m[2] >= 1.0);
        REQUIRE(room.mic_pos_m[2] <= 1.5);
        auto in_bounds = [&](const std::array<double, 3>& p, double zlo, double zhi) {
            return p[0] >= 0.5 && p[0] <= room.length_m - 0.5 && p[1] >= 0.5 &&
                   p[1] <= room.width_m - 0.5 && p[2] >= zlo && p[2] <= zhi;
        };
        REQUIRE(in_bounds(room.mic_pos_m, 1.0, 1.5));
        for (const auto& p : room.speaker_pos_m) REQUIRE(in_bounds(p, 1.5, 2.0));
        for (size_t a = 0; a < room.speaker_pos_m.size(); ++a) {
            REQUIRE(fg::detail::distance(room.mic_pos_m, room.speaker_pos_m[a]) >= 0.5);
            for (size_t b = a + 1; b < room.speaker_pos_m.size(); ++b)
                REQUIRE(fg::detail::distance(room.speaker_pos_m[a], room.speaker_pos_m[b]) >= 0.5);
        }
        if (room.length_m < 4.5 && room.width_m < 4.5) saw_tight_room = true;
    }
    REQUIRE(saw_tight_room);
}

TEST_CASE("synth_rir geometry and decay") {
    fg::RoomSpec room;
    room.length_m = 6;
    room.width_m = 6;
    room.height_m = 3.5;
    room.rt60_s = 0.3;
    room.mic_pos_m = {2.0, 2.0, 1.2};
    room.speaker_pos_m = {{4.0, 2.0, 1.7}, {2.0, 5.0, 1.7}};

    Rng rng(961);
    auto rir = fg::synth_rir(room, 0, rng);
    const double dist = std::sqrt(4.0 + 0.25);
    const auto delay = static_cast<int64_t>(std::llround(dist / 343.0 * 16000.0));
    for (int64_t i = 0; i < delay; ++i) REQUIRE(rir[static_cast<size_t>(i)] == 0.0);
    REQUIRE(rir[static_cast<size_t>(delay)] == Catch::Approx(1.0 / dist).margin(1e-12));
    REQUIRE(static_cast<int64_t>(rir.size()) == delay + 1 + std::llround(1.1 * 0.3 * 16000.0));

    // Tail energy equals direct-path energy.
    double tail_energy = 0.0;
    for (size_t i = static_cast<size_t>(delay) + 1; i < rir.size(); ++i)
        tail_energy += rir[i] * rir[i];
    REQUIRE(tail_energy == Catch::Approx(1.0 / (dist * dist)).margin(1e-9));

    // Envelope decay: a least-squares line through log10|tail| recovers rt60.
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int64_t m = 0;
    for (size_t i = static_cast<size_t>(delay) + 1; i < rir.size(); ++i) {
        const double t = static_cast<double>(i - static_cast<size_t>(delay)) / 16000.0;
        const double y = std::log10(std::abs(rir[i]));
        sx += t;
        sy += y;
        sxx += t * t;
        sxy += t * y;
        ++m;
    }
    const double slope = (static_cast<double>(m) * sxy - sx * sy) /
                         (static_cast<double>(m) * sxx - sx * sx);
    const double rt60_est = -3.0 / slope;
    REQUIRE(rt60_est == Catch::Approx(0.3).margin(1.0 / 16000.0));

    // The farther speaker has the weaker direct path.
    auto rir_far = fg::synth_rir(room, 1, rng);
    double peak_near = 0, peak_far = 0;
    for (double v : rir) peak_near = std::max(peak_near, std::abs(v));
    for (double v : rir_far) peak_far = std::max(peak_far, std::abs(v));
    REQUIRE(peak_far < peak_near);
}

TEST_CASE("synth_rir anechoic limit is a delayed scaled copy") {
    fg::RoomSpec room;
    room.length_m = 6;
    room.width_m = 6;
    room.height_m = 3.5;
    room.rt60_s = 0.0;
    room.mic_pos_m = {2.0, 2.0, 1.2};
    room.speaker_pos_m = {{2.0, 4.0, 1.2}};
    Rng rng(962);
    auto rir = fg::synth_rir(room, 0, rng);
    const auto delay = static_cast<int64_t>(std::llround(2.0 / 343.0 * 16000.0));
    REQUIRE(static_cast<int64_t>(rir.size()) == delay + 1);
    REQUIRE(rir.back() == Catch::Approx(0.5).margin(1e-12));

    std::vector<double> x{1.0, -2.0, 3.0};
    auto y = fg::fft_convolve(x, rir);
    for (size_t i = 0; i < x.size(); ++i)
        REQUIRE(y[static_cast<size_t>(delay) + i] == Catch::Approx(0.5 * x[i]).margin(1e-9));
}

TEST_CASE("apply_reverb widens intervals and keeps exact silence elsewhere") {
    StubCorpus corpus(1500);
    Rng rng(963);
    fg::TrackParams params;
    params.min_utterances = params.max_utterances = 2;
    auto track = fg::sample_track(corpus, 0, rng, params);

    fg::RoomSpec room;
    room.length_m = 5;
    room.width_m = 5;
    room.height_m = 3.2;
    room.rt60_s = 0.25;
    room.mic_pos_m = {1.5, 1.5, 1.2};
    room.speaker_pos_m = {{3.5, 3.5, 1.8}};
    auto rir = fg::synth_rir(room, 0, rng);
    auto wet = fg::apply_reverb(track, rir);

    REQUIRE(wet.waveform.samples.size() == track.waveform.samples.size() + rir.size() - 1);
    REQUIRE(zero_outside_intervals(wet));
    // Every widened interval ends later than its dry counterpart by the tail.
    REQUIRE(wet.intervals.back().second >
            track.intervals.back().second + 0.9 * 1.1 * room.rt60_s);

    // Rasterized labels capture all of the energy.
    auto act = metrics::rasterize_intervals({wet.intervals},
                                            static_cast<int64_t>(wet.waveform.samples.size() / 8),
                                            8, 16000);
    double inside = 0.0, total = 0.0;
    for (size_t i = 0; i < wet.waveform.samples.size(); ++i) {
        const auto frame = static_cast<int64_t>(i / 8);
        const double e = wet.waveform.samples[i] * wet.waveform.samples[i];
        total += e;
        if (frame < act.dim(1) && act.at({0, frame}) != 0.0) inside += e;
    }
    REQUIRE(inside / total >= 0.99);
}

TEST_CASE("synthesize_mixture is deterministic and honors the speaker pool") {
    fg::ToyCorpus corpus;
    fg::ForgeConfig cfg;
    cfg.num_mixtures = 4;
    cfg.condition = fg::Condition::anechoic;
    cfg.seed = 77;
    cfg.pool_begin = 8;
    cfg.pool_end = 16;
    cfg.track.max_silence_s = 0.5;

    auto a = fg::synthesize_mixture(corpus, cfg, 2);
    auto b = fg::synthesize_mixture(corpus, cfg, 2);
    REQUIRE(a.mixture.samples == b.mixture.samples);
    REQUIRE(a.meta.seed == b.meta.seed);

    for (const auto& t : a.tracks) {
        const int spk = std::stoi(t.speaker_id.substr(3));
        REQUIRE(spk >= 8);
        REQUIRE(spk < 16);
    }
    auto c = fg::synthesize_mixture(corpus, cfg, 3);
    REQUIRE(c.mixture.samples != a.mixture.samples);
}

TEST_CASE("build_dataset writes a consistent manifest and audio set") {
    fg::ToyCorpus corpus;
    fg::ForgeConfig cfg;
    cfg.num_mixtures = 5;
    cfg.min_speakers = cfg.max_speakers = 2;
    cfg.condition = fg::Condition::anechoic;
    cfg.seed = 101;
    cfg.track.max_silence_s = 0.5;
    cfg.track.max_utterances = 2;

    const auto dir = temp_dir("anechoic");
    auto manifest = fg::build_dataset(corpus, cfg, dir.string());
    REQUIRE(manifest.records.size() == 5);
    REQUIRE(manifest.header.condition == "anechoic");
    REQUIRE(manifest.header.overlap_ratio >= 0.0);
    REQUIRE(manifest.header.overlap_ratio <= 1.0);

    int64_t wavs = 0;
    for (const auto& entry : fs::directory_iterator(dir / "audio")) {
        REQUIRE(entry.path().extension() == ".wav");
        ++wavs;
    }
    REQUIRE(wavs == 15); // 5 mixtures + 10 references, no noise files

    // Sum exactness from the files themselves.
    for (const auto& rec : manifest.records) {
        auto mix = wavio::read_wav((dir / rec.mixture_path).string());
        std::vector<wavio::Waveform> refs;
        for (const auto& p : rec.ref_paths) refs.push_back(wavio::read_wav((dir / p).string()));
        REQUIRE(rec.noise_path.empty());
        for (size_t i = 0; i < mix.samples.size(); ++i) {
            double acc = 0.0;
            for (const auto& r : refs) acc += r.samples[i];
            REQUIRE(mix.samples[i] == static_cast<double>(static_cast<float>(acc)));
        }
        REQUIRE_FALSE(rec.snr_defined);
        REQUIRE_FALSE(rec.reverberant);
    }

    // Byte-identical regeneration.
    const auto dir2 = temp_dir("anechoic_again");
    fg::build_dataset(corpus, cfg, dir2.string());
    REQUIRE(slurp(dir / "manifest.jsonl") == slurp(dir2 / "manifest.jsonl"));
    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST_CASE("build_dataset noisy_reverb carries full metadata") {
    fg::ToyCorpus corpus;
    fg::ForgeConfig cfg;
    cfg.num_mixtures = 3;
    cfg.min_speakers = 2;
    cfg.max_speakers = 3;
    cfg.condition = fg::Condition::noisy_reverb;
    cfg.seed = 202;
    cfg.track.max_silence_s = 0.5;
    cfg.track.max_utterances = 2;

    const auto dir = temp_dir("noisy_reverb");
    auto manifest = fg::build_dataset(corpus, cfg, dir.string());
    for (const auto& rec : manifest.records) {
        REQUIRE(rec.snr_defined);
        REQUIRE(rec.snr_db >= 0.0);
        REQUIRE(rec.snr_db <= 10.0);
        REQUIRE(rec.reverberant);
        REQUIRE(rec.rt60_s >= 0.2);
        REQUIRE(rec.rt60_s <= 0.6);
        REQUIRE(rec.room_dims_m[0] >= 4.0);
        REQUIRE_FALSE(rec.noise_path.empty());

        auto mix = wavio::read_wav((dir / rec.mixture_path).string());
        auto noise = wavio::read_wav((dir / rec.noise_path).string());
        std::vector<wavio::Waveform> refs;
        for (const auto& p : rec.ref_paths) refs.push_back(wavio::read_wav((dir / p).string()));
        for (size_t i = 0; i < mix.samples.size(); ++i) {
            double acc = 0.0;
            for (const auto& r : refs) acc += r.samples[i];
            acc += noise.samples[i];
            REQUIRE(mix.samples[i] == static_cast<double>(static_cast<float>(acc)));
        }
    }

    // Round-trip through the reader.
    auto parsed = fg::read_manifest((dir / "manifest.jsonl").string());
    REQUIRE(parsed.header.condition == "noisy_reverb");
    REQUIRE(parsed.records.size() == manifest.records.size());
    for (size_t i = 0; i < parsed.records.size(); ++i) {
        REQUIRE(parsed.records[i].id == manifest.records[i].id);
        REQUIRE(parsed.records[i].intervals == manifest.records[i].intervals);
        REQUIRE(parsed.records[i].snr_db == Catch::Approx(manifest.records[i].snr_db));
        REQUIRE(parsed.records[i].seed == manifest.records[i].seed);
    }
    fs::remove_all(dir);
}

TEST_CASE("overlap ratio matches a raster estimate") {
    fg::ToyCorpus corpus;
    fg::ForgeConfig cfg;
    cfg.num_mixtures = 6;
    cfg.min_speakers = cfg.max_speakers = 2;
    cfg.condition = fg::Condition::anechoic;
    cfg.seed = 303;
    cfg.track.max_utterances = 3;
    cfg.track.max_silence_s = 1.0;

    const auto dir = temp_dir("overlap");
    auto manifest = fg::build_dataset(corpus, cfg, dir.string());

    double overlapped = 0.0, total = 0.0;
    const double step = 1e-3;
    for (const auto& rec : manifest.records) {
        auto mix = wavio::read_wav((dir / rec.mixture_path).string());
        const double dur = static_cast<double>(mix.samples.size()) / 16000.0;
        for (double t = 0.0; t < dur; t += step) {
            int active = 0;
            for (const auto& spk : rec.intervals)
                for (const auto& [s, e] : spk)
                    if (t >= s && t < e) {
                        ++active;
                        break;
                    }
            if (active >= 2) overlapped += step;
            total += step;
        }
    }
    REQUIRE(manifest.header.overlap_ratio == Catch::Approx(overlapped / total).margin(0.01));
    fs::remove_all(dir);
}

TEST_CASE("wav directory corpus reads speakers from disk") {
    const auto dir = temp_dir("corpus");
    Rng rng(964);
    for (const std::string spk : {"alpha", "beta"}) {
        fs::create_directories(dir / spk);
        for (int u = 0; u < 2; ++u) {
            wavio::Waveform w;
            w.sample_rate = 16000;
            w.samples.resize(400);
            for (auto& v : w.samples) v = 0.25 * rng.normal();
            fg::quantize_f32(w.samples);
            wavio::write_wav((dir / spk / ("utt" + std::to_string(u) + ".wav")).string(), w);
        }
    }

    fg::WavDirCorpus corpus(dir.string());
    REQUIRE(corpus.num_speakers() == 2);
    REQUIRE(corpus.speaker_id(0) == "alpha");
    REQUIRE(corpus.speaker_id(1) == "beta");
    REQUIRE(corpus.distinct(0, 1));
    REQUIRE_FALSE(corpus.distinct(1, 1));

    Rng draw(965);
    auto utt = corpus.sample_utterance(0, draw);
    REQUIRE(utt.size() == 400);

    REQUIRE_THROWS_AS(fg::WavDirCorpus((dir / "missing").string()), InvalidConfig);
    fs::remove_all(dir);
}

TEST_CASE("forge configuration validation") {
    fg::ToyCorpus corpus;
    fg::ForgeConfig cfg;
    cfg.num_mixtures = 0;
    REQUIRE_THROWS_AS(fg::synthesize_mixture(corpus, cfg, 0), InvalidConfig);
    cfg.num_mixtures = 1;
    cfg.min_speakers = 3;
    cfg.max_speakers = 2;
    REQUIRE_THROWS_AS(fg::synthesize_mixture(corpus, cfg, 0), InvalidConfig);
    cfg.max_speakers = 3;
    cfg.pool_begin = 0;
    cfg.pool_end = 2; // smaller than max_speakers
    REQUIRE_THROWS_AS(fg::synthesize_mixture(corpus, cfg, 0), InvalidConfig);

    REQUIRE_THROWS_AS(fg::condition_from_string("underwater"), InvalidConfig);
    REQUIRE(fg::condition_from_string("noisy_reverb") == fg::Condition::noisy_reverb);
}
