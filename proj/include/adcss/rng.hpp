#pragma once

// Deterministic random source. All draws go through hand-rolled transforms on
// top of mt19937_64 so that streams are reproducible across platforms and
// standard-library versions (std:: distributions are implementation-defined).

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "adcss/error.hpp"

namespace adcss {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// FNV-1a, used to fold strings into seeds.
inline uint64_t hash64(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

class Rng {
  public:
    Rng() : eng_(0x5eed) {}
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t u64() { return eng_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        ADCSS_CHECK_INPUT(hi >= lo, "uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        // Rejection sampling to avoid modulo bias.
        uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t v;
        do {
            v = eng_();
        } while (v >= limit);
        return lo + static_cast<int64_t>(v % span);
    }

    // Box-Muller; no state cached so the stream stays position-independent.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Derive an independent child stream; label keeps streams for different
    // purposes decorrelated even with the same parent.
    Rng fork(const std::string& label) const {
        std::ostringstream os;
        os << eng_;
        return Rng(splitmix64(hash64(os.str()) ^ hash64(label)));
    }

    std::string serialize() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }

    static Rng deserialize(const std::string& state) {
        Rng r;
        std::istringstream is(state);
        is >> r.eng_;
        ADCSS_CHECK_INPUT(!is.fail(), "Rng::deserialize: malformed state");
        return r;
    }

  private:
    std::mt19937_64 eng_;
};

} // namespace adcss
