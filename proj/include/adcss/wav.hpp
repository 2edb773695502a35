#pragma once

// Minimal RIFF/WAVE reader and writer: 16 kHz mono, 16-bit PCM or 32-bit
// float little-endian in, 32-bit float out.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "adcss/error.hpp"

namespace adcss::wavio {

struct Waveform {
    std::vector<double> samples;
    int sample_rate = 16000;
};

namespace detail {

inline uint32_t read_u32(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
           static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

inline uint16_t read_u16(const unsigned char* p) {
    return static_cast<uint16_t>(p[0] | p[1] << 8);
}

inline void put_u32(std::string& s, uint32_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
    s.push_back(static_cast<char>((v >> 16) & 0xff));
    s.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_u16(std::string& s, uint16_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
}

} // namespace detail

inline Waveform read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    ADCSS_CHECK_INPUT(f.good(), "read_wav: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    ADCSS_CHECK_INPUT(bytes.size() >= 44, "read_wav: truncated file " + path);
    ADCSS_CHECK_INPUT(std::memcmp(bytes.data(), "RIFF", 4) == 0 &&
                          std::memcmp(bytes.data() + 8, "WAVE", 4) == 0,
                      "read_wav: not a RIFF/WAVE file: " + path);

    uint16_t format = 0, channels = 0, bits = 0;
    uint32_t rate = 0;
    size_t data_off = 0, data_len = 0;
    size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const uint32_t chunk_len = detail::read_u32(bytes.data() + pos + 4);
        if (std::memcmp(bytes.data() + pos, "fmt ", 4) == 0) {
            ADCSS_CHECK_INPUT(chunk_len >= 16 && pos + 8 + 16 <= bytes.size(),
                              "read_wav: malformed fmt chunk: " + path);
            const unsigned char* p = bytes.data() + pos + 8;
            format = detail::read_u16(p);
            channels = detail::read_u16(p + 2);
            rate = detail::read_u32(p + 4);
            bits = detail::read_u16(p + 14);
        } else if (std::memcmp(bytes.data() + pos, "data", 4) == 0) {
            data_off = pos + 8;
            data_len = std::min<size_t>(chunk_len, bytes.size() - data_off);
        }
        pos += 8 + chunk_len + (chunk_len & 1);
    }
    ADCSS_CHECK_INPUT(data_off != 0, "read_wav: no data chunk: " + path);
    ADCSS_CHECK_INPUT(channels == 1, "read_wav: expected mono audio: " + path);
    ADCSS_CHECK_INPUT(rate == 16000, "read_wav: expected 16 kHz audio: " + path);

    Waveform w;
    w.sample_rate = static_cast<int>(rate);
    if (format == 1 && bits == 16) {
        const size_t n = data_len / 2;
        w.samples.resize(n);
        for (size_t i = 0; i < n; ++i) {
            const unsigned char* p = bytes.data() + data_off + 2 * i;
            const int16_t v = static_cast<int16_t>(p[0] | p[1] << 8);
            w.samples[i] = static_cast<double>(v) / 32768.0;
        }
    } else if (format == 3 && bits == 32) {
        const size_t n = data_len / 4;
        w.samples.resize(n);
        for (size_t i = 0; i < n; ++i) {
            uint32_t u = detail::read_u32(bytes.data() + data_off + 4 * i);
            float fv;
            std::memcpy(&fv, &u, 4);
            w.samples[i] = static_cast<double>(fv);
        }
    } else {
        throw InvalidInput("read_wav: unsupported format (need PCM16 or float32): " + path);
    }
    return w;
}

inline void write_wav(const std::string& path, const Waveform& w) {
    ADCSS_CHECK_INPUT(w.sample_rate == 16000, "write_wav: expected 16 kHz audio");
    const uint32_t n = static_cast<uint32_t>(w.samples.size());
    std::string out;
    out.reserve(58 + 4 * n);
    out += "RIFF";
    detail::put_u32(out, 50 + 4 * n);
    out += "WAVEfmt ";
    detail::put_u32(out, 16);
    detail::put_u16(out, 3); // IEEE float
    detail::put_u16(out, 1);
    detail::put_u32(out, 16000);
    detail::put_u32(out, 16000 * 4);
    detail::put_u16(out, 4);
    detail::put_u16(out, 32);
    out += "fact";
    detail::put_u32(out, 4);
    detail::put_u32(out, n);
    out += "data";
    detail::put_u32(out, 4 * n);
    for (uint32_t i = 0; i < n; ++i) {
        const float fv = static_cast<float>(w.samples[i]);
        uint32_t u;
        std::memcpy(&u, &fv, 4);
        detail::put_u32(out, u);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    ADCSS_CHECK_INPUT(f.good(), "write_wav: cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    ADCSS_CHECK_INPUT(f.good(), "write_wav: short write to " + path);
}

} // namespace adcss::wavio
