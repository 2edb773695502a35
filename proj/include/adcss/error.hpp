#pragma once

#include <stdexcept>
#include <string>

namespace adcss {

// Bad runtime data: mismatched shapes, short inputs, unreadable files.
struct InvalidInput : std::runtime_error {
    explicit InvalidInput(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad static configuration: odd chunk length, head divisibility, J < 1.
struct InvalidConfig : std::runtime_error {
    explicit InvalidConfig(const std::string& msg) : std::runtime_error(msg) {}
};

// Bounded rejection sampling ran out of attempts.
struct SamplingError : std::runtime_error {
    explicit SamplingError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void check(bool cond, const char* kind, const std::string& msg) {
    if (!cond) {
        if (kind[0] == 'c') throw InvalidConfig(msg);
        throw InvalidInput(msg);
    }
}
} // namespace detail

} // namespace adcss

#define ADCSS_CHECK_INPUT(cond, msg) ::adcss::detail::check((cond), "input", (msg))
#define ADCSS_CHECK_CONFIG(cond, msg) ::adcss::detail::check((cond), "config", (msg))
