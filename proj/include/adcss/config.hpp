#pragma once

// Flat key-value configuration files: `key = value` lines, `#` comments, a
// mandatory config_version, and strict rejection of unknown keys.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "adcss/error.hpp"

namespace adcss::config {

inline constexpr int kConfigVersion = 1;

namespace detail {

inline std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

} // namespace detail

// Parsed key-value pairs. Getters mark keys as consumed; finish() rejects
// anything that was never asked for, so typos in config files fail loudly.
class ConfigMap {
public:
    static ConfigMap from_text(const std::string& text, const std::string& origin = "<text>") {
        ConfigMap out;
        out.origin_ = origin;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            ADCSS_CHECK_CONFIG(eq != std::string::npos,
                               origin + ":" + std::to_string(lineno) + ": expected key = value");
            const std::string key = detail::trim(line.substr(0, eq));
            const std::string value = detail::trim(line.substr(eq + 1));
            ADCSS_CHECK_CONFIG(!key.empty(),
                               origin + ":" + std::to_string(lineno) + ": empty key");
            ADCSS_CHECK_CONFIG(out.kv_.emplace(key, value).second,
                               origin + ":" + std::to_string(lineno) + ": duplicate key " + key);
        }
        return out;
    }

    static ConfigMap from_file(const std::string& path) {
        std::ifstream in(path);
        ADCSS_CHECK_CONFIG(in.good(), "config: cannot open " + path);
        std::ostringstream os;
        os << in.rdbuf();
        return from_text(os.str(), path);
    }

    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    std::string get_string(const std::string& key, const std::string& def) const {
        consumed_.insert(key);
        const auto it = kv_.find(key);
        return it == kv_.end() ? def : it->second;
    }

    int64_t get_int(const std::string& key, int64_t def) const {
        consumed_.insert(key);
        const auto it = kv_.find(key);
        if (it == kv_.end()) return def;
        try {
            size_t pos = 0;
            const int64_t v = std::stoll(it->second, &pos);
            ADCSS_CHECK_CONFIG(pos == it->second.size(), bad(key, "integer"));
            return v;
        } catch (const std::logic_error&) {
            throw InvalidConfig(bad(key, "integer"));
        }
    }

    uint64_t get_uint64(const std::string& key, uint64_t def) const {
        consumed_.insert(key);
        const auto it = kv_.find(key);
        if (it == kv_.end()) return def;
        try {
            size_t pos = 0;
            const uint64_t v = std::stoull(it->second, &pos);
            ADCSS_CHECK_CONFIG(pos == it->second.size(), bad(key, "unsigned integer"));
            return v;
        } catch (const std::logic_error&) {
            throw InvalidConfig(bad(key, "unsigned integer"));
        }
    }

    double get_double(const std::string& key, double def) const {
        consumed_.insert(key);
        const auto it = kv_.find(key);
        if (it == kv_.end()) return def;
        try {
            size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            ADCSS_CHECK_CONFIG(pos == it->second.size(), bad(key, "number"));
            return v;
        } catch (const std::logic_error&) {
            throw InvalidConfig(bad(key, "number"));
        }
    }

    bool get_bool(const std::string& key, bool def) const {
        consumed_.insert(key);
        const auto it = kv_.find(key);
        if (it == kv_.end()) return def;
        const std::string& v = it->second;
        if (v == "true" || v == "on" || v == "1") return true;
        if (v == "false" || v == "off" || v == "0") return false;
        throw InvalidConfig(bad(key, "boolean"));
    }

    std::string require_string(const std::string& key) const {
        ADCSS_CHECK_CONFIG(has(key), origin_ + ": missing required key " + key);
        return get_string(key, "");
    }

    // Call after every consumer has read its keys.
    void finish() const {
        std::vector<std::string> unknown;
        for (const auto& [key, value] : kv_)
            if (consumed_.count(key) == 0) unknown.push_back(key);
        if (!unknown.empty()) {
            std::string msg = origin_ + ": unknown key(s):";
            for (const auto& k : unknown) msg += " " + k;
            throw InvalidConfig(msg);
        }
    }

private:
    std::string bad(const std::string& key, const char* kind) const {
        return origin_ + ": key " + key + " is not a valid " + kind + ": " + kv_.at(key);
    }

    std::string origin_;
    std::map<std::string, std::string> kv_;
    mutable std::set<std::string> consumed_;
};

// Loads a config file and checks its version stamp.
inline ConfigMap load_config(const std::string& path) {
    ConfigMap map = ConfigMap::from_file(path);
    const int64_t version = map.get_int("config_version", -1);
    ADCSS_CHECK_CONFIG(version == kConfigVersion,
                       path + ": config_version must be " + std::to_string(kConfigVersion));
    return map;
}

// Ordered key-value emitter producing the same flat format.
class ConfigWriter {
public:
    void add(const std::string& key, const std::string& value) { lines_.emplace_back(key, value); }
    void add(const std::string& key, const char* value) { lines_.emplace_back(key, value); }
    void add(const std::string& key, int64_t value) { add(key, std::to_string(value)); }
    void add(const std::string& key, uint64_t value) { add(key, std::to_string(value)); }
    void add(const std::string& key, int value) { add(key, static_cast<int64_t>(value)); }
    void add(const std::string& key, bool value) { add(key, std::string(value ? "true" : "false")); }
    void add(const std::string& key, double value) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", value);
        add(key, std::string(buf));
    }

    std::string text() const {
        std::ostringstream os;
        for (const auto& [key, value] : lines_) os << key << " = " << value << "\n";
        return os.str();
    }

private:
    std::vector<std::pair<std::string, std::string>> lines_;
};

} // namespace adcss::config
