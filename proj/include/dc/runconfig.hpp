#pragma once

// Flat key=value run configuration (UTF-8, '#' comments). Typed getters record
// which keys a command understands; anything left unread is a hard error, so
// typos in config files fail fast. The fully resolved configuration (defaults
// included) is written next to every run's outputs.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "dc/nets.hpp"

namespace dc {

class RunConfig {
public:
    RunConfig() = default;

    static RunConfig from_file(const std::string& path);
    static RunConfig from_text(const std::string& text, const std::string& origin = "<inline>");

    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& fallback);
    std::string require_str(const std::string& key);
    int64_t get_int(const std::string& key, int64_t fallback);
    double get_double(const std::string& key, double fallback);
    bool get_bool(const std::string& key, bool fallback);

    // throws ConfigError listing keys that were never consumed
    void ensure_all_consumed() const;

    // deterministic "key = value" dump of everything consumed (with defaults)
    std::string resolved() const;

private:
    std::string origin_ = "<empty>";
    std::map<std::string, std::string> kv_;
    mutable std::set<std::string> consumed_;
    mutable std::map<std::string, std::string> resolved_;
};

} // namespace dc
