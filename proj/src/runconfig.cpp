#include "dc/runconfig.hpp"

#include <fstream>
#include <sstream>

namespace dc {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

} // namespace

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str(), path);
}

RunConfig RunConfig::from_text(const std::string& text, const std::string& origin) {
    RunConfig c;
    c.origin_ = origin;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        lineno++;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" +
                              line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
        if (c.kv_.count(key))
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
        c.kv_[key] = val;
    }
    return c;
}

void RunConfig::set(const std::string& key, const std::string& value) { kv_[key] = value; }

std::string RunConfig::get_str(const std::string& key, const std::string& fallback) {
    consumed_.insert(key);
    const auto it = kv_.find(key);
    const std::string v = it == kv_.end() ? fallback : it->second;
    resolved_[key] = v;
    return v;
}

std::string RunConfig::require_str(const std::string& key) {
    consumed_.insert(key);
    const auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError(origin_ + ": missing required key '" + key + "'");
    resolved_[key] = it->second;
    return it->second;
}

int64_t RunConfig::get_int(const std::string& key, int64_t fallback) {
    const std::string v = get_str(key, std::to_string(fallback));
    try {
        size_t pos = 0;
        const int64_t out = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
    }
}

double RunConfig::get_double(const std::string& key, double fallback) {
    std::ostringstream def;
    def << fallback;
    const std::string v = get_str(key, def.str());
    try {
        size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    }
}

bool RunConfig::get_bool(const std::string& key, bool fallback) {
    const std::string v = get_str(key, fallback ? "true" : "false");
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("key '" + key + "': expected a boolean, got '" + v + "'");
}

void RunConfig::ensure_all_consumed() const {
    std::string unknown;
    for (const auto& [k, v] : kv_)
        if (!consumed_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
    if (!unknown.empty())
        throw ConfigError(origin_ + ": unknown key(s): " + unknown);
}

std::string RunConfig::resolved() const {
    std::ostringstream os;
    for (const auto& [k, v] : resolved_) os << k << " = " << v << "\n";
    return os.str();
}

} // namespace dc
