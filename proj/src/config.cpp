#include "voxattn/config.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace vx {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

}  // namespace

KvConfig KvConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_string(ss.str(), path);
}

KvConfig KvConfig::from_string(const std::string& text, const std::string& origin) {
    KvConfig c;
    c.origin_ = origin;
    std::istringstream f(text);
    std::string line;
    std::int64_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
        if (!c.kv_.emplace(key, val).second)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    return c;
}

std::string KvConfig::get_string(const std::string& key, const std::string& fallback) const {
    requested_.insert(key);
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
}

double KvConfig::get_double(const std::string& key, double fallback) const {
    requested_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    char* end = nullptr;
    const double v = std::strtod(it->second.c_str(), &end);
    if (end == it->second.c_str() || *end != '\0')
        throw ConfigError(origin_ + ": key '" + key + "': '" + it->second + "' is not a number");
    return v;
}

std::int64_t KvConfig::get_int(const std::string& key, std::int64_t fallback) const {
    requested_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    char* end = nullptr;
    const long long v = std::strtoll(it->second.c_str(), &end, 10);
    if (end == it->second.c_str() || *end != '\0')
        throw ConfigError(origin_ + ": key '" + key + "': '" + it->second + "' is not an integer");
    return v;
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
    requested_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError(origin_ + ": key '" + key + "': '" + it->second + "' is not a boolean");
}

void KvConfig::require_consumed() const {
    std::string unknown;
    for (const auto& [key, _] : kv_)
        if (!requested_.count(key)) unknown += unknown.empty() ? key : (", " + key);
    if (!unknown.empty()) throw ConfigError(origin_ + ": unknown keys: " + unknown);
}

}  // namespace vx
