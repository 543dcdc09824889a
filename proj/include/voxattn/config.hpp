#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "voxattn/error.hpp"

namespace vx {

// key = value text config. '#' starts a comment, blank lines are skipped.
// Consumers read keys through the typed getters; require_consumed() then
// rejects any key that was never requested, so typos fail loudly.
class KvConfig {
   public:
    KvConfig() = default;
    static KvConfig from_file(const std::string& path);
    static KvConfig from_string(const std::string& text, const std::string& origin = "<string>");

    bool has(const std::string& key) const { return kv_.count(key) != 0; }
    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    void require_consumed() const;

   private:
    std::string origin_;
    std::map<std::string, std::string> kv_;
    mutable std::set<std::string> requested_;
};

}  // namespace vx
