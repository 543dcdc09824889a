#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "voxattn/array.hpp"

namespace vx {

// Flat container of named arrays plus an embedded key=value config text.
// Binary layout is documented in docs/formats.md.
struct Checkpoint {
    std::string config_text;
    std::vector<std::pair<std::string, Array>> entries;

    void put(const std::string& name, const Array& a);
    bool has(const std::string& name) const;
    const Array& get(const std::string& name) const;

   private:
    std::unordered_map<std::string, std::size_t> index_;
};

void write_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::string& path);

// Copies checkpoint values into the destination arrays, matched by name.
void load_named(const Checkpoint& ck, std::vector<NamedParam>& dst);

}  // namespace vx
