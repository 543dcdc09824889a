#include "voxattn/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "voxattn/error.hpp"

namespace vx {

namespace {

constexpr char kMagic[8] = {'V', 'X', 'C', 'P', '0', '0', '0', '1'};

template <class V>
void put_raw(std::ofstream& out, const V& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V get_raw(std::ifstream& in, const std::string& path) {
    V v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!in) throw FormatError("checkpoint " + path + ": truncated");
    return v;
}

}  // namespace

void Checkpoint::put(const std::string& name, const Array& a) {
    if (name.empty()) throw CheckError("checkpoint: empty array name");
    if (!a.valid()) throw CheckError("checkpoint: array '" + name + "' has no data");
    auto [it, inserted] = index_.try_emplace(name, entries.size());
    if (!inserted) throw CheckError("checkpoint: duplicate array name '" + name + "'");
    entries.emplace_back(name, a);
}

bool Checkpoint::has(const std::string& name) const { return index_.count(name) > 0; }

const Array& Checkpoint::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw FormatError("checkpoint: missing array '" + name + "'");
    return entries[it->second].second;
}

void write_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(kMagic, sizeof(kMagic));
    put_raw(out, static_cast<std::uint64_t>(ck.config_text.size()));
    out.write(ck.config_text.data(), static_cast<std::streamsize>(ck.config_text.size()));
    put_raw(out, static_cast<std::uint64_t>(ck.entries.size()));
    for (const auto& [name, arr] : ck.entries) {
        put_raw(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_raw(out, static_cast<std::uint8_t>(0));  // dtype f64
        put_raw(out, static_cast<std::uint32_t>(arr.shape.size()));
        for (auto d : arr.shape) put_raw(out, static_cast<std::int64_t>(d));
        out.write(reinterpret_cast<const char*>(arr.ptr()),
                  static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(arr.numel())));
    }
    if (!out) throw IoError("failed writing " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw FormatError("checkpoint " + path + ": bad magic");
    Checkpoint ck;
    const auto cfg_len = get_raw<std::uint64_t>(in, path);
    if (cfg_len > (1u << 26)) throw FormatError("checkpoint " + path + ": config block too large");
    ck.config_text.resize(cfg_len);
    in.read(ck.config_text.data(), static_cast<std::streamsize>(cfg_len));
    if (!in) throw FormatError("checkpoint " + path + ": truncated");
    const auto count = get_raw<std::uint64_t>(in, path);
    for (std::uint64_t e = 0; e < count; ++e) {
        const auto name_len = get_raw<std::uint32_t>(in, path);
        if (name_len == 0 || name_len > 4096) throw FormatError("checkpoint " + path + ": bad name length");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw FormatError("checkpoint " + path + ": truncated");
        const auto dtype = get_raw<std::uint8_t>(in, path);
        if (dtype > 1) throw FormatError("checkpoint " + path + ": unknown dtype tag");
        const auto ndim = get_raw<std::uint32_t>(in, path);
        if (ndim == 0 || ndim > 8) throw FormatError("checkpoint " + path + ": bad rank");
        Shape shape;
        std::int64_t numel = 1;
        for (std::uint32_t a = 0; a < ndim; ++a) {
            const auto d = get_raw<std::int64_t>(in, path);
            if (d <= 0 || numel > (1ll << 40) / d) throw FormatError("checkpoint " + path + ": bad shape");
            shape.push_back(d);
            numel *= d;
        }
        std::vector<double> values(static_cast<std::size_t>(numel));
        if (dtype == 0) {
            in.read(reinterpret_cast<char*>(values.data()),
                    static_cast<std::streamsize>(sizeof(double) * values.size()));
        } else {
            std::vector<float> tmp(values.size());
            in.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(sizeof(float) * tmp.size()));
            for (std::size_t i = 0; i < tmp.size(); ++i) values[i] = static_cast<double>(tmp[i]);
        }
        if (!in) throw FormatError("checkpoint " + path + ": truncated");
        ck.put(name, from_vector<double>(std::move(shape), std::move(values)));
    }
    return ck;
}

void load_named(const Checkpoint& ck, std::vector<NamedParam>& dst) {
    for (auto& entry : dst) {
        const Array& src = ck.get(entry.name);
        if (src.shape != entry.array.shape)
            throw FormatError("checkpoint: array '" + entry.name + "' has shape " + shape_str(src.shape) +
                              ", model expects " + shape_str(entry.array.shape));
        *entry.array.data = *src.data;
    }
}

}  // namespace vx
