#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "xdelta/network.hpp"

namespace xdelta {

// Checkpoint: little-endian binary, parameters keyed by name.
//   magic "XDCK" | u32 version | u64 count | entries
//   entry: u32 name_len | name | u32 ndim | i64 dims... | f32 data...
inline void save_checkpoint(const ParamStore& ps, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write checkpoint " + path.string());
    f.write("XDCK", 4);
    std::uint32_t version = 1;
    f.write(reinterpret_cast<const char*>(&version), 4);
    std::uint64_t count = ps.params.size();
    f.write(reinterpret_cast<const char*>(&count), 8);
    for (const auto& [name, t] : ps.params) {
        std::uint32_t nlen = static_cast<std::uint32_t>(name.size());
        f.write(reinterpret_cast<const char*>(&nlen), 4);
        f.write(name.data(), nlen);
        std::uint32_t ndim = static_cast<std::uint32_t>(t.shape().size());
        f.write(reinterpret_cast<const char*>(&ndim), 4);
        for (long d : t.shape()) {
            std::int64_t v = d;
            f.write(reinterpret_cast<const char*>(&v), 8);
        }
        f.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.size() * static_cast<long>(sizeof(float))));
    }
    if (!f) throw ConfigError("failed writing checkpoint " + path.string());
}

inline ParamStore load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read checkpoint " + path.string());
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "XDCK", 4) != 0)
        throw ConsistencyError(path.string() + ": not a checkpoint file");
    std::uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    if (version != 1) throw ConsistencyError(path.string() + ": unsupported checkpoint version");
    std::uint64_t count = 0;
    f.read(reinterpret_cast<char*>(&count), 8);
    ParamStore ps;
    for (std::uint64_t i = 0; i < count; ++i) {
        std::uint32_t nlen = 0;
        f.read(reinterpret_cast<char*>(&nlen), 4);
        std::string name(nlen, '\0');
        f.read(name.data(), nlen);
        std::uint32_t ndim = 0;
        f.read(reinterpret_cast<char*>(&ndim), 4);
        std::vector<long> shape;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            std::int64_t v = 0;
            f.read(reinterpret_cast<char*>(&v), 8);
            shape.push_back(static_cast<long>(v));
        }
        Tensor t(shape);
        f.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(t.size() * static_cast<long>(sizeof(float))));
        if (!f) throw ConsistencyError(path.string() + ": truncated checkpoint");
        ps.params.emplace(std::move(name), std::move(t));
    }
    return ps;
}

inline std::uint64_t file_checksum(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[65536];
    while (f) {
        f.read(buf, sizeof buf);
        std::streamsize got = f.gcount();
        if (got > 0) h = fnv1a64(buf, static_cast<std::size_t>(got), h);
    }
    return h;
}

}  // namespace xdelta
