#pragma once

// Checkpoint format: magic "VBB1", u64 length + canonical config text, u64
// parameter count, then each tensor in declaration order as u64 rank, u64
// dims, raw little-endian 64-bit floats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "vbb/backbone.hpp"

namespace vbb {

namespace detail {

inline void write_u64(std::ostream& os, uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(buf), 8);
}

inline uint64_t read_u64(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is) throw IoError("checkpoint: truncated file");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
    return v;
}

inline void write_f64(std::ostream& os, double d) {
    uint64_t v;
    std::memcpy(&v, &d, 8);
    write_u64(os, v);
}

inline double read_f64(std::istream& is) {
    uint64_t v = read_u64(is);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

}  // namespace detail

inline void save_checkpoint(const Model& m, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
    os.write("VBB1", 4);
    std::string cfg = m.cfg.canonical_text();
    detail::write_u64(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    detail::write_u64(os, m.parameters.size());
    for (const auto& [name, t] : m.parameters) {
        detail::write_u64(os, static_cast<uint64_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) detail::write_u64(os, static_cast<uint64_t>(t.dim(i)));
        for (double v : t.data()) detail::write_f64(os, v);
    }
    if (!os) throw IoError("checkpoint: write failed for " + path);
}

// loads weights into an already-built model; the stored config must match the
// model's architecture exactly
inline void load_checkpoint(Model& m, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "VBB1") throw IoError("checkpoint: bad magic in " + path);
    uint64_t cfg_len = detail::read_u64(is);
    std::string cfg(cfg_len, '\0');
    is.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
    if (!is) throw IoError("checkpoint: truncated config in " + path);
    if (cfg != m.cfg.canonical_text())
        throw ConfigError("checkpoint: config mismatch; stored architecture differs from the model");
    uint64_t count = detail::read_u64(is);
    if (count != m.parameters.size())
        throw IoError("checkpoint: parameter count mismatch in " + path);
    for (auto& [name, t] : m.parameters) {
        uint64_t rank = detail::read_u64(is);
        if (rank != static_cast<uint64_t>(t.rank()))
            throw IoError("checkpoint: rank mismatch for " + name);
        for (int i = 0; i < t.rank(); ++i) {
            uint64_t d = detail::read_u64(is);
            if (d != static_cast<uint64_t>(t.dim(i)))
                throw IoError("checkpoint: shape mismatch for " + name);
        }
        for (double& v : t.data()) v = detail::read_f64(is);
    }
}

}  // namespace vbb
