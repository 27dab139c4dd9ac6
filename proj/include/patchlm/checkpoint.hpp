#pragma once

#include "patchlm/model.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace patchlm {
namespace checkpoint {

// Single binary file: magic, config block, tensor count, then per tensor
// (name length, name, rank, dims, raw 64-bit little-endian reals).
// Round-trips are bit-exact.
constexpr char kMagic[8] = {'P', 'L', 'M', 'C', 'K', 'P', 'T', '1'};

namespace detail {

inline void write_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_f64_array(std::ostream& out, const std::vector<double>& v) {
    static_assert(sizeof(double) == 8);
    // host is little-endian; written as raw 64-bit LE reals
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * 8));
}

inline void read_f64_array(std::istream& in, std::vector<double>& v, const std::string& path) {
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
    if (static_cast<size_t>(in.gcount()) != v.size() * 8)
        throw std::runtime_error("truncated checkpoint tensor data: " + path);
}

} // namespace detail

inline void save(const ModelParams& params, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
        out.write(kMagic, 8);
        detail::write_u32(out, static_cast<uint32_t>(params.cfg.d));
        detail::write_u32(out, static_cast<uint32_t>(params.cfg.layers));
        detail::write_u32(out, static_cast<uint32_t>(params.cfg.heads));
        detail::write_u32(out, static_cast<uint32_t>(params.cfg.vocab_size));
        detail::write_u32(out, static_cast<uint32_t>(params.cfg.maxgrid));
        detail::write_u32(out, static_cast<uint32_t>(params.cfg.d_mid));
        auto named = params.named_tensors();
        detail::write_u32(out, static_cast<uint32_t>(named.size()));
        for (const auto& [name, t] : named) {
            detail::write_u32(out, static_cast<uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::write_u32(out, static_cast<uint32_t>(t->shape.size()));
            for (int d : t->shape) detail::write_u32(out, static_cast<uint32_t>(d));
            detail::write_f64_array(out, t->data);
        }
        if (!out) throw std::runtime_error("short write to " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("cannot move " + tmp + " into place");
}

inline ModelParams load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("bad checkpoint magic in " + path);
    ModelConfig cfg;
    cfg.d = static_cast<int>(detail::read_u32(in, path));
    cfg.layers = static_cast<int>(detail::read_u32(in, path));
    cfg.heads = static_cast<int>(detail::read_u32(in, path));
    cfg.vocab_size = static_cast<int>(detail::read_u32(in, path));
    cfg.maxgrid = static_cast<int>(detail::read_u32(in, path));
    cfg.d_mid = static_cast<int>(detail::read_u32(in, path));
    const uint32_t count = detail::read_u32(in, path);

    // first materialize the raw tensors, then wire them into a ModelParams
    struct Raw {
        std::string name;
        std::vector<int> shape;
        std::vector<double> data;
    };
    std::vector<Raw> raw(count);
    for (auto& r : raw) {
        const uint32_t name_len = detail::read_u32(in, path);
        r.name.resize(name_len);
        in.read(r.name.data(), name_len);
        if (!in) throw std::runtime_error("truncated checkpoint name: " + path);
        const uint32_t rank = detail::read_u32(in, path);
        r.shape.resize(rank);
        size_t n = 1;
        for (auto& d : r.shape) {
            d = static_cast<int>(detail::read_u32(in, path));
            n *= static_cast<size_t>(d);
        }
        r.data.resize(n);
        detail::read_f64_array(in, r.data, path);
    }
    for (const auto& r : raw)
        if (r.name == "embed.text_pos") cfg.text_pos = true;

    ModelParams params = init_model(cfg, 0);
    auto named = params.named_tensors();
    if (named.size() != raw.size())
        throw std::runtime_error("checkpoint " + path + " holds " + std::to_string(raw.size()) +
                                 " tensors, expected " + std::to_string(named.size()));
    for (size_t i = 0; i < raw.size(); ++i) {
        auto& [name, t] = named[i];
        if (name != raw[i].name)
            throw std::runtime_error("checkpoint tensor #" + std::to_string(i) + " is '" +
                                     raw[i].name + "', expected '" + name + "'");
        if (t->shape != raw[i].shape)
            throw std::runtime_error("checkpoint tensor '" + name + "' has unexpected shape");
        t->data = raw[i].data;
    }
    return params;
}

} // namespace checkpoint
} // namespace patchlm
