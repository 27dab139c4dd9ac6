#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace patchlm {

// 8-bit RGB raster, row-major, channel-interleaved.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> pixels; // height * width * 3

    Image() = default;
    Image(int h, int w) : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, 0) {
        if (h < 1 || w < 1) throw std::invalid_argument("image dimensions must be positive");
    }

    uint8_t& at(int y, int x, int c) {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
    uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
    size_t byte_count() const { return pixels.size(); }
};

namespace ppm {

// Binary PPM (P6, maxval 255).
inline void write(const Image& img, std::ostream& out) {
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
}

inline void write_file(const Image& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    write(img, f);
    if (!f) throw std::runtime_error("short write to " + path);
}

namespace detail {
inline int read_header_int(std::istream& in, const std::string& path) {
    // skip whitespace and '#' comments
    int c = in.get();
    while (c != EOF && (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '#')) {
        if (c == '#')
            while (c != EOF && c != '\n') c = in.get();
        c = in.get();
    }
    if (c == EOF || c < '0' || c > '9')
        throw std::runtime_error("truncated or malformed PPM header in " + path);
    long value = 0;
    while (c >= '0' && c <= '9') {
        value = value * 10 + (c - '0');
        if (value > 1 << 30) throw std::runtime_error("absurd PPM header value in " + path);
        c = in.get();
    }
    if (c != EOF) in.unget();
    return static_cast<int>(value);
}
} // namespace detail

inline Image read(std::istream& in, const std::string& path = "<stream>") {
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] != '6')
        throw std::runtime_error("not a binary PPM (P6) file: " + path);
    const int w = detail::read_header_int(in, path);
    const int h = detail::read_header_int(in, path);
    const int maxval = detail::read_header_int(in, path);
    if (maxval != 255) throw std::runtime_error("unsupported PPM maxval in " + path);
    const int sep = in.get();
    if (sep == EOF) throw std::runtime_error("truncated PPM header in " + path);
    if (w < 1 || h < 1) throw std::runtime_error("invalid PPM dimensions in " + path);
    Image img(h, w);
    in.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (static_cast<size_t>(in.gcount()) != img.pixels.size())
        throw std::runtime_error("truncated PPM pixel data in " + path);
    return img;
}

inline Image read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    return read(f, path);
}

} // namespace ppm
} // namespace patchlm
