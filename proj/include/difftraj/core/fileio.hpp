#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "difftraj/core/tensor.hpp"

namespace difftraj::io {

inline std::runtime_error file_error(const std::string& what, const std::filesystem::path& p) {
    return std::runtime_error(what + ": " + p.string());
}

// ---- raw little-endian binary ------------------------------------------------
// All on-disk numeric formats are little-endian; this code assumes a
// little-endian host (checked once at startup by the CLI).

inline bool host_is_little_endian() {
    const std::uint32_t x = 1;
    std::uint8_t b;
    std::memcpy(&b, &x, 1);
    return b == 1;
}

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os) throw std::runtime_error("write failed");
}

inline void read_bytes(std::istream& is, void* p, size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is.gcount()) != n) throw std::runtime_error("unexpected end of file");
}

template <class T>
void write_pod(std::ostream& os, const T& v) {
    write_bytes(os, &v, sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v;
    read_bytes(is, &v, sizeof(T));
    return v;
}

/// Flat float32 grid/sequence file: raw little-endian payload, no header.
inline void save_f32(const std::filesystem::path& path, const std::vector<float>& data) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw file_error("cannot open for writing", path);
    write_bytes(os, data.data(), data.size() * sizeof(float));
}

inline std::vector<float> load_f32(const std::filesystem::path& path, size_t expected_count) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw file_error("cannot open", path);
    const auto bytes = static_cast<size_t>(is.tellg());
    if (bytes != expected_count * sizeof(float))
        throw file_error("unexpected size for " + std::to_string(expected_count) + " floats", path);
    is.seekg(0);
    std::vector<float> data(expected_count);
    read_bytes(is, data.data(), bytes);
    return data;
}

// ---- PPM (binary P6), the lossless RGB image format used throughout ---------

/// rgb is (3,H,W) in [0,1]; stored as 8-bit P6.
inline void save_ppm(const std::filesystem::path& path, const Tensor<float>& rgb) {
    if (rgb.ndim() != 3 || rgb.dim(0) != 3) throw std::invalid_argument("save_ppm: want (3,H,W)");
    const int h = rgb.dim(1), w = rgb.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw file_error("cannot open for writing", path);
    os << "P6\n" << w << " " << h << "\n255\n";
    std::vector<std::uint8_t> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                float v = std::clamp(rgb.at3(c, y, x), 0.0f, 1.0f);
                row[static_cast<size_t>(x) * 3 + c] =
                    static_cast<std::uint8_t>(std::lround(v * 255.0f));
            }
        write_bytes(os, row.data(), row.size());
    }
}

inline Tensor<float> load_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw file_error("cannot open", path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw file_error("not a binary PPM (P6)", path);
    int w = 0, h = 0, maxval = 0;
    is >> w >> h >> maxval;
    if (!is || w <= 0 || h <= 0 || maxval != 255) throw file_error("unsupported PPM header", path);
    is.get();  // single whitespace after maxval
    Tensor<float> rgb({3, h, w});
    std::vector<std::uint8_t> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        read_bytes(is, row.data(), row.size());
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                rgb.at3(c, y, x) = static_cast<float>(row[static_cast<size_t>(x) * 3 + c]) / 255.0f;
    }
    return rgb;
}

// ---- FNV-1a 64, used as the checkpoint integrity digest ----------------------

struct Fnv1a {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    void update(const void* p, size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001B3ULL;
        }
    }
    std::uint64_t digest() const { return h; }
};

inline std::uint64_t fnv1a(const void* p, size_t n) {
    Fnv1a f;
    f.update(p, n);
    return f.digest();
}

}  // namespace difftraj::io
