#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "difftraj/core/tensor.hpp"

namespace difftraj::io {

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

/// Writes via a sibling temp file and renames, so readers never see partial
/// content.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

/// Binary 8-bit PPM from a (3,S,S) image in [0,1].
inline void write_ppm(const std::filesystem::path& path, const TensorF& rgb) {
    if (rgb.ndim() != 3 || rgb.dim(0) != 3)
        throw std::invalid_argument("write_ppm: expected a (3,H,W) image");
    const int H = rgb.dim(1), W = rgb.dim(2);
    std::string bytes = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    bytes.reserve(bytes.size() + static_cast<size_t>(3) * H * W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                const float v = std::min(1.0f, std::max(0.0f, rgb.at3(c, y, x)));
                bytes.push_back(static_cast<char>(static_cast<int>(v * 255.0f + 0.5f)));
            }
    write_file_atomic(path, bytes);
}

inline TensorF read_ppm(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    size_t pos = 0;
    auto token = [&]() {
        while (pos < bytes.size() && (std::isspace(static_cast<unsigned char>(bytes[pos]))))
            ++pos;
        if (pos < bytes.size() && bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos])))
                ++pos;
        }
        const size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])))
            ++pos;
        return bytes.substr(start, pos - start);
    };
    if (token() != "P6") throw std::runtime_error("read_ppm: not a binary PPM: " + path.string());
    const int W = std::stoi(token()), H = std::stoi(token()), maxv = std::stoi(token());
    if (maxv != 255) throw std::runtime_error("read_ppm: only 8-bit PPM supported");
    ++pos;  // the single whitespace after the header
    if (bytes.size() - pos < static_cast<size_t>(3) * H * W)
        throw std::runtime_error("read_ppm: truncated pixel data in " + path.string());
    TensorF rgb({3, H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c)
                rgb.at3(c, y, x) =
                    static_cast<float>(static_cast<unsigned char>(bytes[pos++])) / 255.0f;
    return rgb;
}

/// Raw little-endian float32 dump, shape supplied by the caller on read.
inline void write_f32(const std::filesystem::path& path, const TensorF& t) {
    std::string bytes(static_cast<size_t>(t.numel()) * 4, '\0');
    std::memcpy(bytes.data(), t.data(), bytes.size());
    write_file_atomic(path, bytes);
}

inline TensorF read_f32(const std::filesystem::path& path, std::vector<int> shape) {
    TensorF t(std::move(shape));
    const std::string bytes = read_file(path);
    if (bytes.size() != static_cast<size_t>(t.numel()) * 4)
        throw std::runtime_error("read_f32: " + path.string() + " holds " +
                                 std::to_string(bytes.size() / 4) + " floats, expected " +
                                 std::to_string(t.numel()));
    std::memcpy(t.data(), bytes.data(), bytes.size());
    return t;
}

}  // namespace difftraj::io
