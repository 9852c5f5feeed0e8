#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <vector>

#include "difftraj/core/tensor.hpp"

namespace difftraj::img {

/// Separable Gaussian blur of a 2-d grid, zero padding at the border,
/// kernel truncated at 3 sigma and normalized to unit sum.
template <class T>
Tensor<T> gaussian_blur(const Tensor<T>& in, double sigma) {
    const int H = in.dim(0), W = in.dim(1);
    const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<T> k(static_cast<size_t>(2 * r + 1));
    double sum = 0;
    for (int i = -r; i <= r; ++i) {
        const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[static_cast<size_t>(i + r)] = static_cast<T>(v);
        sum += v;
    }
    for (auto& v : k) v = static_cast<T>(v / sum);

    Tensor<T> tmp({H, W}), out({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            T acc = T(0);
            for (int i = -r; i <= r; ++i) {
                const int xx = x + i;
                if (xx >= 0 && xx < W) acc += in.at2(y, xx) * k[static_cast<size_t>(i + r)];
            }
            tmp.at2(y, x) = acc;
        }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            T acc = T(0);
            for (int i = -r; i <= r; ++i) {
                const int yy = y + i;
                if (yy >= 0 && yy < H) acc += tmp.at2(yy, x) * k[static_cast<size_t>(i + r)];
            }
            out.at2(y, x) = acc;
        }
    return out;
}

/// 4-connected flood reachability over cells with grid > threshold, from any
/// seed row in [seed_row_lo, seed_row_hi]; returns the visited mask.
template <class T>
std::vector<char> flood_mask(const Tensor<T>& grid, double threshold, int seed_row_lo,
                             int seed_row_hi) {
    const int H = grid.dim(0), W = grid.dim(1);
    std::vector<char> vis(static_cast<size_t>(H) * W, 0);
    std::deque<std::pair<int, int>> q;
    for (int y = seed_row_lo; y <= seed_row_hi; ++y)
        for (int x = 0; x < W; ++x)
            if (grid.at2(y, x) > threshold) {
                vis[static_cast<size_t>(y) * W + x] = 1;
                q.emplace_back(y, x);
            }
    constexpr int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
    while (!q.empty()) {
        auto [y, x] = q.front();
        q.pop_front();
        for (int d = 0; d < 4; ++d) {
            const int ny = y + dy[d], nx = x + dx[d];
            if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
            if (vis[static_cast<size_t>(ny) * W + nx]) continue;
            if (grid.at2(ny, nx) > threshold) {
                vis[static_cast<size_t>(ny) * W + nx] = 1;
                q.emplace_back(ny, nx);
            }
        }
    }
    return vis;
}

/// True when a 4-connected corridor of cells with grid > threshold joins the
/// bottom row band to the top row band.
template <class T>
bool bands_connected(const Tensor<T>& grid, double threshold, int bottom_start, int top_end) {
    const int H = grid.dim(0), W = grid.dim(1);
    const auto vis = flood_mask(grid, threshold, bottom_start, H - 1);
    for (int y = 0; y <= top_end; ++y)
        for (int x = 0; x < W; ++x)
            if (vis[static_cast<size_t>(y) * W + x]) return true;
    return false;
}

/// HSV (h in degrees, s/v in [0,1]) to RGB in [0,1].
inline std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
    h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
    const int i = static_cast<int>(h) % 6;
    const double f = h - std::floor(h);
    const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
    double r, g, b;
    switch (i) {
        case 0: r = v, g = t, b = p; break;
        case 1: r = q, g = v, b = p; break;
        case 2: r = p, g = v, b = t; break;
        case 3: r = p, g = q, b = v; break;
        case 4: r = t, g = p, b = v; break;
        default: r = v, g = p, b = q; break;
    }
    return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

}  // namespace difftraj::img
