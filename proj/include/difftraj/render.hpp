#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <utility>

#include "difftraj/io.hpp"
#include "difftraj/oracle.hpp"

namespace difftraj::render {

namespace fs = std::filesystem;

inline constexpr int kUpscale = 4;

struct Color {
    float r = 0, g = 0, b = 0;
};

inline constexpr Color kPathColor{1.0f, 0.85f, 0.1f};
inline constexpr Color kStartColor{0.15f, 0.9f, 0.25f};
inline constexpr Color kGoalColor{0.95f, 0.15f, 0.1f};

inline void put_px(TensorF& img, int r, int c, Color col) {
    const int H = img.dim(1), W = img.dim(2);
    if (r < 0 || r >= H || c < 0 || c >= W) return;
    img.at3(0, r, c) = col.r;
    img.at3(1, r, c) = col.g;
    img.at3(2, r, c) = col.b;
}

inline void draw_disc(TensorF& img, double r, double c, double rad, Color col) {
    const int r0 = static_cast<int>(std::floor(r - rad)), r1 = static_cast<int>(std::ceil(r + rad));
    const int c0 = static_cast<int>(std::floor(c - rad)), c1 = static_cast<int>(std::ceil(c + rad));
    for (int y = r0; y <= r1; ++y)
        for (int x = c0; x <= c1; ++x)
            if ((y - r) * (y - r) + (x - c) * (x - c) <= rad * rad) put_px(img, y, x, col);
}

/// Stamps discs along the segment, which avoids per-octant line cases.
inline void draw_line(TensorF& img, double r0, double c0, double r1, double c1, double rad,
                      Color col) {
    const double len = std::hypot(r1 - r0, c1 - c0);
    const int steps = std::max(1, static_cast<int>(std::ceil(len * 2.0)));
    for (int i = 0; i <= steps; ++i) {
        const double t = static_cast<double>(i) / steps;
        draw_disc(img, r0 + t * (r1 - r0), c0 + t * (c1 - c0), rad, col);
    }
}

inline void draw_cross(TensorF& img, double r, double c, double arm, double rad, Color col) {
    draw_line(img, r - arm, c - arm, r + arm, c + arm, rad, col);
    draw_line(img, r - arm, c + arm, r + arm, c - arm, rad, col);
}

inline TensorF upscale_nearest(const TensorF& rgb, int factor) {
    const int H = rgb.dim(1), W = rgb.dim(2);
    TensorF out({3, H * factor, W * factor});
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < H * factor; ++y)
            for (int x = 0; x < W * factor; ++x)
                out.at3(ch, y, x) = rgb.at3(ch, y / factor, x / factor);
    return out;
}

/// Four-stop blue/cyan/yellow/red ramp over [0,1].
inline Color heat_color(float v) {
    v = std::clamp(v, 0.0f, 1.0f);
    constexpr Color stops[4] = {{0.05f, 0.05f, 0.45f},
                                {0.05f, 0.75f, 0.85f},
                                {0.95f, 0.9f, 0.15f},
                                {0.9f, 0.1f, 0.05f}};
    const float s = v * 3.0f;
    const int i = std::min(2, static_cast<int>(s));
    const float f = s - static_cast<float>(i);
    return {stops[i].r + f * (stops[i + 1].r - stops[i].r),
            stops[i].g + f * (stops[i + 1].g - stops[i].g),
            stops[i].b + f * (stops[i + 1].b - stops[i].b)};
}

/// Scene image with the trajectory polyline, waypoint dots, a disc at the
/// start pixel and a cross at the goal pixel. Upscales for legibility.
inline TensorF overlay_trajectory(const TensorF& rgb, const oracle::Trajectory& traj,
                                  const oracle::Pixel* start = nullptr,
                                  const oracle::Pixel* goal = nullptr) {
    if (rgb.ndim() != 3 || rgb.dim(0) != 3)
        throw std::invalid_argument("overlay_trajectory expects a (3,H,W) image");
    auto img = upscale_nearest(rgb, kUpscale);
    const double k = kUpscale;

    for (size_t i = 1; i < traj.waypoints.size(); ++i) {
        const auto [ra, ca] = oracle::px_from_norm(traj.waypoints[i - 1]);
        const auto [rb, cb] = oracle::px_from_norm(traj.waypoints[i]);
        draw_line(img, ra * k, ca * k, rb * k, cb * k, 1.2, kPathColor);
    }
    for (const auto& w : traj.waypoints) {
        const auto [r, c] = oracle::px_from_norm(w);
        draw_disc(img, r * k, c * k, 2.0, kPathColor);
    }
    if (start) draw_disc(img, start->row * k, start->col * k, 4.0, kStartColor);
    if (goal) draw_cross(img, goal->row * k, goal->col * k, 4.5, 1.2, kGoalColor);
    return img;
}

/// Attention grid as a heat ramp alpha-blended over the grayscale scene.
inline TensorF attention_heatmap(const TensorF& rgb, const TensorF& attn, float alpha = 0.65f) {
    if (attn.ndim() != 2) throw std::invalid_argument("attention_heatmap expects a 2-d grid");
    if (rgb.dim(1) != attn.dim(0) || rgb.dim(2) != attn.dim(1))
        throw std::invalid_argument("attention_heatmap: image and grid sizes differ");
    auto img = upscale_nearest(rgb, kUpscale);
    const int H = img.dim(1), W = img.dim(2);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const float gray = (img.at3(0, y, x) + img.at3(1, y, x) + img.at3(2, y, x)) / 3.0f;
            const auto col = heat_color(attn.at2(y / kUpscale, x / kUpscale));
            img.at3(0, y, x) = (1 - alpha) * gray + alpha * col.r;
            img.at3(1, y, x) = (1 - alpha) * gray + alpha * col.g;
            img.at3(2, y, x) = (1 - alpha) * gray + alpha * col.b;
        }
    return img;
}

/// Renders a stored or sampled result as exactly two images in out_dir:
/// trajectory.ppm and attention.ppm.
inline std::pair<fs::path, fs::path> render_pair(const TensorF& rgb,
                                                 const oracle::Trajectory& traj,
                                                 const TensorF& attn, const std::string& out_dir,
                                                 const oracle::Pixel* start = nullptr,
                                                 const oracle::Pixel* goal = nullptr) {
    fs::create_directories(out_dir);
    const auto traj_path = fs::path(out_dir) / "trajectory.ppm";
    const auto attn_path = fs::path(out_dir) / "attention.ppm";
    io::write_ppm(traj_path, overlay_trajectory(rgb, traj, start, goal));
    io::write_ppm(attn_path, attention_heatmap(rgb, attn));
    return {traj_path, attn_path};
}

}  // namespace difftraj::render
