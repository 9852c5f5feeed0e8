#pragma once

#include <cmath>
#include <limits>
#include <queue>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "difftraj/config.hpp"
#include "difftraj/core/imgproc.hpp"
#include "difftraj/core/rng.hpp"
#include "difftraj/core/tensor.hpp"

namespace difftraj::oracle {

enum class GoalMode { ObjectDirected = 0, TraversabilityDirected = 1 };

inline const char* goal_mode_name(GoalMode m) {
    return m == GoalMode::ObjectDirected ? "object_directed" : "traversability_directed";
}
inline GoalMode goal_mode_from_name(const std::string& s) {
    if (s == "object_directed") return GoalMode::ObjectDirected;
    if (s == "traversability_directed") return GoalMode::TraversabilityDirected;
    throw std::invalid_argument("unknown goal mode: " + s);
}

struct Pixel {
    int row = 0, col = 0;
    bool operator==(const Pixel&) const = default;
};

struct Waypoint {
    float u = 0, v = 0;  // normalized column / row in [-1, 1]
};

struct Trajectory {
    std::vector<Waypoint> waypoints;  // exactly K_way entries
    std::vector<float> depths;        // optional, K_way entries when present
    GoalMode goal_mode = GoalMode::TraversabilityDirected;
};

struct GoalSelection {
    Pixel goal;
    GoalMode mode = GoalMode::TraversabilityDirected;
    float attention_peak = 0;
};

inline Waypoint norm_from_px(double row, double col) {
    const double s = cfg::kImageSize - 1;
    return {static_cast<float>(2.0 * col / s - 1.0), static_cast<float>(2.0 * row / s - 1.0)};
}
inline std::pair<double, double> px_from_norm(const Waypoint& w) {
    const double s = cfg::kImageSize - 1;
    return {(w.v + 1.0) / 2.0 * s, (w.u + 1.0) / 2.0 * s};  // (row, col)
}

/// Clamped bilinear read of a 2-d grid at fractional (row, col).
template <class T>
double bilinear_at(const Tensor<T>& g, double row, double col) {
    const int H = g.dim(0), W = g.dim(1);
    row = std::clamp(row, 0.0, static_cast<double>(H - 1));
    col = std::clamp(col, 0.0, static_cast<double>(W - 1));
    const int y0 = std::min(static_cast<int>(row), H - 1), x0 = std::min(static_cast<int>(col), W - 1);
    const int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
    const double fy = row - y0, fx = col - x0;
    return (1 - fy) * ((1 - fx) * g.at2(y0, x0) + fx * g.at2(y0, x1)) +
           fy * ((1 - fx) * g.at2(y1, x0) + fx * g.at2(y1, x1));
}

/// Uniform draw among high-traversability pixels in the bottom third.
inline Pixel select_start(const TensorF& traversability, std::uint64_t seed) {
    const int S = traversability.dim(0);
    std::vector<Pixel> eligible;
    for (int y = cfg::kBottomThirdStart; y < S; ++y)
        for (int x = 0; x < S; ++x)
            if (traversability.at2(y, x) > cfg::kStartTravMin) eligible.push_back({y, x});
    if (eligible.empty())
        throw std::runtime_error("select_start: no traversable pixel in the bottom third");
    Rng rng(derive_seed(seed, {7}));
    return eligible[static_cast<size_t>(rng.uniform_int(static_cast<std::int64_t>(eligible.size())))];
}

/// Hierarchical goal rule: object-directed at the attention argmax when the
/// peak clears tau_obj (projected onto nearby floor if the peak sits on an
/// object), otherwise the most forward high-traversability pixel.
inline GoalSelection select_goal(const TensorF& attention, const TensorF& traversability,
                                 double tau_obj = cfg::kTauObj) {
    const int S = attention.dim(0);
    GoalSelection out;
    float peak = -1;
    Pixel peak_px;
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x)
            if (attention.at2(y, x) > peak) {
                peak = attention.at2(y, x);
                peak_px = {y, x};
            }
    out.attention_peak = peak;

    if (peak >= tau_obj) {
        out.mode = GoalMode::ObjectDirected;
        if (traversability.at2(peak_px.row, peak_px.col) >= cfg::kTravFloor) {
            out.goal = peak_px;
            return out;
        }
        const double R = cfg::kGoalProjRadiusPx;
        double best = std::numeric_limits<double>::infinity();
        Pixel best_px{-1, -1};
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                if (traversability.at2(y, x) < cfg::kTravFloor) continue;
                const double dy = y - peak_px.row, dx = x - peak_px.col;
                const double d2 = dy * dy + dx * dx;
                if (d2 > R * R) continue;
                if (d2 < best ||
                    (d2 == best && std::tie(y, x) < std::tie(best_px.row, best_px.col))) {
                    best = d2;
                    best_px = {y, x};
                }
            }
        if (best_px.row < 0)
            throw std::runtime_error(
                "select_goal: no traversable pixel within projection range of the attention peak");
        out.goal = best_px;
        return out;
    }

    out.mode = GoalMode::TraversabilityDirected;
    double best = -1;
    Pixel best_px{-1, -1};
    for (int y = 0; y <= cfg::kTopThirdEnd; ++y)
        for (int x = 0; x < S; ++x) {
            if (traversability.at2(y, x) < cfg::kTravFloor) continue;
            const double w =
                traversability.at2(y, x) * (1.0 - static_cast<double>(y) / (S - 1));
            if (w > best) {
                best = w;
                best_px = {y, x};
            }
        }
    if (best_px.row < 0)
        throw std::runtime_error("select_goal: no traversable pixel in the top third");
    out.goal = best_px;
    return out;
}

/// Dijkstra over the 8-connected grid. Stepping into pixel p costs
/// step_length * (1 + w_t(1-T(p)) + w_a(1-A_blur(p))); pixels below the
/// traversability floor are never entered. Deterministic via (dist, row, col)
/// priority ordering.
inline std::vector<Pixel> plan_trajectory(const TensorF& traversability, const TensorF& attention,
                                          Pixel start, Pixel goal) {
    const int S = traversability.dim(0);
    auto ok = [&](const Pixel& p) {
        return p.row >= 0 && p.row < S && p.col >= 0 && p.col < S &&
               traversability.at2(p.row, p.col) >= cfg::kTravFloor;
    };
    if (!ok(start) || !ok(goal))
        throw std::invalid_argument("plan_trajectory: start or goal is not traversable");
    if (start == goal) return {start};

    const TensorF a_blur = img::gaussian_blur(attention, cfg::kCostBlurSigma);
    auto cell_cost = [&](int y, int x) {
        return 1.0 + cfg::kCostWTrav * (1.0 - traversability.at2(y, x)) +
               cfg::kCostWAttn * (1.0 - a_blur.at2(y, x));
    };

    const double INF = std::numeric_limits<double>::infinity();
    std::vector<double> dist(static_cast<size_t>(S) * S, INF);
    std::vector<int> prev(static_cast<size_t>(S) * S, -1);
    using Item = std::tuple<double, int, int>;  // dist, row, col
    std::priority_queue<Item, std::vector<Item>, std::greater<Item>> pq;
    dist[static_cast<size_t>(start.row) * S + start.col] = 0;
    pq.emplace(0.0, start.row, start.col);

    constexpr int dy[8] = {-1, -1, -1, 0, 0, 1, 1, 1};
    constexpr int dx[8] = {-1, 0, 1, -1, 1, -1, 0, 1};
    const double rt2 = std::sqrt(2.0);

    while (!pq.empty()) {
        auto [d, y, x] = pq.top();
        pq.pop();
        const size_t idx = static_cast<size_t>(y) * S + x;
        if (d > dist[idx]) continue;
        if (y == goal.row && x == goal.col) break;
        for (int k = 0; k < 8; ++k) {
            const int ny = y + dy[k], nx = x + dx[k];
            if (ny < 0 || ny >= S || nx < 0 || nx >= S) continue;
            if (traversability.at2(ny, nx) < cfg::kTravFloor) continue;
            const double len = (dy[k] != 0 && dx[k] != 0) ? rt2 : 1.0;
            const double nd = d + len * cell_cost(ny, nx);
            const size_t nidx = static_cast<size_t>(ny) * S + nx;
            if (nd < dist[nidx]) {
                dist[nidx] = nd;
                prev[nidx] = static_cast<int>(idx);
                pq.emplace(nd, ny, nx);
            }
        }
    }
    if (dist[static_cast<size_t>(goal.row) * S + goal.col] == INF)
        throw std::runtime_error("plan_trajectory: goal unreachable on the traversable set");

    std::vector<Pixel> path;
    for (int idx = goal.row * S + goal.col; idx != -1; idx = prev[static_cast<size_t>(idx)])
        path.push_back({idx / S, idx % S});
    std::reverse(path.begin(), path.end());
    return path;
}

/// Equal-arc-length resampling of a dense pixel path to K waypoints in
/// normalized coordinates, endpoints preserved.
inline Trajectory resample_waypoints(const std::vector<Pixel>& path, int k_way = cfg::kKWay) {
    if (path.empty()) throw std::invalid_argument("resample_waypoints: empty path");
    Trajectory traj;
    traj.waypoints.reserve(static_cast<size_t>(k_way));

    std::vector<double> cum(path.size(), 0.0);
    for (size_t i = 1; i < path.size(); ++i) {
        const double dy = path[i].row - path[i - 1].row, dx = path[i].col - path[i - 1].col;
        cum[i] = cum[i - 1] + std::sqrt(dy * dy + dx * dx);
    }
    const double total = cum.back();

    for (int k = 0; k < k_way; ++k) {
        if (total == 0.0 || k == 0) {
            traj.waypoints.push_back(norm_from_px(path.front().row, path.front().col));
            continue;
        }
        if (k == k_way - 1) {
            traj.waypoints.push_back(norm_from_px(path.back().row, path.back().col));
            continue;
        }
        const double s = total * k / (k_way - 1);
        size_t i = 1;
        while (i < path.size() - 1 && cum[i] < s) ++i;
        const double seg = cum[i] - cum[i - 1];
        const double f = seg > 0 ? (s - cum[i - 1]) / seg : 0.0;
        const double row = path[i - 1].row + f * (path[i].row - path[i - 1].row);
        const double col = path[i - 1].col + f * (path[i].col - path[i - 1].col);
        traj.waypoints.push_back(norm_from_px(row, col));
    }
    return traj;
}

/// Bilinear depth reads at each waypoint, in the grid's native unit.
inline std::vector<float> waypoint_depths(const Trajectory& traj, const TensorF& depth_gt) {
    std::vector<float> out;
    out.reserve(traj.waypoints.size());
    for (const auto& w : traj.waypoints) {
        const auto [row, col] = px_from_norm(w);
        out.push_back(static_cast<float>(bilinear_at(depth_gt, row, col)));
    }
    return out;
}

}  // namespace difftraj::oracle
