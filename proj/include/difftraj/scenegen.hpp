#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "difftraj/config.hpp"
#include "difftraj/core/imgproc.hpp"
#include "difftraj/core/rng.hpp"
#include "difftraj/core/tensor.hpp"

namespace difftraj::scene {

enum class TaskId { ExploreNav = 0, GoalNav = 1, PreGrasp = 2 };
enum class DepthScale { Meter = 0, Cm = 1 };
enum class ShapeKind { Rect = 0, Disc = 1, Triangle = 2 };
enum class ObjectStyle { Standard = 0, Novel = 1 };

inline int task_mode(TaskId t) { return t == TaskId::PreGrasp ? 1 : 0; }
inline DepthScale depth_scale_for(TaskId t) {
    return t == TaskId::PreGrasp ? DepthScale::Cm : DepthScale::Meter;
}

inline const char* task_name(TaskId t) {
    switch (t) {
        case TaskId::ExploreNav: return "explore_nav";
        case TaskId::GoalNav: return "goal_nav";
        default: return "pre_grasp";
    }
}
inline TaskId task_from_name(const std::string& s) {
    if (s == "explore_nav") return TaskId::ExploreNav;
    if (s == "goal_nav") return TaskId::GoalNav;
    if (s == "pre_grasp") return TaskId::PreGrasp;
    throw std::invalid_argument("unknown task name: " + s);
}

inline const char* shape_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::Rect: return "rect";
        case ShapeKind::Disc: return "disc";
        default: return "triangle";
    }
}
inline ShapeKind shape_from_name(const std::string& s) {
    if (s == "rect") return ShapeKind::Rect;
    if (s == "disc") return ShapeKind::Disc;
    if (s == "triangle") return ShapeKind::Triangle;
    throw std::invalid_argument("unknown shape name: " + s);
}

struct ObjectInstance {
    int row = 0, col = 0;  // center pixel
    int extent = 0;        // side length / diameter in px
    ShapeKind shape = ShapeKind::Rect;
    std::array<float, 3> color{0, 0, 0};
    bool is_target = false;
    float object_depth_cm = 0;  // pre-grasp targets only
};

struct SceneSpec {
    TaskId task_id = TaskId::ExploreNav;
    int n_obstacles = 0;
    int n_objects = 0;
    std::uint64_t seed = 0;
    int image_size = cfg::kImageSize;
    ObjectStyle style = ObjectStyle::Standard;
};

struct Scene {
    TensorF rgb;                // (3, 64, 64) in [0,1]
    TensorF traversability_gt;  // (64, 64), 1 floor / 0 occupied
    TensorF attention_gt;       // (64, 64) in [0,1]
    TensorF depth_gt;           // (64, 64), unit per depth_scale
    DepthScale depth_scale = DepthScale::Meter;
    std::vector<ObjectInstance> objects;  // obstacles are plain dark instances
    TaskId task_id = TaskId::ExploreNav;
    std::uint64_t seed = 0;
    int n_obstacles = 0;  // leading objects entries are the obstacles

    const ObjectInstance* target() const {
        for (const auto& o : objects)
            if (o.is_target) return &o;
        return nullptr;
    }
};

namespace detail {

inline bool in_shape(const ObjectInstance& o, int y, int x) {
    const int r0 = o.row - o.extent / 2, c0 = o.col - o.extent / 2;
    const int r1 = r0 + o.extent - 1, c1 = c0 + o.extent - 1;
    switch (o.shape) {
        case ShapeKind::Rect:
            return y >= r0 && y <= r1 && x >= c0 && x <= c1;
        case ShapeKind::Disc: {
            const double rad = o.extent / 2.0;
            const double dy = y - o.row, dx = x - o.col;
            return dy * dy + dx * dx <= rad * rad;
        }
        default: {  // upward-pointing triangle spanning the bounding box
            if (y < r0 || y > r1 || x < c0 || x > c1) return false;
            const double frac = o.extent > 1
                                    ? static_cast<double>(y - r0) / (o.extent - 1)
                                    : 1.0;
            return std::abs(x - o.col) <= frac * (o.extent / 2.0);
        }
    }
}

inline int base_row(const ObjectInstance& o) { return o.row - o.extent / 2 + o.extent - 1; }

struct Box {
    int r0, c0, r1, c1;
};
inline Box bbox(const ObjectInstance& o) {
    const int r0 = o.row - o.extent / 2, c0 = o.col - o.extent / 2;
    return {r0, c0, r0 + o.extent - 1, c0 + o.extent - 1};
}
inline bool boxes_clash(const Box& a, const Box& b, int gap) {
    return !(a.r1 + gap < b.r0 || b.r1 + gap < a.r0 || a.c1 + gap < b.c0 || b.c1 + gap < a.c0);
}

}  // namespace detail

/// Task-specific supervision attention. ExploreNav mirrors traversability;
/// GoalNav places an isotropic Gaussian blob on the target; PreGrasp blurs the
/// target mask and renormalizes its peak to 1.
inline TensorF attention_for_task(const Scene& sc, TaskId task) {
    const int S = sc.traversability_gt.dim(0);
    if (task == TaskId::ExploreNav) return sc.traversability_gt;

    const ObjectInstance* tgt = sc.target();
    if (!tgt)
        throw std::invalid_argument(std::string("attention_for_task: no target object in a ") +
                                    task_name(task) + " scene");
    TensorF a({S, S});
    if (task == TaskId::GoalNav) {
        const double s2 = 2.0 * cfg::kAttnSigmaGoalPx * cfg::kAttnSigmaGoalPx;
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                const double dy = y - tgt->row, dx = x - tgt->col;
                a.at2(y, x) = static_cast<float>(std::exp(-(dy * dy + dx * dx) / s2));
            }
        return a;
    }
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) a.at2(y, x) = detail::in_shape(*tgt, y, x) ? 1.f : 0.f;
    a = img::gaussian_blur(a, cfg::kAttnSigmaGraspPx);
    float peak = 0;
    for (const float v : a.vec()) peak = std::max(peak, v);
    if (peak > 0)
        for (float& v : a.vec()) v = std::min(1.f, v / peak);
    return a;
}

/// Geometric oracle depth. Navigation scenes use a linear ground-plane model
/// (near at the bottom row, far at the top) with occupied pixels inheriting
/// the depth of their instance's base row; pre-grasp scenes are a tabletop
/// plane with the target at its own depth.
inline TensorF depth_from_geometry(const Scene& sc) {
    const int S = sc.traversability_gt.dim(0);
    TensorF d({S, S});
    if (sc.task_id == TaskId::PreGrasp) {
        const ObjectInstance* tgt = sc.target();
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x)
                d.at2(y, x) = (tgt && detail::in_shape(*tgt, y, x))
                                  ? tgt->object_depth_cm
                                  : static_cast<float>(cfg::kTableDepthCm);
        return d;
    }
    auto plane = [S](int v) {
        return static_cast<float>(cfg::kDepthNearM + (cfg::kDepthFarM - cfg::kDepthNearM) *
                                                         (1.0 - static_cast<double>(v) / (S - 1)));
    };
    for (int y = 0; y < S; ++y) {
        const float pd = plane(y);
        for (int x = 0; x < S; ++x) d.at2(y, x) = pd;
    }
    for (const auto& o : sc.objects) {
        const float pd = plane(std::min(detail::base_row(o), S - 1));
        const auto b = detail::bbox(o);
        for (int y = std::max(0, b.r0); y <= std::min(S - 1, b.r1); ++y)
            for (int x = std::max(0, b.c0); x <= std::min(S - 1, b.c1); ++x)
                if (detail::in_shape(o, y, x)) d.at2(y, x) = pd;
    }
    return d;
}

/// Deterministic procedural scene generation. Placement is rejection-sampled;
/// a scene is accepted only when a traversable bottom-to-top corridor exists
/// and (for object tasks) the target center has floor within goal-projection
/// range.
inline Scene generate_scene(const SceneSpec& spec) {
    if (spec.image_size != cfg::kImageSize)
        throw std::invalid_argument("generate_scene: image_size must be 64");
    if (spec.n_obstacles < 0) throw std::invalid_argument("generate_scene: n_obstacles < 0");
    const bool object_task = spec.task_id != TaskId::ExploreNav;
    if (object_task && spec.n_objects < 1)
        throw std::invalid_argument("generate_scene: object tasks need n_objects >= 1");

    const int S = spec.image_size;
    Rng rng(derive_seed(spec.seed, {101 + static_cast<std::uint64_t>(spec.task_id),
                                    static_cast<std::uint64_t>(spec.style)}));

    for (int attempt = 0; attempt < 100; ++attempt) {
        std::vector<ObjectInstance> items;
        std::vector<detail::Box> boxes;
        bool placed_all = true;

        auto try_place = [&](ObjectInstance o, int row_lo, int row_hi) {
            for (int t = 0; t < 50; ++t) {
                const int margin = o.extent / 2 + 1;
                o.row = rng.uniform_int_range(std::max(row_lo, margin),
                                              std::min(row_hi, S - 1 - margin));
                o.col = rng.uniform_int_range(margin, S - 1 - margin);
                const auto b = detail::bbox(o);
                bool clash = false;
                for (const auto& other : boxes)
                    if (detail::boxes_clash(b, other, 1)) {
                        clash = true;
                        break;
                    }
                if (!clash) {
                    items.push_back(o);
                    boxes.push_back(b);
                    return true;
                }
            }
            return false;
        };

        for (int i = 0; i < spec.n_obstacles && placed_all; ++i) {
            ObjectInstance o;
            o.extent = rng.uniform_int_range(4, 12);
            o.shape = rng.uniform_int(2) == 0 ? ShapeKind::Rect : ShapeKind::Disc;
            const float v = static_cast<float>(0.08 + 0.12 * rng.uniform());
            o.color = {v, v, v};
            placed_all = try_place(o, 8, 52);
        }
        if (object_task) {
            for (int i = 0; i < spec.n_objects && placed_all; ++i) {
                ObjectInstance o;
                o.is_target = i == 0;
                if (o.is_target) {
                    o.extent = rng.uniform_int_range(6, 10);
                    if (spec.style == ObjectStyle::Novel) {
                        o.shape = ShapeKind::Triangle;
                        o.color = img::hsv_to_rgb(rng.uniform(210.0, 280.0), 0.9, 0.9);
                    } else {
                        o.shape = rng.uniform_int(2) == 0 ? ShapeKind::Rect : ShapeKind::Disc;
                        o.color = img::hsv_to_rgb(rng.uniform(0.0, 160.0), 0.9, 0.9);
                    }
                    if (spec.task_id == TaskId::PreGrasp)
                        o.object_depth_cm = static_cast<float>(
                            rng.uniform(cfg::kObjDepthMinCm, cfg::kObjDepthMaxCm));
                    const bool fwd = spec.task_id == TaskId::GoalNav;
                    placed_all = try_place(o, fwd ? 6 : 16, fwd ? 41 : 47);
                } else {
                    o.extent = rng.uniform_int_range(5, 9);
                    o.shape = rng.uniform_int(2) == 0 ? ShapeKind::Rect : ShapeKind::Disc;
                    o.color = img::hsv_to_rgb(rng.uniform(0.0, 360.0), 0.35, 0.75);
                    placed_all = try_place(o, 6, 50);
                }
            }
        }
        if (!placed_all) continue;

        Scene sc;
        sc.task_id = spec.task_id;
        sc.seed = spec.seed;
        sc.depth_scale = depth_scale_for(spec.task_id);
        sc.objects = std::move(items);
        sc.n_obstacles = spec.n_obstacles;

        sc.traversability_gt = TensorF({S, S}, 1.f);
        for (const auto& o : sc.objects) {
            const auto b = detail::bbox(o);
            for (int y = std::max(0, b.r0); y <= std::min(S - 1, b.r1); ++y)
                for (int x = std::max(0, b.c0); x <= std::min(S - 1, b.c1); ++x)
                    if (detail::in_shape(o, y, x)) sc.traversability_gt.at2(y, x) = 0.f;
        }

        if (!img::bands_connected(sc.traversability_gt, cfg::kTravFloor, cfg::kBottomThirdStart,
                                  cfg::kTopThirdEnd))
            continue;
        if (object_task) {
            const auto* tgt = sc.target();
            bool reachable = false;
            const int R = static_cast<int>(cfg::kGoalProjRadiusPx);
            for (int dy = -R; dy <= R && !reachable; ++dy)
                for (int dx = -R; dx <= R && !reachable; ++dx) {
                    const int y = tgt->row + dy, x = tgt->col + dx;
                    if (y < 0 || y >= S || x < 0 || x >= S) continue;
                    if (dy * dy + dx * dx > R * R) continue;
                    reachable = sc.traversability_gt.at2(y, x) > cfg::kTravFloor;
                }
            if (!reachable) continue;
        }

        const float floor_gray = static_cast<float>(0.45 + 0.1 * rng.uniform());
        sc.rgb = TensorF({3, S, S}, floor_gray);
        for (const auto& o : sc.objects) {
            const auto b = detail::bbox(o);
            for (int y = std::max(0, b.r0); y <= std::min(S - 1, b.r1); ++y)
                for (int x = std::max(0, b.c0); x <= std::min(S - 1, b.c1); ++x)
                    if (detail::in_shape(o, y, x))
                        for (int c = 0; c < 3; ++c) sc.rgb.at3(c, y, x) = o.color[c];
        }

        sc.depth_gt = depth_from_geometry(sc);
        sc.attention_gt = attention_for_task(sc, spec.task_id);
        return sc;
    }
    throw std::runtime_error("generate_scene: placement failed after 100 attempts (seed " +
                             std::to_string(spec.seed) + ")");
}

}  // namespace difftraj::scene
