#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "difftraj/dataset.hpp"
#include "difftraj/training.hpp"

namespace difftraj::eval {

struct CameraModel {
    double hfov_deg = cfg::kHfovDeg;
    int width = cfg::kImageSize;

    double tan_half() const { return std::tan(hfov_deg * 3.14159265358979323846 / 360.0); }
};

/// Pinhole lateral/forward coordinates from an image column and a depth; the
/// result carries the depth's unit.
inline std::pair<double, double> pixel_to_metric(double u_px, double depth,
                                                 const CameraModel& cam) {
    if (depth <= 0) throw std::invalid_argument("pixel_to_metric: depth must be positive");
    const double half = cam.width / 2.0;
    const double x = ((u_px - (half - 0.5)) / half) * depth * cam.tan_half();
    return {x, depth};
}

/// Distance in the ground plane between the trajectory's final waypoint (at
/// its predicted depth) and the GT goal pixel (at GT depth). The result is in
/// the depth grid's native unit; the scale tag declares which one that is.
inline double goal_error(const oracle::Trajectory& traj, oracle::Pixel gt_goal,
                         const TensorF& depth_gt, const CameraModel& cam,
                         scene::DepthScale /*scale*/ = scene::DepthScale::Meter) {
    if (traj.waypoints.empty() || traj.depths.size() != traj.waypoints.size())
        throw std::invalid_argument("goal_error: trajectory lacks waypoints or depths");
    const auto& wp = traj.waypoints.back();
    const auto [row, col] = oracle::px_from_norm(wp);
    (void)row;
    const auto [px, pz] = pixel_to_metric(col, traj.depths.back(), cam);
    const auto [gx, gz] =
        pixel_to_metric(gt_goal.col, depth_gt.at2(gt_goal.row, gt_goal.col), cam);
    return std::hypot(px - gx, pz - gz);
}

/// Fraction of waypoints whose nearest pixel is non-traversable. Object
/// goals necessarily abut non-floor pixels, so the final waypoint is skipped
/// for object-directed trajectories.
inline double collision_rate(const oracle::Trajectory& traj, const TensorF& trav_gt) {
    const int S = trav_gt.dim(0);
    const size_t K = traj.waypoints.size();
    if (K == 0) throw std::invalid_argument("collision_rate: empty trajectory");
    const size_t upto = traj.goal_mode == oracle::GoalMode::ObjectDirected ? K - 1 : K;
    int hits = 0;
    for (size_t k = 0; k < upto; ++k) {
        const auto [row, col] = oracle::px_from_norm(traj.waypoints[k]);
        const int r = std::clamp(static_cast<int>(std::lround(row)), 0, S - 1);
        const int c = std::clamp(static_cast<int>(std::lround(col)), 0, S - 1);
        if (trav_gt.at2(r, c) < 0.5f) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(K);
}

namespace detail {

/// 1-D squared-distance transform (lower envelope of parabolas).
inline void dt1d(const std::vector<double>& f, std::vector<double>& d) {
    const int n = static_cast<int>(f.size());
    std::vector<int> v(static_cast<size_t>(n));
    std::vector<double> z(static_cast<size_t>(n) + 1);
    int k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    for (int q = 1; q < n; ++q) {
        double s = ((f[static_cast<size_t>(q)] + q * q) -
                    (f[static_cast<size_t>(v[static_cast<size_t>(k)])] +
                     v[static_cast<size_t>(k)] * v[static_cast<size_t>(k)])) /
                   (2.0 * q - 2.0 * v[static_cast<size_t>(k)]);
        while (s <= z[static_cast<size_t>(k)]) {
            --k;
            s = ((f[static_cast<size_t>(q)] + q * q) -
                 (f[static_cast<size_t>(v[static_cast<size_t>(k)])] +
                  v[static_cast<size_t>(k)] * v[static_cast<size_t>(k)])) /
                (2.0 * q - 2.0 * v[static_cast<size_t>(k)]);
        }
        ++k;
        v[static_cast<size_t>(k)] = q;
        z[static_cast<size_t>(k)] = s;
        z[static_cast<size_t>(k) + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[static_cast<size_t>(k) + 1] < q) ++k;
        const int vq = v[static_cast<size_t>(k)];
        d[static_cast<size_t>(q)] = (q - vq) * (q - vq) + f[static_cast<size_t>(vq)];
    }
}

}  // namespace detail

/// Exact Euclidean distance (in pixels) from every cell to the nearest
/// obstacle cell (traversability < 0.5). All-free grids return +infinity.
inline Tensor<double> distance_to_obstacles_px(const TensorF& trav) {
    const int H = trav.dim(0), W = trav.dim(1);
    const double inf = 1e12;
    Tensor<double> sq({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) sq.at2(y, x) = trav.at2(y, x) < 0.5f ? 0.0 : inf;

    std::vector<double> f, d;
    for (int x = 0; x < W; ++x) {
        f.resize(static_cast<size_t>(H));
        d.resize(static_cast<size_t>(H));
        for (int y = 0; y < H; ++y) f[static_cast<size_t>(y)] = sq.at2(y, x);
        detail::dt1d(f, d);
        for (int y = 0; y < H; ++y) sq.at2(y, x) = d[static_cast<size_t>(y)];
    }
    for (int y = 0; y < H; ++y) {
        f.resize(static_cast<size_t>(W));
        d.resize(static_cast<size_t>(W));
        for (int x = 0; x < W; ++x) f[static_cast<size_t>(x)] = sq.at2(y, x);
        detail::dt1d(f, d);
        for (int x = 0; x < W; ++x) sq.at2(y, x) = d[static_cast<size_t>(x)];
    }
    Tensor<double> out({H, W});
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = sq[i] >= inf ? std::numeric_limits<double>::infinity() : std::sqrt(sq[i]);
    return out;
}

struct Clearance {
    bool applicable = false;
    double mean = 0, min = 0;
};

/// Per-waypoint obstacle distance converted to metric units with the local
/// per-pixel scale d*tan(hfov/2)/(width/2) at each waypoint's GT depth.
inline Clearance clearance(const oracle::Trajectory& traj, const TensorF& trav_gt,
                           const TensorF& depth_gt, const CameraModel& cam) {
    bool any_obstacle = false;
    for (const float v : trav_gt.vec())
        if (v < 0.5f) {
            any_obstacle = true;
            break;
        }
    Clearance out;
    if (!any_obstacle) return out;

    const auto dist_px = distance_to_obstacles_px(trav_gt);
    const int S = trav_gt.dim(0);
    double sum = 0, mn = std::numeric_limits<double>::infinity();
    for (const auto& w : traj.waypoints) {
        const auto [row, col] = oracle::px_from_norm(w);
        const int r = std::clamp(static_cast<int>(std::lround(row)), 0, S - 1);
        const int c = std::clamp(static_cast<int>(std::lround(col)), 0, S - 1);
        const double per_px =
            depth_gt.at2(r, c) * cam.tan_half() / (cam.width / 2.0);
        const double m = dist_px.at2(r, c) * per_px;
        sum += m;
        mn = std::min(mn, m);
    }
    out.applicable = true;
    out.mean = sum / static_cast<double>(traj.waypoints.size());
    out.min = mn;
    return out;
}

struct EvalThresholds {
    double nav_success_m = cfg::kNavSuccessM;
    double grasp_success_cm = cfg::kGraspSuccessCm;
    double compliance_px = cfg::kCompliancePx;
};

struct TaskReport {
    int n = 0;
    int excluded = 0;
    double success_rate = 0;
    double collision_free_rate = 0;
    double compliance_rate = 0;
    double mean_goal_error = 0;
    int clearance_n = 0;
    double mean_clearance = 0;
    double min_clearance = 0;
    std::string unit = "m";
};

struct SampleRow {
    int idx = 0;
    scene::TaskId task = scene::TaskId::ExploreNav;
    double goal_error = 0;
    double collision = 0;
    double clearance_mean = 0;  // NaN when not applicable
    bool compliant = false;
    bool success = false;
    oracle::GoalMode mode = oracle::GoalMode::TraversabilityDirected;
};

struct EvalReport {
    std::array<TaskReport, 3> tasks;
    std::string checkpoint_id;
    std::string config_echo;
    std::string mode = "autonomous";  // or "oracle-replay"
    int total_excluded = 0;
};

struct EvalOutcome {
    EvalReport report;
    std::vector<SampleRow> rows;
};

/// Scores a checkpoint over the manifest's test split. Attention comes from
/// the checkpoint's own predictor; oracle_replay instead replays the stored
/// GT trajectories to exercise the harness's upper bound.
inline EvalOutcome evaluate(train::Checkpoint& ck, const std::string& data_root,
                            const data::Manifest& m, const EvalThresholds& th = {},
                            bool oracle_replay = false, std::uint64_t seed = 0) {
    if (m.test.empty()) throw std::invalid_argument("evaluate: empty test split");
    {
        std::array<int, 3> per_task{};
        for (const int idx : m.test) ++per_task[static_cast<size_t>(data::task_of_index(m, idx))];
        for (int t = 0; t < 3; ++t)
            if (m.counts[static_cast<size_t>(t)] > 0 && per_task[static_cast<size_t>(t)] == 0)
                throw std::invalid_argument(
                    std::string("evaluate: test split lacks ") +
                    scene::task_name(static_cast<scene::TaskId>(t)) + " samples");
    }
    const CameraModel cam;
    const auto sched = model::make_schedule(ck.cfg.t_steps);
    EvalOutcome out;
    out.report.mode = oracle_replay ? "oracle-replay" : "autonomous";
    {
        std::string bytes;
        train::detail::each_entry(ck, [&](const auto& e) {
            bytes.append(reinterpret_cast<const char*>(e.value->val.data()),
                         static_cast<size_t>(e.value->val.numel()) * sizeof(float));
        });
        char hex[17];
        std::snprintf(hex, sizeof(hex), "%016llx",
                      static_cast<unsigned long long>(train::detail::fnv1a(bytes)));
        out.report.checkpoint_id = std::string("epoch ") + std::to_string(ck.epoch) +
                                   " params " + hex;
    }
    out.report.config_echo = train::detail::config_json(ck.cfg).dump();

    struct Acc {
        int n = 0, excluded = 0, success = 0, collision_free = 0, compliant = 0;
        double err_sum = 0;
        int cl_n = 0;
        double cl_sum = 0, cl_min = std::numeric_limits<double>::infinity();
    };
    std::array<Acc, 3> acc;

    for (const int idx : m.test) {
        const auto t_guess = data::task_of_index(m, idx);
        auto& a = acc[static_cast<size_t>(t_guess)];
        try {
            const auto s = data::load_sample(data_root, idx);
            oracle::Trajectory traj;
            if (oracle_replay) {
                traj = s.traj;
            } else {
                const auto pred = ck.vit.predict_attention(s.rgb, s.task_id);
                cond::TaskContext tc;
                tc.task_id = s.task_id;
                const auto ctx = cond::make_batch({attn::attention_to_context(pred, tc)});
                TensorF rgb({1, 3, cfg::kImageSize, cfg::kImageSize});
                std::copy_n(s.rgb.data(), s.rgb.numel(), rgb.data());
                traj = ck.net.sample(rgb, ctx, sched,
                                     derive_seed(seed, {static_cast<std::uint64_t>(idx)}));
            }

            SampleRow row;
            row.idx = idx;
            row.task = s.task_id;
            row.mode = traj.goal_mode;
            row.goal_error = goal_error(traj, s.goal, s.depth, cam, s.depth_scale);
            row.collision = collision_rate(traj, s.trav);
            const auto cl = clearance(traj, s.trav, s.depth, cam);
            row.clearance_mean = cl.applicable ? cl.mean : std::nan("");

            const auto [frow, fcol] = oracle::px_from_norm(traj.waypoints.back());
            row.compliant = std::hypot(frow - s.goal.row, fcol - s.goal.col) <= th.compliance_px;
            const double succ_at = s.task_id == scene::TaskId::PreGrasp ? th.grasp_success_cm
                                                                        : th.nav_success_m;
            row.success = row.goal_error <= succ_at;

            ++a.n;
            a.err_sum += row.goal_error;
            if (row.success) ++a.success;
            if (row.collision == 0.0) ++a.collision_free;
            if (row.compliant) ++a.compliant;
            if (cl.applicable) {
                ++a.cl_n;
                a.cl_sum += cl.mean;
                a.cl_min = std::min(a.cl_min, cl.min);
            }
            out.rows.push_back(row);
        } catch (const std::exception&) {
            ++a.excluded;
        }
    }

    for (int t = 0; t < 3; ++t) {
        const auto& a = acc[static_cast<size_t>(t)];
        auto& r = out.report.tasks[static_cast<size_t>(t)];
        r.n = a.n;
        r.excluded = a.excluded;
        r.unit = static_cast<scene::TaskId>(t) == scene::TaskId::PreGrasp ? "cm" : "m";
        out.report.total_excluded += a.excluded;
        if (a.n == 0) continue;
        r.success_rate = static_cast<double>(a.success) / a.n;
        r.collision_free_rate = static_cast<double>(a.collision_free) / a.n;
        r.compliance_rate = static_cast<double>(a.compliant) / a.n;
        r.mean_goal_error = a.err_sum / a.n;
        r.clearance_n = a.cl_n;
        if (a.cl_n > 0) {
            r.mean_clearance = a.cl_sum / a.cl_n;
            r.min_clearance = a.cl_min;
        }
    }
    return out;
}

inline std::string report_text(const EvalReport& r) {
    std::string s = "evaluation mode: " + r.mode + "\ncheckpoint: " + r.checkpoint_id +
                    "\nconfig: " + r.config_echo + "\n";
    for (int t = 0; t < 3; ++t) {
        const auto& tr = r.tasks[static_cast<size_t>(t)];
        char buf[320];
        std::snprintf(buf, sizeof(buf),
                      "%s: n=%d excluded=%d success=%.3f collision_free=%.3f compliance=%.3f "
                      "goal_error=%.4f %s clearance_mean=%.4f clearance_min=%.4f %s (n=%d)\n",
                      scene::task_name(static_cast<scene::TaskId>(t)), tr.n, tr.excluded,
                      tr.success_rate, tr.collision_free_rate, tr.compliance_rate,
                      tr.mean_goal_error, tr.unit.c_str(), tr.mean_clearance, tr.min_clearance,
                      tr.unit.c_str(), tr.clearance_n);
        s += buf;
    }
    s += "excluded total: " + std::to_string(r.total_excluded) + "\n";
    return s;
}

inline std::string rows_csv(const std::vector<SampleRow>& rows) {
    std::string s = "idx,task,goal_error,collision,clearance_mean,compliant,success,mode\n";
    for (const auto& r : rows) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%d,%s,%.6f,%.4f,%.6f,%d,%d,%s\n", r.idx,
                      scene::task_name(r.task), r.goal_error, r.collision, r.clearance_mean,
                      r.compliant ? 1 : 0, r.success ? 1 : 0, oracle::goal_mode_name(r.mode));
        s += buf;
    }
    return s;
}

}  // namespace difftraj::eval
