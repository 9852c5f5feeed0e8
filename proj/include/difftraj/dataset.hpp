#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "difftraj/io.hpp"
#include "difftraj/oracle.hpp"
#include "difftraj/scenegen.hpp"
#include "json.hpp"

namespace difftraj::data {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kFormatVersion = 1;
inline constexpr double kMaxRejectRate = 0.2;

/// Obstacle/object count ranges drawn per sample, one row per task.
struct GenRanges {
    int obst_lo = 0, obst_hi = 0, obj_lo = 0, obj_hi = 0;
};

inline std::array<GenRanges, 3> default_ranges() {
    return {GenRanges{2, 6, 0, 0},    // exploration: clutter only
            GenRanges{1, 4, 1, 3},    // goal navigation
            GenRanges{0, 2, 1, 3}};   // pre-grasp: a few distractors
}

struct BuildSpec {
    std::string root;
    std::array<int, 3> counts{512, 512, 512};
    std::uint64_t seed = 0;
    scene::ObjectStyle style = scene::ObjectStyle::Standard;
    std::array<GenRanges, 3> ranges = default_ranges();
};

struct Manifest {
    int version = kFormatVersion;
    std::uint64_t seed = 0;
    std::array<int, 3> counts{0, 0, 0};
    int total = 0;
    int rejected = 0;
    std::string style = "standard";
    std::vector<int> train, val, test;
};

/// One fully supervised sample as stored on disk.
struct Sample {
    TensorF rgb;    // (3,64,64)
    TensorF trav;   // (64,64)
    TensorF attn;   // (64,64)
    TensorF depth;  // (64,64)
    oracle::Trajectory traj;
    scene::TaskId task_id = scene::TaskId::ExploreNav;
    scene::DepthScale depth_scale = scene::DepthScale::Meter;
    std::uint64_t seed = 0;
    oracle::Pixel start, goal;
    float attention_peak = 0;
    bool has_target = false;
    scene::ObjectInstance target;
};

inline fs::path sample_dir(const std::string& root, int idx) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%06d", idx);
    return fs::path(root) / buf;
}

namespace detail {

inline json object_to_json(const scene::ObjectInstance& o) {
    return json{{"row", o.row},
                {"col", o.col},
                {"extent", o.extent},
                {"shape", scene::shape_name(o.shape)},
                {"color", {o.color[0], o.color[1], o.color[2]}},
                {"is_target", o.is_target},
                {"object_depth_cm", o.object_depth_cm}};
}

inline scene::ObjectInstance object_from_json(const json& j) {
    scene::ObjectInstance o;
    o.row = j.at("row").get<int>();
    o.col = j.at("col").get<int>();
    o.extent = j.at("extent").get<int>();
    o.shape = scene::shape_from_name(j.at("shape").get<std::string>());
    for (int c = 0; c < 3; ++c) o.color[static_cast<size_t>(c)] = j.at("color").at(c).get<float>();
    o.is_target = j.at("is_target").get<bool>();
    o.object_depth_cm = j.at("object_depth_cm").get<float>();
    return o;
}

inline void write_sample(const fs::path& dir, const scene::Scene& sc,
                         const oracle::Trajectory& traj, oracle::Pixel start,
                         const oracle::GoalSelection& goal) {
    fs::create_directories(dir);
    io::write_ppm(dir / "rgb.ppm", sc.rgb);
    io::write_f32(dir / "trav.f32", sc.traversability_gt);
    io::write_f32(dir / "attn.f32", sc.attention_gt);
    io::write_f32(dir / "depth.f32", sc.depth_gt);

    const int K = static_cast<int>(traj.waypoints.size());
    TensorF coords({K, 2}), depths({K});
    for (int k = 0; k < K; ++k) {
        coords.at2(k, 0) = traj.waypoints[static_cast<size_t>(k)].u;
        coords.at2(k, 1) = traj.waypoints[static_cast<size_t>(k)].v;
        depths[k] = traj.depths[static_cast<size_t>(k)];
    }
    io::write_f32(dir / "traj.f32", coords);
    io::write_f32(dir / "traj_depths.f32", depths);

    json meta{{"task_id", scene::task_name(sc.task_id)},
              {"seed", sc.seed},
              {"depth_scale", sc.depth_scale == scene::DepthScale::Cm ? "cm" : "meter"},
              {"goal_mode", oracle::goal_mode_name(traj.goal_mode)},
              {"start", {{"row", start.row}, {"col", start.col}}},
              {"goal", {{"row", goal.goal.row}, {"col", goal.goal.col}}},
              {"attention_peak", goal.attention_peak},
              {"n_obstacles", sc.n_obstacles},
              {"objects", json::array()}};
    for (const auto& o : sc.objects) meta["objects"].push_back(object_to_json(o));
    io::write_file_atomic(dir / "meta.json", meta.dump(2) + "\n");
}

}  // namespace detail

/// Fills the manifest's split lists: one global shuffle of all indices, then
/// train = floor(0.8 n), val = floor(0.1 n), test = the rest.
inline void make_splits(Manifest& m) {
    std::vector<int> order(static_cast<size_t>(m.total));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(m.seed, {71}));
    rng.shuffle(order.begin(), order.end());
    const int n_train = static_cast<int>(0.8 * m.total);
    const int n_val = static_cast<int>(0.1 * m.total);
    m.train.assign(order.begin(), order.begin() + n_train);
    m.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
    m.test.assign(order.begin() + n_train + n_val, order.end());
}

/// Task of a sample index under the contiguous per-task layout.
inline scene::TaskId task_of_index(const Manifest& m, int idx) {
    if (idx < m.counts[0]) return scene::TaskId::ExploreNav;
    if (idx < m.counts[0] + m.counts[1]) return scene::TaskId::GoalNav;
    return scene::TaskId::PreGrasp;
}

/// Generates, plans and persists the full corpus; unplannable scenes are
/// resampled with fresh seeds and counted.
inline Manifest build_dataset(const BuildSpec& spec) {
    for (int c : spec.counts)
        if (c < 0) throw std::invalid_argument("build_dataset: negative per-task count");
    fs::create_directories(spec.root);

    Manifest m;
    m.seed = spec.seed;
    m.counts = spec.counts;
    m.total = spec.counts[0] + spec.counts[1] + spec.counts[2];
    m.style = spec.style == scene::ObjectStyle::Novel ? "novel" : "standard";
    std::string log;

    int idx = 0;
    for (int task = 0; task < 3; ++task) {
        const auto& rr = spec.ranges[static_cast<size_t>(task)];
        for (int j = 0; j < spec.counts[static_cast<size_t>(task)]; ++j, ++idx) {
            bool stored = false;
            for (int attempt = 0; attempt < 100 && !stored; ++attempt) {
                const std::uint64_t sseed =
                    derive_seed(spec.seed, {static_cast<std::uint64_t>(task),
                                            static_cast<std::uint64_t>(j),
                                            static_cast<std::uint64_t>(attempt)});
                Rng draw(derive_seed(sseed, {5}));
                scene::SceneSpec ss;
                ss.task_id = static_cast<scene::TaskId>(task);
                ss.n_obstacles = static_cast<int>(draw.uniform_int_range(rr.obst_lo, rr.obst_hi));
                ss.n_objects = rr.obj_hi > 0
                                   ? static_cast<int>(draw.uniform_int_range(rr.obj_lo, rr.obj_hi))
                                   : 0;
                ss.seed = sseed;
                ss.style = spec.style;
                try {
                    const auto sc = scene::generate_scene(ss);
                    const auto start = oracle::select_start(sc.traversability_gt, sseed);
                    const auto goal = oracle::select_goal(sc.attention_gt, sc.traversability_gt);
                    const auto path = oracle::plan_trajectory(sc.traversability_gt,
                                                              sc.attention_gt, start, goal.goal);
                    auto traj = oracle::resample_waypoints(path);
                    traj.goal_mode = goal.mode;
                    traj.depths = oracle::waypoint_depths(traj, sc.depth_gt);
                    detail::write_sample(sample_dir(spec.root, idx), sc, traj, start, goal);
                    stored = true;
                } catch (const std::exception& e) {
                    ++m.rejected;
                    log += "reject sample " + std::to_string(idx) + " attempt " +
                           std::to_string(attempt) + ": " + e.what() + "\n";
                }
            }
            if (!stored)
                throw std::runtime_error("build_dataset: sample " + std::to_string(idx) +
                                         " unplannable after 100 attempts");
        }
    }

    const double rate =
        m.total + m.rejected > 0 ? static_cast<double>(m.rejected) / (m.total + m.rejected) : 0.0;
    if (rate > kMaxRejectRate)
        throw std::runtime_error("build_dataset: rejection rate " + std::to_string(rate) +
                                 " exceeds " + std::to_string(kMaxRejectRate) +
                                 " (scene distribution too hostile to planning)");

    make_splits(m);

    json j{{"version", m.version}, {"seed", m.seed},
           {"counts", m.counts},   {"total", m.total},
           {"rejected", m.rejected}, {"style", m.style},
           {"train", m.train},     {"val", m.val},
           {"test", m.test}};
    io::write_file_atomic(fs::path(spec.root) / "manifest.json", j.dump(2) + "\n");
    if (!log.empty()) io::write_file_atomic(fs::path(spec.root) / "build.log", log);
    return m;
}

/// Reads and cross-checks a manifest: split disjointness and the presence of
/// every sample directory.
inline Manifest load_manifest(const std::string& root) {
    const auto j = json::parse(io::read_file(fs::path(root) / "manifest.json"));
    Manifest m;
    m.version = j.at("version").get<int>();
    if (m.version != kFormatVersion)
        throw std::runtime_error("manifest version " + std::to_string(m.version) +
                                 " unsupported, expected " + std::to_string(kFormatVersion));
    m.seed = j.at("seed").get<std::uint64_t>();
    for (int t = 0; t < 3; ++t) m.counts[static_cast<size_t>(t)] = j.at("counts").at(t).get<int>();
    m.total = j.at("total").get<int>();
    m.rejected = j.at("rejected").get<int>();
    m.style = j.at("style").get<std::string>();
    m.train = j.at("train").get<std::vector<int>>();
    m.val = j.at("val").get<std::vector<int>>();
    m.test = j.at("test").get<std::vector<int>>();

    std::set<int> seen;
    for (const auto* split : {&m.train, &m.val, &m.test})
        for (int i : *split)
            if (!seen.insert(i).second)
                throw std::runtime_error("manifest splits overlap at sample " + std::to_string(i));
    if (static_cast<int>(seen.size()) != m.total ||
        m.total != m.counts[0] + m.counts[1] + m.counts[2])
        throw std::runtime_error("manifest split sizes do not cover the sample count");
    for (int i = 0; i < m.total; ++i)
        if (!fs::exists(sample_dir(root, i) / "meta.json"))
            throw std::runtime_error("manifest lists sample " + std::to_string(i) +
                                     " but " + sample_dir(root, i).string() + " is missing");
    return m;
}

inline Sample load_sample_dir(const fs::path& dir) {
    Sample s;
    s.rgb = io::read_ppm(dir / "rgb.ppm");
    const int S = s.rgb.dim(1);
    s.trav = io::read_f32(dir / "trav.f32", {S, S});
    s.attn = io::read_f32(dir / "attn.f32", {S, S});
    s.depth = io::read_f32(dir / "depth.f32", {S, S});

    const auto j = json::parse(io::read_file(dir / "meta.json"));
    s.task_id = scene::task_from_name(j.at("task_id").get<std::string>());
    s.seed = j.at("seed").get<std::uint64_t>();
    s.depth_scale = j.at("depth_scale").get<std::string>() == "cm" ? scene::DepthScale::Cm
                                                                   : scene::DepthScale::Meter;
    s.start = {j.at("start").at("row").get<int>(), j.at("start").at("col").get<int>()};
    s.goal = {j.at("goal").at("row").get<int>(), j.at("goal").at("col").get<int>()};
    s.attention_peak = j.at("attention_peak").get<float>();
    s.traj.goal_mode = oracle::goal_mode_from_name(j.at("goal_mode").get<std::string>());
    for (const auto& oj : j.at("objects")) {
        const auto o = detail::object_from_json(oj);
        if (o.is_target) {
            s.has_target = true;
            s.target = o;
        }
    }

    const int K = cfg::kKWay;
    const auto coords = io::read_f32(dir / "traj.f32", {K, 2});
    const auto depths = io::read_f32(dir / "traj_depths.f32", {K});
    s.traj.waypoints.resize(static_cast<size_t>(K));
    s.traj.depths.resize(static_cast<size_t>(K));
    for (int k = 0; k < K; ++k) {
        s.traj.waypoints[static_cast<size_t>(k)] = {coords.at2(k, 0), coords.at2(k, 1)};
        s.traj.depths[static_cast<size_t>(k)] = depths[k];
    }
    return s;
}

inline Sample load_sample(const std::string& root, int idx) {
    return load_sample_dir(sample_dir(root, idx));
}

}  // namespace difftraj::data
