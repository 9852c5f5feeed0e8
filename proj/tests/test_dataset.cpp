#include <cmath>
#include <filesystem>
#include <fstream>

#include "difftraj/dataset.hpp"
#include "doctest.h"

using namespace difftraj;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / "difftraj_tests" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) { return io::read_file(p); }

}  // namespace

TEST_CASE("ppm images survive the write read cycle within quantization") {
    Rng rng(500);
    TensorF img({3, 64, 64});
    for (auto& v : img.vec()) v = static_cast<float>(rng.uniform());
    const auto dir = fresh_dir("ppm");
    io::write_ppm(dir / "x.ppm", img);
    const auto back = io::read_ppm(dir / "x.ppm");
    REQUIRE(back.shape() == img.shape());
    for (std::int64_t i = 0; i < img.numel(); ++i)
        CHECK(std::abs(back[i] - img[i]) <= 0.5f / 255.0f + 1e-6f);

    io::write_file_atomic(dir / "bad.ppm", "P5\n2 2\n255\n....");
    CHECK_THROWS_AS(io::read_ppm(dir / "bad.ppm"), std::runtime_error);
    io::write_file_atomic(dir / "short.ppm", "P6\n8 8\n255\nxy");
    CHECK_THROWS_AS(io::read_ppm(dir / "short.ppm"), std::runtime_error);
}

TEST_CASE("raw float grids round-trip exactly and reject size mismatches") {
    Rng rng(501);
    TensorF t({7, 5});
    for (auto& v : t.vec()) v = static_cast<float>(rng.normal());
    const auto dir = fresh_dir("f32");
    io::write_f32(dir / "t.f32", t);
    const auto back = io::read_f32(dir / "t.f32", {7, 5});
    for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(back[i] == t[i]);
    CHECK_THROWS_AS(io::read_f32(dir / "t.f32", {7, 6}), std::runtime_error);
}

TEST_CASE("dataset builds are deterministic and follow the directory format") {
    data::BuildSpec spec;
    spec.counts = {4, 4, 4};
    spec.seed = 77;
    const auto r1 = fresh_dir("ds_a"), r2 = fresh_dir("ds_b");
    spec.root = r1.string();
    const auto m1 = data::build_dataset(spec);
    spec.root = r2.string();
    const auto m2 = data::build_dataset(spec);

    CHECK(m1.total == 12);
    CHECK(m1.rejected == m2.rejected);
    for (int i = 0; i < m1.total; ++i) {
        const auto d1 = data::sample_dir(r1.string(), i), d2 = data::sample_dir(r2.string(), i);
        for (const char* f :
             {"rgb.ppm", "trav.f32", "attn.f32", "depth.f32", "traj.f32", "traj_depths.f32",
              "meta.json"})
            CHECK(slurp(d1 / f) == slurp(d2 / f));
    }
    CHECK(slurp(r1 / "manifest.json") == slurp(r2 / "manifest.json"));

    const auto loaded = data::load_manifest(r1.string());
    CHECK(loaded.seed == 77);
    CHECK(loaded.counts == std::array<int, 3>{4, 4, 4});

    // task layout is contiguous per task
    CHECK(data::task_of_index(loaded, 0) == scene::TaskId::ExploreNav);
    CHECK(data::task_of_index(loaded, 4) == scene::TaskId::GoalNav);
    CHECK(data::task_of_index(loaded, 11) == scene::TaskId::PreGrasp);
}

TEST_CASE("stored samples reload with full supervision intact") {
    data::BuildSpec spec;
    spec.counts = {2, 3, 3};
    spec.seed = 31;
    const auto root = fresh_dir("ds_load");
    spec.root = root.string();
    data::build_dataset(spec);

    for (int i = 0; i < 8; ++i) {
        const auto s = data::load_sample(root.string(), i);
        REQUIRE(s.rgb.shape() == std::vector<int>({3, 64, 64}));
        REQUIRE(s.trav.shape() == std::vector<int>({64, 64}));
        REQUIRE(s.attn.shape() == std::vector<int>({64, 64}));
        REQUIRE(s.depth.shape() == std::vector<int>({64, 64}));
        REQUIRE(s.traj.waypoints.size() == static_cast<size_t>(cfg::kKWay));
        REQUIRE(s.traj.depths.size() == static_cast<size_t>(cfg::kKWay));
        CHECK(s.task_id == data::task_of_index(data::load_manifest(root.string()), i));

        // the oracle's collision-free guarantee survives storage: every
        // waypoint's nearest pixel is traversable
        for (const auto& w : s.traj.waypoints) {
            const auto [row, col] = oracle::px_from_norm(w);
            const int r = static_cast<int>(std::lround(row)), c = static_cast<int>(std::lround(col));
            CHECK(s.trav.at2(r, c) >= 0.5f);
        }
        for (float d : s.traj.depths) CHECK(d > 0.0f);

        if (s.task_id == scene::TaskId::ExploreNav) {
            CHECK_FALSE(s.has_target);
        } else {
            CHECK(s.has_target);
            CHECK(s.target.extent > 0);
        }
        if (s.task_id == scene::TaskId::PreGrasp) CHECK(s.depth_scale == scene::DepthScale::Cm);
    }
}

TEST_CASE("split rule uses floor arithmetic and verified disjointness") {
    data::Manifest m;
    m.seed = 123;
    m.counts = {512, 512, 512};
    m.total = 1536;
    data::make_splits(m);
    CHECK(m.train.size() == 1228);
    CHECK(m.val.size() == 153);
    CHECK(m.test.size() == 155);
    std::set<int> seen(m.train.begin(), m.train.end());
    for (int i : m.val) CHECK(seen.insert(i).second);
    for (int i : m.test) CHECK(seen.insert(i).second);
    CHECK(seen.size() == 1536);

    data::Manifest small;
    small.seed = 5;
    small.counts = {2, 2, 2};
    small.total = 6;
    data::make_splits(small);
    CHECK(small.train.size() == 4);
    CHECK(small.val.size() == 0);
    CHECK(small.test.size() == 2);
}

TEST_CASE("manifest validation rejects tampered or incomplete corpora") {
    data::BuildSpec spec;
    spec.counts = {2, 2, 2};
    spec.seed = 40;
    const auto root = fresh_dir("ds_tamper");
    spec.root = root.string();
    data::build_dataset(spec);
    CHECK_NOTHROW(data::load_manifest(root.string()));

    const std::string orig = slurp(root / "manifest.json");

    // future format version
    auto j = nlohmann::json::parse(orig);
    j["version"] = 99;
    io::write_file_atomic(root / "manifest.json", j.dump(2));
    CHECK_THROWS_WITH_AS(data::load_manifest(root.string()),
                         doctest::Contains("version"), std::runtime_error);

    // overlapping splits
    j = nlohmann::json::parse(orig);
    j["val"][0] = j["train"][0];
    io::write_file_atomic(root / "manifest.json", j.dump(2));
    CHECK_THROWS_WITH_AS(data::load_manifest(root.string()), doctest::Contains("overlap"),
                         std::runtime_error);

    // missing sample directory
    io::write_file_atomic(root / "manifest.json", orig);
    fs::remove_all(data::sample_dir(root.string(), 3));
    CHECK_THROWS_WITH_AS(data::load_manifest(root.string()), doctest::Contains("missing"),
                         std::runtime_error);
}

TEST_CASE("hostile scene distributions abort with a diagnostic") {
    data::BuildSpec spec;
    spec.counts = {3, 0, 0};
    spec.seed = 8;
    spec.ranges[0] = {55, 60, 0, 0};  // cannot place this much clutter at 64x64
    const auto root = fresh_dir("ds_abort");
    spec.root = root.string();
    CHECK_THROWS_AS(data::build_dataset(spec), std::runtime_error);
}

TEST_CASE("novel style datasets carry triangle targets") {
    data::BuildSpec spec;
    spec.counts = {0, 3, 3};
    spec.seed = 91;
    spec.style = scene::ObjectStyle::Novel;
    const auto root = fresh_dir("ds_novel");
    spec.root = root.string();
    const auto m = data::build_dataset(spec);
    CHECK(m.style == "novel");
    for (int i = 0; i < m.total; ++i) {
        const auto s = data::load_sample(root.string(), i);
        REQUIRE(s.has_target);
        CHECK(s.target.shape == scene::ShapeKind::Triangle);
    }
}
