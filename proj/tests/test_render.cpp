#include <cstring>
#include <filesystem>

#include "difftraj/render.hpp"
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

TensorF noise_image(std::uint64_t seed) {
    Rng rng(seed);
    TensorF img({3, 64, 64});
    for (auto& v : img.vec()) v = static_cast<float>(rng.uniform());
    return img;
}

oracle::Trajectory diagonal_traj() {
    oracle::Trajectory t;
    for (int k = 0; k < 16; ++k) {
        const double p = 4.0 + 55.0 * k / 15.0;
        t.waypoints.push_back(oracle::norm_from_px(p, p));
        t.depths.push_back(2.0f);
    }
    return t;
}

}  // namespace

TEST_CASE("trajectory overlays paint the path and stay inside the canvas") {
    const auto rgb = noise_image(800);
    const auto traj = diagonal_traj();
    const oracle::Pixel start{58, 5}, goal{5, 58};
    const auto img = render::overlay_trajectory(rgb, traj, &start, &goal);
    REQUIRE(img.shape() == std::vector<int>{3, 256, 256});
    for (const float v : img.vec()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }

    const auto base = render::upscale_nearest(rgb, render::kUpscale);
    std::int64_t changed = 0;
    for (std::int64_t i = 0; i < img.numel(); ++i)
        if (img[i] != base[i]) ++changed;
    CHECK(changed > 1000);

    const auto again = render::overlay_trajectory(rgb, traj, &start, &goal);
    CHECK(std::memcmp(img.data(), again.data(),
                      sizeof(float) * static_cast<size_t>(img.numel())) == 0);

    oracle::Trajectory wild;
    wild.waypoints = {{-3.0f, -3.0f}, {3.0f, 3.0f}};
    const auto clipped = render::overlay_trajectory(rgb, wild);
    for (const float v : clipped.vec()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("heat ramp runs blue to red and blending stays in range") {
    const auto cold = render::heat_color(0.0f);
    const auto hot = render::heat_color(1.0f);
    CHECK(cold.b > cold.r);
    CHECK(hot.r > hot.b);

    const auto rgb = noise_image(801);
    TensorF attn({64, 64});
    Rng rng(802);
    for (auto& v : attn.vec()) v = static_cast<float>(rng.uniform());
    const auto img = render::attention_heatmap(rgb, attn);
    REQUIRE(img.shape() == std::vector<int>{3, 256, 256});
    for (const float v : img.vec()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }

    TensorF tiny({8, 8});
    CHECK_THROWS_AS(render::attention_heatmap(rgb, tiny), std::invalid_argument);
}

TEST_CASE("render pair emits exactly two ppm images") {
    const auto dir = fresh_dir("render_pair");
    const auto rgb = noise_image(803);
    TensorF attn({64, 64});
    for (auto& v : attn.vec()) v = 0.4f;
    const auto traj = diagonal_traj();
    const auto [tp, ap] = render::render_pair(rgb, traj, attn, dir.string());

    int files = 0;
    for (const auto& e : fs::directory_iterator(dir)) {
        CHECK(e.path().extension() == ".ppm");
        ++files;
    }
    CHECK(files == 2);
    CHECK(io::read_ppm(tp).shape() == std::vector<int>{3, 256, 256});
    CHECK(io::read_ppm(ap).shape() == std::vector<int>{3, 256, 256});
}
