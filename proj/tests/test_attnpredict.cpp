#include <cmath>
#include <cstring>
#include <vector>

#include "difftraj/attnpredict.hpp"
#include "difftraj/model.hpp"
#include "doctest.h"
#include "testutil.hpp"

using namespace difftraj;
using attn::AttnPredictor;
using attn::AttnSource;

namespace {

template <class T>
Tensor<T> uniform_t(std::vector<int> shape, Rng& rng, double lo, double hi) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

/// A smooth image with enough structure that patch features differ.
TensorF gradient_image() {
    TensorF img({3, 64, 64});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                img.at3(c, y, x) = 0.5f + 0.4f * std::sin(0.21f * (x + 13 * c)) *
                                              std::cos(0.17f * (y + 7 * c));
    return img;
}

void swap_patches(TensorF& img, int gy0, int gx0, int gy1, int gx1) {
    for (int c = 0; c < 3; ++c)
        for (int py = 0; py < 8; ++py)
            for (int px = 0; px < 8; ++px)
                std::swap(img.at3(c, gy0 * 8 + py, gx0 * 8 + px),
                          img.at3(c, gy1 * 8 + py, gx1 * 8 + px));
}

}  // namespace

TEST_CASE("patch features obey the shape, determinism and unit-norm contract") {
    AttnPredictor<float> vit(21);
    Rng rng(400);
    TensorF img({3, 64, 64});
    for (auto& v : img.vec()) v = static_cast<float>(rng.uniform());

    const auto a = vit.extract_patch_features(img);
    const auto b = vit.extract_patch_features(img);
    REQUIRE(a.features.shape() == std::vector<int>({8, 8, 64}));
    REQUIRE(a.normalized.shape() == std::vector<int>({8, 8, 64}));
    for (std::int64_t i = 0; i < a.features.numel(); ++i) CHECK(a.features[i] == b.features[i]);

    for (int t = 0; t < 64; ++t) {
        double n2 = 0.0;
        for (int d = 0; d < 64; ++d) {
            const double v = a.normalized[static_cast<std::int64_t>(t) * 64 + d];
            n2 += v * v;
        }
        CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-5);
    }

    // cosine inputs are scale-invariant: renormalizing a scaled copy of a raw
    // feature vector reproduces the stored unit vector
    for (int t = 0; t < 64; t += 17) {
        double n2 = 0.0;
        for (int d = 0; d < 64; ++d) {
            const double v = 3.7 * a.features[static_cast<std::int64_t>(t) * 64 + d];
            n2 += v * v;
        }
        const double inv = 1.0 / std::sqrt(n2);
        for (int d = 0; d < 64; ++d) {
            const double v = 3.7 * a.features[static_cast<std::int64_t>(t) * 64 + d] * inv;
            CHECK(std::abs(v - a.normalized[static_cast<std::int64_t>(t) * 64 + d]) < 1e-5);
        }
    }
}

TEST_CASE("patch permutation equivariance holds exactly when positions are zeroed") {
    AttnPredictor<float> vit(22);
    auto img = gradient_image();
    auto swapped = img;
    swap_patches(swapped, 0, 0, 3, 5);

    // with live positional encodings the swap must NOT commute with the encoder
    const auto f0 = vit.extract_patch_features(img);
    const auto f1 = vit.extract_patch_features(swapped);
    double live_diff = 0.0;
    for (int d = 0; d < 64; ++d)
        live_diff = std::max(
            live_diff, std::abs(static_cast<double>(f1.features.at3(0, 0, d)) -
                                f0.features.at3(3, 5, d)));
    CHECK(live_diff > 1e-4);

    for (auto& v : vit.params.find("vit.pos")->val.vec()) v = 0.0f;
    const auto g0 = vit.extract_patch_features(img);
    const auto g1 = vit.extract_patch_features(swapped);
    for (int gy = 0; gy < 8; ++gy)
        for (int gx = 0; gx < 8; ++gx) {
            int sy = gy, sx = gx;
            if (gy == 0 && gx == 0) sy = 3, sx = 5;
            else if (gy == 3 && gx == 5) sy = 0, sx = 0;
            for (int d = 0; d < 64; ++d)
                CHECK(g1.features.at3(gy, gx, d) ==
                      doctest::Approx(g0.features.at3(sy, sx, d)).epsilon(1e-5));
        }
}

TEST_CASE("autonomous attention stays in range and tasks use separate heads") {
    AttnPredictor<float> vit(23);
    Rng rng(401);
    const auto rgb = uniform_t<float>({2, 3, 64, 64}, rng, 0.0, 1.0);

    const auto map = vit.attention_map(rgb, {0, 2});
    REQUIRE(map->val.shape() == std::vector<int>({2, 1, 64, 64}));
    for (std::int64_t i = 0; i < map->val.numel(); ++i) {
        CHECK(map->val[i] > 0.0f);
        CHECK(map->val[i] < 1.0f);
    }
    CHECK_THROWS_AS(vit.attention_map(rgb, {0}), std::invalid_argument);

    TensorF img({3, 64, 64});
    for (auto& v : img.vec()) v = static_cast<float>(rng.uniform());
    const auto pn = vit.predict_attention(img, scene::TaskId::GoalNav);
    const auto pg = vit.predict_attention(img, scene::TaskId::PreGrasp);
    REQUIRE(pn.attn.shape() == std::vector<int>({64, 64}));
    CHECK(pn.source == AttnSource::Autonomous);
    CHECK_FALSE(pn.degenerate);
    double head_gap = 0.0;
    for (std::int64_t i = 0; i < pn.attn.numel(); ++i) {
        CHECK(pn.attn[i] >= 0.0f);
        CHECK(pn.attn[i] <= 1.0f);
        head_gap = std::max(head_gap, std::abs(double(pn.attn[i]) - pg.attn[i]));
    }
    CHECK(head_gap > 1e-6);
}

TEST_CASE("reference matching pins the stretch and self-match collapses") {
    AttnPredictor<float> vit(24);
    const auto img = gradient_image();

    // matching an image against itself saturates every patch at the cosine
    // bound of one, so the similarity grid is constant and collapses
    const auto self = vit.match_reference(img, img);
    CHECK(self.source == AttnSource::ReferenceMatched);
    CHECK(self.degenerate);
    for (std::int64_t i = 0; i < self.attn.numel(); ++i) CHECK(self.attn[i] == 0.5f);

    // distinct images leave contrast for the min-max stretch to pin at 0 and 1
    TensorF other({3, 64, 64});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                other.at3(c, y, x) = (x < 32) != (y < 32) ? 0.9f : 0.1f;
    const auto m = vit.match_reference(other, img);
    CHECK(m.source == AttnSource::ReferenceMatched);
    REQUIRE_FALSE(m.degenerate);
    float lo = 1.0f, hi = 0.0f;
    for (std::int64_t i = 0; i < m.attn.numel(); ++i) {
        CHECK(m.attn[i] >= 0.0f);
        CHECK(m.attn[i] <= 1.0f);
        lo = std::min(lo, m.attn[i]);
        hi = std::max(hi, m.attn[i]);
    }
    CHECK(hi == 1.0f);
    CHECK(lo == 0.0f);
}

TEST_CASE("contrast-free matching degrades to the flagged uniform map") {
    AttnPredictor<float> vit(25);
    Rng rng(402);

    // unrelated noise still has contrast; the call must simply succeed in range
    TensorF n1({3, 64, 64}), n2({3, 64, 64});
    for (auto& v : n1.vec()) v = static_cast<float>(rng.uniform());
    for (auto& v : n2.vec()) v = static_cast<float>(rng.uniform());
    const auto m = vit.match_reference(n1, n2);
    for (std::int64_t i = 0; i < m.attn.numel(); ++i) {
        CHECK(m.attn[i] >= 0.0f);
        CHECK(m.attn[i] <= 1.0f);
    }

    // a flat image with zeroed positional encodings makes every token equal,
    // which collapses the similarity grid to a constant
    for (auto& v : vit.params.find("vit.pos")->val.vec()) v = 0.0f;
    TensorF flat({3, 64, 64});
    for (auto& v : flat.vec()) v = 0.3f;
    const auto d = vit.match_reference(flat, flat);
    CHECK(d.degenerate);
    CHECK(d.source == AttnSource::ReferenceMatched);
    for (std::int64_t i = 0; i < d.attn.numel(); ++i) CHECK(d.attn[i] == 0.5f);
}

TEST_CASE("attention substitution clamps values and keeps the task") {
    cond::TaskContext ctx;
    ctx.task_id = scene::TaskId::PreGrasp;
    ctx.attention = TensorF({64, 64});
    for (auto& v : ctx.attention.vec()) v = 0.75f;

    attn::AttentionPrediction pred;
    pred.source = AttnSource::ReferenceMatched;
    pred.attn = TensorF({64, 64});
    for (std::int64_t i = 0; i < pred.attn.numel(); ++i)
        pred.attn[i] = -0.2f + 1.7f * static_cast<float>(i) / (pred.attn.numel() - 1);

    const auto out = attn::attention_to_context(pred, ctx);
    CHECK(out.task_id == scene::TaskId::PreGrasp);
    CHECK(out.mode() == 1);
    CHECK(out.depth_scale() == scene::DepthScale::Cm);
    for (std::int64_t i = 0; i < out.attention.numel(); ++i) {
        const float want = std::clamp(pred.attn[i], 0.0f, 1.0f);
        CHECK(out.attention[i] == want);
    }
    // the original context is untouched
    CHECK(ctx.attention[0] == 0.75f);
}

TEST_CASE("transformer gradients match finite differences on a map loss") {
    AttnPredictor<double> vit(26);
    Rng rng(403);
    const auto rgb = uniform_t<double>({1, 3, 64, 64}, rng, 0.0, 1.0);
    Tensor<double> target({1, 1, 64, 64});
    for (auto& v : target.vec()) v = rng.uniform();

    auto build = [&]() {
        return ad::mse_mean(vit.attention_map(rgb, {1}), ad::constant(target));
    };
    std::vector<std::pair<std::string, ad::Value<double>>> leaves;
    for (const char* n :
         {"vit.patch.w", "vit.pos", "vit.l0.q.w", "vit.l0.ln1.g", "vit.l1.k.w",
          "vit.l1.fc1.w", "vit.l2.v.w", "vit.l2.fc2.b", "vit.l3.o.w", "vit.ln_out.g",
          "vit.heads.w", "vit.heads.b"})
        leaves.emplace_back(n, vit.params.find(n));
    testutil::fd_check_sampled(leaves, build, 6);
}

TEST_CASE("predicted attention carries a sampling run end to end") {
    model::ModelConfig mc;
    mc.base_channels = 4;
    mc.k_way = 8;
    mc.t_steps = 4;
    model::DiffusionModel<float> net(mc, 31);
    AttnPredictor<float> vit(32);
    Rng rng(404);
    const auto rgb = uniform_t<float>({1, 3, 64, 64}, rng, 0.0, 1.0);

    TensorF img({3, 64, 64});
    for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = rgb[i];
    const auto pred = vit.predict_attention(img, scene::TaskId::GoalNav);

    cond::TaskContext ctx;
    ctx.task_id = scene::TaskId::GoalNav;
    ctx.attention = TensorF({64, 64});
    const auto filled = attn::attention_to_context(pred, ctx);

    const auto batch = cond::make_batch({filled});
    const auto traj = net.sample(rgb, batch, model::make_schedule(4), 55);
    REQUIRE(traj.waypoints.size() == 8);
    REQUIRE(traj.depths.size() == 8);
    for (size_t k = 0; k < traj.waypoints.size(); ++k) {
        CHECK(traj.waypoints[k].u >= -1.0f);
        CHECK(traj.waypoints[k].u <= 1.0f);
        CHECK(traj.waypoints[k].v >= -1.0f);
        CHECK(traj.waypoints[k].v <= 1.0f);
        CHECK(traj.depths[k] > 0.0f);
    }
}
