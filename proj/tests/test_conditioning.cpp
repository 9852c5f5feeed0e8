#include <cmath>

#include "difftraj/conditioning.hpp"
#include "doctest.h"
#include "testutil.hpp"

using namespace difftraj;
using ad::Value;
using cond::Conditioner;
using scene::TaskId;
using testutil::leaf_randn;
using testutil::max_abs_grad;
using testutil::randn_t;

namespace {

template <class T>
Value<T> const_grid(int n, int c, int hw, T v) {
    return ad::constant(Tensor<T>({n, c, hw, hw}, v));
}

template <class T>
void perturb_params(nn::ParamRegistry<T>& reg, Rng& rng, double scale) {
    for (const auto& e : reg.entries())
        for (auto& v : e.value->val.vec()) v += static_cast<T>(rng.normal() * scale);
}

}  // namespace

TEST_CASE("task context derives mode and depth scale from the task") {
    cond::TaskContext nav{TaskId::ExploreNav, TensorF({64, 64})};
    cond::TaskContext goal{TaskId::GoalNav, TensorF({64, 64})};
    cond::TaskContext grasp{TaskId::PreGrasp, TensorF({64, 64})};
    CHECK(nav.mode() == 0);
    CHECK(goal.mode() == 0);
    CHECK(grasp.mode() == 1);
    CHECK(nav.depth_scale() == scene::DepthScale::Meter);
    CHECK(goal.depth_scale() == scene::DepthScale::Meter);
    CHECK(grasp.depth_scale() == scene::DepthScale::Cm);
}

TEST_CASE("context vector is a 64-d concatenation with disjoint segments") {
    Rng rng(2001);
    nn::ParamRegistry<float> reg;
    Conditioner<float> c(reg, {4, 4, 4, 4}, rng);

    auto a = ad::constant(TensorF({1, 1, 64, 64}, 0.3f));
    auto c_m0 = c.encode_context(a, {0}, {0});
    auto c_m1 = c.encode_context(a, {1}, {0});
    REQUIRE(c_m0->val.shape() == std::vector<int>{1, 64});
    CHECK(c_m0->val.all_finite());

    // flipping the mode only moves the first 16 components
    for (int i = 0; i < 64; ++i) {
        if (i < 16)
            CHECK(c_m0->val[i] != c_m1->val[i]);
        else
            CHECK(c_m0->val[i] == c_m1->val[i]);
    }

    // flipping the depth scale only moves components 16..31
    auto c_s1 = c.encode_context(a, {0}, {1});
    for (int i = 0; i < 64; ++i) {
        if (i >= 16 && i < 32)
            CHECK(c_m0->val[i] != c_s1->val[i]);
        else
            CHECK(c_m0->val[i] == c_s1->val[i]);
    }

    // changing the attention grid only moves the last 32 components
    auto a1 = ad::constant(TensorF({1, 1, 64, 64}, 1.0f));
    auto c_a1 = c.encode_context(a1, {0}, {0});
    bool any_tail_diff = false;
    for (int i = 0; i < 64; ++i) {
        if (i < 32)
            CHECK(c_m0->val[i] == c_a1->val[i]);
        else
            any_tail_diff |= c_m0->val[i] != c_a1->val[i];
    }
    CHECK(any_tail_diff);
}

TEST_CASE("embedding tables are binary with exact row lookup") {
    Rng rng(2002);
    nn::ParamRegistry<float> reg;
    Conditioner<float> c(reg, {4, 4, 4, 4}, rng);
    REQUIRE(c.mode_emb.table->val.shape() == std::vector<int>{2, 16});
    REQUIRE(c.scale_emb.table->val.shape() == std::vector<int>{2, 16});
    auto rows = c.mode_emb(std::vector<int>{1, 0, 1});
    for (int j = 0; j < 16; ++j) {
        CHECK(rows->val.at2(0, j) == c.mode_emb.table->val.at2(1, j));
        CHECK(rows->val.at2(1, j) == c.mode_emb.table->val.at2(0, j));
        CHECK(rows->val.at2(2, j) == c.mode_emb.table->val.at2(1, j));
    }
}

TEST_CASE("modulation is the exact identity at initialization") {
    Rng rng(2003);
    nn::ParamRegistry<float> reg;
    const std::array<int, 4> ch{5, 6, 7, 8};
    Conditioner<float> c(reg, ch, rng);

    Tensor<float> agrid({2, 1, 64, 64});
    for (auto& v : agrid.vec()) v = static_cast<float>(rng.uniform());
    auto a = ad::constant(agrid);
    auto ctx = c.encode_context(a, {0, 1}, {0, 1});

    for (int si = 0; si < 4; ++si) {
        const int s = cond::kScales[static_cast<size_t>(si)];
        auto f = ad::constant(randn_t<float>({2, ch[static_cast<size_t>(si)], s, s}, rng));
        auto a_l = cond::downsample_attention(a, s);
        auto out = c.film_modulate(f, ctx, a_l, s);
        REQUIRE(out->val.same_shape(f->val));
        for (std::int64_t i = 0; i < f->val.numel(); ++i) CHECK(out->val[i] == f->val[i]);
    }
}

TEST_CASE("constant modulation parameters give 4f + 3") {
    Rng rng(2004);
    nn::ParamRegistry<float> reg;
    Conditioner<float> c(reg, {3, 3, 3, 3}, rng);

    // gamma == 2, beta == 3, mask == 1 everywhere
    auto& fs = c.film[2];  // scale 16
    for (auto& v : fs.gamma_b->val.vec()) v = 2.0f;
    for (auto& v : fs.beta_b->val.vec()) v = 3.0f;
    fs.mask_b->val[0] = 1.0f;

    auto a = ad::constant(TensorF({1, 1, 64, 64}, 0.5f));
    auto ctx = c.encode_context(a, {1}, {1});
    auto f = ad::constant(randn_t<float>({1, 3, 16, 16}, rng));
    auto out = c.film_modulate(f, ctx, cond::downsample_attention(a, 16), 16);
    for (std::int64_t i = 0; i < f->val.numel(); ++i)
        CHECK(out->val[i] == doctest::Approx(4.0f * f->val[i] + 3.0f).epsilon(1e-6));
}

TEST_CASE("attention downsampling is area averaging") {
    // full resolution is returned untouched
    Tensor<float> g({1, 1, 64, 64});
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] = static_cast<float>(i % 7) / 7.0f;
    auto a = ad::constant(g);
    auto a64 = cond::downsample_attention(a, 64);
    CHECK(a64.get() == a.get());

    // constant grids stay constant at every scale
    auto c7 = ad::constant(TensorF({1, 1, 64, 64}, 0.7f));
    for (int s : {64, 32, 16, 8}) {
        auto d = cond::downsample_attention(c7, s);
        REQUIRE(d->val.shape() == std::vector<int>{1, 1, s, s});
        for (const float v : d->val.vec()) CHECK(v == doctest::Approx(0.7f).epsilon(1e-6));
    }

    // a single lit pixel spreads as the exact block mean
    Tensor<float> one({1, 1, 64, 64});
    one.at4(0, 0, 0, 0) = 1.0f;
    auto ao = ad::constant(one);
    CHECK(cond::downsample_attention(ao, 32)->val.at4(0, 0, 0, 0) == 0.25f);
    CHECK(cond::downsample_attention(ao, 16)->val.at4(0, 0, 0, 0) == 0.0625f);
    CHECK(cond::downsample_attention(ao, 8)->val.at4(0, 0, 0, 0) == 0.015625f);
    CHECK(cond::downsample_attention(ao, 32)->val.at4(0, 0, 1, 1) == 0.0f);

    // pooled values stay inside [0,1]
    Rng rng(2005);
    Tensor<float> r({1, 1, 64, 64});
    for (auto& v : r.vec()) v = static_cast<float>(rng.uniform());
    auto dr = cond::downsample_attention(ad::constant(r), 8);
    for (const float v : dr->val.vec()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("initial task-scale weights favor the right halves") {
    const auto w = cond::init_scale_weights<float>();
    REQUIRE(w.shape() == std::vector<int>{3, 4});
    const int nav0 = static_cast<int>(TaskId::ExploreNav);
    const int nav1 = static_cast<int>(TaskId::GoalNav);
    const int gr = static_cast<int>(TaskId::PreGrasp);
    // columns follow kScales = (64, 32, 16, 8)
    CHECK(w.at2(gr, 0) == 1.0f);
    CHECK(w.at2(gr, 1) == 1.0f);
    CHECK(w.at2(gr, 2) == 0.5f);
    CHECK(w.at2(gr, 3) == 0.5f);
    for (int row : {nav0, nav1}) {
        CHECK(w.at2(row, 0) == 0.5f);
        CHECK(w.at2(row, 1) == 0.5f);
        CHECK(w.at2(row, 2) == 1.0f);
        CHECK(w.at2(row, 3) == 1.0f);
    }
}

TEST_CASE("scale weighting multiplies whole feature maps per sample") {
    Rng rng(2006);
    nn::ParamRegistry<float> reg;
    Conditioner<float> c(reg, {2, 2, 2, 2}, rng);

    // weight 1.0: ExploreNav at scale 8 is untouched
    auto f = const_grid<float>(1, 2, 8, 2.0f);
    auto out = c.apply_scale_weights(f, {static_cast<int>(TaskId::ExploreNav)}, 8);
    for (const float v : out->val.vec()) CHECK(v == 2.0f);

    // weight 0.5: PreGrasp at scale 8 halves the features
    out = c.apply_scale_weights(f, {static_cast<int>(TaskId::PreGrasp)}, 8);
    for (const float v : out->val.vec()) CHECK(v == 1.0f);

    // mixed batch picks each sample's own row
    auto f2 = const_grid<float>(2, 2, 64, 2.0f);
    out = c.apply_scale_weights(
        f2, {static_cast<int>(TaskId::PreGrasp), static_cast<int>(TaskId::GoalNav)}, 64);
    CHECK(out->val.at4(0, 0, 0, 0) == 2.0f);
    CHECK(out->val.at4(1, 0, 0, 0) == 1.0f);
}

TEST_CASE("scale-table gradients match finite differences") {
    Rng rng(2007);
    nn::ParamRegistry<double> reg;
    Conditioner<double> c(reg, {2, 2, 2, 2}, rng);
    auto f = ad::constant(randn_t<double>({3, 2, 8, 8}, rng));
    const std::vector<int> task{0, 2, 1};
    testutil::fd_check({c.scale_table}, [&] {
        auto dir = Tensor<double>({3, 2, 8, 8});
        for (std::int64_t i = 0; i < dir.numel(); ++i)
            dir[i] = std::sin(0.3 + 1.7 * static_cast<double>(i));
        return ad::mean_all(ad::mul(c.apply_scale_weights(f, task, 8), ad::constant(dir)));
    });
}

TEST_CASE("modulation parameter gradients match finite differences") {
    Rng rng(2008);
    nn::ParamRegistry<double> reg;
    Conditioner<double> c(reg, {3, 3, 3, 3}, rng);
    perturb_params(reg, rng, 0.05);

    Tensor<double> agrid({2, 1, 64, 64});
    for (auto& v : agrid.vec()) v = rng.uniform();
    auto a = ad::constant(agrid);
    auto f = ad::constant(randn_t<double>({2, 3, 8, 8}, rng));

    auto& fs = c.film[3];  // scale 8
    const std::vector<Value<double>> leaves{fs.gamma_w, fs.gamma_b, fs.beta_w,
                                            fs.beta_b,  fs.mask_w,  fs.mask_b,
                                            c.mode_emb.table, c.scale_emb.table};
    testutil::fd_check(
        leaves,
        [&] {
            auto ctx = c.encode_context(a, {0, 1}, {0, 1});
            auto a8 = cond::downsample_attention(a, 8);
            auto out = c.film_modulate(f, ctx, a8, 8);
            auto dir = Tensor<double>({2, 3, 8, 8});
            for (std::int64_t i = 0; i < dir.numel(); ++i)
                dir[i] = std::cos(0.2 + 2.3 * static_cast<double>(i));
            return ad::mean_all(ad::mul(out, ad::constant(dir)));
        },
        1e-5, 1e-5);
}

TEST_CASE("every conditioning parameter receives gradient on a random batch") {
    Rng rng(2009);
    nn::ParamRegistry<float> reg;
    const std::array<int, 4> ch{4, 5, 6, 7};
    Conditioner<float> c(reg, ch, rng);
    perturb_params(reg, rng, 0.05);
    // keep mask pre-activations inside the clamp so its gradient path is live
    for (auto& fs : c.film) fs.mask_b->val[0] = 0.25f;

    Tensor<float> agrid({3, 1, 64, 64});
    for (auto& v : agrid.vec()) v = static_cast<float>(rng.uniform());
    auto a = ad::constant(agrid);
    const std::vector<int> task{0, 1, 2};
    const std::vector<int> mode{0, 0, 1};
    const std::vector<int> dscale{0, 0, 1};

    auto ctx = c.encode_context(a, mode, dscale);
    Value<float> loss;
    for (int si = 0; si < 4; ++si) {
        const int s = cond::kScales[static_cast<size_t>(si)];
        auto f = ad::constant(randn_t<float>({3, ch[static_cast<size_t>(si)], s, s}, rng));
        auto a_l = cond::downsample_attention(a, s);
        auto out = c.apply_scale_weights(c.film_modulate(f, ctx, a_l, s), task, s);
        auto dir = Tensor<float>(out->val.shape());
        for (std::int64_t i = 0; i < dir.numel(); ++i)
            dir[i] = std::sin(1.1 + 0.9 * static_cast<float>(i));
        auto term = ad::mean_all(ad::mul(out, ad::constant(dir)));
        loss = loss ? ad::add(loss, term) : term;
    }
    ad::backward(loss);
    for (const auto& e : reg.entries()) {
        INFO("parameter ", e.name);
        CHECK(max_abs_grad(e.value) > 0.0);
    }
}

TEST_CASE("context batches pack tasks, modes, scales and attention") {
    TensorF a0({64, 64}, 0.25f);
    TensorF a1({64, 64}, 0.75f);
    const auto b = cond::make_batch(
        {{TaskId::GoalNav, a0}, {TaskId::PreGrasp, a1}});
    CHECK(b.task == std::vector<int>{1, 2});
    CHECK(b.mode == std::vector<int>{0, 1});
    CHECK(b.scale == std::vector<int>{0, 1});
    REQUIRE(b.attention.shape() == std::vector<int>{2, 1, 64, 64});
    CHECK(b.attention.at4(0, 0, 10, 10) == 0.25f);
    CHECK(b.attention.at4(1, 0, 10, 10) == 0.75f);

    CHECK_THROWS_AS(cond::make_batch({{TaskId::GoalNav, TensorF({32, 32})}}),
                    std::invalid_argument);
}

TEST_CASE("shape violations are rejected") {
    Rng rng(2010);
    nn::ParamRegistry<float> reg;
    Conditioner<float> c(reg, {2, 2, 2, 2}, rng);
    auto a = ad::constant(TensorF({1, 1, 64, 64}, 0.5f));
    auto ctx = c.encode_context(a, {0}, {0});
    auto a16 = cond::downsample_attention(a, 16);

    CHECK_THROWS_AS(cond::scale_index(48), std::invalid_argument);
    CHECK_THROWS_AS(cond::downsample_attention(a, 48), std::invalid_argument);
    // feature spatial size vs scale
    CHECK_THROWS_AS(c.film_modulate(const_grid<float>(1, 2, 8, 0.f), ctx, a16, 16),
                    std::invalid_argument);
    // channel width vs the scale's parameters
    CHECK_THROWS_AS(c.film_modulate(const_grid<float>(1, 3, 16, 0.f), ctx, a16, 16),
                    std::invalid_argument);
    // attention grid at the wrong scale
    CHECK_THROWS_AS(
        c.film_modulate(const_grid<float>(1, 2, 16, 0.f), ctx, cond::downsample_attention(a, 8),
                        16),
        std::invalid_argument);
    // batch size vs task list
    CHECK_THROWS_AS(c.apply_scale_weights(const_grid<float>(2, 2, 8, 0.f), {0}, 8),
                    std::invalid_argument);
    // attention must be (N,1,64,64)
    CHECK_THROWS_AS(c.encode_context(ad::constant(TensorF({1, 1, 32, 32}, 0.f)), {0}, {0}),
                    std::invalid_argument);
}
