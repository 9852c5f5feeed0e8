#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "difftraj/conditioning.hpp"
#include "difftraj/config.hpp"
#include "difftraj/nn/layers.hpp"

namespace difftraj::attn {

using ad::Value;

inline constexpr int kPatch = 8;                         // pixels per patch side
inline constexpr int kGrid = cfg::kImageSize / kPatch;   // 8 patches per side
inline constexpr int kTokens = kGrid * kGrid;            // 64 tokens
inline constexpr int kDim = 64;                          // token width
inline constexpr int kHeads = 4;
inline constexpr int kLayers = 4;

/// Patch-level scene features: raw vectors plus unit-norm copies for cosine
/// matching.
struct PatchFeatureGrid {
    TensorF features;    // (8,8,64)
    TensorF normalized;  // (8,8,64), rows have unit L2 norm
};

enum class AttnSource { Autonomous = 0, ReferenceMatched = 1 };

struct AttentionPrediction {
    TensorF attn;  // (64,64) in [0,1]
    AttnSource source = AttnSource::Autonomous;
    bool degenerate = false;  // reference matching found no contrast
};

/// Small pre-norm transformer over 8x8 image patches with per-task attention
/// heads and feature output for reference matching.
template <class T>
class AttnPredictor {
  public:
    nn::ParamRegistry<T> params;

    explicit AttnPredictor(std::uint64_t seed) {
        Rng rng(derive_seed(seed, {17}));
        patch_ = nn::Linear<T>(params, "vit.patch", 3 * kPatch * kPatch, kDim, rng);
        pos_ = params.create("vit.pos",
                             nn::init::normal<T>({kTokens, kDim}, 0.02, rng));
        for (int l = 0; l < kLayers; ++l) {
            const std::string p = "vit.l" + std::to_string(l);
            auto& ly = layers_[static_cast<size_t>(l)];
            ly.ln1 = nn::LayerNorm<T>(params, p + ".ln1", kDim);
            ly.q = nn::Linear<T>(params, p + ".q", kDim, kDim, rng);
            ly.k = nn::Linear<T>(params, p + ".k", kDim, kDim, rng);
            ly.v = nn::Linear<T>(params, p + ".v", kDim, kDim, rng);
            ly.o = nn::Linear<T>(params, p + ".o", kDim, kDim, rng);
            ly.ln2 = nn::LayerNorm<T>(params, p + ".ln2", kDim);
            ly.fc1 = nn::Linear<T>(params, p + ".fc1", kDim, 4 * kDim, rng);
            ly.fc2 = nn::Linear<T>(params, p + ".fc2", 4 * kDim, kDim, rng);
        }
        final_ln_ = nn::LayerNorm<T>(params, "vit.ln_out", kDim);
        heads_ = nn::Linear<T>(params, "vit.heads", kDim, 3, rng);
    }

    /// Final per-patch token features, (N, 64 tokens, 64 dims).
    Value<T> tokens(const Tensor<T>& rgb) const {
        const int N = check_rgb(rgb);
        auto x = ad::add_rowvec(
            ad::reshape(patch_(ad::constant(patchify(rgb))), {N, kTokens, kDim}), pos_);
        for (const auto& ly : layers_) {
            x = ad::add(x, attention_block(ly, x, N));
            auto h = ad::reshape(ly.ln2(x), {N * kTokens, kDim});
            h = ly.fc2(ad::relu(ly.fc1(h)));
            x = ad::add(x, ad::reshape(h, {N, kTokens, kDim}));
        }
        return final_ln_(x);
    }

    /// Differentiable per-task attention maps, (N,1,64,64) in (0,1). The head
    /// output is upsampled from the patch grid and squashed.
    Value<T> attention_map(const Tensor<T>& rgb, const std::vector<int>& task) const {
        const int N = check_rgb(rgb);
        if (static_cast<int>(task.size()) != N)
            throw std::invalid_argument("attention_map: one task id per image");
        auto tok = tokens(rgb);
        auto logits = heads_(ad::reshape(tok, {N * kTokens, kDim}));           // (N*64,3)
        auto grid = ad::permute(ad::reshape(logits, {N, kTokens, 3}), {0, 2, 1});
        grid = ad::select_channel(ad::reshape(grid, {N, 3, kGrid, kGrid}), task);
        return ad::sigmoid(
            ad::upsample_bilinear(grid, cfg::kImageSize, cfg::kImageSize));
    }

    PatchFeatureGrid extract_patch_features(const TensorF& rgb) const {
        ad::NoGradGuard ng;
        const auto tok = tokens(to_batch(rgb));
        PatchFeatureGrid out;
        out.features = TensorF({kGrid, kGrid, kDim});
        out.normalized = TensorF({kGrid, kGrid, kDim});
        for (int t = 0; t < kTokens; ++t) {
            double norm2 = 0.0;
            for (int d = 0; d < kDim; ++d) {
                const float v = static_cast<float>(tok->val.at3(0, t, d));
                out.features[static_cast<std::int64_t>(t) * kDim + d] = v;
                norm2 += static_cast<double>(v) * v;
            }
            const float inv = static_cast<float>(1.0 / std::max(std::sqrt(norm2), 1e-12));
            for (int d = 0; d < kDim; ++d)
                out.normalized[static_cast<std::int64_t>(t) * kDim + d] =
                    out.features[static_cast<std::int64_t>(t) * kDim + d] * inv;
        }
        return out;
    }

    /// Task-conditioned attention for one image.
    AttentionPrediction predict_attention(const TensorF& rgb, scene::TaskId task) const {
        ad::NoGradGuard ng;
        const auto map = attention_map(to_batch(rgb), {static_cast<int>(task)});
        AttentionPrediction out;
        out.source = AttnSource::Autonomous;
        out.attn = TensorF({cfg::kImageSize, cfg::kImageSize});
        for (std::int64_t i = 0; i < out.attn.numel(); ++i)
            out.attn[i] = static_cast<float>(map->val[i]);
        return out;
    }

    /// Zero-shot attention: each scene patch scores its best cosine match
    /// against the reference patches; scores are min-max normalized and
    /// upsampled. A contrast-free grid degrades to uniform 0.5.
    AttentionPrediction match_reference(const TensorF& ref, const TensorF& scn) const {
        ad::NoGradGuard ng;
        // the pair runs as one batch of two
        Tensor<T> pair({2, 3, cfg::kImageSize, cfg::kImageSize});
        const auto refb = to_batch(ref), scnb = to_batch(scn);
        std::copy_n(refb.data(), refb.numel(), pair.data());
        std::copy_n(scnb.data(), scnb.numel(), pair.data() + refb.numel());
        const auto tok = tokens(pair);

        std::array<std::array<double, kDim>, kTokens> fr, fs;
        for (int t = 0; t < kTokens; ++t) {
            double nr = 0.0, ns = 0.0;
            for (int d = 0; d < kDim; ++d) {
                fr[static_cast<size_t>(t)][static_cast<size_t>(d)] =
                    static_cast<double>(tok->val.at3(0, t, d));
                fs[static_cast<size_t>(t)][static_cast<size_t>(d)] =
                    static_cast<double>(tok->val.at3(1, t, d));
                nr += fr[static_cast<size_t>(t)][static_cast<size_t>(d)] *
                      fr[static_cast<size_t>(t)][static_cast<size_t>(d)];
                ns += fs[static_cast<size_t>(t)][static_cast<size_t>(d)] *
                      fs[static_cast<size_t>(t)][static_cast<size_t>(d)];
            }
            nr = std::max(std::sqrt(nr), 1e-12);
            ns = std::max(std::sqrt(ns), 1e-12);
            for (int d = 0; d < kDim; ++d) {
                fr[static_cast<size_t>(t)][static_cast<size_t>(d)] /= nr;
                fs[static_cast<size_t>(t)][static_cast<size_t>(d)] /= ns;
            }
        }

        std::array<double, kTokens> best{};
        double lo = 1.0, hi = -1.0;
        for (int t = 0; t < kTokens; ++t) {
            double b = -1.0;
            for (int r = 0; r < kTokens; ++r) {
                double dot = 0.0;
                for (int d = 0; d < kDim; ++d)
                    dot += fs[static_cast<size_t>(t)][static_cast<size_t>(d)] *
                           fr[static_cast<size_t>(r)][static_cast<size_t>(d)];
                b = std::max(b, dot);
            }
            best[static_cast<size_t>(t)] = b;
            lo = std::min(lo, b);
            hi = std::max(hi, b);
        }

        AttentionPrediction out;
        out.source = AttnSource::ReferenceMatched;
        out.attn = TensorF({cfg::kImageSize, cfg::kImageSize});
        if (hi - lo < 1e-9) {
            out.degenerate = true;
            for (auto& v : out.attn.vec()) v = 0.5f;
            return out;
        }
        Tensor<T> sim({1, 1, kGrid, kGrid});
        for (int t = 0; t < kTokens; ++t)
            sim[t] = static_cast<T>((best[static_cast<size_t>(t)] - lo) / (hi - lo));
        const auto up = ad::upsample_bilinear(ad::constant(std::move(sim)), cfg::kImageSize,
                                              cfg::kImageSize);
        for (std::int64_t i = 0; i < out.attn.numel(); ++i)
            out.attn[i] = std::clamp(static_cast<float>(up->val[i]), 0.0f, 1.0f);
        return out;
    }

  private:
    struct Layer {
        nn::LayerNorm<T> ln1, ln2;
        nn::Linear<T> q, k, v, o, fc1, fc2;
    };

    nn::Linear<T> patch_;
    Value<T> pos_;
    std::array<Layer, kLayers> layers_;
    nn::LayerNorm<T> final_ln_;
    nn::Linear<T> heads_;

    static int check_rgb(const Tensor<T>& rgb) {
        if (rgb.ndim() != 4 || rgb.dim(1) != 3 || rgb.dim(2) != cfg::kImageSize ||
            rgb.dim(3) != cfg::kImageSize)
            throw std::invalid_argument("expected (N,3,64,64) rgb input");
        return rgb.dim(0);
    }

    static Tensor<T> to_batch(const TensorF& rgb) {
        if (rgb.shape() != std::vector<int>{3, cfg::kImageSize, cfg::kImageSize})
            throw std::invalid_argument("expected a (3,64,64) rgb image");
        Tensor<T> out({1, 3, cfg::kImageSize, cfg::kImageSize});
        for (std::int64_t i = 0; i < rgb.numel(); ++i) out[i] = static_cast<T>(rgb[i]);
        return out;
    }

    /// (N,3,64,64) -> (N*64 tokens, 192) rows of flattened patches.
    static Tensor<T> patchify(const Tensor<T>& rgb) {
        const int N = rgb.dim(0);
        Tensor<T> out({N * kTokens, 3 * kPatch * kPatch});
        for (int n = 0; n < N; ++n)
            for (int gy = 0; gy < kGrid; ++gy)
                for (int gx = 0; gx < kGrid; ++gx) {
                    T* row = out.data() +
                             (static_cast<std::int64_t>(n) * kTokens + gy * kGrid + gx) * 3 *
                                 kPatch * kPatch;
                    int i = 0;
                    for (int c = 0; c < 3; ++c)
                        for (int py = 0; py < kPatch; ++py)
                            for (int px = 0; px < kPatch; ++px, ++i)
                                row[i] = rgb.at4(n, c, gy * kPatch + py, gx * kPatch + px);
                }
        return out;
    }

    Value<T> attention_block(const Layer& ly, const Value<T>& x, int N) const {
        const int dh = kDim / kHeads;
        auto xn = ad::reshape(ly.ln1(x), {N * kTokens, kDim});
        auto split = [&](const Value<T>& m) {
            // (N*L, D) -> (N*H, L, dh)
            auto r = ad::reshape(m, {N, kTokens, kHeads, dh});
            return ad::reshape(ad::permute(r, {0, 2, 1, 3}), {N * kHeads, kTokens, dh});
        };
        auto q = split(ly.q(xn));
        auto k = split(ly.k(xn));
        auto v = split(ly.v(xn));
        auto att = ad::softmax_lastdim(
            ad::scale(ad::bmm(q, k, true), static_cast<T>(1.0 / std::sqrt(double(dh)))));
        auto mix = ad::bmm(att, v);  // (N*H, L, dh)
        auto merged = ad::reshape(
            ad::permute(ad::reshape(mix, {N, kHeads, kTokens, dh}), {0, 2, 1, 3}),
            {N * kTokens, kDim});
        return ad::reshape(ly.o(merged), {N, kTokens, kDim});
    }
};

/// Swaps predicted attention into a task context, clamped to [0,1]; the task
/// (and so mode and depth scale) is untouched.
inline cond::TaskContext attention_to_context(const AttentionPrediction& pred,
                                              const cond::TaskContext& ctx) {
    cond::TaskContext out = ctx;
    out.attention = pred.attn;
    for (auto& v : out.attention.vec()) v = std::clamp(v, 0.0f, 1.0f);
    return out;
}

}  // namespace difftraj::attn
