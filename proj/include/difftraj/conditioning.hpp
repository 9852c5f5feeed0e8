#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

#include "difftraj/config.hpp"
#include "difftraj/nn/layers.hpp"
#include "difftraj/scenegen.hpp"

namespace difftraj::cond {

using ad::Value;

/// The four spatial scales at which full-size features are modulated,
/// coarsest last. Smaller models use the same halving pattern from their own
/// input size.
inline constexpr std::array<int, 4> kScales{64, 32, 16, 8};

inline std::array<int, 4> scales_for(int image_size) {
    if (image_size < 8 || image_size % 8 != 0)
        throw std::invalid_argument("image size must be a positive multiple of 8");
    return {image_size, image_size / 2, image_size / 4, image_size / 8};
}

inline int scale_index(int scale) {
    for (int i = 0; i < 4; ++i)
        if (kScales[static_cast<size_t>(i)] == scale) return i;
    throw std::invalid_argument("unsupported modulation scale " + std::to_string(scale));
}

/// Per-sample conditioning inputs. Mode and depth scale are functions of the
/// task, so storing the task alone keeps the pairing consistent.
struct TaskContext {
    scene::TaskId task_id{scene::TaskId::ExploreNav};
    TensorF attention;  // (64,64) in [0,1]

    int mode() const { return scene::task_mode(task_id); }
    scene::DepthScale depth_scale() const { return scene::depth_scale_for(task_id); }
};

/// Batched index/grid view of a list of contexts, ready for the encoders.
struct ContextBatch {
    std::vector<int> task;   // scale-table rows
    std::vector<int> mode;   // 0 = navigation, 1 = pre-grasping
    std::vector<int> scale;  // 0 = meter, 1 = cm
    TensorF attention;       // (N,1,64,64)
};

inline ContextBatch make_batch(const std::vector<TaskContext>& ctxs) {
    const int n = static_cast<int>(ctxs.size());
    ContextBatch b;
    b.attention = TensorF({n, 1, cfg::kImageSize, cfg::kImageSize});
    for (int i = 0; i < n; ++i) {
        const auto& c = ctxs[static_cast<size_t>(i)];
        if (c.attention.shape() != std::vector<int>{cfg::kImageSize, cfg::kImageSize})
            throw std::invalid_argument("context attention must be 64x64");
        b.task.push_back(static_cast<int>(c.task_id));
        b.mode.push_back(c.mode());
        b.scale.push_back(static_cast<int>(c.depth_scale()));
        std::copy(c.attention.vec().begin(), c.attention.vec().end(),
                  b.attention.data() + static_cast<std::int64_t>(i) * c.attention.numel());
    }
    return b;
}

/// Area-average pooling of a square (N,1,S,S) grid down to scale x scale.
/// Halving repeatedly keeps every output cell the exact mean of its block.
template <class T>
Value<T> downsample_attention(Value<T> a, int scale) {
    if (scale < 1) throw std::invalid_argument("downsample_attention: scale must be positive");
    if (a->val.ndim() != 4 || a->val.shape()[2] != a->val.shape()[3])
        throw std::invalid_argument("downsample_attention expects square NCHW input");
    int cur = a->val.shape()[2];
    while (cur > scale) {
        a = ad::avg_pool2(a);
        cur /= 2;
    }
    if (cur != scale) throw std::invalid_argument("attention grid not divisible down to scale");
    return a;
}

/// Initial task-scale weight table, rows indexed by task, columns by kScales.
/// Navigation rows favor the coarse half, the pre-grasp row the fine half.
template <class T>
Tensor<T> init_scale_weights() {
    Tensor<T> w({3, 4});
    const std::array<T, 4> nav{T(0.5), T(0.5), T(1.0), T(1.0)};
    const std::array<T, 4> grasp{T(1.0), T(1.0), T(0.5), T(0.5)};
    for (int l = 0; l < 4; ++l) {
        w.at2(static_cast<int>(scene::TaskId::ExploreNav), l) = nav[static_cast<size_t>(l)];
        w.at2(static_cast<int>(scene::TaskId::GoalNav), l) = nav[static_cast<size_t>(l)];
        w.at2(static_cast<int>(scene::TaskId::PreGrasp), l) = grasp[static_cast<size_t>(l)];
    }
    return w;
}

/// Owns the context encoder, the per-scale modulation parameters, and the
/// task-scale weight table.
template <class T>
struct Conditioner {
    int image_size = cfg::kImageSize;
    std::array<int, 4> scales = kScales;
    nn::Embedding<T> mode_emb, scale_emb;
    nn::Conv2d<T> enc1, enc2, enc3;
    nn::Linear<T> enc_out;

    struct FilmScale {
        Value<T> gamma_w, gamma_b;  // (C,64), (C)
        Value<T> beta_w, beta_b;    // (C,64), (C)
        Value<T> mask_w, mask_b;    // (1,1,3,3), (1)
        int channels = 0;
    };
    std::array<FilmScale, 4> film;
    Value<T> scale_table;  // (3,4)

    Conditioner() = default;

    int scale_index(int scale) const {
        for (int i = 0; i < 4; ++i)
            if (scales[static_cast<size_t>(i)] == scale) return i;
        throw std::invalid_argument("unsupported modulation scale " + std::to_string(scale));
    }

    /// channels[i] is the feature width at scales[i]. The modulation starts
    /// as the identity: gamma maps to 1, beta to 0, and the mask net to 0.
    Conditioner(nn::ParamRegistry<T>& reg, const std::array<int, 4>& channels, Rng& rng,
                int image_size_ = cfg::kImageSize)
        : image_size(image_size_), scales(scales_for(image_size_)) {
        mode_emb = nn::Embedding<T>(reg, "ctx.mode_emb", 2, cfg::kModeEmbDim, rng);
        scale_emb = nn::Embedding<T>(reg, "ctx.scale_emb", 2, cfg::kScaleEmbDim, rng);
        enc1 = nn::Conv2d<T>(reg, "ctx.enc1", 1, 8, 3, 2, 1, rng);
        enc2 = nn::Conv2d<T>(reg, "ctx.enc2", 8, 16, 3, 2, 1, rng);
        enc3 = nn::Conv2d<T>(reg, "ctx.enc3", 16, 32, 3, 2, 1, rng);
        enc_out = nn::Linear<T>(reg, "ctx.enc_out", 32, cfg::kAttnEncDim, rng);
        for (int i = 0; i < 4; ++i) {
            const std::string p = "film" + std::to_string(scales[static_cast<size_t>(i)]);
            const int c = channels[static_cast<size_t>(i)];
            auto& fs = film[static_cast<size_t>(i)];
            fs.channels = c;
            fs.gamma_w = reg.create(p + ".gamma.w", nn::init::constant<T>({c, cfg::kContextDim}, T(0)));
            fs.gamma_b = reg.create(p + ".gamma.b", nn::init::constant<T>({c}, T(1)));
            fs.beta_w = reg.create(p + ".beta.w", nn::init::constant<T>({c, cfg::kContextDim}, T(0)));
            fs.beta_b = reg.create(p + ".beta.b", nn::init::constant<T>({c}, T(0)));
            fs.mask_w = reg.create(p + ".mask.w", nn::init::constant<T>({1, 1, 3, 3}, T(0)));
            fs.mask_b = reg.create(p + ".mask.b", nn::init::constant<T>({1}, T(0)));
        }
        scale_table = reg.create("scale_table", init_scale_weights<T>());
    }

    /// c = [mode embedding || depth-scale embedding || attention encoding].
    Value<T> encode_context(const Value<T>& attention, const std::vector<int>& mode,
                            const std::vector<int>& scale) const {
        if (attention->val.ndim() != 4 || attention->val.shape()[1] != 1 ||
            attention->val.shape()[2] != image_size || attention->val.shape()[3] != image_size)
            throw std::invalid_argument("encode_context expects single-channel square attention");
        auto em = mode_emb(mode);
        auto es = scale_emb(scale);
        auto h = ad::relu(enc1(attention));
        h = ad::relu(enc2(h));
        h = ad::relu(enc3(h));
        auto ea = enc_out(ad::global_avg_pool(h));
        return ad::concat<T>({em, es, ea}, 1);
    }

    Value<T> encode_context(const ContextBatch& b) const {
        return encode_context(ad::constant(cast_tensor<T>(b.attention)), b.mode, b.scale);
    }

    /// Spatial mask in [0,1] predicted from the downsampled attention grid.
    Value<T> spatial_mask(const Value<T>& a_l, int scale_idx) const {
        const auto& fs = film[static_cast<size_t>(scale_idx)];
        return ad::clamp01(ad::conv2d(a_l, fs.mask_w, fs.mask_b, 1, 1));
    }

    /// f' = gamma(c) * (1 + M(A_l)) . f + beta(c) * M(A_l), gamma/beta
    /// per channel and the mask shared across channels.
    Value<T> film_modulate(const Value<T>& f, const Value<T>& c, const Value<T>& a_l,
                           int scale) const {
        const int si = scale_index(scale);
        const auto& fs = film[static_cast<size_t>(si)];
        if (f->val.ndim() != 4 || f->val.shape()[2] != scale || f->val.shape()[3] != scale)
            throw std::invalid_argument("film_modulate: feature map does not match scale");
        if (f->val.shape()[1] != fs.channels)
            throw std::invalid_argument("film_modulate: channel count mismatch");
        if (a_l->val.ndim() != 4 || a_l->val.shape()[1] != 1 || a_l->val.shape()[2] != scale ||
            a_l->val.shape()[3] != scale)
            throw std::invalid_argument("film_modulate: attention grid does not match scale");
        auto g = ad::linear(c, fs.gamma_w, fs.gamma_b);
        auto b = ad::linear(c, fs.beta_w, fs.beta_b);
        auto m = spatial_mask(a_l, si);
        auto gf = ad::mul_nc(f, g);
        auto out = ad::add(gf, ad::mul_mask(gf, m));
        return ad::add(out, ad::nc_times_mask(b, m));
    }

    /// Multiplies each sample's feature map by its task's weight at a scale.
    Value<T> apply_scale_weights(const Value<T>& f, const std::vector<int>& task,
                                 int scale) const {
        const int si = scale_index(scale);
        if (f->val.shape().empty() ||
            f->val.shape()[0] != static_cast<int>(task.size()))
            throw std::invalid_argument("apply_scale_weights: batch size mismatch");
        auto w = ad::table_lookup(scale_table, task, std::vector<int>(task.size(), si));
        return ad::mul_per_sample(f, w);
    }
};

}  // namespace difftraj::cond
