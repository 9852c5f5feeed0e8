#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "difftraj/conditioning.hpp"
#include "difftraj/config.hpp"
#include "difftraj/nn/layers.hpp"
#include "difftraj/oracle.hpp"

namespace difftraj::model {

using ad::Value;

// ---- diffusion schedule ----------------------------------------------------

/// Linear-beta DDPM schedule. alphas_bar has length T_steps + 1 with the
/// t = 0 convention alphas_bar[0] = 1, so alphas_bar[t] pairs with betas[t-1].
struct NoiseSchedule {
    int T_steps = 0;
    std::vector<double> betas;
    std::vector<double> alphas_bar;
};

inline NoiseSchedule make_schedule(int T_steps) {
    if (T_steps < 1) throw std::invalid_argument("schedule needs at least one step");
    NoiseSchedule s;
    s.T_steps = T_steps;
    s.betas.resize(static_cast<size_t>(T_steps));
    for (int t = 0; t < T_steps; ++t)
        s.betas[static_cast<size_t>(t)] =
            T_steps == 1 ? cfg::kBetaStart
                         : cfg::kBetaStart + (cfg::kBetaEnd - cfg::kBetaStart) * t / (T_steps - 1);
    s.alphas_bar.resize(static_cast<size_t>(T_steps) + 1);
    s.alphas_bar[0] = 1.0;
    for (int t = 1; t <= T_steps; ++t)
        s.alphas_bar[static_cast<size_t>(t)] =
            s.alphas_bar[static_cast<size_t>(t) - 1] * (1.0 - s.betas[static_cast<size_t>(t) - 1]);
    return s;
}

/// x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps, elementwise.
template <class T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
    if (t < 1 || t > s.T_steps) throw std::invalid_argument("q_sample: t out of range");
    if (!x0.same_shape(eps)) throw std::invalid_argument("q_sample: shape mismatch");
    const double ab = s.alphas_bar[static_cast<size_t>(t)];
    const double ca = std::sqrt(ab), cb = std::sqrt(1.0 - ab);
    Tensor<T> out(x0.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = static_cast<T>(ca * static_cast<double>(x0[i]) +
                                cb * static_cast<double>(eps[i]));
    return out;
}

/// One reverse-process step from the predicted noise. The noise term is
/// suppressed at t = 1 so the last step is deterministic.
template <class T>
Tensor<T> ddpm_update(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t,
                      const NoiseSchedule& s, const Tensor<T>& noise) {
    if (t < 1 || t > s.T_steps) throw std::invalid_argument("ddpm_update: t out of range");
    const double beta = s.betas[static_cast<size_t>(t) - 1];
    const double ab_t = s.alphas_bar[static_cast<size_t>(t)];
    const double ab_prev = s.alphas_bar[static_cast<size_t>(t) - 1];
    const double k_eps = beta / std::sqrt(1.0 - ab_t);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
    const double sigma = t > 1 ? std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_t)) : 0.0;
    Tensor<T> out(x_t.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        const double mu = (static_cast<double>(x_t[i]) - k_eps * static_cast<double>(eps_hat[i])) *
                          inv_sqrt_alpha;
        out[i] = static_cast<T>(mu + sigma * static_cast<double>(noise[i]));
    }
    return out;
}

// ---- trajectory rasterization ----------------------------------------------

/// Renders K waypoints into two S x S grids: channel 0 holds unit-height
/// Gaussian splats (sigma 1.5 px) summed and clipped to [0,1]; channel 1
/// holds per-splat values k/(K-1) encoding order, combined by maximum.
/// Coordinates are clipped to [-1,1] before rasterization.
template <class T>
Tensor<T> rasterize_trajectory(const Tensor<T>& x, int image_size) {
    if (x.ndim() != 3 || x.dim(2) != 2)
        throw std::invalid_argument("rasterize_trajectory expects (N,K,2) waypoints");
    const int N = x.dim(0), K = x.dim(1), S = image_size;
    const double sigma = cfg::kRasterSigma;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    Tensor<T> out({N, 2, S, S});
    for (int n = 0; n < N; ++n) {
        for (int k = 0; k < K; ++k) {
            // Centers may fall outside the canvas (noised waypoints often do);
            // draw whatever part of the blob lands inside instead of snapping
            // the center to the border, which would alias distinct positions.
            const double u = static_cast<double>(x.at3(n, k, 0));
            const double v = static_cast<double>(x.at3(n, k, 1));
            const double col = (u + 1.0) / 2.0 * (S - 1);
            const double row = (v + 1.0) / 2.0 * (S - 1);
            const double pad = radius + 1.0;
            if (!(col > -pad && col < S - 1 + pad && row > -pad && row < S - 1 + pad)) continue;
            const T order = K > 1 ? static_cast<T>(k) / static_cast<T>(K - 1) : T(1);
            const int r0 = std::max(0, static_cast<int>(std::floor(row)) - radius);
            const int r1 = std::min(S - 1, static_cast<int>(std::ceil(row)) + radius);
            const int c0 = std::max(0, static_cast<int>(std::floor(col)) - radius);
            const int c1 = std::min(S - 1, static_cast<int>(std::ceil(col)) + radius);
            for (int r = r0; r <= r1; ++r)
                for (int c = c0; c <= c1; ++c) {
                    const double d2 = (r - row) * (r - row) + (c - col) * (c - col);
                    const T g = static_cast<T>(std::exp(-d2 / (2.0 * sigma * sigma)));
                    out.at4(n, 0, r, c) += g;
                    out.at4(n, 1, r, c) = std::max(out.at4(n, 1, r, c), order * g);
                }
        }
        for (int r = 0; r < S; ++r)
            for (int c = 0; c < S; ++c)
                out.at4(n, 0, r, c) = std::min(out.at4(n, 0, r, c), T(1));
    }
    return out;
}

/// Sinusoidal position encoding of integer timesteps, dim kTimeEmbDim.
template <class T>
Tensor<T> timestep_embedding(const std::vector<int>& t) {
    const int N = static_cast<int>(t.size()), D = cfg::kTimeEmbDim, H = D / 2;
    Tensor<T> out({N, D});
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < H; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / (H - 1));
            const double a = t[static_cast<size_t>(n)] * freq;
            out.at2(n, i) = static_cast<T>(std::sin(a));
            out.at2(n, H + i) = static_cast<T>(std::cos(a));
        }
    return out;
}

/// Per-sample coordinate ramp over a (h,w) grid, axis 0 = x, 1 = y, values in
/// [-1,1] (0 when the axis has a single cell). Used as a pooling weight.
template <class T>
Tensor<T> coord_ramp(int n, int h, int w, int axis) {
    Tensor<T> out({n, 1, h, w});
    for (int i = 0; i < n; ++i)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int c = axis == 0 ? x : y, d = axis == 0 ? w : h;
                out.at4(i, 0, y, x) = d > 1 ? T(2) * c / (d - 1) - T(1) : T(0);
            }
    return out;
}

/// Per-sample attention summary (N,4): mean, power-sharpened centroid u and v
/// in [-1,1], and the raw peak value. The sharpening (4th power) makes the
/// centroid track the dominant blob instead of the map's overall mass.
template <class T>
Tensor<T> attention_stats(const Tensor<T>& attn) {
    const int N = attn.dim(0), H = attn.dim(2), W = attn.dim(3);
    Tensor<T> out({N, 4});
    for (int n = 0; n < N; ++n) {
        double mean = 0, mu = 0, mv = 0, mass = 0, peak = 0;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double a = static_cast<double>(attn.at4(n, 0, y, x));
                mean += a;
                peak = std::max(peak, a);
                const double p = a * a * a * a;
                mass += p;
                mu += p * (W > 1 ? 2.0 * x / (W - 1) - 1.0 : 0.0);
                mv += p * (H > 1 ? 2.0 * y / (H - 1) - 1.0 : 0.0);
            }
        out.at2(n, 0) = static_cast<T>(mean / (H * W));
        out.at2(n, 1) = static_cast<T>(mass > 1e-12 ? mu / mass : 0.0);
        out.at2(n, 2) = static_cast<T>(mass > 1e-12 ? mv / mass : 0.0);
        out.at2(n, 3) = static_cast<T>(peak);
    }
    return out;
}

/// Per-sample (N, C*g*g) block-averaged thumbnail of a (N,C,S,S) image,
/// flattened channel-major. Requires S to be divisible by g.
template <class T>
Tensor<T> thumbnail(const Tensor<T>& img, int g) {
    const int N = img.dim(0), C = img.dim(1), S = img.dim(2), B = S / g;
    Tensor<T> out({N, C * g * g});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int gy = 0; gy < g; ++gy)
                for (int gx = 0; gx < g; ++gx) {
                    double acc = 0;
                    for (int y = gy * B; y < (gy + 1) * B; ++y)
                        for (int x = gx * B; x < (gx + 1) * B; ++x)
                            acc += static_cast<double>(img.at4(n, c, y, x));
                    out.at2(n, (c * g + gy) * g + gx) = static_cast<T>(acc / (B * B));
                }
    return out;
}

// ---- model -----------------------------------------------------------------

struct ModelConfig {
    int image_size = cfg::kImageSize;
    int in_channels = cfg::kInChannels;
    int base_channels = cfg::kBaseChannels;
    int k_way = cfg::kKWay;
    int t_steps = cfg::kTSteps;  // schedule length the noise gains assume

    std::array<int, 4> widths() const {
        return {base_channels, 2 * base_channels, 4 * base_channels, 8 * base_channels};
    }
};

template <class T>
struct ModelOutputs {
    Value<T> eps_hat;           // (N,K,2)
    Value<T> trav_hat;          // (N,1,S,S) in (0,1)
    Value<T> attn_hat;          // (N,1,S,S) in (0,1)
    Value<T> decoder_features;  // (N,base,S,S), input to the depth head
    Value<T> depth_hat;         // (N,K), filled by the caller before the loss
};

/// Loss terms as graph nodes; total() is the single scalar to differentiate.
template <class T>
struct LossBreakdown {
    Value<T> l_diff, l_depth, l_trav, l_attn, l_total;

    static_assert(cfg::kLambdaDepth == 0.1 && cfg::kLambdaTrav == 0.5 &&
                      cfg::kLambdaAttn == 0.3,
                  "scaled integer weights below encode the lambda set in tenths");

    /// Weighted sum in tenths with one final division, fixed order so
    /// recomputation is bit-identical. The scaled form keeps the combination
    /// of exactly representable terms exact, which a chain of 0.1/0.5/0.3
    /// multiplies would not.
    static Value<T> combine(const Value<T>& diff, const Value<T>& depth, const Value<T>& trav,
                            const Value<T>& attn) {
        auto r = ad::add(ad::scale(diff, T(10)), depth);
        r = ad::add(r, ad::scale(trav, T(5)));
        r = ad::add(r, ad::scale(attn, T(3)));
        return ad::div_scalar(r, T(10));
    }
    /// Volatile stores force the same per-step rounding as the graph ops, so
    /// the two paths agree bit for bit even under contracted multiply-adds.
    static T combine_values(T diff, T depth, T trav, T attn) {
        volatile T r = T(10) * diff;
        r = r + depth;
        volatile T wt = T(5) * trav;
        r = r + wt;
        volatile T wa = T(3) * attn;
        r = r + wa;
        return static_cast<T>(r / T(10));
    }
};

/// UNet denoiser with FiLM-conditioned encoder, auxiliary traversability and
/// attention heads, a waypoint noise head, and a waypoint depth head.
template <class T>
class DiffusionModel {
  public:
    ModelConfig config;
    nn::ParamRegistry<T> params;
    cond::Conditioner<T> conditioner;
    bool bypass_film = false;  // test hook: skip modulation entirely
    static constexpr int kThumbGrid = 8;
    static constexpr int kSkipInGain = 8;

    explicit DiffusionModel(const ModelConfig& cfg_in, std::uint64_t seed)
        : config(cfg_in), sched_(make_schedule(cfg_in.t_steps)) {
        Rng rng(derive_seed(seed, {11}));
        const auto w = config.widths();
        conditioner = cond::Conditioner<T>(params, w, rng, config.image_size);
        enc_[0] = nn::Conv2d<T>(params, "enc1", config.in_channels, w[0], 3, 1, 1, rng);
        enc_[1] = nn::Conv2d<T>(params, "enc2", w[0], w[1], 3, 1, 1, rng);
        enc_[2] = nn::Conv2d<T>(params, "enc3", w[1], w[2], 3, 1, 1, rng);
        enc_[3] = nn::Conv2d<T>(params, "enc4", w[2], w[3], 3, 1, 1, rng);

        const int zin = 3 * w[3] + 2 * (config.k_way * 2) + 8 + 3 * kThumbGrid * kThumbGrid +
                        cfg::kContextDim + cfg::kTimeEmbDim;
        const int h1 = 8 * config.base_channels, h2 = 4 * config.base_channels;
        eps_fc1_ = nn::Linear<T>(params, "eps_fc1", zin, h1, rng);
        eps_fc2_ = nn::Linear<T>(params, "eps_fc2", h1, h2, rng);
        eps_fc3_ = nn::Linear<T>(params, "eps_fc3", h2, config.k_way * 2, rng);
        // starts silent so the gain features cannot inflate the initial loss
        eps_skip_.w = params.create("eps_skip.w",
                                    nn::init::constant<T>({config.k_way * 2, config.k_way * 2 + 4},
                                                          T(0)));
        eps_skip_.b = params.create("eps_skip.b", nn::init::constant<T>({config.k_way * 2}, T(0)));

        up_[0] = nn::Conv2d<T>(params, "up1", w[3], w[2], 1, 1, 0, rng);
        up_[1] = nn::Conv2d<T>(params, "up2", w[2], w[1], 1, 1, 0, rng);
        up_[2] = nn::Conv2d<T>(params, "up3", w[1], w[0], 1, 1, 0, rng);
        dec_[0] = nn::Conv2d<T>(params, "dec1", w[2], w[2], 3, 1, 1, rng);
        dec_[1] = nn::Conv2d<T>(params, "dec2", w[1], w[1], 3, 1, 1, rng);
        dec_[2] = nn::Conv2d<T>(params, "dec3", w[0], w[0], 3, 1, 1, rng);

        trav_head_ = nn::Conv2d<T>(params, "trav_head", w[0], 1, 3, 1, 1, rng);
        attn_head_ = nn::Conv2d<T>(params, "attn_head", w[0], 1, 3, 1, 1, rng);

        depth_fc1_ = nn::Linear<T>(params, "depth_fc1", w[0], 4 * config.base_channels, rng);
        depth_fc2_ = nn::Linear<T>(params, "depth_fc2", 4 * config.base_channels, 1, rng);
        // start depth predictions near mid-range meters instead of near zero
        depth_fc2_.b->val[0] = static_cast<T>(std::log(std::expm1(4.0)));
    }

    /// Encoder + heads. rgb (N,3,S,S) in [0,1], x_t (N,K,2), per-sample
    /// timestep t in [1,T], ctx supplies task ids, mode/scale ids, attention.
    ModelOutputs<T> forward(const Tensor<T>& rgb, const Tensor<T>& x_t, const std::vector<int>& t,
                            const cond::ContextBatch& ctx) const {
        const int N = rgb.dim(0), S = config.image_size;
        if (rgb.ndim() != 4 || rgb.dim(1) != 3 || rgb.dim(2) != S || rgb.dim(3) != S)
            throw std::invalid_argument("forward: rgb must be (N,3,S,S)");
        if (x_t.ndim() != 3 || x_t.dim(0) != N || x_t.dim(1) != config.k_way || x_t.dim(2) != 2)
            throw std::invalid_argument("forward: x_t must be (N,K,2)");
        if (static_cast<int>(t.size()) != N || static_cast<int>(ctx.task.size()) != N)
            throw std::invalid_argument("forward: batch size mismatch");

        const auto raster = rasterize_trajectory(x_t, S);
        Tensor<T> in({N, config.in_channels, S, S});
        for (int n = 0; n < N; ++n) {
            std::copy_n(&rgb.at4(n, 0, 0, 0), 3 * S * S, &in.at4(n, 0, 0, 0));
            std::copy_n(&raster.at4(n, 0, 0, 0), 2 * S * S, &in.at4(n, 3, 0, 0));
        }

        auto attention = ad::constant(cast_tensor<T>(ctx.attention));
        auto c = conditioner.encode_context(attention, ctx.mode, ctx.scale);
        ensure_finite(c, "context encoder");

        auto h = ad::constant(std::move(in));
        std::array<Value<T>, 3> skips;
        for (int i = 0; i < 4; ++i) {
            const int scale = conditioner.scales[static_cast<size_t>(i)];
            h = ad::relu(enc_[static_cast<size_t>(i)](h));
            if (!bypass_film) {
                auto a_l = cond::downsample_attention(attention, scale);
                h = conditioner.film_modulate(h, c, a_l, scale);
            }
            h = conditioner.apply_scale_weights(h, ctx.task, scale);
            ensure_finite(h, enc_names_[static_cast<size_t>(i)]);
            if (i < 3) {
                skips[static_cast<size_t>(i)] = h;
                h = ad::avg_pool2(h);
            }
        }

        // Global pooling is translation invariant, which starves the noise
        // head of every position it needs: the noised waypoints, the goal
        // (attention peak), and the obstacle layout. The readout therefore
        // pairs the pooled bottleneck (mean plus first spatial moments) with
        // exact input summaries: the flat x_t copy, the attention statistics,
        // and a coarse scene thumbnail. Measured without them, the diffusion
        // loss stays flat for thousands of steps and samples collapse onto
        // the dataset-mean trajectory.
        const int hb = h->val.dim(2), wb = h->val.dim(3);
        auto pool_m = ad::global_avg_pool(h);
        auto pool_u = ad::global_avg_pool(ad::mul_mask(h, ad::constant(coord_ramp<T>(N, hb, wb, 0))));
        auto pool_v = ad::global_avg_pool(ad::mul_mask(h, ad::constant(coord_ramp<T>(N, hb, wb, 1))));
        Tensor<T> xt_flat({N, config.k_way * 2});
        std::copy_n(x_t.data(), x_t.numel(), xt_flat.data());

        // The regression target is x_t/sqrt(1-abar) - x0 sqrt(abar)/sqrt(1-abar),
        // whose gains reach 100 at t=1; a small head takes very long to grow
        // them out of the sinusoidal embedding, and until it does samples track
        // the noise instead of the conditioning. Supplying the gain pair, the
        // pre-scaled x_t, and the gain-times-centroid product makes the noised
        // goal endpoint linear in the inputs, and the direct skip below keeps
        // that solution out of the shared trunk's way. The skip input is
        // further amplified so the exact solution needs weights of 1/gain;
        // Adam moves a weight at most lr per step, so the unamplified form
        // (unit weights) costs thousands of steps it never gets. Gains are
        // capped where the noise share falls below a pixel, and the centroid
        // product is gated on the object threshold so empty maps contribute
        // no pull.
        auto astats = attention_stats(attention->val);
        Tensor<T> xt_scaled({N, config.k_way * 2});
        Tensor<T> gains({N, 4});
        for (int n = 0; n < N; ++n) {
            const int tn = t[static_cast<size_t>(n)];
            if (tn < 1 || tn > config.t_steps)
                throw std::invalid_argument("forward: timestep outside the schedule");
            const double ab = sched_.alphas_bar[static_cast<size_t>(tn)];
            const double sb = std::sqrt(1.0 - ab);
            const T g_x0 = static_cast<T>(std::min(std::sqrt(ab) / sb, 25.0));
            const T g_xt = static_cast<T>(std::min(1.0 / sb, 25.0));
            for (int j = 0; j < config.k_way * 2; ++j)
                xt_scaled.at2(n, j) = g_xt * xt_flat.at2(n, j);
            const T gp = astats.at2(n, 3) >= static_cast<T>(cfg::kTauObj) ? g_x0 : T(0);
            gains.at2(n, 0) = g_x0;
            gains.at2(n, 1) = g_xt;
            gains.at2(n, 2) = gp * astats.at2(n, 1);
            gains.at2(n, 3) = gp * astats.at2(n, 2);
        }
        auto v_xts = ad::constant(std::move(xt_scaled));
        auto v_gains = ad::constant(std::move(gains));
        auto z = ad::concat<T>({pool_m, pool_u, pool_v, ad::constant(std::move(xt_flat)), v_xts,
                                v_gains, ad::constant(std::move(astats)),
                                ad::constant(thumbnail(rgb, kThumbGrid)), c,
                                ad::constant(timestep_embedding<T>(t))},
                               1);
        auto e = ad::relu(eps_fc1_(z));
        e = ad::relu(eps_fc2_(e));
        auto eps = ad::add(eps_fc3_(e), eps_skip_(ad::scale(ad::concat<T>({v_xts, v_gains}, 1),
                                                            T(kSkipInGain))));
        eps = ad::reshape(eps, {N, config.k_way, 2});
        ensure_finite(eps, "noise head");

        auto d = h;
        for (int i = 0; i < 3; ++i) {
            d = up_[static_cast<size_t>(i)](ad::upsample_nearest2(d));
            d = ad::add(d, skips[static_cast<size_t>(2 - i)]);
            d = ad::relu(dec_[static_cast<size_t>(i)](d));
            ensure_finite(d, dec_names_[static_cast<size_t>(i)]);
        }

        ModelOutputs<T> out;
        out.eps_hat = eps;
        out.decoder_features = d;
        out.trav_hat = ad::sigmoid(trav_head_(d));
        out.attn_hat = ad::sigmoid(attn_head_(d));
        ensure_finite(out.trav_hat, "traversability head");
        ensure_finite(out.attn_hat, "attention head");
        return out;
    }

    /// Bilinearly samples decoder features at the waypoints and maps each
    /// sampled vector to a positive scalar. The unit (meter vs cm) is carried
    /// by the conditioning, not converted here.
    Value<T> predict_waypoint_depths(const Value<T>& decoder_features, const Tensor<T>& waypoints,
                                     scene::DepthScale) const {
        if (waypoints.ndim() != 3 || waypoints.dim(2) != 2)
            throw std::invalid_argument("predict_waypoint_depths expects (N,K,2) waypoints");
        const int N = waypoints.dim(0), K = waypoints.dim(1), S = config.image_size;
        Tensor<T> pts({N, K, 2});
        for (int n = 0; n < N; ++n)
            for (int k = 0; k < K; ++k) {
                const T u = std::clamp(waypoints.at3(n, k, 0), T(-1), T(1));
                const T v = std::clamp(waypoints.at3(n, k, 1), T(-1), T(1));
                pts.at3(n, k, 0) = (v + T(1)) / T(2) * static_cast<T>(S - 1);  // row
                pts.at3(n, k, 1) = (u + T(1)) / T(2) * static_cast<T>(S - 1);  // col
            }
        auto f = ad::bilinear_sample(decoder_features, pts);            // (N,K,C)
        auto flat = ad::reshape(f, {N * K, config.base_channels});
        auto hdn = ad::relu(depth_fc1_(flat));
        auto depth = ad::softplus(depth_fc2_(hdn));
        return ad::reshape(depth, {N, K});
    }

    /// One reverse step: predict the noise at (x_t, t) and apply the update.
    Tensor<T> ddpm_step(const Tensor<T>& x_t, int t, const Tensor<T>& rgb,
                        const cond::ContextBatch& ctx, const NoiseSchedule& s,
                        const Tensor<T>& noise) const {
        ad::NoGradGuard ng;
        if (s.T_steps != config.t_steps)
            throw std::invalid_argument("ddpm_step: schedule length differs from the model's");
        const std::vector<int> ts(static_cast<size_t>(x_t.dim(0)), t);
        const auto out = forward(rgb, x_t, ts, ctx);
        return ddpm_update(x_t, out.eps_hat->val, t, s, noise);
    }

    /// Full reverse process from pure noise for a single scene; deterministic
    /// given the seed. Waypoint depths are read off a final pass over the
    /// denoised trajectory.
    oracle::Trajectory sample(const Tensor<T>& rgb, const cond::ContextBatch& ctx,
                              const NoiseSchedule& s, std::uint64_t seed) const {
        ad::NoGradGuard ng;
        if (rgb.dim(0) != 1 || ctx.task.size() != 1)
            throw std::invalid_argument("sample runs one scene at a time");
        Rng rng(derive_seed(seed, {33}));
        const int K = config.k_way;
        Tensor<T> x({1, K, 2});
        for (auto& v : x.vec()) v = static_cast<T>(rng.normal());
        Tensor<T> noise({1, K, 2});
        for (int t = s.T_steps; t >= 1; --t) {
            for (auto& v : noise.vec()) v = t > 1 ? static_cast<T>(rng.normal()) : T(0);
            x = ddpm_step(x, t, rgb, ctx, s, noise);
        }
        for (auto& v : x.vec()) v = std::clamp(v, T(-1), T(1));

        const auto out = forward(rgb, x, {1}, ctx);
        const auto depths =
            predict_waypoint_depths(out.decoder_features, x,
                                    static_cast<scene::DepthScale>(ctx.scale[0]));

        oracle::Trajectory traj;
        float peak = 0.0f;
        for (const float a : ctx.attention.vec()) peak = std::max(peak, a);
        traj.goal_mode = peak >= static_cast<float>(cfg::kTauObj)
                             ? oracle::GoalMode::ObjectDirected
                             : oracle::GoalMode::TraversabilityDirected;
        for (int k = 0; k < K; ++k) {
            traj.waypoints.push_back({static_cast<float>(x.at3(0, k, 0)),
                                      static_cast<float>(x.at3(0, k, 1))});
            traj.depths.push_back(static_cast<float>(depths->val.at2(0, k)));
        }
        return traj;
    }

  private:
    NoiseSchedule sched_;
    std::array<nn::Conv2d<T>, 4> enc_;
    std::array<nn::Conv2d<T>, 3> up_, dec_;
    nn::Conv2d<T> trav_head_, attn_head_;
    nn::Linear<T> eps_fc1_, eps_fc2_, eps_fc3_, eps_skip_;
    nn::Linear<T> depth_fc1_, depth_fc2_;
    static constexpr std::array<const char*, 4> enc_names_{"encoder scale 1", "encoder scale 2",
                                                           "encoder scale 3", "encoder scale 4"};
    static constexpr std::array<const char*, 3> dec_names_{"decoder scale 3", "decoder scale 2",
                                                           "decoder scale 1"};

    static void ensure_finite(const Value<T>& v, const char* where) {
        if (!v->val.all_finite())
            throw std::runtime_error(std::string("non-finite activations after ") + where);
    }
};

/// Assembles the four loss terms from a forward pass. outputs.depth_hat must
/// be filled (predict_waypoint_depths at the clean waypoints) beforehand.
template <class T>
LossBreakdown<T> compute_losses(const ModelOutputs<T>& out, const Tensor<T>& eps_true,
                                const Tensor<T>& d_gt, const Tensor<T>& trav_gt,
                                const Tensor<T>& attn_gt) {
    if (!out.depth_hat)
        throw std::invalid_argument("compute_losses: depth predictions missing");
    LossBreakdown<T> lb;
    lb.l_diff = ad::mse_mean(out.eps_hat, ad::constant(eps_true));
    lb.l_depth = ad::l1_mean(out.depth_hat, ad::constant(d_gt));
    lb.l_trav = ad::bce_mean(out.trav_hat, ad::constant(trav_gt));
    lb.l_attn = ad::mse_mean(out.attn_hat, ad::constant(attn_gt));
    lb.l_total = LossBreakdown<T>::combine(lb.l_diff, lb.l_depth, lb.l_trav, lb.l_attn);
    return lb;
}

}  // namespace difftraj::model
