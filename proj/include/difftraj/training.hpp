#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "difftraj/attnpredict.hpp"
#include "difftraj/dataset.hpp"
#include "difftraj/io.hpp"
#include "difftraj/model.hpp"
#include "json.hpp"

namespace difftraj::train {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr std::uint32_t kCkptVersion = 1;
inline constexpr char kCkptMagic[9] = "DTRJCKPT";

struct VersionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    int epochs = cfg::kEpochs;
    int batch_size = cfg::kBatchSize;
    double lr = cfg::kLearningRate;
    double grad_clip = cfg::kGradClipNorm;
    std::uint64_t seed = 0;
    int t_steps = cfg::kTSteps;
    double vit_weight = cfg::kLambdaAttn;  // joint supervision of the attention predictor
    model::ModelConfig model;

    void validate() const {
        if (epochs < 0 || batch_size < 1 || lr <= 0 || grad_clip <= 0 || t_steps < 1 ||
            vit_weight < 0 || model.base_channels < 1 || model.k_way < 2)
            throw std::invalid_argument("TrainConfig: hyperparameters out of range");
    }
};

struct EpochLosses {
    double diff = 0, depth = 0, trav = 0, attn = 0, total = 0;
};

struct TrainResult {
    std::vector<EpochLosses> train_hist, val_hist;
    std::string checkpoint_path;
};

/// The trained state: both parameter sets plus optimizer moments.
struct Checkpoint {
    TrainConfig cfg;
    int epoch = 0;
    model::DiffusionModel<float> net;
    attn::AttnPredictor<float> vit;
    std::vector<TensorF> adam_m, adam_v;  // net entries then vit entries
    std::int64_t adam_t = 0;

    explicit Checkpoint(const TrainConfig& c)
        : cfg(aligned(c)), net(cfg.model, cfg.seed), vit(derive_seed(cfg.seed, {2})) {}

  private:
    // the model's schedule length always follows the training schedule
    static TrainConfig aligned(TrainConfig c) {
        c.model.t_steps = c.t_steps;
        return c;
    }
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 14695981039346656037ull;
    for (const unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

template <class F>
void each_entry(Checkpoint& ck, F&& f) {
    for (auto& e : ck.net.params.entries()) f(e);
    for (auto& e : ck.vit.params.entries()) f(e);
}

inline json config_json(const TrainConfig& c) {
    return json{{"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"lr", c.lr},
                {"grad_clip", c.grad_clip},
                {"seed", c.seed},
                {"t_steps", c.t_steps},
                {"vit_weight", c.vit_weight},
                {"model",
                 {{"image_size", c.model.image_size},
                  {"in_channels", c.model.in_channels},
                  {"base_channels", c.model.base_channels},
                  {"k_way", c.model.k_way},
                  {"t_steps", c.model.t_steps}}}};
}

inline TrainConfig config_from_json(const json& j) {
    TrainConfig c;
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lr = j.at("lr").get<double>();
    c.grad_clip = j.at("grad_clip").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.t_steps = j.at("t_steps").get<int>();
    c.vit_weight = j.at("vit_weight").get<double>();
    c.model.image_size = j.at("model").at("image_size").get<int>();
    c.model.in_channels = j.at("model").at("in_channels").get<int>();
    c.model.base_channels = j.at("model").at("base_channels").get<int>();
    c.model.k_way = j.at("model").at("k_way").get<int>();
    c.model.t_steps = j.at("model").at("t_steps").get<int>();
    return c;
}

inline void append_raw(std::string& bytes, const TensorF& t) {
    const size_t off = bytes.size();
    bytes.resize(off + static_cast<size_t>(t.numel()) * 4);
    std::memcpy(bytes.data() + off, t.data(), static_cast<size_t>(t.numel()) * 4);
}

inline void take_raw(const std::string& bytes, size_t& pos, TensorF& t) {
    const size_t n = static_cast<size_t>(t.numel()) * 4;
    if (pos + n > bytes.size()) throw IntegrityError("checkpoint truncated mid-tensor");
    std::memcpy(t.data(), bytes.data() + pos, n);
    pos += n;
}

}  // namespace detail

inline void save_checkpoint(Checkpoint& ck, const std::string& path) {
    if (ck.adam_m.empty()) {  // fresh optimizer state serializes as zeros
        detail::each_entry(ck, [&](const auto& e) {
            ck.adam_m.push_back(TensorF(e.value->val.shape()));
            ck.adam_v.push_back(TensorF(e.value->val.shape()));
        });
    }
    json header{{"version", kCkptVersion},
                {"epoch", ck.epoch},
                {"config", detail::config_json(ck.cfg)},
                {"adam_t", ck.adam_t},
                {"params", json::array()}};
    detail::each_entry(ck, [&](const auto& e) {
        header["params"].push_back(json{{"name", e.name}, {"shape", e.value->val.shape()}});
    });

    std::string bytes(kCkptMagic, 8);
    const std::uint32_t ver = kCkptVersion;
    bytes.append(reinterpret_cast<const char*>(&ver), 4);
    const std::string hj = header.dump();
    const std::uint64_t hlen = hj.size();
    bytes.append(reinterpret_cast<const char*>(&hlen), 8);
    bytes += hj;
    detail::each_entry(ck, [&](const auto& e) { detail::append_raw(bytes, e.value->val); });
    for (const auto& t : ck.adam_m) detail::append_raw(bytes, t);
    for (const auto& t : ck.adam_v) detail::append_raw(bytes, t);
    const std::uint64_t digest = detail::fnv1a(bytes);
    bytes.append(reinterpret_cast<const char*>(&digest), 8);
    io::write_file_atomic(path, bytes);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    const std::string bytes = io::read_file(path);
    if (bytes.size() < 28) throw IntegrityError("checkpoint file too short: " + path);
    if (bytes.compare(0, 8, kCkptMagic, 8) != 0)
        throw IntegrityError("bad checkpoint magic in " + path);
    std::uint32_t ver = 0;
    std::memcpy(&ver, bytes.data() + 8, 4);
    if (ver != kCkptVersion)
        throw VersionError("checkpoint version " + std::to_string(ver) + ", this build reads " +
                           std::to_string(kCkptVersion));
    std::uint64_t stored = 0;
    std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
    if (detail::fnv1a(bytes.substr(0, bytes.size() - 8)) != stored)
        throw IntegrityError("checkpoint digest mismatch (corrupt or truncated): " + path);

    std::uint64_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + 12, 8);
    if (20 + hlen > bytes.size()) throw IntegrityError("checkpoint header overruns file");
    const auto header = json::parse(bytes.substr(20, hlen));

    Checkpoint ck(detail::config_from_json(header.at("config")));
    ck.epoch = header.at("epoch").get<int>();
    ck.adam_t = header.at("adam_t").get<std::int64_t>();

    size_t pos = 20 + hlen, i = 0;
    const auto& plist = header.at("params");
    detail::each_entry(ck, [&](const auto& e) {
        const auto& pj = plist.at(i++);
        if (pj.at("name").get<std::string>() != e.name ||
            pj.at("shape").get<std::vector<int>>() != e.value->val.shape())
            throw IntegrityError("checkpoint parameter list mismatch at " + e.name);
        detail::take_raw(bytes, pos, e.value->val);
    });
    if (i != plist.size()) throw IntegrityError("checkpoint parameter count mismatch");

    detail::each_entry(ck, [&](const auto& e) {
        ck.adam_m.push_back(TensorF(e.value->val.shape()));
        ck.adam_v.push_back(TensorF(e.value->val.shape()));
    });
    for (auto& t : ck.adam_m) detail::take_raw(bytes, pos, t);
    for (auto& t : ck.adam_v) detail::take_raw(bytes, pos, t);
    if (pos != bytes.size() - 8) throw IntegrityError("checkpoint holds trailing bytes");
    return ck;
}

/// Adam over both parameter sets with bias correction and a shared step count.
class Adam {
  public:
    Adam(Checkpoint& ck, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : ck_(ck), b1_(beta1), b2_(beta2), eps_(eps) {
        if (ck.adam_m.empty()) {
            detail::each_entry(ck, [&](const auto& e) {
                ck.adam_m.push_back(TensorF(e.value->val.shape()));
                ck.adam_v.push_back(TensorF(e.value->val.shape()));
            });
        }
    }

    /// Global L2 norm of all gradients, then rescale when above max_norm.
    double clip_global_norm(double max_norm) {
        double sq = 0.0;
        detail::each_entry(ck_, [&](const auto& e) {
            const auto& g = e.value->grad;
            if (g.numel() != e.value->val.numel()) return;
            for (std::int64_t i = 0; i < g.numel(); ++i)
                sq += static_cast<double>(g[i]) * g[i];
        });
        const double norm = std::sqrt(sq);
        if (norm > max_norm && norm > 0) {
            const float f = static_cast<float>(max_norm / norm);
            detail::each_entry(ck_, [&](const auto& e) {
                auto& g = e.value->grad;
                if (g.numel() != e.value->val.numel()) return;
                for (auto& v : g.vec()) v *= f;
            });
        }
        return norm;
    }

    void step(double lr) {
        ++ck_.adam_t;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(ck_.adam_t));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(ck_.adam_t));
        size_t i = 0;
        detail::each_entry(ck_, [&](const auto& e) {
            auto& m = ck_.adam_m[i];
            auto& v = ck_.adam_v[i];
            ++i;
            const auto& g = e.value->grad;
            if (g.numel() != e.value->val.numel()) return;  // unreached this step
            auto& p = e.value->val;
            for (std::int64_t k = 0; k < p.numel(); ++k) {
                const double gk = g[k];
                m[k] = static_cast<float>(b1_ * m[k] + (1.0 - b1_) * gk);
                v[k] = static_cast<float>(b2_ * v[k] + (1.0 - b2_) * gk * gk);
                const double mhat = m[k] / c1, vhat = v[k] / c2;
                p[k] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps_));
            }
        });
    }

  private:
    Checkpoint& ck_;
    double b1_, b2_, eps_;
};

/// In-memory copy of the samples addressed by a manifest, indexed globally.
class SampleStore {
  public:
    SampleStore(const std::string& root, const data::Manifest& m) : manifest_(m) {
        samples_.reserve(static_cast<size_t>(m.total));
        for (int i = 0; i < m.total; ++i) samples_.push_back(data::load_sample(root, i));
    }

    const data::Sample& at(int idx) const { return samples_.at(static_cast<size_t>(idx)); }
    const data::Manifest& manifest() const { return manifest_; }

  private:
    data::Manifest manifest_;
    std::vector<data::Sample> samples_;
};

struct Batch {
    TensorF rgb;   // (N,3,S,S)
    TensorF x0;    // (N,K,2)
    TensorF d_gt;  // (N,K)
    TensorF trav;  // (N,1,S,S)
    TensorF attn;  // (N,1,S,S)
    cond::ContextBatch ctx;
    std::vector<int> tasks;
};

inline Batch assemble_batch(const SampleStore& store, const std::vector<int>& idxs) {
    const int N = static_cast<int>(idxs.size());
    const int S = cfg::kImageSize, K = cfg::kKWay;
    Batch b;
    b.rgb = TensorF({N, 3, S, S});
    b.x0 = TensorF({N, K, 2});
    b.d_gt = TensorF({N, K});
    b.trav = TensorF({N, 1, S, S});
    b.attn = TensorF({N, 1, S, S});
    std::vector<cond::TaskContext> ctxs;
    ctxs.reserve(static_cast<size_t>(N));
    for (int n = 0; n < N; ++n) {
        const auto& s = store.at(idxs[static_cast<size_t>(n)]);
        std::copy_n(s.rgb.data(), s.rgb.numel(), b.rgb.data() + static_cast<std::int64_t>(n) * 3 * S * S);
        std::copy_n(s.trav.data(), s.trav.numel(),
                    b.trav.data() + static_cast<std::int64_t>(n) * S * S);
        std::copy_n(s.attn.data(), s.attn.numel(),
                    b.attn.data() + static_cast<std::int64_t>(n) * S * S);
        for (int k = 0; k < K; ++k) {
            b.x0.at3(n, k, 0) = s.traj.waypoints[static_cast<size_t>(k)].u;
            b.x0.at3(n, k, 1) = s.traj.waypoints[static_cast<size_t>(k)].v;
            b.d_gt.at2(n, k) = s.traj.depths[static_cast<size_t>(k)];
        }
        cond::TaskContext tc;
        tc.task_id = s.task_id;
        tc.attention = s.attn;
        ctxs.push_back(std::move(tc));
        b.tasks.push_back(static_cast<int>(s.task_id));
    }
    b.ctx = cond::make_batch(ctxs);
    return b;
}

/// Deterministic epoch ordering: a seeded reshuffle of the split per epoch.
inline std::vector<int> epoch_order(std::vector<int> idxs, std::uint64_t seed, int epoch) {
    Rng rng(derive_seed(seed, {912, static_cast<std::uint64_t>(epoch)}));
    rng.shuffle(idxs.begin(), idxs.end());
    return idxs;
}

namespace detail {

struct StepLosses {
    model::LossBreakdown<float> lb;
    ad::Value<float> objective;  // l_total plus the weighted predictor term
};

/// Shared between training and validation so both cost the same objective.
inline StepLosses batch_losses(Checkpoint& ck, const Batch& b, const model::NoiseSchedule& sched,
                               Rng& rng) {
    const int N = b.rgb.dim(0), K = ck.cfg.model.k_way;
    TensorF eps({N, K, 2}), x_t({N, K, 2});
    std::vector<int> ts(static_cast<size_t>(N));
    for (int n = 0; n < N; ++n) {
        ts[static_cast<size_t>(n)] = 1 + static_cast<int>(rng.uniform_int(sched.T_steps));
        TensorF e0({K, 2}), x0n({K, 2});
        for (int i = 0; i < K * 2; ++i) {
            e0[i] = static_cast<float>(rng.normal());
            x0n[i] = b.x0[static_cast<std::int64_t>(n) * K * 2 + i];
        }
        const auto xt = model::q_sample(x0n, ts[static_cast<size_t>(n)], e0, sched);
        for (int i = 0; i < K * 2; ++i) {
            eps[static_cast<std::int64_t>(n) * K * 2 + i] = e0[i];
            x_t[static_cast<std::int64_t>(n) * K * 2 + i] = xt[i];
        }
    }

    auto out = ck.net.forward(b.rgb, x_t, ts, b.ctx);
    out.depth_hat =
        ck.net.predict_waypoint_depths(out.decoder_features, b.x0, scene::DepthScale::Meter);
    StepLosses sl;
    sl.lb = model::compute_losses(out, eps, b.d_gt, b.trav, b.attn);
    // Attention targets are ~97% zeros, so a plain MSE parks the predictor at
    // an all-zero map. Weighting each pixel by 1 + 8*gt keeps the peak in the
    // gradient; realized as mean((sqrt(w)*pred - sqrt(w)*gt)^2).
    TensorF sw = b.attn, swgt = b.attn;
    for (std::int64_t i = 0; i < sw.numel(); ++i) {
        sw[i] = std::sqrt(1.0f + 8.0f * b.attn[i]);
        swgt[i] = sw[i] * b.attn[i];
    }
    auto vit_map = ck.vit.attention_map(b.rgb, b.tasks);
    auto l_vit = ad::mse_mean(ad::mul_mask(vit_map, ad::constant(std::move(sw))),
                              ad::constant(std::move(swgt)));
    sl.objective =
        ad::add(sl.lb.l_total, ad::scale(l_vit, static_cast<float>(ck.cfg.vit_weight)));
    return sl;
}

inline void accumulate(EpochLosses& acc, const model::LossBreakdown<float>& lb, int weight) {
    acc.diff += weight * static_cast<double>(lb.l_diff->val[0]);
    acc.depth += weight * static_cast<double>(lb.l_depth->val[0]);
    acc.trav += weight * static_cast<double>(lb.l_trav->val[0]);
    acc.attn += weight * static_cast<double>(lb.l_attn->val[0]);
    acc.total += weight * static_cast<double>(lb.l_total->val[0]);
}

inline void scale_losses(EpochLosses& acc, double inv) {
    acc.diff *= inv;
    acc.depth *= inv;
    acc.trav *= inv;
    acc.attn *= inv;
    acc.total *= inv;
}

inline std::string log_line(int epoch, const EpochLosses& l) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%d %.6f %.6f %.6f %.6f %.6f\n", epoch, l.diff, l.depth,
                  l.trav, l.attn, l.total);
    return buf;
}

}  // namespace detail

/// Mean component losses over a split without touching parameters; the noise
/// draws are a fixed function of (seed, epoch) so runs are comparable.
inline EpochLosses validate_split(Checkpoint& ck, const SampleStore& store,
                                  const std::vector<int>& split,
                                  const model::NoiseSchedule& sched, int epoch) {
    ad::NoGradGuard ng;
    Rng rng(derive_seed(ck.cfg.seed, {913, static_cast<std::uint64_t>(epoch)}));
    EpochLosses acc;
    int n_total = 0;
    for (size_t at = 0; at < split.size(); at += static_cast<size_t>(ck.cfg.batch_size)) {
        const std::vector<int> idxs(split.begin() + static_cast<std::ptrdiff_t>(at),
                                    split.begin() + static_cast<std::ptrdiff_t>(std::min(
                                                        at + ck.cfg.batch_size, split.size())));
        const auto b = assemble_batch(store, idxs);
        const auto sl = detail::batch_losses(ck, b, sched, rng);
        detail::accumulate(acc, sl.lb, static_cast<int>(idxs.size()));
        n_total += static_cast<int>(idxs.size());
    }
    if (n_total > 0) detail::scale_losses(acc, 1.0 / n_total);
    return acc;
}

/// Optimizes the checkpoint in place for `epochs` epochs, checkpointing after
/// every epoch; a non-finite loss aborts and leaves the last epoch's file.
inline TrainResult run_training(Checkpoint& ck, const SampleStore& store, int epochs,
                                const std::string& out_dir) {
    ck.cfg.validate();
    fs::create_directories(out_dir);
    const auto sched = model::make_schedule(ck.cfg.t_steps);
    const auto& m = store.manifest();
    Adam opt(ck);
    TrainResult res;
    res.checkpoint_path = (fs::path(out_dir) / "checkpoint.bin").string();

    const std::int64_t total_steps =
        std::max<std::int64_t>(1, static_cast<std::int64_t>(epochs) *
                                      ((static_cast<std::int64_t>(m.train.size()) +
                                        ck.cfg.batch_size - 1) /
                                       ck.cfg.batch_size));
    std::int64_t step = 0;
    std::string train_log, val_log;

    for (int ep = 1; ep <= epochs; ++ep) {
        Rng rng(derive_seed(ck.cfg.seed, {911, static_cast<std::uint64_t>(ep)}));
        const auto order = epoch_order(m.train, ck.cfg.seed, ep);
        EpochLosses acc;
        int n_seen = 0;
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(ck.cfg.batch_size)) {
            const std::vector<int> idxs(
                order.begin() + static_cast<std::ptrdiff_t>(at),
                order.begin() +
                    static_cast<std::ptrdiff_t>(std::min(at + ck.cfg.batch_size, order.size())));
            const auto b = assemble_batch(store, idxs);
            ck.net.params.zero_grad();
            ck.vit.params.zero_grad();
            const auto sl = detail::batch_losses(ck, b, sched, rng);
            if (!std::isfinite(sl.objective->val[0]))
                throw std::runtime_error(
                    "training aborted: non-finite loss at epoch " + std::to_string(ep) +
                    " (last finished epoch remains at " + res.checkpoint_path + ")");
            ad::backward(sl.objective);
            opt.clip_global_norm(ck.cfg.grad_clip);
            const double lr =
                ck.cfg.lr * 0.5 *
                (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) /
                                static_cast<double>(total_steps)));
            opt.step(lr);
            ++step;
            detail::accumulate(acc, sl.lb, static_cast<int>(idxs.size()));
            n_seen += static_cast<int>(idxs.size());
        }
        detail::scale_losses(acc, n_seen > 0 ? 1.0 / n_seen : 0.0);
        res.train_hist.push_back(acc);

        const auto val = validate_split(ck, store, m.val, sched, ep);
        res.val_hist.push_back(val);

        ck.epoch = ep;
        save_checkpoint(ck, res.checkpoint_path);
        train_log += detail::log_line(ep, acc);
        val_log += detail::log_line(ep, val);
        io::write_file_atomic(fs::path(out_dir) / "train_log.txt", train_log);
        io::write_file_atomic(fs::path(out_dir) / "val_log.txt", val_log);
    }

    if (epochs == 0) save_checkpoint(ck, res.checkpoint_path);
    return res;
}

inline TrainResult train(const TrainConfig& cfg, const std::string& data_root,
                         const std::string& out_dir) {
    const auto m = data::load_manifest(data_root);
    if (m.train.empty()) throw std::invalid_argument("train: dataset has an empty train split");
    SampleStore store(data_root, m);
    Checkpoint ck(cfg);
    return run_training(ck, store, cfg.epochs, out_dir);
}

inline TrainResult finetune(const std::string& base_ckpt, const std::string& data_root,
                            int epochs, const std::string& out_dir) {
    auto ck = load_checkpoint(base_ckpt);
    // fresh optimizer run on the new task's data, all parameters trainable
    ck.adam_m.clear();
    ck.adam_v.clear();
    ck.adam_t = 0;
    ck.cfg.epochs = epochs;
    const auto m = data::load_manifest(data_root);
    SampleStore store(data_root, m);
    return run_training(ck, store, epochs, out_dir);
}

}  // namespace difftraj::train
