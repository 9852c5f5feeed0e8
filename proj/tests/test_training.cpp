#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "difftraj/training.hpp"
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

/// Small standard corpus shared by the cases below, built once.
const std::string& tiny_data() {
    static std::string root = [] {
        const auto dir = fresh_dir("train_corpus");
        data::BuildSpec spec;
        spec.root = dir.string();
        spec.counts = {22, 21, 21};  // 64 samples
        spec.seed = 2024;
        data::build_dataset(spec);
        return dir.string();
    }();
    return root;
}

train::TrainConfig tiny_config() {
    train::TrainConfig c;
    c.epochs = 2;
    c.batch_size = 8;
    c.seed = 5;
    c.t_steps = 20;
    c.model.base_channels = 4;
    return c;
}

struct Probe {
    TensorF rgb, x_t;
    std::vector<int> ts;
    cond::ContextBatch ctx;
};

Probe make_probe(const train::TrainConfig& cfg) {
    Rng rng(600);
    Probe p;
    const int S = cfg.model.image_size, K = cfg.model.k_way;
    p.rgb = TensorF({1, 3, S, S});
    for (auto& v : p.rgb.vec()) v = static_cast<float>(rng.uniform());
    p.x_t = TensorF({1, K, 2});
    for (auto& v : p.x_t.vec()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    p.ts = {7};
    cond::TaskContext tc;
    tc.task_id = scene::TaskId::GoalNav;
    tc.attention = TensorF({S, S});
    for (auto& v : tc.attention.vec()) v = static_cast<float>(rng.uniform());
    p.ctx = cond::make_batch({tc});
    return p;
}

TensorF probe_eps(train::Checkpoint& ck, const Probe& p) {
    ad::NoGradGuard ng;
    const auto out = ck.net.forward(p.rgb, p.x_t, p.ts, p.ctx);
    return out.eps_hat->val;
}

}  // namespace

TEST_CASE("checkpoints round-trip bit for bit and fail loudly when damaged") {
    auto cfg = tiny_config();
    train::Checkpoint ck(cfg);
    const auto dir = fresh_dir("ckpt");
    const auto path = (dir / "c.bin").string();
    train::save_checkpoint(ck, path);

    auto back = train::load_checkpoint(path);
    CHECK(back.epoch == ck.epoch);
    CHECK(back.cfg.model.base_channels == 4);

    const auto probe = make_probe(cfg);
    const auto a = probe_eps(ck, probe);
    const auto b = probe_eps(back, probe);
    REQUIRE(a.numel() == b.numel());
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);

    // the attention predictor parameters ride along
    const auto va = ck.vit.predict_attention(
        TensorF({3, 64, 64}), scene::TaskId::GoalNav);
    const auto vb = back.vit.predict_attention(
        TensorF({3, 64, 64}), scene::TaskId::GoalNav);
    for (std::int64_t i = 0; i < va.attn.numel(); ++i) CHECK(va.attn[i] == vb.attn[i]);

    SUBCASE("flipped payload byte is an integrity error") {
        auto bytes = io::read_file(path);
        bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x40);
        io::write_file_atomic(path, bytes);
        CHECK_THROWS_AS(train::load_checkpoint(path), train::IntegrityError);
    }
    SUBCASE("truncation is an integrity error") {
        auto bytes = io::read_file(path);
        io::write_file_atomic(path, bytes.substr(0, bytes.size() - 100));
        CHECK_THROWS_AS(train::load_checkpoint(path), train::IntegrityError);
    }
    SUBCASE("version mismatch names both versions") {
        auto bytes = io::read_file(path);
        bytes[8] = 9;  // little-endian version word
        io::write_file_atomic(path, bytes);
        try {
            train::load_checkpoint(path);
            FAIL("expected a version error");
        } catch (const train::VersionError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("9") != std::string::npos);
            CHECK(msg.find("1") != std::string::npos);
        }
    }
}

TEST_CASE("every parameter appears in the checkpoint exactly once") {
    auto cfg = tiny_config();
    train::Checkpoint ck(cfg);
    std::set<std::string> names;
    size_t listed = 0;
    for (const auto& e : ck.net.params.entries()) {
        CHECK(names.insert(e.name).second);
        ++listed;
    }
    for (const auto& e : ck.vit.params.entries()) {
        CHECK(names.insert(e.name).second);
        ++listed;
    }
    const auto dir = fresh_dir("ckpt_names");
    train::save_checkpoint(ck, (dir / "c.bin").string());
    const auto bytes = io::read_file(dir / "c.bin");
    std::uint64_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + 12, 8);
    const auto header = nlohmann::json::parse(bytes.substr(20, hlen));
    CHECK(header.at("params").size() == listed);
}

TEST_CASE("two epochs on the tiny corpus yield a loadable checkpoint and logs") {
    auto cfg = tiny_config();
    const auto out = fresh_dir("train_smoke");
    const auto res = train::train(cfg, tiny_data(), out.string());

    REQUIRE(res.train_hist.size() == 2);
    REQUIRE(res.val_hist.size() == 2);
    for (const auto& h : {res.train_hist, res.val_hist})
        for (const auto& e : h) {
            CHECK(std::isfinite(e.total));
            CHECK(e.diff >= 0.0);
            CHECK(e.trav >= 0.0);
        }

    auto ck = train::load_checkpoint(res.checkpoint_path);
    CHECK(ck.epoch == 2);
    CHECK(ck.adam_t > 0);

    std::ifstream log(out / "train_log.txt");
    REQUIRE(log.good());
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
        std::istringstream row(line);
        int epoch;
        double d, dp, tv, at, tt;
        REQUIRE((row >> epoch >> d >> dp >> tv >> at >> tt));
        CHECK(epoch == ++lines);
    }
    CHECK(lines == 2);
}

TEST_CASE("fixed seeds reproduce the training trajectory") {
    auto cfg = tiny_config();
    cfg.epochs = 1;
    const auto o1 = fresh_dir("train_rep_a"), o2 = fresh_dir("train_rep_b");
    const auto r1 = train::train(cfg, tiny_data(), o1.string());
    const auto r2 = train::train(cfg, tiny_data(), o2.string());
    REQUIRE(r1.val_hist.size() == 1);
    CHECK(r1.val_hist[0].diff == doctest::Approx(r2.val_hist[0].diff).epsilon(1e-9));
    CHECK(r1.val_hist[0].total == doctest::Approx(r2.val_hist[0].total).epsilon(1e-9));
    CHECK(r1.train_hist[0].total == doctest::Approx(r2.train_hist[0].total).epsilon(1e-9));
}

TEST_CASE("zero-epoch finetuning returns the base parameters") {
    auto cfg = tiny_config();
    cfg.epochs = 1;
    const auto base_out = fresh_dir("ft_base");
    const auto res = train::train(cfg, tiny_data(), base_out.string());

    const auto ft_out = fresh_dir("ft_zero");
    train::finetune(res.checkpoint_path, tiny_data(), 0, ft_out.string());

    auto base = train::load_checkpoint(res.checkpoint_path);
    auto tuned = train::load_checkpoint((ft_out / "checkpoint.bin").string());
    const auto probe = make_probe(cfg);
    const auto a = probe_eps(base, probe);
    const auto b = probe_eps(tuned, probe);
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("finetuning moves every parameter group including the scale table") {
    auto cfg = tiny_config();
    cfg.epochs = 1;
    const auto base_out = fresh_dir("ft_drift_base");
    const auto res = train::train(cfg, tiny_data(), base_out.string());

    const auto ft_out = fresh_dir("ft_drift");
    train::finetune(res.checkpoint_path, tiny_data(), 1, ft_out.string());
    auto base = train::load_checkpoint(res.checkpoint_path);
    auto tuned = train::load_checkpoint((ft_out / "checkpoint.bin").string());

    const auto wb = base.net.params.find("scale_table")->val;
    const auto wt = tuned.net.params.find("scale_table")->val;
    double drift = 0;
    for (std::int64_t i = 0; i < wb.numel(); ++i)
        drift = std::max(drift, std::abs(static_cast<double>(wb[i]) - wt[i]));
    CHECK(drift > 0.0);

    // no orphan groups: something moved in each family
    for (const char* name : {"enc1.w", "film64.gamma.w", "eps_fc1.w", "trav_head.w"}) {
        const auto pb = base.net.params.find(name)->val;
        const auto pt = tuned.net.params.find(name)->val;
        double d = 0;
        for (std::int64_t i = 0; i < pb.numel(); ++i)
            d = std::max(d, std::abs(static_cast<double>(pb[i]) - pt[i]));
        CHECK(d > 0.0);
    }
}

TEST_CASE("epoch batches mirror the dataset task mix at scale") {
    data::Manifest m;
    m.seed = 99;
    m.counts = {342, 341, 341};
    m.total = 1024;
    data::make_splits(m);

    const auto order = train::epoch_order(m.train, 99, 3);
    REQUIRE(order.size() == m.train.size());
    std::array<int, 3> seen{0, 0, 0};
    for (int idx : order) seen[static_cast<size_t>(data::task_of_index(m, idx))]++;
    for (int t = 0; t < 3; ++t) {
        const double want =
            static_cast<double>(m.counts[static_cast<size_t>(t)]) / m.total * order.size();
        CHECK(std::abs(seen[static_cast<size_t>(t)] - want) < 0.05 * want);
    }
}

TEST_CASE("a poisoned parameter aborts training with a non-finite diagnostic") {
    auto cfg = tiny_config();
    cfg.epochs = 1;
    const auto m = data::load_manifest(tiny_data());
    train::SampleStore store(tiny_data(), m);
    train::Checkpoint ck(cfg);
    ck.net.params.find("enc2.w")->val[0] = std::numeric_limits<float>::quiet_NaN();
    const auto out = fresh_dir("train_nan");
    CHECK_THROWS_WITH_AS(train::run_training(ck, store, 1, out.string()),
                         doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("validation losses are a pure function of checkpoint and epoch") {
    auto cfg = tiny_config();
    const auto m = data::load_manifest(tiny_data());
    train::SampleStore store(tiny_data(), m);
    train::Checkpoint ck(cfg);
    const auto sched = model::make_schedule(cfg.t_steps);
    const auto a = train::validate_split(ck, store, m.val, sched, 1);
    const auto b = train::validate_split(ck, store, m.val, sched, 1);
    CHECK(a.diff == b.diff);
    CHECK(a.total == b.total);
    const auto c = train::validate_split(ck, store, m.val, sched, 2);
    CHECK(a.diff != c.diff);  // different epoch, different fixed noise
}
