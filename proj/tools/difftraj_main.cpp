#include <array>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "difftraj/dataset.hpp"
#include "difftraj/evaluation.hpp"
#include "difftraj/render.hpp"
#include "difftraj/training.hpp"

using namespace difftraj;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::string& where,
                    std::initializer_list<const char*> allowed) {
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) ok = true;
        if (!ok) throw std::invalid_argument("config: unknown key \"" + key + "\" in " + where);
    }
}

/// Every tunable of the pipeline in one place; sections mirror the commands.
struct RunConfig {
    std::array<int, 3> counts{512, 512, 512};
    std::uint64_t data_seed = 0;
    std::string style = "standard";
    train::TrainConfig train;
    eval::EvalThresholds thresholds;
    std::uint64_t eval_seed = 0;
    bool oracle_replay = false;
    std::string task = "explore_nav";
    std::uint64_t sample_seed = 0;
    std::uint64_t scene_seed = 0;

    void load(const std::string& path) {
        const auto j = json::parse(io::read_file(path));
        reject_unknown(j, "top level", {"dataset", "train", "eval", "sample"});
        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            reject_unknown(d, "dataset", {"counts", "seed", "style"});
            if (d.contains("counts")) {
                const auto v = d.at("counts").get<std::vector<int>>();
                if (v.size() != 3)
                    throw std::invalid_argument("config: dataset.counts needs three values");
                std::copy(v.begin(), v.end(), counts.begin());
            }
            data_seed = d.value("seed", data_seed);
            style = d.value("style", style);
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            reject_unknown(t, "train",
                           {"epochs", "batch_size", "lr", "grad_clip", "seed", "t_steps",
                            "vit_weight", "base_channels"});
            train.epochs = t.value("epochs", train.epochs);
            train.batch_size = t.value("batch_size", train.batch_size);
            train.lr = t.value("lr", train.lr);
            train.grad_clip = t.value("grad_clip", train.grad_clip);
            train.seed = t.value("seed", train.seed);
            train.t_steps = t.value("t_steps", train.t_steps);
            train.vit_weight = t.value("vit_weight", train.vit_weight);
            train.model.base_channels = t.value("base_channels", train.model.base_channels);
        }
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            reject_unknown(e, "eval",
                           {"nav_success_m", "grasp_success_cm", "compliance_px", "seed",
                            "oracle_replay"});
            thresholds.nav_success_m = e.value("nav_success_m", thresholds.nav_success_m);
            thresholds.grasp_success_cm = e.value("grasp_success_cm", thresholds.grasp_success_cm);
            thresholds.compliance_px = e.value("compliance_px", thresholds.compliance_px);
            eval_seed = e.value("seed", eval_seed);
            oracle_replay = e.value("oracle_replay", oracle_replay);
        }
        if (j.contains("sample")) {
            const auto& s = j.at("sample");
            reject_unknown(s, "sample", {"task", "seed", "scene_seed"});
            task = s.value("task", task);
            sample_seed = s.value("seed", sample_seed);
            scene_seed = s.value("scene_seed", scene_seed);
        }
        validate();
    }

    void validate() const {
        for (const int c : counts)
            if (c < 0) throw std::invalid_argument("config: dataset counts must be >= 0");
        if (style != "standard" && style != "novel")
            throw std::invalid_argument("config: dataset style must be standard or novel");
        scene::task_from_name(task);
        if (thresholds.nav_success_m <= 0 || thresholds.grasp_success_cm <= 0 ||
            thresholds.compliance_px <= 0)
            throw std::invalid_argument("config: eval thresholds must be positive");
    }

    json effective() const {
        return json{{"dataset", {{"counts", counts}, {"seed", data_seed}, {"style", style}}},
                    {"train", train::detail::config_json(train)},
                    {"eval",
                     {{"nav_success_m", thresholds.nav_success_m},
                      {"grasp_success_cm", thresholds.grasp_success_cm},
                      {"compliance_px", thresholds.compliance_px},
                      {"seed", eval_seed},
                      {"oracle_replay", oracle_replay}}},
                    {"sample",
                     {{"task", task}, {"seed", sample_seed}, {"scene_seed", scene_seed}}}};
    }
};

/// Work lands in <out>.partial and is renamed onto <out> only on success.
struct OutDir {
    fs::path final_path, tmp;

    explicit OutDir(const std::string& out) {
        fs::path p(out);
        if (p.filename().empty()) p = p.parent_path();
        if (p.empty()) throw std::invalid_argument("--out must name a directory");
        if (fs::exists(p)) throw std::runtime_error("output directory already exists: " + out);
        final_path = p;
        tmp = p.string() + ".partial";
        fs::remove_all(tmp);
        fs::create_directories(tmp);
    }
    OutDir(const OutDir&) = delete;

    void echo(const RunConfig& cfg) const {
        io::write_file_atomic(tmp / "config.json", cfg.effective().dump(2) + "\n");
    }
    void commit() { fs::rename(tmp, final_path); }
    ~OutDir() {
        std::error_code ec;
        if (fs::exists(tmp)) fs::remove_all(tmp, ec);
    }
};

TensorF scene_rgb_from_seed(scene::TaskId task, std::uint64_t scene_seed) {
    const auto rr = data::default_ranges()[static_cast<size_t>(task)];
    for (int attempt = 0; attempt < 100; ++attempt) {
        const auto sseed =
            derive_seed(scene_seed, {static_cast<std::uint64_t>(task), 0ull,
                                     static_cast<std::uint64_t>(attempt)});
        Rng draw(derive_seed(sseed, {5}));
        scene::SceneSpec ss;
        ss.task_id = task;
        ss.n_obstacles = static_cast<int>(draw.uniform_int_range(rr.obst_lo, rr.obst_hi));
        ss.n_objects =
            rr.obj_hi > 0 ? static_cast<int>(draw.uniform_int_range(rr.obj_lo, rr.obj_hi)) : 0;
        ss.seed = sseed;
        try {
            return scene::generate_scene(ss).rgb;
        } catch (const std::exception&) {
        }
    }
    throw std::runtime_error("sample: no viable scene from --scene-seed after 100 attempts");
}

TensorF read_scene_image(const std::string& path) {
    auto img = io::read_ppm(path);
    if (img.shape() != std::vector<int>{3, cfg::kImageSize, cfg::kImageSize})
        throw std::invalid_argument("image must be a 64x64 color ppm: " + path);
    return img;
}

int cmd_gen_data(const RunConfig& cfg, const std::string& out) {
    OutDir od(out);
    od.echo(cfg);
    data::BuildSpec spec;
    spec.root = od.tmp.string();
    spec.counts = cfg.counts;
    spec.seed = cfg.data_seed;
    spec.style =
        cfg.style == "novel" ? scene::ObjectStyle::Novel : scene::ObjectStyle::Standard;
    const auto m = data::build_dataset(spec);
    od.commit();
    std::printf("gen-data: %d samples (train %zu, val %zu, test %zu), rejected %d, style %s\n",
                m.total, m.train.size(), m.val.size(), m.test.size(), m.rejected,
                m.style.c_str());
    return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& data, const std::string& out) {
    cfg.train.validate();
    OutDir od(out);
    od.echo(cfg);
    const auto res = train::train(cfg.train, data, od.tmp.string());
    od.commit();
    const auto& v = res.val_hist.back();
    std::printf("train: %d epochs done, final val losses total %.6f diff %.6f depth %.6f "
                "trav %.6f attn %.6f\n",
                cfg.train.epochs, v.total, v.diff, v.depth, v.trav, v.attn);
    std::printf("train: checkpoint at %s/checkpoint.bin\n", out.c_str());
    return 0;
}

int cmd_finetune(const RunConfig& cfg, const std::string& base, const std::string& data,
                 int epochs, const std::string& out) {
    if (epochs < 0) throw std::invalid_argument("finetune: --epochs must be >= 0");
    OutDir od(out);
    od.echo(cfg);
    const auto res = train::finetune(base, data, epochs, od.tmp.string());
    od.commit();
    if (!res.val_hist.empty()) {
        const auto& v = res.val_hist.back();
        std::printf("finetune: %d epochs done, final val total %.6f diff %.6f\n", epochs,
                    v.total, v.diff);
    } else {
        std::printf("finetune: 0 epochs, checkpoint re-saved unchanged\n");
    }
    return 0;
}

int cmd_sample(const RunConfig& cfg, const std::string& ckpt_path, const std::string& image,
               bool have_scene_seed, const std::string& depth_scale, const std::string& ref,
               const std::string& out) {
    const auto task = scene::task_from_name(cfg.task);
    if (!depth_scale.empty()) {
        const auto expect = scene::depth_scale_for(task) == scene::DepthScale::Cm ? "cm" : "m";
        if (depth_scale != expect)
            throw std::invalid_argument("sample: task " + cfg.task + " runs in " + expect +
                                        ", not " + depth_scale);
    }
    if (image.empty() == !have_scene_seed)
        throw std::invalid_argument("sample: give exactly one of --image or --scene-seed");

    auto ck = train::load_checkpoint(ckpt_path);
    const auto rgb = image.empty() ? scene_rgb_from_seed(task, cfg.scene_seed)
                                   : read_scene_image(image);
    const auto pred = ref.empty() ? ck.vit.predict_attention(rgb, task)
                                  : ck.vit.match_reference(read_scene_image(ref), rgb);

    cond::TaskContext tc;
    tc.task_id = task;
    const auto ctx = cond::make_batch({attn::attention_to_context(pred, tc)});
    TensorF rgb4({1, 3, cfg::kImageSize, cfg::kImageSize});
    std::copy_n(rgb.data(), rgb.numel(), rgb4.data());
    const auto traj = ck.net.sample(rgb4, ctx, model::make_schedule(ck.cfg.t_steps),
                                    cfg.sample_seed);

    OutDir od(out);
    od.echo(cfg);
    io::write_ppm(od.tmp / "rgb.ppm", rgb);
    io::write_f32(od.tmp / "attn.f32", pred.attn);
    json tj{{"task", cfg.task},
            {"seed", cfg.sample_seed},
            {"goal_mode", oracle::goal_mode_name(traj.goal_mode)},
            {"attention_source",
             pred.source == attn::AttnSource::ReferenceMatched ? "reference_matched"
                                                               : "autonomous"},
            {"degenerate_reference", pred.degenerate},
            {"depth_unit", scene::depth_scale_for(task) == scene::DepthScale::Cm ? "cm" : "m"}};
    for (size_t k = 0; k < traj.waypoints.size(); ++k) {
        tj["waypoints"].push_back({traj.waypoints[k].u, traj.waypoints[k].v});
        tj["depths"].push_back(traj.depths[k]);
        const auto [r, c] = oracle::px_from_norm(traj.waypoints[k]);
        tj["waypoints_px"].push_back({r, c});
    }
    io::write_file_atomic(od.tmp / "trajectory.json", tj.dump(2) + "\n");
    render::render_pair(rgb, traj, pred.attn, od.tmp.string());
    od.commit();
    std::printf("sample: %s goal_mode=%s attention=%s wrote %s/trajectory.json\n",
                cfg.task.c_str(), oracle::goal_mode_name(traj.goal_mode),
                ref.empty() ? "autonomous" : "reference", out.c_str());
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& ckpt_path, const std::string& data,
             bool replay, const std::string& out) {
    if (ckpt_path.empty() && !replay)
        throw std::invalid_argument("eval: --ckpt is required unless --oracle-replay is given");
    const auto m = data::load_manifest(data);
    auto ck = ckpt_path.empty() ? train::Checkpoint(cfg.train)
                                : train::load_checkpoint(ckpt_path);
    const auto res = eval::evaluate(ck, data, m, cfg.thresholds, replay, cfg.eval_seed);

    OutDir od(out);
    od.echo(cfg);
    io::write_file_atomic(od.tmp / "report.txt", eval::report_text(res.report));
    io::write_file_atomic(od.tmp / "samples.csv", eval::rows_csv(res.rows));
    od.commit();
    std::fputs(eval::report_text(res.report).c_str(), stdout);
    return 0;
}

int cmd_render(const RunConfig& cfg, const std::string& sample_dir,
               const std::string& traj_file, const std::string& out) {
    if (sample_dir.empty() == traj_file.empty())
        throw std::invalid_argument("render: give exactly one of --sample-dir or --traj-file");
    OutDir od(out);
    od.echo(cfg);
    if (!sample_dir.empty()) {
        const auto s = data::load_sample_dir(sample_dir);
        render::render_pair(s.rgb, s.traj, s.attn, od.tmp.string(), &s.start, &s.goal);
    } else {
        const auto dir = fs::path(traj_file).parent_path();
        const auto tj = json::parse(io::read_file(traj_file));
        oracle::Trajectory traj;
        traj.goal_mode = oracle::goal_mode_from_name(tj.at("goal_mode").get<std::string>());
        for (const auto& w : tj.at("waypoints"))
            traj.waypoints.push_back({w.at(0).get<float>(), w.at(1).get<float>()});
        for (const auto& d : tj.at("depths")) traj.depths.push_back(d.get<float>());
        const auto rgb = read_scene_image((dir / "rgb.ppm").string());
        const auto attn =
            io::read_f32(dir / "attn.f32", {cfg::kImageSize, cfg::kImageSize});
        render::render_pair(rgb, traj, attn, od.tmp.string());
    }
    od.commit();
    std::printf("render: wrote %s/trajectory.ppm and %s/attention.ppm\n", out.c_str(),
                out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale diffusion trajectory planner"};
    app.require_subcommand(1);
    app.failure_message([](const CLI::App*, const CLI::Error& e) {
        return std::string("error: ") + e.what() + "\n";
    });

    std::string g_config, g_out, g_style;
    std::vector<int> g_counts;
    std::optional<std::uint64_t> g_seed;
    auto* g = app.add_subcommand("gen-data", "build a supervised dataset");
    g->add_option("--config", g_config, "JSON run configuration");
    g->add_option("--out", g_out, "dataset directory to create")->required();
    g->add_option("--counts", g_counts, "per-task sample counts a,b,c")->delimiter(',');
    g->add_option("--seed", g_seed, "dataset seed");
    g->add_option("--style", g_style, "object style: standard or novel");

    std::string t_config, t_data, t_out;
    std::optional<int> t_epochs, t_batch, t_tsteps, t_base;
    std::optional<double> t_lr, t_clip, t_vitw;
    std::optional<std::uint64_t> t_seed;
    auto* t = app.add_subcommand("train", "train a checkpoint from scratch");
    t->add_option("--config", t_config, "JSON run configuration");
    t->add_option("--data", t_data, "dataset directory")->required();
    t->add_option("--out", t_out, "run directory to create")->required();
    t->add_option("--epochs", t_epochs);
    t->add_option("--batch-size", t_batch);
    t->add_option("--lr", t_lr);
    t->add_option("--grad-clip", t_clip);
    t->add_option("--seed", t_seed);
    t->add_option("--t-steps", t_tsteps);
    t->add_option("--vit-weight", t_vitw);
    t->add_option("--base-channels", t_base);

    std::string f_base, f_data, f_out;
    int f_epochs = cfg::kFinetuneEpochs;
    auto* f = app.add_subcommand("finetune", "continue training from a base checkpoint");
    f->add_option("--base", f_base, "base checkpoint file")->required();
    f->add_option("--data", f_data, "dataset directory")->required();
    f->add_option("--epochs", f_epochs, "finetune epochs");
    f->add_option("--out", f_out, "run directory to create")->required();

    std::string s_config, s_ckpt, s_image, s_scale, s_ref, s_out, s_task;
    std::optional<std::uint64_t> s_scene_seed, s_seed;
    auto* s = app.add_subcommand("sample", "run inference on one scene");
    s->add_option("--config", s_config, "JSON run configuration");
    s->add_option("--ckpt", s_ckpt, "checkpoint file")->required();
    s->add_option("--image", s_image, "64x64 ppm scene image");
    s->add_option("--scene-seed", s_scene_seed, "procedural scene seed");
    s->add_option("--task", s_task, "explore_nav, goal_nav or pre_grasp");
    s->add_option("--depth-scale", s_scale, "m or cm, cross-checked against the task");
    s->add_option("--ref-image", s_ref, "reference image for zero-shot goal matching");
    s->add_option("--seed", s_seed, "denoising seed");
    s->add_option("--out", s_out, "output directory to create")->required();

    std::string e_config, e_ckpt, e_data, e_out;
    std::optional<std::uint64_t> e_seed;
    bool e_replay = false;
    auto* e = app.add_subcommand("eval", "score a checkpoint on the held-out split");
    e->add_option("--config", e_config, "JSON run configuration");
    e->add_option("--ckpt", e_ckpt, "checkpoint file");
    e->add_option("--data", e_data, "dataset directory")->required();
    e->add_option("--seed", e_seed, "sampling seed");
    e->add_flag("--oracle-replay", e_replay, "replay stored GT trajectories instead");
    e->add_option("--out", e_out, "output directory to create")->required();

    std::string r_sample_dir, r_traj, r_out;
    auto* r = app.add_subcommand("render", "draw trajectory and attention images");
    r->add_option("--sample-dir", r_sample_dir, "stored dataset sample directory");
    r->add_option("--traj-file", r_traj, "trajectory.json written by the sample command");
    r->add_option("--out", r_out, "output directory to create")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg;
        if (*g) {
            if (!g_config.empty()) cfg.load(g_config);
            if (!g_counts.empty()) {
                if (g_counts.size() != 3)
                    throw std::invalid_argument("--counts needs three values a,b,c");
                std::copy(g_counts.begin(), g_counts.end(), cfg.counts.begin());
            }
            if (g_seed) cfg.data_seed = *g_seed;
            if (!g_style.empty()) cfg.style = g_style;
            cfg.validate();
            return cmd_gen_data(cfg, g_out);
        }
        if (*t) {
            if (!t_config.empty()) cfg.load(t_config);
            if (t_epochs) cfg.train.epochs = *t_epochs;
            if (t_batch) cfg.train.batch_size = *t_batch;
            if (t_lr) cfg.train.lr = *t_lr;
            if (t_clip) cfg.train.grad_clip = *t_clip;
            if (t_seed) cfg.train.seed = *t_seed;
            if (t_tsteps) cfg.train.t_steps = *t_tsteps;
            if (t_vitw) cfg.train.vit_weight = *t_vitw;
            if (t_base) cfg.train.model.base_channels = *t_base;
            return cmd_train(cfg, t_data, t_out);
        }
        if (*f) return cmd_finetune(cfg, f_base, f_data, f_epochs, f_out);
        if (*s) {
            if (!s_config.empty()) cfg.load(s_config);
            if (!s_task.empty()) cfg.task = s_task;
            if (s_seed) cfg.sample_seed = *s_seed;
            if (s_scene_seed) cfg.scene_seed = *s_scene_seed;
            cfg.validate();
            return cmd_sample(cfg, s_ckpt, s_image, s_scene_seed.has_value(), s_scale, s_ref,
                              s_out);
        }
        if (*e) {
            if (!e_config.empty()) cfg.load(e_config);
            if (e_seed) cfg.eval_seed = *e_seed;
            if (e_replay) cfg.oracle_replay = true;
            cfg.validate();
            return cmd_eval(cfg, e_ckpt, e_data, cfg.oracle_replay, e_out);
        }
        if (*r) return cmd_render(cfg, r_sample_dir, r_traj, r_out);
        throw std::runtime_error("no command given");
    } catch (const std::exception& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 1;
    }
}
