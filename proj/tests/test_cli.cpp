#include <cstdlib>
#include <filesystem>
#include <string>

#include "difftraj/io.hpp"
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

struct RunResult {
    int exit_code = -1;
    std::string out, err;
};

RunResult run_cli(const fs::path& workdir, const std::string& args) {
    const auto out_f = workdir / "stdout.txt", err_f = workdir / "stderr.txt";
    const std::string cmd = "cd '" + workdir.string() + "' && '" DIFFTRAJ_BIN "' " + args +
                            " >'" + out_f.string() + "' 2>'" + err_f.string() + "'";
    const int raw = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out = fs::exists(out_f) ? io::read_file(out_f) : "";
    r.err = fs::exists(err_f) ? io::read_file(err_f) : "";
    return r;
}

size_t count_occurrences(const std::string& hay, const std::string& needle) {
    size_t n = 0;
    for (size_t pos = hay.find(needle); pos != std::string::npos;
         pos = hay.find(needle, pos + needle.size()))
        ++n;
    return n;
}

/// One shared workspace: a small corpus plus a one-epoch checkpoint.
const fs::path& pipeline_dir() {
    static const fs::path dir = [] {
        const auto d = fresh_dir("cli_pipeline");
        auto gen = run_cli(d, "gen-data --out ds --counts 8,8,8 --seed 9");
        REQUIRE(gen.exit_code == 0);
        auto tr = run_cli(d,
                          "train --data ds --out run --epochs 1 --batch-size 8 --t-steps 4 "
                          "--base-channels 4 --seed 3");
        REQUIRE(tr.exit_code == 0);
        return d;
    }();
    return dir;
}

}  // namespace

TEST_CASE("generated data reaches the oracle bound through the pipeline") {
    const auto& d = pipeline_dir();
    CHECK(fs::exists(d / "ds" / "manifest.json"));
    CHECK(fs::exists(d / "ds" / "config.json"));
    CHECK(fs::exists(d / "ds" / "s000023" / "rgb.ppm"));

    const auto ev = run_cli(d, "eval --data ds --oracle-replay --out ev");
    REQUIRE(ev.exit_code == 0);
    const auto report = io::read_file(d / "ev" / "report.txt");
    CHECK(count_occurrences(report, "collision_free=1.000") == 3);
    CHECK(count_occurrences(report, "success=1.000") == 3);
    CHECK(report.find("oracle-replay") != std::string::npos);
    const auto csv = io::read_file(d / "ev" / "samples.csv");
    CHECK(count_occurrences(csv, "\n") == 4);
}

TEST_CASE("training writes a checkpoint with logs and the echoed config") {
    const auto& d = pipeline_dir();
    CHECK(fs::exists(d / "run" / "checkpoint.bin"));
    CHECK(fs::exists(d / "run" / "train_log.txt"));
    CHECK(fs::exists(d / "run" / "val_log.txt"));
    const auto echo = io::read_file(d / "run" / "config.json");
    CHECK(echo.find("\"base_channels\": 4") != std::string::npos);
    CHECK(echo.find("\"epochs\": 1") != std::string::npos);
}

TEST_CASE("sampling twice with one seed writes identical trajectories") {
    const auto& d = pipeline_dir();
    const std::string args =
        "sample --ckpt run/checkpoint.bin --scene-seed 12 --task goal_nav --seed 11 --out ";
    REQUIRE(run_cli(d, args + "s1").exit_code == 0);
    REQUIRE(run_cli(d, args + "s2").exit_code == 0);
    const auto a = io::read_file(d / "s1" / "trajectory.json");
    const auto b = io::read_file(d / "s2" / "trajectory.json");
    CHECK(a == b);
    CHECK(a.find("\"goal_mode\"") != std::string::npos);
    for (const char* f : {"rgb.ppm", "attn.f32", "trajectory.ppm", "attention.ppm"})
        CHECK(fs::exists(d / "s1" / f));

    const auto zs = run_cli(d, "sample --ckpt run/checkpoint.bin --scene-seed 5 "
                               "--task pre_grasp --ref-image ds/s000016/rgb.ppm --seed 4 "
                               "--out s_ref");
    REQUIRE(zs.exit_code == 0);
    const auto tj = io::read_file(d / "s_ref" / "trajectory.json");
    CHECK(tj.find("reference_matched") != std::string::npos);
}

TEST_CASE("render emits exactly two images from a stored sample") {
    const auto& d = pipeline_dir();
    REQUIRE(run_cli(d, "render --sample-dir ds/s000000 --out r1").exit_code == 0);
    int ppm = 0;
    for (const auto& e : fs::directory_iterator(d / "r1"))
        if (e.path().extension() == ".ppm") ++ppm;
    CHECK(ppm == 2);

    REQUIRE(run_cli(d, "render --traj-file s1/trajectory.json --out r2").exit_code == 0);
    CHECK(fs::exists(d / "r2" / "trajectory.ppm"));
    CHECK(fs::exists(d / "r2" / "attention.ppm"));
}

TEST_CASE("failures exit nonzero with a single machine-parsable error line") {
    const auto& d = pipeline_dir();
    io::write_file_atomic(d / "bad.json", "{\"dataset\": {\"bogus\": 1}}");

    const auto unknown = run_cli(d, "gen-data --config bad.json --out never");
    CHECK(unknown.exit_code != 0);
    CHECK(unknown.err.rfind("error: ", 0) == 0);
    CHECK(count_occurrences(unknown.err, "\n") == 1);
    CHECK_FALSE(fs::exists(d / "never"));

    const auto exists = run_cli(d, "gen-data --out ds --counts 2,2,2");
    CHECK(exists.exit_code != 0);
    CHECK(exists.err.find("already exists") != std::string::npos);

    const auto no_ckpt = run_cli(d, "eval --data ds --out never2");
    CHECK(no_ckpt.exit_code != 0);
    CHECK(no_ckpt.err.rfind("error: ", 0) == 0);

    const auto missing_flag = run_cli(d, "train --data ds");
    CHECK(missing_flag.exit_code != 0);
    CHECK(missing_flag.err.rfind("error: ", 0) == 0);

    const auto both = run_cli(d, "sample --ckpt run/checkpoint.bin --image a.ppm "
                                 "--scene-seed 2 --task goal_nav --out never3");
    CHECK(both.exit_code != 0);
    CHECK(both.err.find("exactly one") != std::string::npos);
}
