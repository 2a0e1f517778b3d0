// Runs the built executable; PROTODENSITY_CLI is its path.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <algorithm>
#include <map>
#include <sstream>

#include "doctest.h"
#include "protodensity/io.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string output;
};

Run run(const std::string& args, const fs::path& dir) {
    const fs::path log = dir / "cli.log";
    const std::string cmd = std::string("'") + PROTODENSITY_CLI + "' " + args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, protodensity::read_text(log)};
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = protodensity::read_text(e.path());
    return out;
}

} // namespace

TEST_CASE("cli exit codes and usage") {
    const auto dir = testutil::scratch_dir("cli_usage");
    Run r = run("frobnicate", dir);
    CHECK(r.code == 1);
    CHECK(r.output.find("Usage") != std::string::npos);
    CHECK(run("", dir).code == 1);
    CHECK(run("--help", dir).code == 0);
    r = run("--version", dir);
    CHECK(r.code == 0);
    CHECK(r.output.find("protodensity ") == 0);
    CHECK(run("train --data /nonexistent --extractor /nonexistent --out x", dir).code == 1);
    r = run("gen-data --out '" + (dir / "d").string() + "' --set scene.height=100", dir);
    CHECK(r.code == 1);
    CHECK(r.output.find("scene.height") != std::string::npos);
    CHECK(run("gradcheck --component nope", dir).code == 1);
}

TEST_CASE("cli pipeline writes resolved configs and leaves the dataset untouched") {
    const auto dir = testutil::scratch_dir("cli_pipeline");
    const std::string d = (dir / "data").string(), fx = (dir / "fx").string(), out = (dir / "run").string();
    const std::string small = " --set scene.height=32 --set scene.width=32 --set scene.cell_count_min=1"
                              " --set scene.cell_count_max=6 --set data.n_train=8 --set data.n_test=4";
    REQUIRE(run("gen-data --out '" + d + "'" + small, dir).code == 0);
    const auto before = snapshot(d);
    CHECK(before.count("manifest.txt"));
    CHECK(before.count("config.txt"));

    REQUIRE(run("pretrain --data '" + d + "' --out '" + fx + "' --set pretrain.epochs=1", dir).code == 0);
    CHECK(fs::exists(fs::path(fx) / "pretrain_history.csv"));

    const std::string train_args = "train --data '" + d + "' --extractor '" + fx +
                                   "' --set train.max_epochs=4 --set train.projection_interval=2 --set model.d=8";
    REQUIRE(run(train_args + " --out '" + out + "'", dir).code == 0);
    for (const char* f : {"config.txt", "run.txt", "history.csv", "steps.csv", "projections.csv",
                          "summary.txt", "model/model.txt", "checkpoints/epoch_0002/model.txt",
                          "checkpoints/epoch_0004/model.txt"})
        CHECK_MESSAGE(fs::exists(fs::path(out) / f), f);
    const std::string info = protodensity::read_text(fs::path(out) / "run.txt");
    CHECK(info.find("version = ") != std::string::npos);
    CHECK(info.find("seed = ") != std::string::npos);
    CHECK(protodensity::read_text(fs::path(out) / "config.txt").find("model.d = 8") != std::string::npos);

    const std::string report = (dir / "report.csv").string();
    REQUIRE(run("eval --model '" + out + "/model' --data '" + d + "' --out '" + report + "'", dir).code == 0);
    CHECK(protodensity::read_text(report).rfind("id,true_count,predicted_count,abs_error\n", 0) == 0);
    CHECK(protodensity::read_text(report + ".config").find("eval.mae = ") != std::string::npos);

    const std::string ex = (dir / "explain").string();
    REQUIRE(run("explain --model '" + out + "/model' --data '" + d + "' --out '" + ex +
                    "' --global-k 2 --image 1 --loc 2,3",
                dir)
                .code == 0);
    CHECK(fs::exists(fs::path(ex) / "global_patches.csv"));
    CHECK(fs::exists(fs::path(ex) / "image_boxes.csv"));
    CHECK(fs::exists(fs::path(ex) / "maps" / "proto0_similarity.pdtf"));
    const std::string expl = protodensity::read_text(fs::path(ex) / "explanations.csv");
    CHECK(std::count(expl.begin(), expl.end(), '\n') == 1 + 8);
    CHECK(run("explain --model '" + out + "/model' --data '" + d + "' --out '" + ex + "' --image 1 --loc 9,9",
              dir)
              .code == 1);

    CHECK(snapshot(d) == before);
}

TEST_CASE("cli saves last good parameters on a numeric failure") {
    const auto dir = testutil::scratch_dir("cli_nan");
    const std::string d = (dir / "data").string(), fx = (dir / "fx").string();
    REQUIRE(run("gen-data --out '" + d + "' --set scene.height=32 --set scene.width=32 --set data.n_train=4"
                " --set data.n_test=0",
                dir)
                .code == 0);
    REQUIRE(run("pretrain --data '" + d + "' --out '" + fx + "' --set pretrain.epochs=1", dir).code == 0);
    const Run r = run("train --data '" + d + "' --extractor '" + fx + "' --out '" + (dir / "run").string() +
                          "' --set train.learning_rate=1e300 --set train.weight_decay=0 --set train.max_epochs=3"
                          " --set train.refit_head=false --set model.d=8",
                      dir);
    CHECK(r.code == 2);
    CHECK(fs::exists(dir / "run" / "last_good" / "model.txt"));
}
