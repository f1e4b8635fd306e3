#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <string>

#include <gtest/gtest.h>

#include "oneactor/io.hpp"

namespace fs = std::filesystem;
using namespace oneactor;

namespace {

struct Run {
    int code = -1;
    std::string output;
};

/// Runs the CLI with stderr folded into the captured output.
Run run(const std::string& args) {
    const std::string cmd = std::string(ONEACTOR_CLI) + " " + args + " 2>&1";
    Run r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    while (std::fgets(buf, sizeof buf, p)) r.output += buf;
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("oneactor_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        write_text_file(dir_ / "cfg.json", R"({
  "schedule": {"kind": "linear_beta", "T": 20},
  "train": {"steps": 30, "batch_size": 8, "hidden": [16, 16], "feature_layer": 1},
  "tune": {"max_steps": 8, "min_steps": 0, "width": 8, "blocks": 1},
  "guidance": {"steps": 10, "window": [1, 6]},
  "eval": {"n_samples": 4, "seeds": 1}
})");
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string base(const std::string& out) const {
        return "--config " + (dir_ / "cfg.json").string() + " --out " + (dir_ / out).string() + " ";
    }
    std::string file(const std::string& rel) const { return read_text_file(dir_ / rel); }

    fs::path dir_;
};

} // namespace

TEST_F(Cli, MakeWorldIsDeterministic) {
    ASSERT_EQ(run(base("a") + "--seed 7 make-world").code, 0);
    ASSERT_EQ(run(base("b") + "--seed 7 make-world").code, 0);
    ASSERT_EQ(run(base("c") + "--seed 8 make-world").code, 0);
    EXPECT_EQ(file("a/world.json"), file("b/world.json"));
    EXPECT_NE(file("a/world.json"), file("c/world.json"));
}

TEST_F(Cli, ErrorsMapToExitCodes) {
    EXPECT_EQ(run("").code, 1);
    const auto missing = run(base("a") + "make-world --spec " + (dir_ / "nope.json").string());
    EXPECT_EQ(missing.code, 3);
    EXPECT_NE(missing.output.find("nope.json"), std::string::npos);

    write_text_file(dir_ / "bad.json", R"({"version": 1, "latent_dim": 2, "seed": 0, "subjects": "many", "contexts": []})");
    const auto bad = run(base("a") + "make-world --spec " + (dir_ / "bad.json").string());
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.output.find("subjects"), std::string::npos);

    write_text_file(dir_ / "broken.json", "{\"train\": {\"steps\": }");
    const auto broken = run("--config " + (dir_ / "broken.json").string() + " --out " + (dir_ / "a").string() + " make-world");
    EXPECT_EQ(broken.code, 1);
    EXPECT_NE(broken.output.find("line 1"), std::string::npos);
}

TEST_F(Cli, ResumedTrainingMatchesOneShot) {
    ASSERT_EQ(run(base("one") + "make-world").code, 0);
    ASSERT_EQ(run(base("two") + "make-world").code, 0);
    ASSERT_EQ(run(base("one") + "train-base").code, 0);
    ASSERT_EQ(run(base("two") + "train-base --stop-at 13").code, 0);
    ASSERT_EQ(run(base("two") + "train-base --resume " + (dir_ / "two" / "denoiser.json").string()).code, 0);
    EXPECT_EQ(file("one/denoiser.json"), file("two/denoiser.json"));
    EXPECT_EQ(file("one/train_loss.csv"), file("two/train_loss.csv"));
}

TEST_F(Cli, PipelineRunsAndReportsCallCounts) {
    ASSERT_EQ(run(base("p") + "make-world").code, 0);
    ASSERT_EQ(run(base("p") + "train-base").code, 0);
    const auto gb = run(base("p") + "gen-base --prompt hobbit");
    ASSERT_EQ(gb.code, 0) << gb.output;
    EXPECT_EQ(read_json_file(dir_ / "p" / "base_set.json").at("entries").size(), 11u);
    ASSERT_EQ(run(base("p") + "tune").code, 0);
    const auto three = run(base("p") + "sample --n 5 --context snow");
    ASSERT_EQ(three.code, 0) << three.output;
    EXPECT_NE(three.output.find("denoiser calls per step: 3 3 3 3 3 3 2 2 2 2"), std::string::npos) << three.output;
    const auto two = run(base("p") + "sample --n 5 --context snow --eta2 0");
    EXPECT_NE(two.output.find("denoiser calls per step: 2 2 2 2 2 2 2 2 2 2"), std::string::npos) << two.output;
    EXPECT_TRUE(fs::exists(dir_ / "p" / "samples.json"));
    ASSERT_EQ(run(base("p") + "eval").code, 0);
    EXPECT_TRUE(fs::exists(dir_ / "p" / "report.csv"));
}
