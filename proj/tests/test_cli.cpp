#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "chartnet/config.hpp"
#include "chartnet/eval.hpp"

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

struct RunResult {
    int status;
    std::string out, err;
};

class Cli : public ::testing::Test {
  protected:
    fs::path dir;

    void SetUp() override {
        dir = fs::temp_directory_path() /
              ("chartnet_cli_" + std::to_string(::getpid()) + "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }

    fs::path write_config(const std::string& name, const std::string& text) {
        const auto p = dir / name;
        std::ofstream(p) << text;
        return p;
    }

    RunResult run(const std::string& args) {
        const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
        const std::string cmd = std::string(CHARTNET_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
        const int raw = std::system(cmd.c_str());
        return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
    }

    std::string circle_config(const std::string& extra = "") {
        return "task = msimclr\nbackbone = 16,16\nn_charts = 3\nchart_dim = 1\nbatch_size = 16\nsteps = 10\n"
               "dataset_size = 64\neval_size = 48\naugment_jitter_sigma = 0.05\noutput_dir = " +
               (dir / "run").string() + "\n" + extra;
    }
};

} // namespace

TEST_F(Cli, TrainWritesThreeArtifacts) {
    const auto cfg = write_config("c.conf", circle_config());
    const auto r = run("train " + cfg.string());
    EXPECT_EQ(r.status, 0) << r.err;
    EXPECT_TRUE(r.err.empty());
    for (const char* f : {"model.ckpt", "metrics.log", "config.resolved"}) EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
    const auto log = slurp(dir / "run" / "metrics.log");
    EXPECT_TRUE(log.starts_with("step,total,task,loss_z,loss_j,wall_ms\n"));
    EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 11);
    // the resolved config reproduces itself
    const auto resolved = slurp(dir / "run" / "config.resolved");
    EXPECT_EQ(chartnet::serialize_config(chartnet::build_config(chartnet::parse_config_text(resolved))), resolved);
}

TEST_F(Cli, MisspelledKeyFailsAndNamesIt) {
    const auto cfg = write_config("c.conf", circle_config("lamda1 = 2\n"));
    const auto r = run("train " + cfg.string());
    EXPECT_NE(r.status, 0);
    EXPECT_NE(r.err.find("lamda1"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(dir / "run" / "model.ckpt"));
}

TEST_F(Cli, RerunIsByteIdentical) {
    const auto cfg = write_config("c.conf", circle_config());
    ASSERT_EQ(run("train " + cfg.string()).status, 0);
    const auto first = slurp(dir / "run" / "metrics.log");
    const auto ckpt = slurp(dir / "run" / "model.ckpt");
    ASSERT_EQ(run("train " + cfg.string()).status, 0);
    EXPECT_EQ(slurp(dir / "run" / "metrics.log"), first);
    EXPECT_EQ(slurp(dir / "run" / "model.ckpt"), ckpt);
}

TEST_F(Cli, OverridesApply) {
    const auto cfg = write_config("c.conf", circle_config());
    const auto r = run("train " + cfg.string() + " --steps=3 --seed=5");
    ASSERT_EQ(r.status, 0) << r.err;
    const auto resolved = slurp(dir / "run" / "config.resolved");
    EXPECT_NE(resolved.find("steps = 3\n"), std::string::npos);
    EXPECT_NE(resolved.find("seed = 5\n"), std::string::npos);
}

TEST_F(Cli, EvalWritesReports) {
    const auto cfg = write_config("c.conf", circle_config());
    ASSERT_EQ(run("train " + cfg.string()).status, 0);
    const auto r = run("eval " + cfg.string());
    EXPECT_EQ(r.status, 0) << r.err;
    EXPECT_TRUE(r.err.empty());
    EXPECT_NE(r.out.find("recall@1"), std::string::npos);
    for (const char* f : {"retrieval.txt", "probe.txt", "diagnostics.txt", "codes.csv"})
        EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
    EXPECT_TRUE(slurp(dir / "run" / "retrieval.txt").starts_with("report: retrieval\nqueries: 48\n"));

    // the recall report equals the library computation on the written codes
    std::ifstream codes_in(dir / "run" / "codes.csv");
    const auto codes = chartnet::read_codes(codes_in);
    ASSERT_EQ(codes.size(), 48u);
    const auto held_out = chartnet::gen_circle(48, 0.0, 2);
    const std::vector<std::size_t> ks{1, 2, 4, 8};
    std::stringstream want;
    chartnet::write_report(want, chartnet::recall_at_k(codes, held_out.labels, ks));
    EXPECT_EQ(slurp(dir / "run" / "retrieval.txt"), want.str());

    // evaluation is reproducible
    const auto probe = slurp(dir / "run" / "probe.txt"), diag = slurp(dir / "run" / "diagnostics.txt");
    ASSERT_EQ(run("eval " + cfg.string()).status, 0);
    EXPECT_EQ(slurp(dir / "run" / "probe.txt"), probe);
    EXPECT_EQ(slurp(dir / "run" / "diagnostics.txt"), diag);
}

TEST_F(Cli, EvalRejectsArchitectureMismatch) {
    const auto cfg = write_config("c.conf", circle_config());
    ASSERT_EQ(run("train " + cfg.string()).status, 0);
    const auto r = run("eval " + cfg.string() + " --n_charts=4");
    EXPECT_NE(r.status, 0);
    EXPECT_NE(r.err.find("mismatch"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("n_charts"), std::string::npos) << r.err;
}

TEST_F(Cli, ExportVizNeedsTwoDimensionalCharts) {
    const auto cfg = write_config("c.conf", circle_config());
    ASSERT_EQ(run("train " + cfg.string()).status, 0);
    const auto r = run("export-viz " + cfg.string());
    EXPECT_NE(r.status, 0);
    EXPECT_NE(r.err.find("requires d=2"), std::string::npos) << r.err;
}

TEST_F(Cli, ExportVizWritesCsv) {
    const auto cfg = write_config("c.conf", circle_config("chart_dim = 2\n"));
    ASSERT_EQ(run("train " + cfg.string()).status, 0);
    const auto out = dir / "viz" / "points.csv";
    const auto r = run("export-viz " + cfg.string() + " --out " + out.string());
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_TRUE(r.err.empty());
    std::ifstream is(out);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "chart,x,y,label");
    std::size_t rows = 0;
    while (std::getline(is, line)) {
        ++rows;
        std::stringstream ss(line);
        std::string f;
        std::vector<double> v;
        while (std::getline(ss, f, ',')) v.push_back(std::stod(f));
        ASSERT_EQ(v.size(), 4u);
        EXPECT_GE(v[0], 1.0);
        EXPECT_LE(v[0], 3.0);
        for (int i : {1, 2}) {
            EXPECT_GE(v[i], 0.0);
            EXPECT_LE(v[i], 1.0);
        }
    }
    EXPECT_EQ(rows, 64u);
}

TEST_F(Cli, UnreadableConfigAndMissingSubcommand) {
    auto r = run("train " + (dir / "missing.conf").string());
    EXPECT_NE(r.status, 0);
    EXPECT_NE(r.err.find("cannot read"), std::string::npos);
    r = run("");
    EXPECT_NE(r.status, 0);
}

TEST_F(Cli, DivergenceIsReported) {
    const auto cfg = write_config("c.conf", circle_config("lr = 1e300\n"));
    const auto r = run("train " + cfg.string());
    EXPECT_NE(r.status, 0);
    EXPECT_NE(r.err.find("diverged at step"), std::string::npos) << r.err;
}

TEST_F(Cli, SinglePrecisionTraining) {
    const auto cfg = write_config("c.conf", circle_config("precision = float32\n"));
    const auto r = run("train " + cfg.string());
    EXPECT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(run("eval " + cfg.string()).status, 0);
}
