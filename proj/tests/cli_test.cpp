// SPDX-License-Identifier: Apache-2.0
//
// Drives the installed CLI binary (path in TSPT_CLI) and checks the
// documented exit-code and output contracts.
#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "tspt/container.hpp"
#include "tspt/random.hpp"

namespace {

struct RunResult {
    int exit_code = -1;
    std::string out;
};

RunResult run(const std::string& args) {
    const char* bin = std::getenv("TSPT_CLI");
    if (bin == nullptr) {
        ADD_FAILURE() << "TSPT_CLI not set";
        return {};
    }
    const std::string cmd = std::string(bin) + " " + args + " 2>&1";
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (pipe == nullptr) {
        ADD_FAILURE() << "popen failed";
        return {};
    }
    RunResult r;
    std::array<char, 4096> buf;
    while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe))
        r.out += buf.data();
    const int status = ::pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = std::filesystem::temp_directory_path() /
               ("tspt_cli_" + std::to_string(::getpid()) + "_" +
                ::testing::UnitTest::GetInstance()->current_test_info()->name());
        std::filesystem::create_directories(dir_);
    }
    void TearDown() override { std::filesystem::remove_all(dir_); }
    std::string path(const std::string& name) const {
        return (dir_ / name).string();
    }
    void write_config(const std::string& name, const std::string& body) {
        std::ofstream out(path(name));
        out << body;
    }
    std::filesystem::path dir_;
};

double max_weight_diff(const tspt::EncoderWeights& a,
                       const tspt::EncoderWeights& b) {
    double m = 0.0;
    for (int l = 0; l < a.layers; ++l) {
        m = std::max(m, (a.layer[l].q - b.layer[l].q).cwiseAbs().maxCoeff());
        m = std::max(m, (a.layer[l].up - b.layer[l].up).cwiseAbs().maxCoeff());
        m = std::max(m,
                     (a.layer[l].down - b.layer[l].down).cwiseAbs().maxCoeff());
    }
    return m;
}

}  // namespace

TEST_F(CliTest, CountParamsPinnedValues) {
    RunResult r = run("count-params --method lora-pt --d 768 --layers 12 --rank 1");
    EXPECT_EQ(r.exit_code, 0);
    EXPECT_EQ(r.out, "165960\n");

    r = run("count-params --method lora --d 768 --layers 12 --rank 32");
    EXPECT_EQ(r.exit_code, 0);
    EXPECT_EQ(r.out, "5308416\n");
}

TEST_F(CliTest, CountParamsRejectsRankZero) {
    RunResult r = run("count-params --method lora-pt --rank 0");
    EXPECT_EQ(r.exit_code, 3);
}

TEST_F(CliTest, CountParamsRejectsUnknownMethod) {
    RunResult r = run("count-params --method tucker --rank 1");
    EXPECT_EQ(r.exit_code, 3);
}

TEST_F(CliTest, NoSubcommandIsBadArgs) {
    EXPECT_EQ(run("").exit_code, 3);
}

TEST_F(CliTest, VerifySuitesPass) {
    EXPECT_EQ(run("verify --suite tprod --seed 7").exit_code, 0);
    EXPECT_EQ(run("verify --suite tsvd --seed 7").exit_code, 0);
    RunResult grad = run("verify --suite grad --seed 7");
    EXPECT_EQ(grad.exit_code, 0);
    EXPECT_NE(grad.out.find("max rel err"), std::string::npos);
}

TEST_F(CliTest, VerifyUnknownSuiteIsBadArgs) {
    EXPECT_EQ(run("verify --suite nope").exit_code, 3);
}

TEST_F(CliTest, DecomposeMergeRoundTripF32) {
    ASSERT_EQ(run("init-encoder --d 8 --layers 2 --seed 5 --out " +
                  path("ck.tspt") + " --dtype f64")
                  .exit_code,
              0);
    RunResult dec = run("decompose --in " + path("ck.tspt") + " --rank 2 --out " +
                        path("ad.tspt"));
    ASSERT_EQ(dec.exit_code, 0);
    EXPECT_NE(dec.out.find("trainable parameters: 600"), std::string::npos)
        << dec.out;
    EXPECT_NE(dec.out.find("w_sa"), std::string::npos);

    ASSERT_EQ(run("merge --adapter " + path("ad.tspt") + " --out " +
                  path("merged.tspt"))
                  .exit_code,
              0);

    tspt::EncoderWeights original = tspt::read_checkpoint(path("ck.tspt"));
    tspt::EncoderWeights merged = tspt::read_checkpoint(path("merged.tspt"));
    double scale = 0.0;
    for (const auto& lw : original.layer)
        scale = std::max(scale, lw.up.cwiseAbs().maxCoeff());
    EXPECT_LE(max_weight_diff(original, merged), 1e-5 * std::max(scale, 1.0));

    EXPECT_EQ(run("inspect " + path("merged.tspt")).exit_code, 0);
    EXPECT_EQ(run("inspect " + path("ad.tspt")).exit_code, 0);
}

TEST_F(CliTest, DecomposeRankOutOfRange) {
    ASSERT_EQ(run("init-encoder --d 4 --layers 1 --seed 5 --out " +
                  path("ck.tspt"))
                  .exit_code,
              0);
    EXPECT_EQ(run("decompose --in " + path("ck.tspt") + " --rank 9 --out " +
                  path("ad.tspt"))
                  .exit_code,
              3);
}

TEST_F(CliTest, MalformedContainerIsExit2) {
    std::ofstream bad(path("bad.tspt"), std::ios::binary);
    bad << "garbage bytes, definitely not a container";
    bad.close();
    EXPECT_EQ(run("inspect " + path("bad.tspt")).exit_code, 2);
    EXPECT_EQ(run("decompose --in " + path("bad.tspt") + " --rank 1 --out " +
                  path("x.tspt"))
                  .exit_code,
              2);
    EXPECT_EQ(run("merge --adapter " + path("bad.tspt") + " --out " +
                  path("x.tspt"))
                  .exit_code,
              2);
    EXPECT_EQ(run("inspect " + path("missing.tspt")).exit_code, 2);
}

TEST_F(CliTest, SegMetricsIdenticalMasks) {
    tspt::Mask3D m(5, 5, 5);
    m.set(2, 2, 2, true);
    m.set(2, 2, 3, true);
    tspt::write_mask(path("a.tspt"), m);
    tspt::write_mask(path("b.tspt"), m);
    RunResult r = run("seg-metrics --pred " + path("a.tspt") + " --gt " +
                      path("b.tspt"));
    EXPECT_EQ(r.exit_code, 0);
    EXPECT_NE(r.out.find("dice=1 hd95=0"), std::string::npos) << r.out;
}

TEST_F(CliTest, SegMetricsDisjointMasks) {
    tspt::Mask3D a(5, 5, 5), b(5, 5, 5);
    a.set(0, 0, 0, true);
    b.set(4, 4, 4, true);
    tspt::write_mask(path("a.tspt"), a);
    tspt::write_mask(path("b.tspt"), b);
    RunResult r = run("seg-metrics --pred " + path("a.tspt") + " --gt " +
                      path("b.tspt"));
    EXPECT_EQ(r.exit_code, 0);
    EXPECT_NE(r.out.find("dice=0 "), std::string::npos) << r.out;
}

TEST_F(CliTest, SegMetricsPostprocessRemovesBlobAndVoidsHd95) {
    // 10-voxel blob at 1 mm^3 per voxel, removed by the 1000 mm^3 rule;
    // the prediction becomes empty so hd95 is undefined but dice prints.
    tspt::Mask3D pred(12, 12, 12);
    for (int i = 0; i < 10; ++i) pred.set(i, 0, 0, true);
    tspt::Mask3D gt(12, 12, 12);
    gt.set(11, 11, 11, true);
    tspt::write_mask(path("pred.tspt"), pred);
    tspt::write_mask(path("gt.tspt"), gt);
    RunResult r = run("seg-metrics --pred " + path("pred.tspt") + " --gt " +
                      path("gt.tspt") + " --postprocess 1000");
    EXPECT_EQ(r.exit_code, 4);
    EXPECT_NE(r.out.find("dice=0 hd95=undefined"), std::string::npos) << r.out;
}

TEST_F(CliTest, TrainToyRunsAndHalvesLoss) {
    write_config("toy.cfg",
                 "d = 8\nn_heads = 2\nlayers = 2\nseq_len = 4\nrank = 1\n"
                 "method = lora-pt\nlr0 = 0.001\ntotal_iters = 200\n"
                 "batch = 4\nseed = 7\ntask = regression\n");
    RunResult r = run("train-toy --config " + path("toy.cfg"));
    EXPECT_EQ(r.exit_code, 0);
    const auto ipos = r.out.find("initial_loss=");
    const auto fpos = r.out.find("final_loss=");
    ASSERT_NE(ipos, std::string::npos);
    ASSERT_NE(fpos, std::string::npos);
    const double initial = std::stod(r.out.substr(ipos + 13));
    const double final_loss = std::stod(r.out.substr(fpos + 11));
    EXPECT_LT(final_loss, 0.5 * initial) << r.out;
}

TEST_F(CliTest, TrainToyZeroItersIsBadConfig) {
    write_config("zero.cfg", "total_iters = 0\n");
    EXPECT_EQ(run("train-toy --config " + path("zero.cfg")).exit_code, 2);
}

TEST_F(CliTest, TrainToyUnknownKeyIsBadConfig) {
    write_config("junk.cfg", "decay_style = cosine\n");
    EXPECT_EQ(run("train-toy --config " + path("junk.cfg")).exit_code, 2);
}

TEST_F(CliTest, RankSweepEmitsWellFormedCsv) {
    write_config("sweep.cfg",
                 "d = 8\nn_heads = 2\nlayers = 2\nseq_len = 4\n"
                 "method = lora-pt\ntotal_iters = 10\nbatch = 4\nseed = 7\n");
    RunResult r = run("rank-sweep --config " + path("sweep.cfg") +
                      " --ranks 1,2,4 --out " + path("sweep.csv"));
    ASSERT_EQ(r.exit_code, 0);

    std::ifstream csv(path("sweep.csv"));
    std::string line;
    ASSERT_TRUE(std::getline(csv, line));
    EXPECT_EQ(line, "method,rank,params,final_loss,seed");
    int rows = 0;
    const long long expected[3] = {
        tspt::param_count(tspt::Method::LoraPT, 8, 2, 1),
        tspt::param_count(tspt::Method::LoraPT, 8, 2, 2),
        tspt::param_count(tspt::Method::LoraPT, 8, 2, 4)};
    while (std::getline(csv, line)) {
        ASSERT_LT(rows, 3);
        std::stringstream ss(line);
        std::string method, rank, params, loss, seed;
        ASSERT_TRUE(std::getline(ss, method, ','));
        ASSERT_TRUE(std::getline(ss, rank, ','));
        ASSERT_TRUE(std::getline(ss, params, ','));
        ASSERT_TRUE(std::getline(ss, loss, ','));
        ASSERT_TRUE(std::getline(ss, seed, ','));
        EXPECT_EQ(method, "lora-pt");
        EXPECT_EQ(std::stoll(params), expected[rows]);
        EXPECT_EQ(seed, "7");
        ++rows;
    }
    EXPECT_EQ(rows, 3);
}

TEST_F(CliTest, DecomposeFullRankLeavesNoResidual) {
    ASSERT_EQ(run("init-encoder --d 4 --layers 1 --seed 9 --out " +
                  path("ck.tspt") + " --dtype f64")
                  .exit_code,
              0);
    RunResult dec = run("decompose --in " + path("ck.tspt") + " --rank 4 --out " +
                        path("ad.tspt") + " --dtype f64");
    ASSERT_EQ(dec.exit_code, 0);
    // 4L*r*(2d+1) + 2L*r*(5d+1) at d=4, L=1, r=4.
    EXPECT_NE(dec.out.find("trainable parameters: 312"), std::string::npos)
        << dec.out;
    tspt::LoRAPTAdapter a = tspt::read_adapter(path("ad.tspt"));
    EXPECT_LE(tspt::fnorm(a.residual_sa), 1e-9);
    EXPECT_LE(tspt::fnorm(a.residual_up), 1e-9);
    EXPECT_LE(tspt::fnorm(a.residual_down), 1e-9);
}

TEST_F(CliTest, ThreadCapEnvVarAccepted) {
    // TSPT_THREADS parallelizes per-slice work; results are contractually
    // identical, so the suites must still pass.
    RunResult r = run("verify --suite tsvd --seed 3");
    ASSERT_EQ(r.exit_code, 0);
    const char* bin = std::getenv("TSPT_CLI");
    ASSERT_NE(bin, nullptr);
    RunResult threaded;
    {
        const std::string cmd = "TSPT_THREADS=4 " + std::string(bin) +
                                " verify --suite tsvd --seed 3 2>&1";
        FILE* pipe = ::popen(cmd.c_str(), "r");
        ASSERT_NE(pipe, nullptr);
        std::array<char, 4096> buf;
        while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe))
            threaded.out += buf.data();
        const int status = ::pclose(pipe);
        threaded.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }
    EXPECT_EQ(threaded.exit_code, 0);
    EXPECT_EQ(threaded.out, r.out);  // identical worst-case errors
}

TEST_F(CliTest, RankSweepDeterministicAcrossRuns) {
    write_config("det.cfg",
                 "d = 8\nn_heads = 2\nlayers = 2\nseq_len = 4\n"
                 "method = pissa\ntotal_iters = 8\nbatch = 4\nseed = 11\n");
    RunResult a = run("rank-sweep --config " + path("det.cfg") + " --ranks 1,2");
    RunResult b = run("rank-sweep --config " + path("det.cfg") + " --ranks 1,2");
    EXPECT_EQ(a.exit_code, 0);
    EXPECT_EQ(a.out, b.out);
}

TEST_F(CliTest, RankSweepBadRankIsBadArgs) {
    write_config("sweep.cfg", "d = 8\n");
    EXPECT_EQ(run("rank-sweep --config " + path("sweep.cfg") + " --ranks 0")
                  .exit_code,
              3);
}
