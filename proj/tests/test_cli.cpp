#include "lmdrop/io.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("lmdrop_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "params.csv") << "block,i,j,value\n"
                                          "beta,1,1,0.2\nbeta,2,1,-0.4\n"
                                          "zeta,1,1,-1\nzeta,2,1,1.5\nsigma2,1,1,0.3\n"
                                          "gamma,1,1,0.3\ngamma,2,1,0\n"
                                          "xi,1,1,1\nxi,2,1,3\n"
                                          "alpha0,1,1,0\npsi0,1,1,0.5\n"
                                          "alpha1,1,1,-1\nalpha1,2,1,1\npsi1,1,1,0.5\n"
                                          "pi,1,1,0.7\npi,1,2,0.3\npi,2,1,0.2\npi,2,2,0.8\n"
                                          "tau,1,1,0.6\ntau,2,1,0.4\n";
  }
  void TearDown() override { fs::remove_all(dir_); }

  CliResult invoke(const std::string& args) const {
    const fs::path err = dir_ / "stderr.txt";
    const std::string cmd = std::string(LMDROP_CLI_PATH) + " " + args + " > " + (dir_ / "stdout.txt").string() + " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(err);
    std::stringstream ss;
    ss << in.rdbuf();
    r.err = ss.str();
    return r;
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void simulate() const {
    ASSERT_EQ(invoke("simulate --params " + path("params.csv") + " --n 80 --T 4 --seed 5 --output-dir " + path("sim")).code, 0);
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, SimulateWritesPanelTruthAndParams) {
  simulate();
  EXPECT_TRUE(fs::exists(dir_ / "sim" / "panel.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "sim" / "truth.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "sim" / "run_config.ini"));
  std::ifstream a(path("params.csv")), b(path("sim/params.csv"));
  const auto pa = lmdrop::read_params_csv(a), pb = lmdrop::read_params_csv(b);
  EXPECT_EQ(pa.zeta, pb.zeta);
  EXPECT_EQ(pa.pi, pb.pi);
}

TEST_F(Cli, FitWritesOutputsAndRecordsSettings) {
  simulate();
  const auto r = invoke("fit --input " + path("sim/panel.csv") +
                     " --x time,b1 --w time --G 2 --K 2 --H 2 --starts 2 --workers 1 --tol 1e-4 --progress --output-dir " +
                     path("fit"));
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"params.csv", "estimates.csv", "trace.csv", "posterior_classes.csv", "posterior_states.csv",
                        "run_config.ini", "summary.ini"})
    EXPECT_TRUE(fs::exists(dir_ / "fit" / f)) << f;
  EXPECT_NE(r.err.find("\"iteration\""), std::string::npos);
  std::ifstream cfg(path("fit/run_config.ini"));
  std::stringstream ss;
  ss << cfg.rdbuf();
  EXPECT_NE(ss.str().find("starts=2"), std::string::npos);
  EXPECT_NE(ss.str().find("x=time,b1"), std::string::npos);
}

TEST_F(Cli, ConfigFileIsOverriddenByFlags) {
  simulate();
  std::ofstream(dir_ / "run.ini") << "[data]\ninput=" << path("sim/panel.csv") << "\nx=time\nw=time\n"
                                  << "[model]\nG=2\nK=1\nH=1\n[em]\nstarts=3\ntol=1e-4\nworkers=1\n";
  ASSERT_EQ(invoke("fit --config " + path("run.ini") + " --starts 1 --output-dir " + path("out")).code, 0);
  std::ifstream cfg(path("out/run_config.ini"));
  std::stringstream ss;
  ss << cfg.rdbuf();
  EXPECT_NE(ss.str().find("starts=1"), std::string::npos);
  EXPECT_NE(ss.str().find("G=2"), std::string::npos);
}

TEST_F(Cli, MissingColumnIsAnInputError) {
  simulate();
  const auto r = invoke("fit --input " + path("sim/panel.csv") + " --x age --output-dir " + path("bad"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("age"), std::string::npos);
}

TEST_F(Cli, UnparsableArgumentsAreInputErrors) {
  EXPECT_EQ(invoke("fit --G two").code, 1);
  EXPECT_EQ(invoke("").code, 1);
}

TEST_F(Cli, IterationLimitGivesExitTwo) {
  simulate();
  EXPECT_EQ(invoke("fit --input " + path("sim/panel.csv") + " --x time --G 2 --starts 1 --max-iter 2 --output-dir " + path("f"))
                .code,
            2);
}

TEST_F(Cli, SelectReplaysATable) {
  const auto r = invoke("select --replay " + std::string(LMDROP_TEST_DATA_DIR) + "/published_bic_grid.csv --output-dir " + path("sel"));
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream out(path("stdout.txt"));
  std::string line;
  std::getline(out, line);
  EXPECT_EQ(line, "selected G=5 K=3 H=2 BIC=5256.45");
  EXPECT_TRUE(fs::exists(dir_ / "sel" / "grid.csv"));
}

TEST_F(Cli, SelectFitsASmallGrid) {
  simulate();
  const auto r = invoke("select --input " + path("sim/panel.csv") +
                     " --x time --G 1-2 --K 1 --H 1 --starts 1 --workers 1 --tol 1e-4 --output-dir " + path("sel"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "sel" / "cells.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "sel" / "G2K1H1_params.csv"));
}

TEST_F(Cli, DecodeAndSeAtGivenParameters) {
  simulate();
  const std::string data = " --input " + path("sim/panel.csv") + " --x time,b1 --w time,b1 --params " + path("params.csv");
  ASSERT_EQ(invoke("decode" + data + " --output-dir " + path("dec")).code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "dec" / "posterior_states.csv"));
  const auto r = invoke("se" + data + " --output-dir " + path("se"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "se" / "covariance.csv"));
  // Parameters that do not match the covariates.
  EXPECT_EQ(invoke("decode --input " + path("sim/panel.csv") + " --x time --params " + path("params.csv") +
                " --output-dir " + path("d2"))
                .code,
            1);
}

TEST_F(Cli, SensitivityComparesWithTheIgnorableFit) {
  simulate();
  const auto r = invoke("sensitivity --input " + path("sim/panel.csv") +
                     " --x time --w time --G 2 --K 2 --H 2 --starts 1 --workers 1 --tol 1e-4 --output-dir " + path("sens"));
  EXPECT_TRUE(r.code == 0 || r.code == 2) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "sens" / "sensitivity.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "sens" / "mar_params.csv"));
}
