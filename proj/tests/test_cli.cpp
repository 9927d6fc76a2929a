#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sae/cli.hpp"
#include "sae/sae.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result call(std::vector<std::string> args) {
  args.insert(args.begin(), "sae");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = sae::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("sae_cli_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                                       ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string path(const std::string& name) const { return (dir / name).string(); }

  void make_population() {
    const auto r = call({"gen-pop", "--out", path("pop.csv"), "--alloc-out", path("alloc.csv"), "--N", "5000", "--domains", "5",
                         "--gross-outliers", "2", "--seed", "4"});
    ASSERT_EQ(r.code, 0) << r.err;
  }

  fs::path dir;
};

}  // namespace

TEST_F(Cli, HelpExitsZero) {
  const auto r = call({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("simulate"), std::string::npos);
  EXPECT_EQ(call({"sweep", "--help"}).code, 0);
}

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(call({}).code, 1);
  EXPECT_EQ(call({"no-such-command"}).code, 1);
  EXPECT_EQ(call({"simulate", "--out", path("r.csv")}).code, 1);
  make_population();
  const auto r = call({"simulate", "--pop", path("pop.csv"), "--out", path("r.csv"), "-K", "2", "--estimators", "ht,bogus"});
  EXPECT_EQ(r.code, 1) << r.err;
  EXPECT_FALSE(fs::exists(path("r.csv")));
  EXPECT_EQ(call({"gen-pop", "--out", path("x.csv"), "--domains", "3", "--gross-outliers", "4"}).code, 1);
}

TEST_F(Cli, DataErrorsExitTwo) {
  EXPECT_EQ(call({"simulate", "--pop", path("missing.csv"), "--out", path("r.csv"), "-K", "2"}).code, 2);
  {
    std::ofstream bad(path("bad.csv"));
    bad << "id,ind,sc,wp,tax1,tto\n1,A,9,1,1,1\n";
  }
  EXPECT_EQ(call({"diagnose", "--pop", path("bad.csv"), "--out", path("d.csv")}).code, 2);
}

TEST_F(Cli, EndToEnd) {
  make_population();
  const sae::Population pop = sae::load_population(path("pop.csv"));
  EXPECT_EQ(pop.size(), 5000u);
  EXPECT_EQ(pop.domain_count(), 5u);

  ASSERT_EQ(call({"sample", "--pop", path("pop.csv"), "--alloc", path("alloc.csv"), "--out", path("s.csv"), "--seed", "9"}).code, 0);
  auto r = call({"estimate", "--pop", path("pop.csv"), "--sample", path("s.csv"), "--method", "ht,greg,mqwr", "--out", path("e.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream est(slurp(path("e.csv")));
  std::string line;
  std::size_t rows = 0;
  std::getline(est, line);
  EXPECT_EQ(line, "estimator,domain,estimate,n_sample,boundary,failed");
  while (std::getline(est, line)) rows += !line.empty();
  EXPECT_EQ(rows, 15u);

  r = call({"simulate", "--pop", path("pop.csv"), "--alloc", path("alloc.csv"), "--out", path("r.csv"), "-K", "4", "--estimators",
            "ht,greg,mq,mqcdw", "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = sae::parse_report_csv(slurp(path("r.csv")));
  std::size_t domain_rows = 0;
  for (const auto& row : report) {
    if (row.domain.rfind("ind", 0) != 0) continue;
    ++domain_rows;
    EXPECT_TRUE(std::isfinite(row.truth));
    EXPECT_TRUE(std::isfinite(row.rrmse)) << row.estimator << ' ' << row.domain;
    EXPECT_EQ(row.failures, 0);
  }
  EXPECT_EQ(domain_rows, 4u * 5u);

  ASSERT_EQ(call({"diagnose", "--pop", path("pop.csv"), "--out", path("d.csv"), "--qq-out", path("q.csv")}).code, 0);
  ASSERT_EQ(call({"reduce-pop", "--pop", path("pop.csv"), "--out", path("red.csv"), "--top-k", "2"}).code, 0);
  EXPECT_EQ(sae::load_population(path("red.csv")).size(), 4998u);
  ASSERT_EQ(call({"sweep", "--pop", path("pop.csv"), "--alloc", path("alloc.csv"), "--out", path("w.csv"), "-K", "2",
                  "--b-phi-grid", "0.5,1,2"})
                .code,
            0);
  ASSERT_EQ(call({"bootstrap-mse", "--pop", path("pop.csv"), "--sample", path("s.csv"), "--alloc", path("alloc.csv"), "--out",
                  path("b.csv"), "-B", "2", "-L", "2"})
                .code,
            0);
  EXPECT_FALSE(slurp(path("b.csv")).empty());
}

TEST_F(Cli, ByteIdenticalAcrossRunsAndThreads) {
  make_population();
  const std::vector<std::string> base = {"simulate", "--pop", path("pop.csv"), "--alloc", path("alloc.csv"), "-K", "6",
                                         "--estimators", "ht,greg,eblup,mqwr", "--seed", "11"};
  auto with = [&](const std::string& out, const std::string& threads) {
    auto a = base;
    a.insert(a.end(), {"--out", path(out), "--threads", threads});
    return call(a).code;
  };
  ASSERT_EQ(with("a.csv", "1"), 0);
  ASSERT_EQ(with("b.csv", "1"), 0);
  ASSERT_EQ(with("c.csv", "3"), 0);
  const auto a = slurp(path("a.csv"));
  EXPECT_EQ(a, slurp(path("b.csv")));
  EXPECT_EQ(a, slurp(path("c.csv")));
}

#ifdef SAE_CLI_PATH
TEST_F(Cli, BinaryHelp) {
  const std::string cmd = std::string("\"") + SAE_CLI_PATH + "\" --help > \"" + path("help.txt") + "\"";
  EXPECT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_NE(slurp(path("help.txt")).find("gen-pop"), std::string::npos);
}
#endif
