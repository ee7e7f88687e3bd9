#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "strata_bounds/cli.hpp"

using namespace strata_bounds;
namespace fs = std::filesystem;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("strata_bounds_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write(const std::string& name, const std::string& text) {
    const auto path = dir_ / name;
    std::ofstream(path) << text;
    return path.string();
  }

  std::string write(const std::string& name, const Dataset& data) {
    std::ostringstream s;
    write_csv(data, s);
    return write(name, s.str());
  }

  int run(std::vector<std::string> args) {
    args.insert(args.begin(), "strata_bounds");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    out_.str("");
    err_.str("");
    return cli::run(static_cast<int>(argv.size()), argv.data(), out_, err_);
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

}  // namespace

TEST_F(CliTest, HandExampleJson) {
  const auto input = write("hand.csv", oracle::hand_example());
  ASSERT_EQ(run({"estimate", "--input", input}), cli::kOk) << err_.str();
  const auto j = nlohmann::json::parse(out_.str());
  ASSERT_EQ(j["results"].size(), 3u);
  for (const auto& r : j["results"]) {
    EXPECT_EQ(r["delta_lb"], 0.0);
    EXPECT_EQ(r["delta_ub"], 2.0);
    EXPECT_EQ(r["q"], 0.25);
  }
  EXPECT_EQ(j["results"][0]["estimator"], "lee");
  EXPECT_TRUE(j["results"][0]["variance"].is_object());
  EXPECT_TRUE(j["results"][1]["variance"].is_null());
  EXPECT_EQ(j["results"][1]["aggregation_weight"], "stratum_size");
  EXPECT_EQ(j["n"], 20);
  EXPECT_EQ(j["equal_shares"], true);
}

TEST_F(CliTest, SampleFileFromRepository) {
  const std::string input = std::string(STRATA_BOUNDS_SAMPLES_DIR) + "/hand_example.csv";
  ASSERT_EQ(run({"estimate", "--input", input, "--estimator", "lee", "--variance", "none", "--format", "csv"}),
            cli::kOk);
  std::istringstream lines(out_.str());
  std::string header, row;
  std::getline(lines, header);
  std::getline(lines, row);
  EXPECT_EQ(header.rfind("estimator,delta_lb,delta_ub,", 0), 0u);
  EXPECT_EQ(row.rfind("lee,0,2,3.5,", 0), 0u);
}

TEST_F(CliTest, BlockWithOneArmIsInvalidInput) {
  std::vector<UnitRecord> recs = oracle::hand_example_records("a");
  recs.push_back(oracle::unit(1.0, 1, "z"));
  recs.push_back(oracle::unit(2.0, 1, "z"));
  const auto input = write("one_arm.csv", Dataset(recs));
  EXPECT_EQ(run({"estimate", "--input", input}), cli::kInvalid);
  EXPECT_NE(err_.str().find("'z'"), std::string::npos);
}

TEST_F(CliTest, LabelVarianceWithOneControlIsAnEstimationError) {
  std::vector<UnitRecord> recs = oracle::hand_example_records("a");
  recs.push_back(oracle::unit(1.0, 1, "b"));
  recs.push_back(oracle::unit(2.0, 1, "b"));
  recs.push_back(oracle::unit(1.5, 0, "b"));
  const auto input = write("label.csv", Dataset(recs));
  EXPECT_EQ(run({"estimate", "--input", input, "--estimator", "lee-ipw", "--variance", "label"}),
            cli::kEstimation);
  EXPECT_EQ(run({"estimate", "--input", input, "--estimator", "lee-ipw", "--variance", "design"}), cli::kOk);
}

TEST_F(CliTest, MalformedCsvReportsRow) {
  const auto input = write("bad.csv", "y,s,d,block\n1,1,1,a\n2,1,0,a\n3,1,1,\n");
  EXPECT_EQ(run({"estimate", "--input", input}), cli::kInvalid);
  EXPECT_NE(err_.str().find("row 4"), std::string::npos);
  EXPECT_EQ(run({"estimate", "--input", (dir_ / "missing.csv").string()}), cli::kInvalid);
}

TEST_F(CliTest, ArgumentErrorsAndHelp) {
  EXPECT_EQ(run({}), cli::kInvalid);
  EXPECT_EQ(run({"estimate"}), cli::kInvalid);
  EXPECT_EQ(run({"estimate", "--input", "x.csv", "--variance", "bogus"}), cli::kInvalid);
  EXPECT_EQ(run({"estimate", "--input", "x.csv", "--alpha", "0.7"}), cli::kInvalid);
  EXPECT_EQ(run({"--help"}), cli::kOk);
  EXPECT_NE(out_.str().find("estimate"), std::string::npos);
}

TEST_F(CliTest, ReverseMonotonicityNegatesSwappedBounds) {
  SplitMix64 rng(61);
  std::vector<UnitRecord> recs;
  for (int i = 0; i < 60; ++i) {
    const int d = i % 2;
    const bool sel = rng.uniform() < (d ? 0.6 : 0.9);
    recs.push_back(oracle::unit(sel ? std::optional<double>(rng.normal() + d) : std::nullopt, d,
                                "b" + std::to_string(i / 6)));
  }
  const Dataset data(recs);
  const auto input = write("reverse.csv", data);
  ASSERT_EQ(run({"estimate", "--input", input, "--estimator", "lee", "--reverse-monotonicity"}), cli::kOk)
      << err_.str();
  const auto j = nlohmann::json::parse(out_.str())["results"][0];
  const auto swapped = lee_bounds(data.with_arms_swapped());
  EXPECT_DOUBLE_EQ(j["delta_lb"].get<double>(), cli::number(-swapped.delta_ub).get<double>());
  EXPECT_DOUBLE_EQ(j["delta_ub"].get<double>(), cli::number(-swapped.delta_lb).get<double>());
  EXPECT_EQ(j["flags"]["arms_swapped"], true);
  const auto ci_lb = j["variance"]["ci_lb"];
  EXPECT_LE(ci_lb[0].get<double>(), j["delta_lb"].get<double>());
  EXPECT_GE(ci_lb[1].get<double>(), j["delta_lb"].get<double>());

  // without the flag the control arm's higher response rate is a clamp
  ASSERT_EQ(run({"estimate", "--input", input, "--estimator", "lee", "--variance", "none"}), cli::kOk);
  EXPECT_EQ(nlohmann::json::parse(out_.str())["results"][0]["flags"]["monotonicity_violated"], true);
}

TEST_F(CliTest, SimulateWritesReplicationsAndSummary) {
  const auto out = (dir_ / "mc").string();
  ASSERT_EQ(run({"simulate", "--dgp", "1", "--reps", "3", "--seed", "4", "--n", "200", "--out", out,
                 "--truth-draws", "100000", "--threads", "1"}),
            cli::kOk)
      << err_.str();
  EXPECT_TRUE(fs::exists(dir_ / "mc" / "replications.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "mc" / "summary.csv"));
  EXPECT_FALSE(fs::exists(dir_ / "mc" / "summary.csv.tmp"));
  EXPECT_NE(out_.str().find("lee/design"), std::string::npos);
  EXPECT_EQ(run({"simulate", "--dgp", "3", "--reps", "3", "--seed", "4", "--out", out}), cli::kInvalid);
  EXPECT_EQ(run({"simulate", "--dgp", "1", "--reps", "3", "--seed", "4", "--n", "201", "--out", out}),
            cli::kInvalid);
}
