#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "rlsd_lab/report.hpp"

using namespace rlsd;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("rlsd_lab_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  CliResult cli(const std::string& args, const std::string& env = "") {
    std::string cmd = "cd '" + dir_.string() + "' && env -u RLSD_LAB_SEED " + env + " '" RLSD_LAB_CLI "' " + args +
                      " > stdout.txt 2> stderr.txt";
    int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(dir_ / "stdout.txt");
    r.err = slurp(dir_ / "stderr.txt");
    return r;
  }

  void write(const std::string& name, const std::string& text) {
    std::ofstream f(dir_ / name);
    f << text;
  }

  // Tiny run: a handful of instances and steps.
  void write_small_config(const std::string& name, int seed = 5) {
    write(name, R"({"schema_version": 1, "method": "rlsd", "steps": 3, "group_size": 4, "eval_every": 1, "seed": )" +
                    std::to_string(seed) + R"(, "suite": {"count": 8, "max_len": 6, "privileged_per_instance": 3},
                 "policy": {"k": 2, "buckets": 4}})");
  }

  fs::path dir_;
};

std::vector<MetricRecord> fake_records() {
  std::vector<MetricRecord> rs(3);
  for (int i = 0; i < 3; ++i) {
    rs[static_cast<std::size_t>(i)].step = i;
    rs[static_cast<std::size_t>(i)].kl = 0.5 - 0.1 * i;
    rs[static_cast<std::size_t>(i)].clip_fraction = i / 4.0;
    rs[static_cast<std::size_t>(i)].mean_reward = 1.0 / 3.0;
  }
  rs[2].heldout_accuracy = 0.25;
  rs[1].heldout_accuracy = 0.5;
  return rs;
}

}  // namespace

TEST(Series, ParseAndName) {
  for (Series s : kAllSeries) EXPECT_EQ(parse_series(to_string(s)), s);
  EXPECT_THROW(parse_series("loss"), std::invalid_argument);
}

TEST(Series, EmptyRunlogIsHeaderOnly) {
  std::ostringstream os;
  export_series({}, Series::kl, os);
  EXPECT_EQ(os.str(), "# schema=rlsd-lab-csv/1 series=kl\nstep,kl\n");
}

TEST(Series, RowsUseTwelveSignificantDigits) {
  std::ostringstream os;
  export_series(fake_records(), Series::reward, os);
  EXPECT_EQ(os.str(),
            "# schema=rlsd-lab-csv/1 series=reward\nstep,reward\n0,0.333333333333\n1,0.333333333333\n2,0.333333333333\n");
}

TEST(Spearman, Examples) {
  std::vector<double> up{0.1, 0.2, 0.5, 0.9}, down{3, 2, 1, 0}, flat{1, 1, 1};
  EXPECT_DOUBLE_EQ(spearman_vs_index(up), 1.0);
  EXPECT_DOUBLE_EQ(spearman_vs_index(down), -1.0);
  EXPECT_EQ(spearman_vs_index(flat), 0.0);
  EXPECT_EQ(spearman_vs_index(std::vector<double>{2.0}), 0.0);
  // ranks 0, 1.5, 1.5 against 0, 1, 2
  EXPECT_NEAR(spearman_vs_index(std::vector<double>{0, 1, 1}), std::sqrt(3.0) / 2.0, 1e-15);
}

TEST(Spearman, MatchesRankCountingAndIgnoresMonotoneMaps) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> level(0, 6);
  for (int trial = 0; trial < 200; ++trial) {
    std::size_t n = 2 + static_cast<std::size_t>(trial % 30);
    std::vector<double> y(n);
    for (auto& v : y) v = level(rng);
    // Rank by counting: below + (equal - 1) / 2, then Pearson against index.
    std::vector<double> rank(n);
    for (std::size_t i = 0; i < n; ++i) {
      double below = 0, equal = 0;
      for (double v : y) {
        below += v < y[i];
        equal += v == y[i];
      }
      rank[i] = below + (equal - 1) / 2;
    }
    double mr = 0, mi = (n - 1) / 2.0;
    for (double r : rank) mr += r / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sxy += (i - mi) * (rank[i] - mr);
      sxx += (i - mi) * (i - mi);
      syy += (rank[i] - mr) * (rank[i] - mr);
    }
    double expect = syy > 0 ? sxy / std::sqrt(sxx * syy) : 0.0;
    EXPECT_NEAR(spearman_vs_index(y), expect, 1e-12);
    std::vector<double> z(n);
    for (std::size_t i = 0; i < n; ++i) z[i] = std::exp(3 * y[i]) - 7;
    EXPECT_NEAR(spearman_vs_index(z), spearman_vs_index(y), 1e-12);
  }
}

TEST(Heatmap, SignsFollowTheAdvantage) {
  Rollout ro;
  ro.tokens = {3, 1, 4, 11};
  ro.student_lp = {-1.0, -0.2, -2.0, -0.1};
  ro.teacher_lp = {-0.1, -3.0, -2.0, -0.3};
  for (double A : {1.5, -0.8}) {
    CreditTrace tr{2, A, token_credit(ro, A, 0.2, 0.5)};
    std::ostringstream os;
    export_credit_heatmap(tr, os);
    std::istringstream in(os.str());
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line.rfind("# schema=rlsd-lab-csv/1 heatmap", 0), 0u);
    std::getline(in, line);
    EXPECT_EQ(line, "position,token,adv");
    int rows = 0;
    while (std::getline(in, line)) {
      double adv = std::stod(line.substr(line.rfind(',') + 1));
      EXPECT_EQ(adv > 0, A > 0) << line;
      EXPECT_NE(adv, 0.0);
      ++rows;
    }
    EXPECT_EQ(rows, 4);
  }
}

TEST(Ablation, ArmsAndSummary) {
  auto arms = ablation_arms(TrainerConfig{});
  ASSERT_EQ(arms.size(), 8u);
  EXPECT_EQ(arms[1].config.opsd_variant, OpsdVariant::teacher_top1);
  EXPECT_EQ(arms.back().config.method, Method::rlsd);
  auto s = summarize("x", fake_records());
  EXPECT_DOUBLE_EQ(s.leakage_rho, 0.0);
  EXPECT_EQ(s.kl_first, 0.4);
  EXPECT_EQ(s.heldout_peak, 0.5);
  EXPECT_EQ(s.heldout_peak_step, 1);
  EXPECT_EQ(s.heldout_last, 0.25);
}

TEST_F(Cli, UsageErrors) {
  auto r = cli("");
  EXPECT_EQ(r.code, 1);
  r = cli("frobnicate");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  r = cli("train");
  EXPECT_EQ(r.code, 1);
  r = cli("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("gen-suite"), std::string::npos);
}

TEST_F(Cli, BadConfigsNameTheProblem) {
  write("typo.json", R"({"schema_version": 1, "stepz": 3})");
  auto r = cli("train --config typo.json --out run");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("stepz"), std::string::npos);
  write("broken.json", "{\n  \"schema_version\": 1,\n  \"steps\": ,\n}\n");
  r = cli("train --config broken.json --out run");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("line 3"), std::string::npos) << r.err;
  r = cli("train --config missing.json --out run");
  EXPECT_EQ(r.code, 1);
}

TEST_F(Cli, TrainWritesRunAndIsReproducible) {
  write_small_config("c.json");
  auto a = cli("train --config c.json --out a");
  ASSERT_EQ(a.code, 0) << a.err;
  auto b = cli("train --config c.json --out b");
  ASSERT_EQ(b.code, 0) << b.err;
  for (const char* f : {"runlog.jsonl", "config.json", "checkpoint.txt", "reward.csv", "kl.csv", "entropy.csv",
                        "clip.csv", "leakage.csv", "rho.csv", "credit.csv", "heatmap_correct.csv"}) {
    ASSERT_TRUE(fs::exists(dir_ / "a" / f)) << f;
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
  }
  std::ifstream log(dir_ / "a" / "runlog.jsonl");
  EXPECT_EQ(read_runlog(log).size(), 4u);
  std::istringstream clip(slurp(dir_ / "a" / "clip.csv"));
  std::string line;
  std::getline(clip, line);
  std::getline(clip, line);
  while (std::getline(clip, line)) {
    double v = std::stod(line.substr(line.find(',') + 1));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST_F(Cli, SeedPrecedence) {
  write_small_config("c.json", 5);
  auto seed_of = [&](const std::string& run) {
    return nlohmann::json::parse(slurp(dir_ / run / "config.json"))["seed"].get<int>();
  };
  ASSERT_EQ(cli("train --config c.json --out cfg").code, 0);
  EXPECT_EQ(seed_of("cfg"), 5);
  ASSERT_EQ(cli("train --config c.json --out env", "RLSD_LAB_SEED=9").code, 0);
  EXPECT_EQ(seed_of("env"), 9);
  ASSERT_EQ(cli("train --config c.json --out flag --seed 11", "RLSD_LAB_SEED=9").code, 0);
  EXPECT_EQ(seed_of("flag"), 11);
  EXPECT_NE(slurp(dir_ / "cfg" / "runlog.jsonl"), slurp(dir_ / "env" / "runlog.jsonl"));
  auto bad = cli("train --config c.json --out x", "RLSD_LAB_SEED=abc");
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("RLSD_LAB_SEED"), std::string::npos);
}

TEST_F(Cli, ReportIsDeterministicAndValidated) {
  write_small_config("c.json");
  ASSERT_EQ(cli("train --config c.json --out run").code, 0);
  ASSERT_EQ(cli("report --runlog run/runlog.jsonl --out r1").code, 0);
  ASSERT_EQ(cli("report --runlog run/runlog.jsonl --out r2").code, 0);
  for (Series s : kAllSeries) {
    std::string f = std::string(to_string(s)) + ".csv";
    EXPECT_EQ(slurp(dir_ / "r1" / f), slurp(dir_ / "r2" / f));
    EXPECT_EQ(slurp(dir_ / "r1" / f), slurp(dir_ / "run" / f));
  }
  ASSERT_EQ(cli("report --runlog run/runlog.jsonl --out r3 --series kl").code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "r3" / "kl.csv"));
  EXPECT_FALSE(fs::exists(dir_ / "r3" / "rho.csv"));
  EXPECT_EQ(cli("report --runlog run/runlog.jsonl --out r4 --series loss").code, 1);
  EXPECT_EQ(cli("report --runlog nowhere.jsonl --out r5").code, 3);
}

TEST_F(Cli, OutputErrorsExitThree) {
  write_small_config("c.json");
  write("blocker", "not a directory");
  EXPECT_EQ(cli("train --config c.json --out blocker/run").code, 3);
}

TEST_F(Cli, GenSuiteRoundTrips) {
  write(
      "c.json",
      R"({"schema_version": 1, "suite": {"count": 6, "family": "hidden-rule-sequence"}})");
  auto r = cli("gen-suite --config c.json --out suite.txt");
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(dir_ / "suite.txt");
  auto suite = read_suite(in, Vocab{12, 11});
  EXPECT_EQ(suite.size(), 6u);
  SuiteConfig sc;
  sc.count = 6;
  sc.family = "hidden-rule-sequence";
  std::ostringstream expect;
  write_suite(make_suite(sc), expect);
  EXPECT_EQ(slurp(dir_ / "suite.txt"), expect.str());
  ASSERT_EQ(cli("gen-suite --config c.json --out other.txt --seed 99").code, 0);
  EXPECT_NE(slurp(dir_ / "other.txt"), expect.str());
}
