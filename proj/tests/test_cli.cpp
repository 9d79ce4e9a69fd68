#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "test_util.hpp"

using cosa::testing::slurp;
using cosa::testing::TempDir;

namespace {

struct Result {
  int code = -1;
  std::string out;  // stdout and stderr
};

Result lab(const std::string& args) {
  const std::string cmd = std::string(COSA_LAB_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string tiny_config(const TempDir& d) {
  const auto path = d / "tiny.json";
  std::ofstream(path) << cosa::testing::tiny_train_config().to_json().dump(2);
  return path.string();
}

}  // namespace

TEST(Cli, GenCorpusDeterministicAndGuarded) {
  TempDir d("cli_gen");
  const auto a = (d / "a").string(), b = (d / "b").string();
  ASSERT_EQ(lab("gen-corpus --n 30 --seed 3 --out " + a).code, 0);
  ASSERT_EQ(lab("gen-corpus --n 30 --seed 3 --out " + b).code, 0);
  EXPECT_EQ(slurp(d / "a/samples.bin"), slurp(d / "b/samples.bin"));
  const auto again = lab("gen-corpus --n 30 --seed 3 --out " + a);
  EXPECT_EQ(again.code, 2);
  EXPECT_NE(again.out.find("--force"), std::string::npos);
  EXPECT_EQ(lab("gen-corpus --n 30 --seed 4 --out " + a + " --force").code, 0);
  const auto zero = lab("gen-corpus --n 0 --out " + (d / "z").string());
  EXPECT_EQ(zero.code, 2);
  EXPECT_NE(zero.out.find("--n"), std::string::npos);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(lab("").code, 2);
  EXPECT_EQ(lab("frobnicate").code, 2);
  EXPECT_EQ(lab("--help").code, 0);
  TempDir d("cli_use");
  EXPECT_EQ(lab("ablate depth --out " + (d / "s").string()).code, 2);
  const auto missing = lab("report /nonexistent/cosa_suite");
  EXPECT_EQ(missing.code, 3);
  EXPECT_NE(missing.out.find("/nonexistent/cosa_suite"), std::string::npos);
}

TEST(Cli, MalformedConfigNamesTheKey) {
  TempDir d("cli_cfg");
  const auto path = d / "bad.json";
  auto j = cosa::testing::tiny_train_config().to_json();
  j["base_lr"] = "fast";
  std::ofstream(path) << j.dump();
  const auto r = lab("train --config " + path.string() + " --out " + (d / "run").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("base_lr"), std::string::npos);
}

TEST(Cli, TrainEvalAndModeOverride) {
  TempDir d("cli_train");
  const auto cfg = tiny_config(d);
  const auto run = (d / "run").string();
  const auto r = lab("train --quiet --config " + cfg + " --mode sst --steps 2 --out " + run);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto resolved = nlohmann::json::parse(slurp(d / "run/config.json"));
  EXPECT_EQ(resolved.at("mode"), "sst");
  EXPECT_EQ(resolved.at("steps"), 2);
  EXPECT_EQ(lab("train --quiet --config " + cfg + " --steps 2 --out " + run).code, 2);

  const auto out = (d / "eval.json").string();
  const auto e = lab("eval " + run + " --out " + out);
  ASSERT_EQ(e.code, 0) << e.out;
  const auto metrics = nlohmann::json::parse(slurp(out));
  const auto final_metrics = nlohmann::json::parse(slurp(d / "run/final_metrics.json"));
  EXPECT_EQ(metrics, final_metrics);
  EXPECT_EQ(lab("eval " + (d / "nothing").string()).code, 3);
}

TEST(Cli, AblateAndReport) {
  TempDir d("cli_abl");
  const auto cfg = tiny_config(d);
  const auto suite = (d / "suite").string();
  const auto r = lab("ablate iterations --quiet --config " + cfg + " --steps 2 --out " + suite);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(std::filesystem::exists(d / "suite/suite.json"));
  EXPECT_TRUE(std::filesystem::exists(d / "suite/report.txt"));
  const auto a = lab("report " + suite + " --out " + (d / "ra").string());
  const auto b = lab("report " + suite + " --out " + (d / "rb").string());
  ASSERT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(slurp(d / "ra/series.csv"), slurp(d / "rb/series.csv"));
  EXPECT_EQ(slurp(d / "ra/report.txt"), slurp(d / "suite/report.txt"));
  EXPECT_EQ(lab("ablate iterations --quiet --config " + cfg + " --steps 2 --out " + suite).code, 2);
}

TEST(Cli, ParallelAblateMatchesSequential) {
  TempDir d("cli_par");
  const auto cfg = tiny_config(d);
  ASSERT_EQ(lab("ablate iterations --quiet --config " + cfg + " --steps 2 --out " + (d / "s1").string()).code, 0);
  ASSERT_EQ(
      lab("ablate iterations --quiet --parallel 2 --config " + cfg + " --steps 2 --out " + (d / "s2").string()).code,
      0);
  for (const char* run : {"sst", "cosa"}) {
    EXPECT_EQ(slurp(d / (std::string("s1/") + run + "/metrics.jsonl")),
              slurp(d / (std::string("s2/") + run + "/metrics.jsonl")))
        << run;
  }
}
