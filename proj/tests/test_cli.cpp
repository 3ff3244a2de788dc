// Drives the built langemb binary end to end on a tiny corpus.

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <map>

#include <gtest/gtest.h>

#include "langemb/pipeline.hpp"
#include "support.hpp"

#ifndef LANGEMB_CLI_PATH
#error "LANGEMB_CLI_PATH must point at the langemb executable"
#endif

namespace langemb {
namespace {

struct Result {
  int code = -1;
  std::string out;  // stdout and stderr interleaved
};

Result run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + "'" LANGEMB_CLI_PATH "' " + args + " 2>&1";
  Result r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::map<std::string, std::string> tree_hashes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = hash_file(e.path());
  return out;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::make_unique<testing::TempDir>(
        std::string("cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    config_ = dir_->path() / "small.json";
    write_file_text(config_, config_json_text(testing::small_config()));
  }
  std::string run_dir(const std::string& name) const { return (dir_->path() / name).string(); }

  std::unique_ptr<testing::TempDir> dir_;
  fs::path config_;
};

TEST_F(Cli, HelpListsEveryConfigKey) {
  const auto r = run_cli("--help");
  EXPECT_EQ(r.code, 0);
  std::vector<std::string> keys;
  std::function<void(const nlohmann::ordered_json&, const std::string&)> walk =
      [&](const nlohmann::ordered_json& j, const std::string& prefix) {
        for (const auto& [k, v] : j.items()) {
          if (v.is_object()) walk(v, prefix + k + ".");
          else keys.push_back(prefix + k);
        }
      };
  walk(nlohmann::ordered_json(TrainConfig{}), "");
  EXPECT_GT(keys.size(), 30u);
  for (const auto& k : keys) EXPECT_NE(r.out.find("  " + k + " = "), std::string::npos) << k;
  for (const char* sub : {"datagen", "pretrain-encoder", "train", "eval", "ablation", "plot",
                          "pipeline"})
    EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
  EXPECT_NE(run_cli("train --help").out.find("--from-scratch"), std::string::npos);
}

TEST_F(Cli, UsageAndConfigErrorsExitThree) {
  EXPECT_EQ(run_cli("").code, 3);
  EXPECT_EQ(run_cli("train --out " + run_dir("r")).code, 3);
  EXPECT_EQ(run_cli("train --stage 3 --out " + run_dir("r")).code, 3);

  const auto bad = dir_->path() / "bad.json";
  write_file_text(bad, R"({"learning_rat": 0.1})");
  const auto r = run_cli("datagen --out " + run_dir("r") + " --config " + bad.string());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.out.find("error[config]"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("learning_rat"), std::string::npos) << r.out;
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 1);

  EXPECT_EQ(run_cli("train --stage 1 --grl-lambda -1 --out " + run_dir("r")).code, 3);
}

TEST_F(Cli, MissingUpstreamArtifactExitsTwo) {
  const auto run = run_dir("run");
  auto r = run_cli("pretrain-encoder --out " + run);
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_NE(r.out.find("datagen"), std::string::npos) << r.out;
  ASSERT_EQ(run_cli("datagen --out " + run + " --config " + config_.string()).code, 0);
  r = run_cli("train --stage 2 --out " + run);
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_NE(r.out.find("error[missing_artifact]"), std::string::npos) << r.out;
  EXPECT_EQ(run_cli("train --stage 1 --out " + run).code, 2);
  EXPECT_EQ(run_cli("ablation --out " + run).code, 2);
  EXPECT_EQ(run_cli("plot --out " + run).code, 2);
}

TEST_F(Cli, DatagenIsReproducibleAndSeedable) {
  const auto a = run_dir("a"), b = run_dir("b"), c = run_dir("c"), d = run_dir("d");
  ASSERT_EQ(run_cli("datagen --out " + a + " --config " + config_.string()).code, 0);
  ASSERT_EQ(run_cli("datagen --out " + b + " --config " + config_.string()).code, 0);
  EXPECT_EQ(tree_hashes(a), tree_hashes(b));
  // Re-running into the same directory reproduces it.
  ASSERT_EQ(run_cli("datagen --out " + a + " --config " + config_.string()).code, 0);
  EXPECT_EQ(tree_hashes(a), tree_hashes(b));

  ASSERT_EQ(run_cli("datagen --out " + c + " --config " + config_.string(), "LD_RUN_SEED=11").code, 0);
  EXPECT_EQ(load_config_file(fs::path(c) / "config.json").seed, 11u);
  EXPECT_NE(tree_hashes(c), tree_hashes(a));
  ASSERT_EQ(run_cli("datagen --out " + d + " --seed 12 --config " + config_.string(),
                    "LD_RUN_SEED=11").code, 0);
  EXPECT_EQ(load_config_file(fs::path(d) / "config.json").seed, 12u);

  EXPECT_EQ(run_cli("datagen --out " + d, "LD_RUN_SEED=abc").code, 3);
}

TEST_F(Cli, StagesRunInOrder) {
  const auto run = run_dir("run");
  const fs::path root(run);
  ASSERT_EQ(run_cli("datagen --out " + run + " --config " + config_.string()).code, 0);
  auto r = run_cli("pretrain-encoder --out " + run);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(root / "checkpoints" / "encoder.ldck"));
  for (const char* sat : {"on", "off"}) {
    r = run_cli(std::string("train --stage 1 --sat ") + sat + " --out " + run);
    ASSERT_EQ(r.code, 0) << r.out;
  }
  r = run_cli("train --stage 2 --out " + run);
  ASSERT_EQ(r.code, 0) << r.out;
  r = run_cli("train --stage 2 --from-scratch --out " + run);
  ASSERT_EQ(r.code, 0) << r.out;
  r = run_cli("ablation --out " + run);
  ASSERT_EQ(r.code, 0) << r.out;
  r = run_cli("eval --out " + run);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(root / "eval_report.json"));
  EXPECT_TRUE(fs::exists(root / "summary.md"));
  EXPECT_TRUE(fs::exists(root / "metrics.csv"));

  const auto j = nlohmann::ordered_json::parse(read_file_text(root / "run.json"));
  for (const char* tag : {"pretrain", "stage1_sat_on", "stage1_sat_off", "stage2_sat_on_b6",
                          "stage2_scratch_b6"})
    EXPECT_TRUE(j.at("stages").contains(tag)) << tag;
  const auto& s1 = j.at("stages").at("stage1_sat_on");
  EXPECT_EQ(s1.at("group_hashes_before").at("encoder"), s1.at("group_hashes_after").at("encoder"));

  // Re-running a stage rewrites its metrics block and checkpoint identically.
  const auto before = tree_hashes(root / "checkpoints");
  const std::string metrics = read_file_text(root / "metrics.csv");
  ASSERT_EQ(run_cli("train --stage 1 --sat on --out " + run).code, 0);
  EXPECT_EQ(tree_hashes(root / "checkpoints"), before);
  EXPECT_EQ(read_file_text(root / "metrics.csv"), metrics);
  r = run_cli("plot --out " + run);
  EXPECT_EQ(r.code, 0) << r.out;
}

}  // namespace
}  // namespace langemb
