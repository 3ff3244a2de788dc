#include <cmath>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "langemb/training.hpp"
#include "support.hpp"

namespace langemb {
namespace {

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<double> w{0.0};
  const std::vector<double> g{1.0};
  AdamState s;
  AdamOptions o;
  o.learning_rate = 0.1;
  adam_step(w, g, s, o);
  EXPECT_NEAR(w[0], -0.1 * (1.0 / (1.0 + 1e-8)), 1e-15);
  EXPECT_EQ(s.t, 1);
}

TEST(Adam, ZeroGradientLeavesParameter) {
  std::vector<double> w{0.25, -3.0};
  const std::vector<double> g{0.0, 0.0};
  AdamState s;
  adam_step(w, g, s, AdamOptions{});
  EXPECT_EQ(w[0], 0.25);
  EXPECT_EQ(w[1], -3.0);
}

TEST(Adam, TwoStepsMatchScalarOracle) {
  const AdamOptions o{0.01, 0.9, 0.999, 1e-8};
  std::vector<double> w{0.5};
  AdamState s;
  const double g1 = 0.3, g2 = -1.7;
  adam_step(w, std::vector<double>{g1}, s, o);
  adam_step(w, std::vector<double>{g2}, s, o);

  long double p = 0.5L, m = 0, v = 0;
  int t = 0;
  for (long double g : {static_cast<long double>(g1), static_cast<long double>(g2)}) {
    ++t;
    m = 0.9L * m + 0.1L * g;
    v = 0.999L * v + 0.001L * g * g;
    const long double mh = m / (1 - std::pow(0.9L, t));
    const long double vh = v / (1 - std::pow(0.999L, t));
    p -= 0.01L * mh / (std::sqrt(vh) + 1e-8L);
  }
  EXPECT_NEAR(w[0], static_cast<double>(p), 1e-12);
}

TEST(Adam, RejectsMismatchedGradient) {
  std::vector<double> w{0.0, 0.0};
  const std::vector<double> g{1.0};
  AdamState s;
  EXPECT_THROW(adam_step(w, g, s, AdamOptions{}), ShapeError);
}

TEST(Adam, OnlyOwnedTensorsMove) {
  Tensor a({2}, {1.0, 2.0}, true), b({2}, {3.0, 4.0}, true);
  Adam opt({a}, AdamOptions{});
  backward(sum(add(mul(a, a), mul(b, b))));
  opt.step();
  EXPECT_NE(a[0], 1.0);
  EXPECT_EQ(b[0], 3.0);
  EXPECT_EQ(b[1], 4.0);
}

TEST(BatchSampler, EpochsArePermutations) {
  BatchSampler s(10, 5, 3);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::set<std::size_t> seen;
    for (int b = 0; b < 2; ++b)
      for (std::size_t i : s.next()) seen.insert(i);
    EXPECT_EQ(seen.size(), 10u);
  }
  BatchSampler x(7, 3, 9), y(7, 3, 9);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(x.next(), y.next());
  EXPECT_EQ(BatchSampler(3, 8, 1).next().size(), 3u);
  EXPECT_THROW(BatchSampler(0, 4, 1), std::invalid_argument);
}

TEST(GrlSchedule, RampsLinearly) {
  TrainConfig c;
  c.grl_lambda = 2.0;
  EXPECT_EQ(detail::grl_lambda_at(c, 1), 2.0);
  c.grl_ramp_steps = 100;
  EXPECT_DOUBLE_EQ(detail::grl_lambda_at(c, 25), 0.5);
  EXPECT_EQ(detail::grl_lambda_at(c, 400), 2.0);
}

class TrainingFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testing::TempDir("training");
    cfg_ = testing::small_config();
    build_corpus(cfg_, dir_->path() / "data");
    corpus_ = new Corpus(load_corpus(dir_->path() / "data"));
    ModelGraph m(dims(), cfg_.seed);
    pretrain_ = pretrain_encoder(cfg_, *corpus_, m);
    save_checkpoint(m, encoder_path());
  }
  static void TearDownTestSuite() {
    delete corpus_;
    delete dir_;
  }

  static ModelDims dims() { return ModelDims::from_corpus(cfg_.corpus); }
  static std::filesystem::path encoder_path() { return dir_->path() / "encoder.ldck"; }

  static void load_pretrained(ModelGraph& m) { load_checkpoint(m, encoder_path()); }

  static inline testing::TempDir* dir_ = nullptr;
  static inline Corpus* corpus_ = nullptr;
  static inline TrainConfig cfg_;
  static inline StageResult pretrain_;
};

TEST_F(TrainingFixture, PretrainTouchesOnlyTheEncoder) {
  EXPECT_NE(pretrain_.hashes_before.at("encoder"), pretrain_.hashes_after.at("encoder"));
  for (const char* g : {"projection", "classifiers", "downstream"})
    EXPECT_EQ(pretrain_.hashes_before.at(g), pretrain_.hashes_after.at(g)) << g;
  EXPECT_GE(pretrain_.accuracy, 0.0);
  EXPECT_LE(pretrain_.accuracy, 1.0);
}

TEST_F(TrainingFixture, PretrainGateFailsLoudly) {
  TrainConfig c = cfg_;
  c.pretrain_steps = 1;
  c.pretrain_accuracy_gate = 1.0;
  ModelGraph m(dims(), c.seed);
  try {
    pretrain_encoder(c, *corpus_, m);
    FAIL() << "expected AccuracyGateError";
  } catch (const AccuracyGateError& e) {
    EXPECT_NE(std::string(e.what()).find("increase pretrain_steps"), std::string::npos);
  }
}

TEST_F(TrainingFixture, StageOneFreezesTheEncoder) {
  ModelGraph m(dims(), cfg_.seed);
  load_pretrained(m);
  const auto r = train_stage1(cfg_, *corpus_, m);
  EXPECT_EQ(r.hashes_before.at("encoder"), r.hashes_after.at("encoder"));
  for (const char* g : {"projection", "classifiers", "downstream"})
    EXPECT_NE(r.hashes_before.at(g), r.hashes_after.at(g)) << g;
  for (std::size_t i : r.training_indices)
    EXPECT_TRUE(corpus_->manifest.is_seen(corpus_->manifest.utterances[i].language));
  EXPECT_EQ(r.token_error_rate.size(), 3u);
  EXPECT_EQ(r.final_report.step, cfg_.stage1_steps);
}

TEST_F(TrainingFixture, StageOneRejectsUnfrozenEncoder) {
  TrainConfig c = cfg_;
  c.trainable_groups = {"encoder", "downstream"};
  ModelGraph m(dims(), c.seed);
  EXPECT_THROW(train_stage1(c, *corpus_, m), ConfigError);
}

TEST_F(TrainingFixture, StageTwoTrainsOnlyDownstreamOnUnseenData) {
  ModelGraph m(dims(), cfg_.seed);
  load_pretrained(m);
  train_stage1(cfg_, *corpus_, m);
  TrainConfig c = cfg_;
  c.stage = Stage::kLowResource;
  const auto r = train_stage2(c, *corpus_, m);
  for (const char* g : {"encoder", "projection", "classifiers"})
    EXPECT_EQ(r.hashes_before.at(g), r.hashes_after.at(g)) << g;
  EXPECT_NE(r.hashes_before.at("downstream"), r.hashes_after.at("downstream"));
  ASSERT_EQ(r.training_indices.size(), static_cast<std::size_t>(c.low_resource_budget));
  std::set<int> speakers;
  for (std::size_t i : r.training_indices) {
    const auto& e = corpus_->manifest.utterances[i];
    EXPECT_FALSE(corpus_->manifest.is_seen(e.language));
    EXPECT_EQ(e.split, "train");
    speakers.insert(e.speaker);
  }
  EXPECT_EQ(speakers.size(), 1u);
  ASSERT_EQ(r.token_error_rate.size(), 1u);
  EXPECT_EQ(r.token_error_rate.begin()->first, 3);
}

TEST_F(TrainingFixture, StageTwoRejectsUnfreezing) {
  for (const char* g : {"encoder", "projection", "classifiers"}) {
    TrainConfig c = cfg_;
    c.stage = Stage::kLowResource;
    c.trainable_groups = {g};
    ModelGraph m(dims(), c.seed);
    try {
      train_stage2(c, *corpus_, m);
      FAIL() << g;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(g), std::string::npos);
    }
  }
}

TEST_F(TrainingFixture, LowResourceSplitBounds) {
  const auto& m = corpus_->manifest;
  EXPECT_EQ(low_resource_split(m, 18).size(), 18u);
  EXPECT_THROW(low_resource_split(m, 19), ConfigError);
  const auto a = low_resource_split(m, 4), b = low_resource_split(m, 10);
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
}

TEST_F(TrainingFixture, TrainingIsDeterministic) {
  auto run = [&] {
    ModelGraph m(dims(), cfg_.seed);
    load_pretrained(m);
    const auto r = train_stage1(cfg_, *corpus_, m);
    std::string rows;
    for (const auto& rep : r.metrics) rows += format_metrics_row("x", rep) + "\n";
    return std::pair(detail::all_group_hashes(m), rows);
  };
  EXPECT_EQ(run(), run());
}

TEST_F(TrainingFixture, TaskLossFallsEarly) {
  TrainConfig c = cfg_;
  c.stage1_steps = 50;
  c.log_every = 1;
  ModelGraph m(dims(), c.seed);
  load_pretrained(m);
  const auto r = train_stage1(c, *corpus_, m);
  ASSERT_EQ(r.metrics.size(), 50u);
  double early = 0, late = 0;
  for (int i = 0; i < 10; ++i) {
    early += r.metrics[static_cast<std::size_t>(i)].l_task;
    late += r.metrics[static_cast<std::size_t>(40 + i)].l_task;
  }
  EXPECT_LT(late, early);
}

TEST_F(TrainingFixture, NonFiniteLossAbortsWithStep) {
  ModelGraph m(dims(), cfg_.seed);
  load_pretrained(m);
  m.param("projection.bias").mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train_stage1(cfg_, *corpus_, m);
    FAIL() << "expected TrainingAbort";
  } catch (const TrainingAbort& e) {
    EXPECT_EQ(e.step(), 1);
    EXPECT_NE(std::string(e.what()).find("stage 1"), std::string::npos);
  }
}

}  // namespace
}  // namespace langemb
