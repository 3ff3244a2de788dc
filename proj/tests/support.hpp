#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <unistd.h>

#include "langemb/config.hpp"
#include "langemb/random.hpp"
#include "langemb/tensor.hpp"

namespace langemb::testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("langemb_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0,
                            bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12) per
/// input, using central differences with step h. Returns the worst ratio.
/// With max_coords > 0, each input is checked on that many seeded random
/// coordinates instead of all of them.
inline double gradient_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                             double h = 1e-5, std::size_t max_coords = 0) {
  Rng pick(0x6c6dULL);
  for (auto& t : inputs) t.zero_grad();
  backward(f());
  double worst = 0.0;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    double diff = 0.0, na = 0.0, nn = 0.0;
    auto data = t.mutable_data();
    std::vector<std::size_t> coords(data.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords > 0 && coords.size() > max_coords) {
      pick.shuffle(std::span(coords));
      coords.resize(max_coords);
    }
    for (std::size_t i : coords) {
      const double keep = data[i];
      double plus, minus;
      {
        NoGradGuard g;
        data[i] = keep + h;
        plus = f().item();
        data[i] = keep - h;
        minus = f().item();
      }
      data[i] = keep;
      const double numeric = (plus - minus) / (2.0 * h);
      diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      na += analytic[i] * analytic[i];
      nn += numeric * numeric;
    }
    const double denom = std::max(std::sqrt(na) + std::sqrt(nn), 1e-12);
    worst = std::max(worst, std::sqrt(diff) / denom);
    t.zero_grad();
  }
  return worst;
}

/// A corpus small enough for unit tests: 3 seen + 1 held-out language,
/// 3 speakers each, 40-frame utterances.
inline TrainConfig small_config() {
  TrainConfig c;
  c.corpus.n_seen_languages = 3;
  c.corpus.n_unseen_languages = 1;
  c.corpus.speakers_per_language = 3;
  c.corpus.phonemes_per_language = 4;
  c.corpus.train_per_speaker = 6;
  c.corpus.eval_per_speaker = 4;
  c.corpus.frames = 40;
  c.pretrain_steps = 40;
  c.pretrain_accuracy_gate = 0.0;
  c.stage1_steps = 30;
  c.stage2_steps = 20;
  c.batch_size = 4;
  c.low_resource_budget = 6;
  c.ablation_budgets = {6};
  c.log_every = 5;
  c.probe.steps = 50;
  return c;
}

}  // namespace langemb::testing
