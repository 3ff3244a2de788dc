#pragma once

// Optimizer and the training protocol:
//
//   pretrain_encoder  encoder + throwaway head on language ID (seen languages)
//   train_stage1      projection, classifiers, phoneme head; encoder frozen
//   train_stage2      phoneme head only, on the held-out language's budget
//
// Freezing is structural: the optimizer is only ever handed the tensors of
// the stage's trainable groups.

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "langemb/config.hpp"
#include "langemb/eval.hpp"
#include "langemb/losses.hpp"
#include "langemb/model.hpp"
#include "langemb/random.hpp"
#include "langemb/synthdata.hpp"
#include "langemb/tensor.hpp"

namespace langemb {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long t = 0;
};

/// One bias-corrected Adam update of `param` in place.
inline void adam_step(std::span<double> param, std::span<const double> grad,
                      AdamState& state, const AdamOptions& opt) {
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  if (grad.size() != param.size() || state.m.size() != param.size() ||
      state.v.size() != param.size()) {
    throw ShapeError("adam_step: parameter of " + std::to_string(param.size()) +
                     " values, gradient of " + std::to_string(grad.size()) +
                     ", state of " + std::to_string(state.m.size()));
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * grad[i];
    state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    param[i] -= opt.learning_rate * mhat / (std::sqrt(vhat) + opt.eps);
  }
}

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options)
      : params_(std::move(params)), states_(params_.size()), options_(options) {}

  /// Updates every parameter from its accumulated gradient (zero if absent).
  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (p.has_grad()) {
        adam_step(p.mutable_data(), p.grad(), states_[i], options_);
      } else {
        const std::vector<double> zeros(p.numel(), 0.0);
        adam_step(p.mutable_data(), zeros, states_[i], options_);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<AdamState> states_;
  AdamOptions options_;
};

inline AdamOptions adam_options(const TrainConfig& c) {
  return {c.learning_rate, c.adam_beta1, c.adam_beta2, c.adam_eps};
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Epoch-wise seeded shuffles over [0, n); batches never straddle epochs.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
      : n_(n), batch_(std::min(batch, n)), rng_(seed) {
    if (n == 0) throw std::invalid_argument("BatchSampler: empty dataset");
  }

  std::vector<std::size_t> next() {
    if (pos_ + batch_ > order_.size()) {
      order_.resize(n_);
      for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
      rng_.shuffle(std::span(order_));
      pos_ = 0;
    }
    std::vector<std::size_t> out(order_.begin() + pos_, order_.begin() + pos_ + batch_);
    pos_ += batch_;
    return out;
  }

 private:
  std::size_t n_;
  std::size_t batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Results and errors
// ---------------------------------------------------------------------------

class TrainingAbort : public std::runtime_error {
 public:
  TrainingAbort(const std::string& what, long step, LossReport last_finite)
      : std::runtime_error(what), step_(step), last_finite_(last_finite) {}
  long step() const { return step_; }
  const LossReport& last_finite() const { return last_finite_; }

 private:
  long step_;
  LossReport last_finite_;
};

class AccuracyGateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StageResult {
  std::vector<LossReport> metrics;  // every log_every steps plus the last step
  LossReport final_report;
  std::map<std::string, std::string> hashes_before;  // group name -> hash
  std::map<std::string, std::string> hashes_after;
  std::map<int, double> token_error_rate;  // eval split, per language
  double accuracy = 0.0;                   // pretraining only
  std::vector<std::size_t> training_indices;
};

namespace detail {

inline std::map<std::string, std::string> all_group_hashes(const ModelGraph& m) {
  std::map<std::string, std::string> out;
  for (ParamGroup g : kAllGroups) out[group_name(g)] = m.group_hash(g);
  return out;
}

inline std::vector<Tensor> collect(const ModelGraph& m, const std::set<ParamGroup>& groups) {
  std::vector<Tensor> out;
  for (const auto& p : m.parameters())
    if (groups.count(p.group)) out.push_back(p.value);
  return out;
}

inline bool should_log(long step, long total, int every) {
  return step == 1 || step % every == 0 || step == total;
}

/// z_lang for each listed utterance, frozen encoder, no graph.
inline std::vector<std::vector<double>> cache_z(const ModelGraph& model,
                                                const Corpus& corpus,
                                                std::span<const std::size_t> indices) {
  NoGradGuard no_grad;
  std::vector<std::vector<double>> out;
  out.reserve(indices.size());
  for (std::size_t idx : indices) {
    const auto& u = corpus.utterances.at(idx);
    const Tensor z = model.encode(frames_tensor(u.features, u.frames, u.bins));
    out.emplace_back(z.data().begin(), z.data().end());
  }
  return out;
}

inline Tensor stack_rows(const std::vector<std::vector<double>>& rows,
                         std::span<const std::size_t> pick) {
  const std::size_t d = rows.at(pick[0]).size();
  std::vector<double> out;
  out.reserve(pick.size() * d);
  for (std::size_t i : pick) out.insert(out.end(), rows[i].begin(), rows[i].end());
  return Tensor({pick.size(), d}, std::move(out));
}

inline std::set<ParamGroup> resolve_trainable(const TrainConfig& cfg, Stage stage) {
  std::set<ParamGroup> groups;
  for (const auto& g : cfg.trainable_groups) groups.insert(group_from_name(g));
  if (stage == Stage::kMultilingual) {
    if (groups.empty())
      groups = {ParamGroup::kProjection, ParamGroup::kClassifiers, ParamGroup::kDownstream};
    if (groups.count(ParamGroup::kEncoder)) {
      throw ConfigError("config: stage 1 keeps the pretrained encoder frozen; "
                        "remove 'encoder' from trainable_groups");
    }
  } else {
    if (groups.empty()) groups = {ParamGroup::kDownstream};
    for (ParamGroup g : groups) {
      if (g != ParamGroup::kDownstream) {
        throw ConfigError(std::string("config: stage 2 only trains the downstream "
                                      "group; cannot unfreeze '") +
                          group_name(g) + "'");
      }
    }
  }
  return groups;
}

inline double grl_lambda_at(const TrainConfig& cfg, long step) {
  if (cfg.grl_ramp_steps <= 0) return cfg.grl_lambda;
  const double frac = std::min(1.0, static_cast<double>(step) / cfg.grl_ramp_steps);
  return cfg.grl_lambda * frac;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder pretraining
// ---------------------------------------------------------------------------

/// Trains the encoder group (plus a discarded linear head on z_lang) on
/// language identification over the seen languages' train split, then checks
/// held-out accuracy on their eval split against the configured gate.
inline StageResult pretrain_encoder(const TrainConfig& cfg, const Corpus& corpus,
                                    ModelGraph& model) {
  StageResult result;
  result.hashes_before = detail::all_group_hashes(model);
  const auto train = corpus.manifest.select("train", true);
  const auto held_out = corpus.manifest.select("eval", true);
  PretrainHead head(model.dims().z_dim, model.dims().n_languages, cfg.seed);
  std::vector<Tensor> params = model.group_tensors(ParamGroup::kEncoder);
  params.push_back(head.weight);
  params.push_back(head.bias);
  Adam adam(params, adam_options(cfg));
  BatchSampler sampler(train.size(), static_cast<std::size_t>(cfg.batch_size),
                       derive_seed(cfg.seed, "pretrain_batches"));

  LossReport last;
  for (long step = 1; step <= cfg.pretrain_steps; ++step) {
    const auto pick = sampler.next();
    std::vector<Tensor> rows;
    std::vector<int> labels;
    for (std::size_t i : pick) {
      const auto& u = corpus.utterances[train[i]];
      rows.push_back(model.encode_row(frames_tensor(u.features, u.frames, u.bins)));
      labels.push_back(u.y_lang);
    }
    LossReport rep;
    rep.step = step;
    try {
      const Tensor loss = language_loss(head.logits(concat(rows, 0)), labels);
      rep.l_lang = loss.item();
      rep.l_le = rep.l_lang;
      rep.l_total = rep.l_lang;
      backward(loss);
    } catch (const NumericError& e) {
      throw TrainingAbort(std::string("pretrain: ") + e.what() + " at step " +
                              std::to_string(step),
                          step, last);
    }
    adam.step();
    adam.zero_grad();
    last = rep;
    if (detail::should_log(step, cfg.pretrain_steps, cfg.log_every))
      result.metrics.push_back(rep);
  }
  result.final_report = last;

  {
    NoGradGuard no_grad;
    std::size_t correct = 0;
    for (std::size_t idx : held_out) {
      const auto& u = corpus.utterances[idx];
      const Tensor logits =
          head.logits(model.encode_row(frames_tensor(u.features, u.frames, u.bins)));
      correct += argmax_rows(logits)[0] == u.y_lang;
    }
    result.accuracy = static_cast<double>(correct) / static_cast<double>(held_out.size());
  }
  result.hashes_after = detail::all_group_hashes(model);
  if (result.accuracy < cfg.pretrain_accuracy_gate) {
    throw AccuracyGateError(
        "pretrain: held-out language accuracy " + std::to_string(result.accuracy) +
        " is below the gate " + std::to_string(cfg.pretrain_accuracy_gate) + " after " +
        std::to_string(cfg.pretrain_steps) +
        " steps; increase pretrain_steps or learning_rate");
  }
  return result;
}

// ---------------------------------------------------------------------------
// Stage 1: multilingual
// ---------------------------------------------------------------------------

/// Losses of one stage-1 batch. Exposed for gradient checks and tests.
struct Stage1Losses {
  Tensor l_lang, l_spk, l_le, l_task, total;
};

inline Stage1Losses stage1_losses(const ModelGraph& model, const TrainConfig& cfg,
                                  const Tensor& z,
                                  const std::vector<const SyntheticUtterance*>& batch,
                                  double lambda, int phonemes_per_language) {
  Stage1Losses out;
  const Tensor h = model.embed(z, cfg.projection_enabled);
  const HeadOutputs heads = model.forward_heads(h, cfg.sat_enabled, lambda);
  std::vector<int> y_lang, y_spk, y_ph;
  std::vector<Tensor> frames;
  for (const auto* u : batch) {
    y_lang.push_back(u->y_lang);
    y_spk.push_back(u->y_spk);
    const auto g = global_phoneme_labels(*u, phonemes_per_language);
    y_ph.insert(y_ph.end(), g.begin(), g.end());
    frames.push_back(frames_tensor(u->features, u->frames, u->bins));
  }
  out.l_lang = language_loss(heads.lang_logits, y_lang);
  out.l_spk = speaker_loss(heads.spk_logits, y_spk);
  out.l_le = le_loss(out.l_lang, out.l_spk);
  out.l_task = softmax_cross_entropy(model.phoneme_logits(frames, h), y_ph);
  const bool unweighted =
      cfg.weight_lang == 1.0 && cfg.weight_spk == 1.0 && cfg.weight_task == 1.0;
  if (unweighted) {
    out.total = composite_loss(Stage::kMultilingual, out.l_le, out.l_task);
  } else {
    out.total = add(add(scale(out.l_task, cfg.weight_task),
                        scale(out.l_lang, cfg.weight_lang)),
                    scale(out.l_spk, cfg.weight_spk));
  }
  return out;
}

inline StageResult train_stage1(const TrainConfig& cfg, const Corpus& corpus,
                                ModelGraph& model) {
  const auto groups = detail::resolve_trainable(cfg, Stage::kMultilingual);
  StageResult result;
  result.hashes_before = detail::all_group_hashes(model);
  const auto train = corpus.manifest.select("train", true);
  result.training_indices = train;
  const auto z_cache = detail::cache_z(model, corpus, train);
  const int P = corpus.manifest.phonemes_per_language;

  Adam adam(detail::collect(model, groups), adam_options(cfg));
  BatchSampler sampler(train.size(), static_cast<std::size_t>(cfg.batch_size),
                       derive_seed(cfg.seed, "stage1_batches"));
  LossReport last;
  for (long step = 1; step <= cfg.stage1_steps; ++step) {
    const auto pick = sampler.next();
    std::vector<const SyntheticUtterance*> batch;
    for (std::size_t i : pick) batch.push_back(&corpus.utterances[train[i]]);
    LossReport rep;
    rep.step = step;
    try {
      const auto l = stage1_losses(model, cfg, detail::stack_rows(z_cache, pick), batch,
                                   detail::grl_lambda_at(cfg, step), P);
      rep.l_lang = l.l_lang.item();
      rep.l_spk = l.l_spk.item();
      rep.l_le = l.l_le.item();
      rep.l_task = l.l_task.item();
      rep.l_total = l.total.item();
      backward(l.total);
    } catch (const NumericError& e) {
      throw TrainingAbort(std::string("stage 1: ") + e.what() + " at step " +
                              std::to_string(step),
                          step, last);
    }
    adam.step();
    adam.zero_grad();
    last = rep;
    if (detail::should_log(step, cfg.stage1_steps, cfg.log_every))
      result.metrics.push_back(rep);
  }
  model.zero_grad();
  result.final_report = last;
  result.hashes_after = detail::all_group_hashes(model);

  result.token_error_rate =
      evaluate_ter(model, corpus, corpus.manifest.select("eval", true),
                   language_prototypes(model, corpus, train, cfg.projection_enabled));
  return result;
}

// ---------------------------------------------------------------------------
// Stage 2: low-resource fine-tuning
// ---------------------------------------------------------------------------

/// The first `budget` train utterances of the held-out languages in
/// speaker-major order, so a small budget covers as few speakers as possible
/// (a low-resource corpus is typically one or two voices).
inline std::vector<std::size_t> low_resource_split(const CorpusManifest& m, int budget) {
  auto pool = m.select("train", false);
  std::stable_sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) {
    const auto& ea = m.utterances[a];
    const auto& eb = m.utterances[b];
    if (ea.language != eb.language) return ea.language < eb.language;
    if (ea.speaker != eb.speaker) return ea.speaker < eb.speaker;
    return ea.index < eb.index;
  });
  if (static_cast<int>(pool.size()) < budget) {
    throw ConfigError("config: low_resource_budget " + std::to_string(budget) +
                      " exceeds the " + std::to_string(pool.size()) +
                      " held-out training utterances");
  }
  pool.resize(static_cast<std::size_t>(budget));
  for (std::size_t i : pool) {
    if (m.is_seen(m.utterances[i].language)) {
      throw std::logic_error("low-resource split contains a seen-language utterance");
    }
  }
  return pool;
}

inline StageResult train_stage2(const TrainConfig& cfg, const Corpus& corpus,
                                ModelGraph& model) {
  const auto groups = detail::resolve_trainable(cfg, Stage::kLowResource);
  StageResult result;
  result.hashes_before = detail::all_group_hashes(model);
  const auto train = low_resource_split(corpus.manifest, cfg.low_resource_budget);
  result.training_indices = train;
  const int P = corpus.manifest.phonemes_per_language;

  // Everything up to h_lang is frozen, so the embeddings are constants here.
  const Tensor h_all =
      compute_embeddings(model, corpus, train, cfg.projection_enabled).h;
  std::vector<std::vector<double>> h_cache;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto row = slice_rows(h_all, i, i + 1).data();
    h_cache.emplace_back(row.begin(), row.end());
  }

  Adam adam(detail::collect(model, groups), adam_options(cfg));
  BatchSampler sampler(train.size(), static_cast<std::size_t>(cfg.batch_size),
                       derive_seed(cfg.seed, "stage2_batches"));
  LossReport last;
  for (long step = 1; step <= cfg.stage2_steps; ++step) {
    const auto pick = sampler.next();
    std::vector<Tensor> frames;
    std::vector<int> y_ph;
    for (std::size_t i : pick) {
      const auto& u = corpus.utterances[train[i]];
      frames.push_back(frames_tensor(u.features, u.frames, u.bins));
      const auto g = global_phoneme_labels(u, P);
      y_ph.insert(y_ph.end(), g.begin(), g.end());
    }
    LossReport rep;
    rep.step = step;
    try {
      const Tensor l_task = softmax_cross_entropy(
          model.phoneme_logits(frames, detail::stack_rows(h_cache, pick)), y_ph);
      const Tensor total =
          composite_loss(Stage::kLowResource, Tensor::scalar(0.0), l_task);
      rep.l_task = l_task.item();
      rep.l_total = total.item();
      backward(total);
    } catch (const NumericError& e) {
      throw TrainingAbort(std::string("stage 2: ") + e.what() + " at step " +
                              std::to_string(step),
                          step, last);
    }
    adam.step();
    adam.zero_grad();
    last = rep;
    if (detail::should_log(step, cfg.stage2_steps, cfg.log_every))
      result.metrics.push_back(rep);
  }
  model.zero_grad();
  result.final_report = last;
  result.hashes_after = detail::all_group_hashes(model);

  result.token_error_rate =
      evaluate_ter(model, corpus, corpus.manifest.select("eval", false),
                   language_prototypes(model, corpus, train, cfg.projection_enabled));
  return result;
}

}  // namespace langemb
