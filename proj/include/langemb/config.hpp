#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "langemb/binary_io.hpp"

namespace langemb {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kConfigSchemaVersion = 1;

struct CorpusConfig {
  int n_seen_languages = 6;
  int n_unseen_languages = 1;
  int speakers_per_language = 8;
  int phonemes_per_language = 8;
  int train_per_speaker = 50;
  int eval_per_speaker = 20;
  int frames = 100;
  int bins = 24;
  double noise_sigma = 0.05;
  double mean_phoneme_duration = 6.0;

  int n_languages() const { return n_seen_languages + n_unseen_languages; }
  int n_seen_speakers() const { return n_seen_languages * speakers_per_language; }
  int n_phonemes_total() const { return n_languages() * phonemes_per_language; }
};

struct ProbeConfig {
  int steps = 500;
  double learning_rate = 0.1;
  double train_fraction = 0.7;
};

enum class Stage { kMultilingual = 1, kLowResource = 2 };

/// Every hyperparameter of a run. Serialized verbatim into run.json.
struct TrainConfig {
  std::uint64_t seed = 7;
  CorpusConfig corpus;

  Stage stage = Stage::kMultilingual;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 16;

  int pretrain_steps = 500;
  double pretrain_accuracy_gate = 0.9;
  int stage1_steps = 3000;
  int stage2_steps = 600;

  bool sat_enabled = true;
  double grl_lambda = 0.1;
  int grl_ramp_steps = 0;  // 0 = constant lambda
  bool projection_enabled = true;

  // Loss weights; all 1 reproduces the unweighted sums.
  double weight_lang = 1.0;
  double weight_spk = 1.0;
  double weight_task = 1.0;

  int low_resource_budget = 20;
  std::vector<int> ablation_budgets{20, 120};
  bool from_scratch = false;
  // Groups trained in the current stage; empty selects the stage default.
  std::vector<std::string> trainable_groups;

  int log_every = 10;
  ProbeConfig probe;

  std::string encoder_checkpoint;  // empty = <run>/checkpoints/encoder.ldck
  std::string stage1_checkpoint;   // empty = derived from the SAT condition

  void validate() const;
};

inline std::string stage_name(Stage s) {
  return s == Stage::kMultilingual ? "multilingual" : "low_resource";
}

inline void to_json(nlohmann::ordered_json& j, const TrainConfig& c) {
  j = nlohmann::ordered_json{
      {"schema_version", kConfigSchemaVersion},
      {"seed", c.seed},
      {"corpus",
       {{"n_seen_languages", c.corpus.n_seen_languages},
        {"n_unseen_languages", c.corpus.n_unseen_languages},
        {"speakers_per_language", c.corpus.speakers_per_language},
        {"phonemes_per_language", c.corpus.phonemes_per_language},
        {"train_per_speaker", c.corpus.train_per_speaker},
        {"eval_per_speaker", c.corpus.eval_per_speaker},
        {"frames", c.corpus.frames},
        {"bins", c.corpus.bins},
        {"noise_sigma", c.corpus.noise_sigma},
        {"mean_phoneme_duration", c.corpus.mean_phoneme_duration}}},
      {"stage", static_cast<int>(c.stage)},
      {"learning_rate", c.learning_rate},
      {"adam_beta1", c.adam_beta1},
      {"adam_beta2", c.adam_beta2},
      {"adam_eps", c.adam_eps},
      {"batch_size", c.batch_size},
      {"pretrain_steps", c.pretrain_steps},
      {"pretrain_accuracy_gate", c.pretrain_accuracy_gate},
      {"stage1_steps", c.stage1_steps},
      {"stage2_steps", c.stage2_steps},
      {"sat_enabled", c.sat_enabled},
      {"grl_lambda", c.grl_lambda},
      {"grl_ramp_steps", c.grl_ramp_steps},
      {"projection_enabled", c.projection_enabled},
      {"weight_lang", c.weight_lang},
      {"weight_spk", c.weight_spk},
      {"weight_task", c.weight_task},
      {"low_resource_budget", c.low_resource_budget},
      {"ablation_budgets", c.ablation_budgets},
      {"from_scratch", c.from_scratch},
      {"trainable_groups", c.trainable_groups},
      {"log_every", c.log_every},
      {"probe",
       {{"steps", c.probe.steps},
        {"learning_rate", c.probe.learning_rate},
        {"train_fraction", c.probe.train_fraction}}},
      {"encoder_checkpoint", c.encoder_checkpoint},
      {"stage1_checkpoint", c.stage1_checkpoint},
  };
}

namespace detail {

template <typename T>
void read_key(const nlohmann::ordered_json& j, const char* key, T& out,
              std::set<std::string>& seen, const std::string& prefix) {
  seen.insert(key);
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: key '" + prefix + key + "' has the wrong type");
  }
}

inline void reject_unknown(const nlohmann::ordered_json& j,
                           const std::set<std::string>& known,
                           const std::string& prefix) {
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("config: unknown key '" + prefix + k + "'");
  }
}

}  // namespace detail

/// Parses a config object; absent keys keep their defaults, unknown keys and
/// type mismatches are schema violations.
inline TrainConfig config_from_json(const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  TrainConfig c;
  std::set<std::string> seen;
  int version = kConfigSchemaVersion;
  detail::read_key(j, "schema_version", version, seen, "");
  if (version != kConfigSchemaVersion) {
    throw ConfigError("config: unsupported schema_version " +
                      std::to_string(version));
  }
  detail::read_key(j, "seed", c.seed, seen, "");
  seen.insert("corpus");
  if (j.contains("corpus")) {
    const auto& cj = j.at("corpus");
    if (!cj.is_object()) throw ConfigError("config: 'corpus' must be an object");
    std::set<std::string> cs;
    auto& cc = c.corpus;
    detail::read_key(cj, "n_seen_languages", cc.n_seen_languages, cs, "corpus.");
    detail::read_key(cj, "n_unseen_languages", cc.n_unseen_languages, cs, "corpus.");
    detail::read_key(cj, "speakers_per_language", cc.speakers_per_language, cs, "corpus.");
    detail::read_key(cj, "phonemes_per_language", cc.phonemes_per_language, cs, "corpus.");
    detail::read_key(cj, "train_per_speaker", cc.train_per_speaker, cs, "corpus.");
    detail::read_key(cj, "eval_per_speaker", cc.eval_per_speaker, cs, "corpus.");
    detail::read_key(cj, "frames", cc.frames, cs, "corpus.");
    detail::read_key(cj, "bins", cc.bins, cs, "corpus.");
    detail::read_key(cj, "noise_sigma", cc.noise_sigma, cs, "corpus.");
    detail::read_key(cj, "mean_phoneme_duration", cc.mean_phoneme_duration, cs, "corpus.");
    detail::reject_unknown(cj, cs, "corpus.");
  }
  int stage = static_cast<int>(c.stage);
  detail::read_key(j, "stage", stage, seen, "");
  if (stage != 1 && stage != 2) {
    throw ConfigError("config: stage must be 1 or 2, got " + std::to_string(stage));
  }
  c.stage = static_cast<Stage>(stage);
  detail::read_key(j, "learning_rate", c.learning_rate, seen, "");
  detail::read_key(j, "adam_beta1", c.adam_beta1, seen, "");
  detail::read_key(j, "adam_beta2", c.adam_beta2, seen, "");
  detail::read_key(j, "adam_eps", c.adam_eps, seen, "");
  detail::read_key(j, "batch_size", c.batch_size, seen, "");
  detail::read_key(j, "pretrain_steps", c.pretrain_steps, seen, "");
  detail::read_key(j, "pretrain_accuracy_gate", c.pretrain_accuracy_gate, seen, "");
  detail::read_key(j, "stage1_steps", c.stage1_steps, seen, "");
  detail::read_key(j, "stage2_steps", c.stage2_steps, seen, "");
  detail::read_key(j, "sat_enabled", c.sat_enabled, seen, "");
  detail::read_key(j, "grl_lambda", c.grl_lambda, seen, "");
  detail::read_key(j, "grl_ramp_steps", c.grl_ramp_steps, seen, "");
  detail::read_key(j, "projection_enabled", c.projection_enabled, seen, "");
  detail::read_key(j, "weight_lang", c.weight_lang, seen, "");
  detail::read_key(j, "weight_spk", c.weight_spk, seen, "");
  detail::read_key(j, "weight_task", c.weight_task, seen, "");
  detail::read_key(j, "low_resource_budget", c.low_resource_budget, seen, "");
  detail::read_key(j, "ablation_budgets", c.ablation_budgets, seen, "");
  detail::read_key(j, "from_scratch", c.from_scratch, seen, "");
  detail::read_key(j, "trainable_groups", c.trainable_groups, seen, "");
  detail::read_key(j, "log_every", c.log_every, seen, "");
  seen.insert("probe");
  if (j.contains("probe")) {
    const auto& pj = j.at("probe");
    if (!pj.is_object()) throw ConfigError("config: 'probe' must be an object");
    std::set<std::string> ps;
    detail::read_key(pj, "steps", c.probe.steps, ps, "probe.");
    detail::read_key(pj, "learning_rate", c.probe.learning_rate, ps, "probe.");
    detail::read_key(pj, "train_fraction", c.probe.train_fraction, ps, "probe.");
    detail::reject_unknown(pj, ps, "probe.");
  }
  detail::read_key(j, "encoder_checkpoint", c.encoder_checkpoint, seen, "");
  detail::read_key(j, "stage1_checkpoint", c.stage1_checkpoint, seen, "");
  detail::reject_unknown(j, seen, "");
  c.validate();
  return c;
}

inline void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  const auto& k = corpus;
  if (k.n_seen_languages < 2) fail("corpus.n_seen_languages must be >= 2");
  if (k.n_unseen_languages < 1) fail("corpus.n_unseen_languages must be >= 1");
  if (k.speakers_per_language < 2) fail("corpus.speakers_per_language must be >= 2");
  if (k.phonemes_per_language < 3) fail("corpus.phonemes_per_language must be >= 3");
  if (k.phonemes_per_language > 65535) fail("corpus.phonemes_per_language too large");
  if (k.train_per_speaker < 1 || k.eval_per_speaker < 1)
    fail("corpus split sizes must be positive");
  if (k.frames < 20) fail("corpus.frames must be >= 20");
  if (k.bins < 8) fail("corpus.bins must be >= 8");
  if (!(k.noise_sigma >= 0.0)) fail("corpus.noise_sigma must be >= 0");
  if (!(k.mean_phoneme_duration >= 1.0)) fail("corpus.mean_phoneme_duration must be >= 1");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) fail("adam_beta1 must be in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam_beta2 must be in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (pretrain_steps < 1 || stage1_steps < 1 || stage2_steps < 1)
    fail("step counts must be positive");
  if (!(pretrain_accuracy_gate >= 0.0 && pretrain_accuracy_gate <= 1.0))
    fail("pretrain_accuracy_gate must be in [0, 1]");
  if (!(grl_lambda >= 0.0)) fail("grl_lambda must be >= 0");
  if (grl_ramp_steps < 0) fail("grl_ramp_steps must be >= 0");
  if (!(weight_lang >= 0.0 && weight_spk >= 0.0 && weight_task >= 0.0))
    fail("loss weights must be >= 0");
  const int pool = k.speakers_per_language * k.train_per_speaker;
  if (low_resource_budget < 1 || low_resource_budget > pool)
    fail("low_resource_budget must be in [1, " + std::to_string(pool) + "]");
  for (int b : ablation_budgets)
    if (b < 1 || b > pool) fail("ablation_budgets entries must be in [1, " + std::to_string(pool) + "]");
  if (log_every < 1) fail("log_every must be >= 1");
  if (probe.steps < 1 || !(probe.learning_rate > 0.0))
    fail("probe settings must be positive");
  if (!(probe.train_fraction > 0.0 && probe.train_fraction < 1.0))
    fail("probe.train_fraction must be in (0, 1)");
  static const std::set<std::string> kGroups{"encoder", "projection",
                                             "classifiers", "downstream"};
  for (const auto& g : trainable_groups)
    if (!kGroups.count(g)) fail("unknown trainable group '" + g + "'");
}

inline std::string config_json_text(const TrainConfig& c) {
  nlohmann::ordered_json j = c;
  return j.dump(2) + "\n";
}

inline TrainConfig load_config_file(const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(read_file_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

inline std::string config_hash(const TrainConfig& c) {
  Fnv1a h;
  h.update(config_json_text(c));
  return h.hex();
}

}  // namespace langemb
