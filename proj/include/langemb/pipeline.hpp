#pragma once

// Run-directory operations shared by the CLI and the acceptance suite.
//
//   <run>/config.json                 base config (written by datagen)
//   <run>/dataset/                    manifest.json + utt/*.synu
//   <run>/checkpoints/encoder.ldck
//   <run>/checkpoints/stage1_<cond>.ldck          cond = sat_on | sat_off
//   <run>/checkpoints/stage2_<cond>_b<N>.ldck     cond = sat_on | sat_off | scratch
//   <run>/metrics.csv                 one tagged block per training invocation
//   <run>/run.json                    config, corpus hash, per-stage results
//   <run>/eval_report.json            configured stage-1 condition
//   <run>/reports/stage2_*.json       low-resource reports
//   <run>/ablation/<cond>/eval_report.json, <run>/plots/*.svg
//   <run>/summary.md
//
// Nothing written here carries a timestamp, so re-running a command with the
// same inputs rewrites identical bytes.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "langemb/binary_io.hpp"
#include "langemb/config.hpp"
#include "langemb/eval.hpp"
#include "langemb/losses.hpp"
#include "langemb/model.hpp"
#include "langemb/synthdata.hpp"
#include "langemb/training.hpp"

namespace langemb {

namespace fs = std::filesystem;

struct RunPaths {
  fs::path root;

  fs::path config() const { return root / "config.json"; }
  fs::path dataset() const { return root / "dataset"; }
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path encoder() const { return checkpoints() / "encoder.ldck"; }
  fs::path stage1(const std::string& cond) const {
    return checkpoints() / ("stage1_" + cond + ".ldck");
  }
  fs::path stage2(const std::string& cond, int budget) const {
    return checkpoints() / ("stage2_" + cond + "_b" + std::to_string(budget) + ".ldck");
  }
  fs::path metrics() const { return root / "metrics.csv"; }
  fs::path run_json() const { return root / "run.json"; }
  fs::path eval_report() const { return root / "eval_report.json"; }
  fs::path reports() const { return root / "reports"; }
  fs::path plots() const { return root / "plots"; }
  fs::path summary() const { return root / "summary.md"; }
  fs::path lock() const { return root / ".lock"; }
};

inline std::string sat_condition(bool sat) { return sat ? "sat_on" : "sat_off"; }

/// Stage-1 condition name; a projection-disabled run gets its own files.
inline std::string stage1_condition(const TrainConfig& cfg) {
  return sat_condition(cfg.sat_enabled) + (cfg.projection_enabled ? "" : "_proj_off");
}

inline std::string stage2_condition(const TrainConfig& cfg) {
  return cfg.from_scratch ? "scratch" : sat_condition(cfg.sat_enabled);
}

class RunLockedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Exclusive per-run-directory lock, released on destruction.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(RunPaths{dir}.lock()) {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (f == nullptr) {
      throw RunLockedError("run directory " + dir.string() +
                           " is locked by another command (remove " + path_.string() +
                           " if no command is running)");
    }
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

/// Applies LD_RUN_SEED when set; a malformed value is a config error.
inline void apply_seed_env(TrainConfig& cfg) {
  const char* v = std::getenv("LD_RUN_SEED");
  if (v == nullptr || *v == '\0') return;
  char* end = nullptr;
  const unsigned long long s = std::strtoull(v, &end, 10);
  if (end == nullptr || *end != '\0') {
    throw ConfigError(std::string("config: LD_RUN_SEED='") + v + "' is not an integer");
  }
  cfg.seed = s;
}

inline void require_artifact(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw MissingArtifactError("missing " + what + ": " + p.string());
}

// ---------------------------------------------------------------------------
// run.json
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json read_run_json(const RunPaths& run) {
  if (!fs::exists(run.run_json())) return nlohmann::ordered_json::object();
  return nlohmann::ordered_json::parse(read_file_text(run.run_json()));
}

inline void write_run_json(const RunPaths& run, const nlohmann::ordered_json& j) {
  write_file_text(run.run_json(), j.dump(1) + "\n");
}

inline nlohmann::ordered_json loss_json(const LossReport& r) {
  return {{"step", r.step},     {"l_lang", r.l_lang}, {"l_spk", r.l_spk},
          {"l_le", r.l_le},     {"l_task", r.l_task}, {"l_total", r.l_total}};
}

inline nlohmann::ordered_json ter_json(const std::map<int, double>& ter) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [l, v] : ter) j[std::to_string(l)] = v;
  return j;
}

inline void record_stage(const RunPaths& run, const TrainConfig& base,
                         const std::string& corpus_hash, const std::string& tag,
                         nlohmann::ordered_json entry) {
  auto j = read_run_json(run);
  j["config"] = nlohmann::ordered_json(base);
  j["corpus_manifest_hash"] = corpus_hash;
  if (!j.contains("stages")) j["stages"] = nlohmann::ordered_json::object();
  j["stages"][tag] = std::move(entry);
  write_run_json(run, j);
}

inline nlohmann::ordered_json stage_entry(const TrainConfig& cfg, const StageResult& r,
                                          const fs::path& checkpoint,
                                          const RunPaths& run) {
  nlohmann::ordered_json e;
  e["config"] = nlohmann::ordered_json(cfg);
  e["final"] = loss_json(r.final_report);
  e["checkpoint"] = fs::relative(checkpoint, run.root).generic_string();
  e["checkpoint_hash"] = hash_file(checkpoint);
  e["group_hashes_before"] = r.hashes_before;
  e["group_hashes_after"] = r.hashes_after;
  e["training_utterances"] = r.training_indices.size();
  if (!r.token_error_rate.empty()) {
    e["token_error_rate"] = ter_json(r.token_error_rate);
    e["mean_token_error_rate"] = mean_of(r.token_error_rate);
  }
  return e;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline void write_summary(const TrainConfig& cfg, const RunPaths& run);

/// Base config of a run: the explicit file, else <run>/config.json, else
/// defaults.
inline TrainConfig resolve_base_config(const RunPaths& run,
                                       const std::optional<fs::path>& config_file) {
  if (config_file) return load_config_file(*config_file);
  if (fs::exists(run.config())) return load_config_file(run.config());
  return TrainConfig{};
}

inline Corpus load_run_corpus(const RunPaths& run) {
  require_artifact(run.dataset() / "manifest.json", "dataset (run datagen first)");
  return load_corpus(run.dataset());
}

inline CorpusManifest cmd_datagen(const TrainConfig& cfg, const RunPaths& run) {
  cfg.validate();
  fs::create_directories(run.root);
  write_file_text(run.config(), config_json_text(cfg));
  if (fs::exists(run.dataset())) fs::remove_all(run.dataset());
  auto m = build_corpus(cfg, run.dataset());
  auto j = read_run_json(run);
  j["config"] = nlohmann::ordered_json(cfg);
  j["corpus_manifest_hash"] = hash_file(run.dataset() / "manifest.json");
  if (!j.contains("stages")) j["stages"] = nlohmann::ordered_json::object();
  write_run_json(run, j);
  return m;
}

inline StageResult cmd_pretrain(const TrainConfig& cfg, const RunPaths& run) {
  const Corpus corpus = load_run_corpus(run);
  ModelGraph model(ModelDims::from_corpus(cfg.corpus), cfg.seed);
  StageResult r = pretrain_encoder(cfg, corpus, model);
  save_checkpoint(model, run.encoder());
  write_metrics_block(run.metrics(), "pretrain", r.metrics);
  auto e = stage_entry(cfg, r, run.encoder(), run);
  e["held_out_language_accuracy"] = r.accuracy;
  record_stage(run, cfg, corpus.manifest_hash, "pretrain", std::move(e));
  return r;
}

inline fs::path encoder_path(const TrainConfig& cfg, const RunPaths& run) {
  return cfg.encoder_checkpoint.empty() ? run.encoder() : fs::path(cfg.encoder_checkpoint);
}

inline fs::path stage1_path(const TrainConfig& cfg, const RunPaths& run) {
  return cfg.stage1_checkpoint.empty() ? run.stage1(stage1_condition(cfg))
                                       : fs::path(cfg.stage1_checkpoint);
}

inline StageResult cmd_train_stage1(const TrainConfig& cfg, const RunPaths& run) {
  const fs::path enc = encoder_path(cfg, run);
  require_artifact(enc, "encoder checkpoint (run pretrain-encoder first)");
  const Corpus corpus = load_run_corpus(run);
  ModelGraph model(ModelDims::from_corpus(cfg.corpus), cfg.seed);
  load_checkpoint(model, enc);
  StageResult r = train_stage1(cfg, corpus, model);
  const std::string cond = stage1_condition(cfg);
  const fs::path out = run.stage1(cond);
  save_checkpoint(model, out);
  write_metrics_block(run.metrics(), "stage1_" + cond, r.metrics);
  record_stage(run, cfg, corpus.manifest_hash, "stage1_" + cond,
               stage_entry(cfg, r, out, run));
  return r;
}

inline StageResult cmd_train_stage2(const TrainConfig& cfg, const RunPaths& run) {
  const Corpus corpus = load_run_corpus(run);
  ModelGraph model(ModelDims::from_corpus(cfg.corpus), cfg.seed);
  if (!cfg.from_scratch) {
    const fs::path s1 = stage1_path(cfg, run);
    require_artifact(s1, "stage-1 checkpoint (run train --stage 1 first)");
    load_checkpoint(model, s1);
  }
  StageResult r = train_stage2(cfg, corpus, model);
  const std::string cond = stage2_condition(cfg);
  const std::string tag = "stage2_" + cond + "_b" + std::to_string(cfg.low_resource_budget);
  const fs::path out = run.stage2(cond, cfg.low_resource_budget);
  save_checkpoint(model, out);
  write_metrics_block(run.metrics(), tag, r.metrics);
  record_stage(run, cfg, corpus.manifest_hash, tag, stage_entry(cfg, r, out, run));
  return r;
}

/// Evaluates the configured stage-1 condition into eval_report.json, every
/// stage-2 checkpoint present into reports/, and rewrites summary.md.
inline EvalReport cmd_eval(const TrainConfig& cfg, const RunPaths& run) {
  const fs::path s1 = stage1_path(cfg, run);
  require_artifact(s1, "stage-1 checkpoint (run train --stage 1 first)");
  const Corpus corpus = load_run_corpus(run);
  ModelGraph model(ModelDims::from_corpus(cfg.corpus), cfg.seed);
  load_checkpoint(model, s1);
  EvalReport report = evaluate_condition(model, corpus, cfg, cfg.sat_enabled,
                                         cfg.projection_enabled, cfg.projection_enabled);
  write_report(run.eval_report(), report);
  write_report_plots(report, run.plots(), cfg.corpus.speakers_per_language);

  for (const char* cond : {"sat_on", "sat_off", "scratch"}) {
    for (int budget : cfg.ablation_budgets) {
      const fs::path ck = run.stage2(cond, budget);
      if (!fs::exists(ck)) continue;
      ModelGraph m(ModelDims::from_corpus(cfg.corpus), cfg.seed);
      load_checkpoint(m, ck);
      const bool sat = std::string(cond) == "sat_on";
      EvalReport r = evaluate_condition(m, corpus, cfg, sat, true, false);
      r.condition = std::string("stage2_") + cond + "_b" + std::to_string(budget);
      r.budget = budget;
      const auto train = low_resource_split(corpus.manifest, budget);
      r.token_error_rate =
          evaluate_ter(m, corpus, corpus.manifest.select("eval", false),
                       language_prototypes(m, corpus, train, true));
      r.notes = "token error rate on the held-out language's eval split, decoded with "
                "the mean embedding of the " + std::to_string(budget) +
                " fine-tuning utterances; probes and PCA on the seen-language eval split";
      write_report(run.reports() / (r.condition + ".json"), r);
    }
  }
  write_summary(cfg, run);
  return report;
}

inline AblationGrid cmd_ablation(const TrainConfig& cfg, const RunPaths& run) {
  const Corpus corpus = load_run_corpus(run);
  return run_ablation_grid(cfg, corpus,
                           {{"sat_on", run.stage1("sat_on")},
                            {"sat_off", run.stage1("sat_off")}},
                           run.root);
}

/// Re-renders every SVG from the reports already on disk.
inline std::vector<fs::path> cmd_plot(const TrainConfig& cfg, const RunPaths& run) {
  std::vector<fs::path> sources;
  if (fs::exists(run.eval_report())) sources.push_back(run.eval_report());
  if (fs::exists(run.root / "ablation")) {
    std::vector<fs::path> found;
    for (const auto& d : fs::directory_iterator(run.root / "ablation"))
      if (fs::exists(d.path() / "eval_report.json")) found.push_back(d.path() / "eval_report.json");
    std::sort(found.begin(), found.end());
    sources.insert(sources.end(), found.begin(), found.end());
  }
  if (sources.empty()) {
    throw MissingArtifactError("missing eval reports in " + run.root.string() +
                               " (run eval or ablation first)");
  }
  std::vector<fs::path> out;
  for (const auto& s : sources)
    for (auto& p : write_report_plots(read_report(s), run.plots(),
                                      cfg.corpus.speakers_per_language))
      out.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------
// summary.md
// ---------------------------------------------------------------------------

inline std::string fmt_rate(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

/// Tables in the layout of the multilingual and low-resource comparisons,
/// built from run.json and whatever reports exist.
inline void write_summary(const TrainConfig& cfg, const RunPaths& run) {
  const auto j = read_run_json(run);
  const auto stages = j.contains("stages") ? j.at("stages") : nlohmann::ordered_json::object();
  const int n_seen = cfg.corpus.n_seen_languages;
  std::string s = "# Run summary\n\n";
  s += "Token error rate (TER) is the fraction of frames whose predicted phoneme is wrong; "
       "lower is better.\n\n";

  s += "## Multilingual (seen languages, eval split)\n\n| Model |";
  for (int l = 0; l < n_seen; ++l) s += " L" + std::to_string(l) + " |";
  s += " Mean |\n|---|";
  for (int l = 0; l <= n_seen; ++l) s += "---|";
  s += "\n";
  for (const auto& [tag, label] :
       std::vector<std::pair<std::string, std::string>>{{"stage1_sat_on", "Proposed (with SAT)"},
                                                        {"stage1_sat_off", "w/o SAT"}}) {
    if (!stages.contains(tag) || !stages.at(tag).contains("token_error_rate")) continue;
    const auto& t = stages.at(tag).at("token_error_rate");
    s += "| " + label + " |";
    for (int l = 0; l < n_seen; ++l) {
      const auto k = std::to_string(l);
      s += " " + (t.contains(k) ? fmt_rate(t.at(k).get<double>()) : std::string("-")) + " |";
    }
    s += " " + fmt_rate(stages.at(tag).at("mean_token_error_rate").get<double>()) + " |\n";
  }

  s += "\n## Low resource (held-out language, eval split)\n\n| Model |";
  for (int b : cfg.ablation_budgets) s += " budget " + std::to_string(b) + " |";
  s += "\n|---|";
  for (std::size_t i = 0; i < cfg.ablation_budgets.size(); ++i) s += "---|";
  s += "\n";
  for (const auto& [cond, label] : std::vector<std::pair<std::string, std::string>>{
           {"sat_on", "Proposed (with SAT), fine-tuned"},
           {"sat_off", "w/o SAT, fine-tuned"},
           {"scratch", "From scratch"}}) {
    s += "| " + label + " |";
    for (int b : cfg.ablation_budgets) {
      const std::string tag = "stage2_" + cond + "_b" + std::to_string(b);
      s += " " + (stages.contains(tag) && stages.at(tag).contains("mean_token_error_rate")
                      ? fmt_rate(stages.at(tag).at("mean_token_error_rate").get<double>())
                      : std::string("-")) +
           " |";
    }
    s += "\n";
  }
  s += "| Language-ID baseline |";
  for (std::size_t i = 0; i < cfg.ablation_budgets.size(); ++i) s += " no embedding |";
  s += "\n\nThe language-ID baseline has no row for a language absent from training, so it "
       "cannot condition on the held-out language at all.\n";

  std::vector<EvalReport> grid;
  for (const char* cond : {"sat_on_proj_on", "sat_on_proj_off", "sat_off_proj_on",
                           "sat_off_proj_off"}) {
    const fs::path p = run.root / "ablation" / cond / "eval_report.json";
    if (fs::exists(p)) grid.push_back(read_report(p));
  }
  if (!grid.empty()) {
    s += "\n## Ablations (seen languages, eval split)\n\n"
         "| SAT | Projection | Language probe | Speaker probe (chance) | Silhouette h | "
         "Silhouette z | Mean TER |\n|---|---|---|---|---|---|---|\n";
    for (const auto& r : grid) {
      s += std::string("| ") + (r.sat_enabled ? "on" : "off") + " | " +
           (r.projection_enabled ? "on" : "off") + " | " +
           fmt_rate(r.language_probe_accuracy) + " | " + fmt_rate(r.speaker_probe_accuracy) +
           " (" + fmt_rate(r.speaker_probe_chance) + ") | " + fmt_rate(r.silhouette_h) +
           " | " + fmt_rate(r.silhouette_z) + " | " +
           (r.token_error_rate.empty() ? std::string("n/a") : fmt_rate(mean_of(r.token_error_rate))) +
           " |\n";
    }
  }
  write_file_text(run.summary(), s);
}

// ---------------------------------------------------------------------------
// Whole pipeline
// ---------------------------------------------------------------------------

/// Wall-clock seconds per pipeline step, in execution order.
using StepTimings = std::vector<std::pair<std::string, double>>;

/// datagen, encoder pretraining, stage 1 with and without SAT, stage 2 for
/// every condition and budget, ablation grid, eval and summary.
inline StepTimings run_pipeline(const TrainConfig& base, const RunPaths& run,
                                std::FILE* log = nullptr) {
  StepTimings timings;
  auto clock = std::chrono::steady_clock::now();
  auto say = [&](const std::string& step, const std::string& m) {
    const auto now = std::chrono::steady_clock::now();
    timings.emplace_back(step, std::chrono::duration<double>(now - clock).count());
    clock = now;
    if (log) std::fprintf(log, "%s (%.1f s)\n", m.c_str(), timings.back().second), std::fflush(log);
  };
  cmd_datagen(base, run);
  say("datagen", "datagen done");
  const auto pre = cmd_pretrain(base, run);
  say("pretrain", "pretrain: held-out language accuracy " + fmt_rate(pre.accuracy));
  for (bool sat : {true, false}) {
    TrainConfig c = base;
    c.stage = Stage::kMultilingual;
    c.sat_enabled = sat;
    const auto r = cmd_train_stage1(c, run);
    say("stage1_" + sat_condition(sat),
        "stage 1 " + sat_condition(sat) + ": mean TER " + fmt_rate(mean_of(r.token_error_rate)));
  }
  for (int budget : base.ablation_budgets) {
    for (const char* cond : {"sat_on", "sat_off", "scratch"}) {
      TrainConfig c = base;
      c.stage = Stage::kLowResource;
      c.low_resource_budget = budget;
      c.from_scratch = std::string(cond) == "scratch";
      c.sat_enabled = std::string(cond) != "sat_off";
      const auto r = cmd_train_stage2(c, run);
      say("stage2_" + std::string(cond) + "_b" + std::to_string(budget),
          "stage 2 " + std::string(cond) + " budget " + std::to_string(budget) +
              ": mean TER " + fmt_rate(mean_of(r.token_error_rate)));
    }
  }
  cmd_ablation(base, run);
  say("ablation", "ablation done");
  cmd_eval(base, run);
  say("eval", "eval done");
  return timings;
}

}  // namespace langemb
