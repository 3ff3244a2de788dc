// langemb: command-line driver for the language-embedding pipeline.
//
//   langemb datagen          --out RUN [--config FILE] [--seed N]
//   langemb pretrain-encoder --out RUN
//   langemb train --stage 1  --out RUN [--sat on|off] [--grl-lambda X] [--projection on|off]
//   langemb train --stage 2  --out RUN [--budget N] [--from-scratch]
//   langemb eval | ablation | plot | pipeline --out RUN
//
// Exit status: 0 ok, 1 other failure, 2 missing upstream artifact,
// 3 config or usage error, 4 numerical abort.

#include <cstdio>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "langemb/pipeline.hpp"

namespace {

using namespace langemb;

enum ExitCode { kOk = 0, kFailure = 1, kMissing = 2, kConfig = 3, kNumeric = 4 };

void flatten(const nlohmann::ordered_json& j, const std::string& prefix, std::string& out) {
  for (const auto& [k, v] : j.items()) {
    if (v.is_object()) {
      flatten(v, prefix + k + ".", out);
    } else {
      out += "  " + prefix + k + " = " + v.dump() + "\n";
    }
  }
}

std::string config_keys_help() {
  std::string out = "\nConfig keys (JSON file via --config; defaults shown):\n";
  flatten(nlohmann::ordered_json(TrainConfig{}), "", out);
  out += "\nLD_RUN_SEED overrides seed; explicit flags override both.\n";
  return out;
}

int fail(int code, const char* kind, const std::string& message) {
  std::string one_line = message;
  for (char& c : one_line)
    if (c == '\n') c = ' ';
  std::fprintf(stderr, "langemb: error[%s]: %s\n", kind, one_line.c_str());
  return code;
}

struct Options {
  std::string out;
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<int> stage;
  std::optional<bool> sat;
  std::optional<double> grl_lambda;
  std::optional<bool> projection;
  std::optional<int> budget;
  bool from_scratch = false;
};

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--out", o.out, "Run directory")->required();
  sub->add_option("--config", o.config, "JSON config file (default: <out>/config.json or built-in defaults)");
  sub->add_option("--seed", o.seed, "Override the config seed");
}

void add_toggles(CLI::App* sub, Options& o) {
  sub->add_option("--sat", o.sat, "Speaker adversarial training (on|off)");
  sub->add_option("--grl-lambda", o.grl_lambda, "Gradient reversal scale (>= 0)");
  sub->add_option("--projection", o.projection, "Projection layer (on|off)");
  sub->add_option("--budget", o.budget, "Low-resource utterance budget for stage 2");
  sub->add_flag("--from-scratch", o.from_scratch,
                "Stage 2 from a freshly initialized model instead of a stage-1 checkpoint");
}

TrainConfig effective_config(const RunPaths& run, const Options& o) {
  TrainConfig cfg = resolve_base_config(
      run, o.config ? std::optional<fs::path>(*o.config) : std::nullopt);
  apply_seed_env(cfg);
  if (o.seed) cfg.seed = *o.seed;
  if (o.stage) cfg.stage = *o.stage == 1 ? Stage::kMultilingual : Stage::kLowResource;
  if (o.sat) cfg.sat_enabled = *o.sat;
  if (o.grl_lambda) cfg.grl_lambda = *o.grl_lambda;
  if (o.projection) cfg.projection_enabled = *o.projection;
  if (o.budget) cfg.low_resource_budget = *o.budget;
  if (o.from_scratch) cfg.from_scratch = true;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audio-derived language embeddings with speaker adversarial training"};
  app.footer(config_keys_help());
  app.require_subcommand(1);
  Options o;

  auto* datagen = app.add_subcommand("datagen", "Generate the synthetic corpus into <out>/dataset");
  add_common(datagen, o);
  auto* pretrain = app.add_subcommand("pretrain-encoder", "Pretrain the language encoder on language ID");
  add_common(pretrain, o);
  auto* train = app.add_subcommand("train", "Stage 1 (multilingual) or stage 2 (low resource)");
  add_common(train, o);
  add_toggles(train, o);
  train->add_option("--stage", o.stage, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
  auto* eval = app.add_subcommand("eval", "Evaluate checkpoints and write eval_report.json and summary.md");
  add_common(eval, o);
  add_toggles(eval, o);
  auto* ablation = app.add_subcommand("ablation", "SAT x projection grid over the stage-1 checkpoints");
  add_common(ablation, o);
  auto* plot = app.add_subcommand("plot", "Re-render SVG plots from existing reports");
  add_common(plot, o);
  auto* pipeline = app.add_subcommand("pipeline", "Run every step with the configured defaults");
  add_common(pipeline, o);
  for (auto* sub : app.get_subcommands({})) sub->footer(config_keys_help());

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  const RunPaths run{o.out};
  try {
    TrainConfig cfg = effective_config(run, o);
    RunLock lock(run.root);
    if (datagen->parsed()) {
      const auto m = cmd_datagen(cfg, run);
      std::printf("datagen: %zu utterances in %s\n", m.utterances.size(),
                  run.dataset().c_str());
    } else if (pretrain->parsed()) {
      const auto r = cmd_pretrain(cfg, run);
      std::printf("pretrain-encoder: held-out language accuracy %.4f\n", r.accuracy);
    } else if (train->parsed()) {
      const auto r = cfg.stage == Stage::kMultilingual ? cmd_train_stage1(cfg, run)
                                                       : cmd_train_stage2(cfg, run);
      std::printf("train --stage %d: final l_total %.6f, mean token error rate %.4f\n",
                  static_cast<int>(cfg.stage), r.final_report.l_total,
                  mean_of(r.token_error_rate));
    } else if (eval->parsed()) {
      const auto r = cmd_eval(cfg, run);
      std::printf("eval: language probe %.4f, speaker probe %.4f, silhouette h %.4f\n",
                  r.language_probe_accuracy, r.speaker_probe_accuracy, r.silhouette_h);
    } else if (ablation->parsed()) {
      const auto g = cmd_ablation(cfg, run);
      std::printf("ablation: %zu reports, %zu plots\n", g.reports.size(), g.plots.size());
    } else if (plot->parsed()) {
      const auto p = cmd_plot(cfg, run);
      std::printf("plot: %zu files\n", p.size());
    } else if (pipeline->parsed()) {
      run_pipeline(cfg, run, stdout);
    }
  } catch (const MissingArtifactError& e) {
    return fail(kMissing, "missing_artifact", e.what());
  } catch (const ConfigError& e) {
    return fail(kConfig, "config", e.what());
  } catch (const TrainingAbort& e) {
    return fail(kNumeric, "numeric", e.what());
  } catch (const NumericError& e) {
    return fail(kNumeric, "numeric", e.what());
  } catch (const std::exception& e) {
    return fail(kFailure, "failure", e.what());
  }
  return kOk;
}
