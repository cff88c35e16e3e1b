// xsl: cross-situational word learning simulator CLI.
//
// Subcommands: stats, generate, train, eval, curves, gradcheck. Each command
// writes data files into --out and diagnostics to stderr. Exit codes:
// 0 success, 2 config error, 3 data/artifact error, 4 numeric error.

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "xslearn/errors.hpp"
#include "xslearn/experiment.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed_override;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
  auto* opt = cmd->add_option("--config", args.config_path, "experiment config file (JSON)");
  if (config_required) opt->required();
  cmd->add_option("--out", args.out_dir, "output directory")->required();
  cmd->add_option("--seed", args.seed_override, "override the config seed");
}

xsl::ExperimentConfig load_config(const CommonArgs& args) {
  xsl::ExperimentConfig config = xsl::ExperimentConfig::load(args.config_path);
  if (args.seed_override) config.seed = *args.seed_override;
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-situational word learning simulator"};
  app.require_subcommand(1);

  CommonArgs stats_args, generate_args, train_args, eval_args, curves_args;
  std::string train_bin, eval_checkpoint;

  auto* stats = app.add_subcommand("stats", "write per-bin naming-event target tables");
  add_common(stats, stats_args);

  auto* generate =
      app.add_subcommand("generate", "generate the world, pair pool, bin subsets and test sets");
  add_common(generate, generate_args);

  auto* train = app.add_subcommand("train", "train one stage and save checkpoints");
  add_common(train, train_args);
  train->add_option("--bin", train_bin, "'auditory' or an age-bin name")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint and write a metrics report");
  add_common(eval, eval_args);
  eval->add_option("--checkpoint", eval_checkpoint, "'baseline', 'auditory' or an age-bin name")
      ->required();

  auto* curves = app.add_subcommand("curves", "emit vocabulary-curve and trajectory tables");
  add_common(curves, curves_args);

  std::uint64_t gradcheck_seed = 1;
  auto* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference check of the analytic gradients");
  gradcheck->add_option("--seed", gradcheck_seed, "seed for the tiny model and batch");

  CLI11_PARSE(app, argc, argv);

  try {
    if (stats->parsed()) {
      xsl::cmd_stats(load_config(stats_args), stats_args.out_dir);
    } else if (generate->parsed()) {
      xsl::cmd_generate(load_config(generate_args), generate_args.out_dir);
    } else if (train->parsed()) {
      xsl::cmd_train(load_config(train_args), train_args.out_dir, train_bin);
    } else if (eval->parsed()) {
      xsl::cmd_eval(load_config(eval_args), eval_args.out_dir, eval_checkpoint);
    } else if (curves->parsed()) {
      xsl::cmd_curves(load_config(curves_args), curves_args.out_dir);
    } else if (gradcheck->parsed()) {
      const double err = xsl::cmd_gradcheck(gradcheck_seed);
      std::printf("max relative gradient error: %.3e\n", err);
      if (err >= 1e-4) {
        std::fprintf(stderr, "gradient check FAILED (threshold 1e-4)\n");
        return 4;
      }
    }
  } catch (const xsl::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
