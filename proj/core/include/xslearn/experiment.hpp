#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xslearn/eval.hpp"
#include "xslearn/learner.hpp"
#include "xslearn/naming_stats.hpp"
#include "xslearn/trainer.hpp"
#include "xslearn/world.hpp"

namespace xsl {

struct AgeBin {
  std::string name;
  int duration_days = 0;
  Condition condition = Condition::kNatural;
};

struct StatisticsSource {
  enum class Kind { kFile, kZipf };
  Kind kind = Kind::kZipf;
  std::filesystem::path path;  // kFile: inventory table
  double exponent = 1.0;       // kZipf
  double base_rate = 1.0;
};

struct EvalConfig {
  int tokens_per_type = 20;  // K tokens/images per category in the test sets
  int abx_tokens_per_speaker = 4;
  std::vector<int> recall_ks = {1, 5, 10};
  // width of the above-chance vocabulary band in percentage points;
  // < 0 selects 2 standard errors of the forced-choice trial count
  double chance_band_pct = -1.0;
  int spearman_permutations = 100000;
};

/// Single structured config document; unknown keys are rejected so a typo
/// cannot silently fall back to a default.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  WorldConfig world;
  StatisticsSource statistics;
  std::vector<AgeBin> age_bins;
  GenerationConfig generation;
  ModelConfig model;  // phone_dim/visual_dim are filled from the world config
  TrainConfig train_auditory;
  TrainConfig train_audiovisual;
  EvalConfig eval;

  void validate() const;
  static ExperimentConfig from_json_text(std::string_view text,
                                         const std::filesystem::path& base_dir);
  static ExperimentConfig load(const std::filesystem::path& path);
};

/// The statistics table: loaded from the configured file or synthesized with
/// Zipf-distributed rates.
CategoryInventory load_statistics(const ExperimentConfig& config);

std::vector<PairExample> dataset_to_examples(const Dataset& dataset);

// Pipeline commands. Each takes an output directory (created if absent,
// guarded by an advisory lock file) and is a pure function of
// (config, seed, input artifacts): re-running reproduces identical bytes.
void cmd_stats(const ExperimentConfig& config, const std::filesystem::path& out);
void cmd_generate(const ExperimentConfig& config, const std::filesystem::path& out);
void cmd_train(const ExperimentConfig& config, const std::filesystem::path& out,
               const std::string& bin_name);  // "auditory" or an age-bin name
void cmd_eval(const ExperimentConfig& config, const std::filesystem::path& out,
              const std::string& checkpoint_name);  // "baseline" | "auditory" | bin name
void cmd_curves(const ExperimentConfig& config, const std::filesystem::path& out);

struct GradcheckSetup {
  ModelConfig model;
  std::vector<PairExample> batch;
  TrainConfig train;
};

/// Tiny fixed model + batch used by the `gradcheck` command and tests.
GradcheckSetup make_gradcheck_setup(std::uint64_t seed);

/// Finite-difference validation of the analytic gradients on the tiny model;
/// returns the max relative error.
double cmd_gradcheck(std::uint64_t seed);

/// stats -> generate -> train (auditory + every bin) -> eval (baseline,
/// auditory, every bin) -> curves, end to end from one config.
void run_full_pipeline(const ExperimentConfig& config, const std::filesystem::path& out);

}  // namespace xsl
