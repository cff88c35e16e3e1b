#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "xslearn/learner.hpp"

namespace xsl {

struct AdamState {
  ParamSet m, v;
  long long step = 0;
};

struct LearnerState {
  ModelConfig model;
  ParamSet params;
  AdamState opt;
};

LearnerState make_learner(const ModelConfig& config, std::uint64_t seed);

/// Linear ramp from 0 to lr over the first round(warmup_fraction * total)
/// steps, then linear decay back to 0 at the last step (index total-1).
double lr_schedule(long long step, long long total_steps, double warmup_fraction, double lr);

/// Adam update with bias correction under the warmup/decay schedule.
/// Throws NonFiniteGradient if any gradient coefficient is not finite.
void optimizer_step(LearnerState& state, const ParamSet& grads, long long step_index,
                    long long total_steps, const TrainConfig& config);

struct StageData {
  std::vector<PairExample> train;
  std::vector<PairExample> validation;
};

struct EpochStats {
  int epoch = 0;
  LossBreakdown loss;
};

struct ValidationPoint {
  int epoch = 0;
  double value = 0.0;  // recall@10 (audiovisual) or validation loss (auditory)
};

struct TrainResult {
  ParamSet best_params;
  ParamSet final_params;
  std::vector<EpochStats> trace;
  std::vector<ValidationPoint> validation;
  int best_epoch = 0;
  long long infonce_skipped_batches = 0;
};

/// Runs epochs x batches of forward/backward/optimizer_step. Deterministic in
/// (state seed, config, data). The audiovisual stage keeps the checkpoint with
/// the best validation recall@10; the auditory stage keeps the lowest
/// validation loss, probing every validate_every epochs.
TrainResult train_stage(LearnerState& state, const StageData& data, const TrainConfig& config,
                        Stage stage);

/// recall@10 of cross-modal retrieval over pairs (used for validation probes).
double validation_recall_at_10(const ParamSet& params, const ModelConfig& cfg,
                               std::span<const PairExample> pairs);

/// Central finite-difference check of the analytic gradients of loss_total.
/// Returns max over checked coefficients of
/// |g_analytic - g_fd| / max(|g_analytic|, |g_fd|, 1e-12).
/// `analytic_scale` is a fault-injection hook for validating the checker's own
/// sensitivity; `param_filter` restricts the check to matching tensor names
/// (empty selection yields 0).
double gradient_check(const LearnerState& state, std::span<const PairExample> batch,
                      const TrainConfig& config, Stage stage, double epsilon,
                      double analytic_scale = 1.0,
                      const std::function<bool(const std::string&)>& param_filter = {});

}  // namespace xsl
