#include "xslearn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "xslearn/errors.hpp"
#include "xslearn/eval.hpp"
#include "xslearn/naming_stats.hpp"
#include "xslearn/rng.hpp"

namespace xsl {

namespace {

using ArrayView = Eigen::Map<Eigen::ArrayXd>;
using ConstArrayView = Eigen::Map<const Eigen::ArrayXd>;

std::vector<ArrayView> flat_views(ParamSet& p) {
  std::vector<ArrayView> views;
  p.for_each([&](const std::string&, auto& t) { views.emplace_back(t.data(), t.size()); });
  return views;
}

std::vector<ConstArrayView> flat_views(const ParamSet& p) {
  std::vector<ConstArrayView> views;
  p.for_each([&](const std::string&, const auto& t) { views.emplace_back(t.data(), t.size()); });
  return views;
}

}  // namespace

LearnerState make_learner(const ModelConfig& config, std::uint64_t seed) {
  LearnerState state;
  state.model = config;
  state.params = init_params(config, seed);
  state.opt.m = zeros_like(state.params);
  state.opt.v = zeros_like(state.params);
  state.opt.step = 0;
  return state;
}

double lr_schedule(long long step, long long total_steps, double warmup_fraction, double lr) {
  if (total_steps < 1) throw InvalidInput("schedule needs at least one step");
  if (step < 0 || step >= total_steps) throw InvalidInput("step index out of range");
  const long long warmup = round_half_up(warmup_fraction * static_cast<double>(total_steps));
  if (warmup > 0 && step <= warmup)
    return lr * static_cast<double>(step) / static_cast<double>(warmup);
  const long long last = total_steps - 1;
  if (last <= warmup) return lr;
  return lr * static_cast<double>(last - step) / static_cast<double>(last - warmup);
}

void optimizer_step(LearnerState& state, const ParamSet& grads, long long step_index,
                    long long total_steps, const TrainConfig& config) {
  if (!grads.all_finite()) throw NonFiniteGradient("gradient contains non-finite values");
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  const double lr = lr_schedule(step_index, total_steps, config.warmup_fraction,
                                config.learning_rate);
  const auto t = static_cast<double>(state.opt.step + 1);
  const double bc1 = 1.0 - std::pow(kBeta1, t);
  const double bc2 = 1.0 - std::pow(kBeta2, t);

  auto pv = flat_views(state.params);
  auto mv = flat_views(state.opt.m);
  auto vv = flat_views(state.opt.v);
  const auto gv = flat_views(grads);
  for (std::size_t i = 0; i < pv.size(); ++i) {
    mv[i] = kBeta1 * mv[i] + (1.0 - kBeta1) * gv[i];
    vv[i] = kBeta2 * vv[i] + (1.0 - kBeta2) * gv[i].square();
    pv[i] -= lr * (mv[i] / bc1) / ((vv[i] / bc2).sqrt() + kEps);
  }
  ++state.opt.step;
}

double validation_recall_at_10(const ParamSet& params, const ModelConfig& cfg,
                               std::span<const PairExample> pairs) {
  const auto n = static_cast<int>(pairs.size());
  if (n < 1) throw EmptyInput("validation set is empty");
  Eigen::MatrixXd ea(cfg.embed_dim, n), ev(cfg.embed_dim, n);
  for (int i = 0; i < n; ++i) {
    ea.col(i) = encode_utterance(params, cfg, pairs[static_cast<std::size_t>(i)].frames);
    ev.col(i) = encode_scene(params, cfg, pairs[static_cast<std::size_t>(i)].objects);
  }
  Eigen::MatrixXd s = ea.transpose() * ev;
  return recall_at_k(s, std::min(10, n)).mean;
}

TrainResult train_stage(LearnerState& state, const StageData& data, const TrainConfig& config,
                        Stage stage) {
  config.validate();
  if (data.train.empty()) throw EmptyInput("training set is empty");

  TrainResult result;
  result.best_params = state.params;

  const auto n_train = static_cast<long long>(data.train.size());
  const long long batches_per_epoch = (n_train + config.batch_size - 1) / config.batch_size;
  const long long total_steps = std::max<long long>(1, batches_per_epoch * config.epochs);

  Rng order_rng(derive_seed(config.seed, "batch_order"));
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  const bool has_validation = !data.validation.empty();
  const bool audiovisual = stage == Stage::kAudiovisual;
  double best_metric = audiovisual ? -1.0 : std::numeric_limits<double>::infinity();
  bool have_best = false;

  long long step = 0;
  std::vector<PairExample> batch;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    order_rng.shuffle(order);
    double sum_r = 0.0, sum_d = 0.0, sum_av = 0.0;
    long long n_batches = 0, n_av_batches = 0;
    for (long long b = 0; b < batches_per_epoch; ++b, ++step) {
      batch.clear();
      const std::size_t begin = static_cast<std::size_t>(b) * config.batch_size;
      const std::size_t end =
          std::min(data.train.size(), begin + static_cast<std::size_t>(config.batch_size));
      for (std::size_t i = begin; i < end; ++i) batch.push_back(data.train[order[i]]);

      ParamSet grads = zeros_like(state.params);
      const auto step_seed = derive_seed(derive_seed(config.seed, "step"), step);
      const StepLoss loss = compute_loss_and_grads(state.params, state.model, batch, config,
                                                   stage, step_seed, &grads);
      if (loss.infonce_skipped) ++result.infonce_skipped_batches;
      optimizer_step(state, grads, step, total_steps, config);

      sum_r += loss.breakdown.loss_aud_r;
      sum_d += loss.breakdown.loss_aud_d;
      ++n_batches;
      if (loss.breakdown.loss_av) {
        sum_av += *loss.breakdown.loss_av;
        ++n_av_batches;
      }
    }

    EpochStats es;
    es.epoch = epoch + 1;
    es.loss = total_loss(sum_r / n_batches, sum_d / n_batches,
                         audiovisual && n_av_batches > 0
                             ? std::optional<double>(sum_av / n_av_batches)
                             : std::nullopt,
                         audiovisual ? config.alpha : 0.0);
    result.trace.push_back(es);

    const bool last_epoch = epoch + 1 == config.epochs;
    if (has_validation && ((epoch + 1) % config.validate_every == 0 || last_epoch)) {
      double metric;
      if (audiovisual) {
        metric = validation_recall_at_10(state.params, state.model, data.validation);
      } else {
        const auto val_seed = derive_seed(config.seed, "validation_mask");
        metric = compute_loss_and_grads(state.params, state.model, data.validation, config,
                                        stage, val_seed, nullptr)
                     .breakdown.loss_aud;
      }
      result.validation.push_back({epoch + 1, metric});
      const bool improved = audiovisual ? metric > best_metric : metric < best_metric;
      if (improved) {
        best_metric = metric;
        result.best_params = state.params;
        result.best_epoch = epoch + 1;
        have_best = true;
      }
    }
  }

  result.final_params = state.params;
  if (!have_best) {
    result.best_params = state.params;
    result.best_epoch = config.epochs;
  }
  return result;
}

double gradient_check(const LearnerState& state, std::span<const PairExample> batch,
                      const TrainConfig& config, Stage stage, double epsilon,
                      double analytic_scale,
                      const std::function<bool(const std::string&)>& param_filter) {
  const auto seed = derive_seed(config.seed, "gradient_check");
  ParamSet analytic = zeros_like(state.params);
  compute_loss_and_grads(state.params, state.model, batch, config, stage, seed, &analytic);

  ParamSet probe = state.params;
  auto probe_views = flat_views(probe);
  auto grad_views = flat_views(analytic);

  std::vector<std::string> names;
  state.params.for_each([&](const std::string& name, const auto&) { names.push_back(name); });

  const auto loss_at = [&]() {
    return compute_loss_and_grads(probe, state.model, batch, config, stage, seed, nullptr)
        .breakdown.loss_total;
  };

  double max_rel = 0.0;
  for (std::size_t i = 0; i < probe_views.size(); ++i) {
    if (param_filter && !param_filter(names[i])) continue;
    for (Eigen::Index j = 0; j < probe_views[i].size(); ++j) {
      const double saved = probe_views[i][j];
      probe_views[i][j] = saved + epsilon;
      const double plus = loss_at();
      probe_views[i][j] = saved - epsilon;
      const double minus = loss_at();
      probe_views[i][j] = saved;
      const double fd = (plus - minus) / (2.0 * epsilon);
      const double an = analytic_scale * grad_views[i][j];
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-12});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace xsl
