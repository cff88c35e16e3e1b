#include <doctest.h>

#include <cmath>

#include "xslearn/errors.hpp"
#include "xslearn/learner.hpp"
#include "xslearn/rng.hpp"
#include "xslearn/trainer.hpp"

using namespace xsl;

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  m.phone_dim = 6;
  m.visual_dim = 8;
  m.hidden_dim = 10;
  m.embed_dim = 7;
  m.codebook_size = 8;
  m.context_window = 3;
  return m;
}

Eigen::MatrixXd random_frames(int dim, int t, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd x(dim, t);
  for (int c = 0; c < t; ++c)
    for (int r = 0; r < dim; ++r) x(r, c) = rng.gaussian();
  return x;
}

ParamSet live_params(const ModelConfig& m, std::uint64_t seed) {
  ParamSet p = init_params(m, seed);
  perturb_params(p, 0.05, seed + 1);  // moves the zero-initialized head off zero
  return p;
}

}  // namespace

TEST_CASE("utterance encoding shapes and determinism") {
  const ModelConfig m = tiny_model();
  const ParamSet p = init_params(m, 3);
  const auto frames = random_frames(m.phone_dim, 1, 5);
  const UtteranceCache uc = encode_utterance_cache(p, m, frames);
  CHECK(uc.z.rows() == m.hidden_dim);
  CHECK(uc.z.cols() == 1);
  CHECK(uc.embedding.size() == m.embed_dim);

  const auto frames2 = random_frames(m.phone_dim, 9, 6);
  CHECK(encode_utterance(p, m, frames2) == encode_utterance(p, m, frames2));
}

TEST_CASE("frame order matters when the context window spans neighbors") {
  const ModelConfig m = tiny_model();
  const ParamSet p = init_params(m, 4);
  Eigen::MatrixXd frames = random_frames(m.phone_dim, 3, 7);
  Eigen::MatrixXd reversed = frames.rowwise().reverse();
  CHECK((encode_utterance(p, m, frames) - encode_utterance(p, m, reversed)).norm() > 1e-8);
}

TEST_CASE("scene encoding is permutation invariant and duplicate stable") {
  const ModelConfig m = tiny_model();
  const ParamSet p = live_params(m, 8);
  Eigen::MatrixXd ab = random_frames(m.visual_dim, 2, 9);
  Eigen::MatrixXd ba(m.visual_dim, 2);
  ba.col(0) = ab.col(1);
  ba.col(1) = ab.col(0);
  CHECK((encode_scene(p, m, ab) - encode_scene(p, m, ba)).cwiseAbs().maxCoeff() <= 1e-12);

  Eigen::MatrixXd one = ab.leftCols(1);
  Eigen::MatrixXd dup(m.visual_dim, 2);
  dup.col(0) = one.col(0);
  dup.col(1) = one.col(0);
  CHECK(encode_scene(p, m, one) == encode_scene(p, m, dup));
}

TEST_CASE("encoders reject empty and mismatched input") {
  const ModelConfig m = tiny_model();
  const ParamSet p = init_params(m, 1);
  CHECK_THROWS_AS(encode_utterance(p, m, Eigen::MatrixXd(m.phone_dim, 0)), EmptyInput);
  CHECK_THROWS_AS(encode_scene(p, m, Eigen::MatrixXd(m.visual_dim, 0)), EmptyInput);
  CHECK_THROWS_AS(encode_utterance(p, m, Eigen::MatrixXd(m.phone_dim + 1, 3)), DimMismatch);
}

TEST_CASE("similarity is the dot product") {
  Eigen::VectorXd v(3);
  v << 0.6, 0.8, 0.0;
  CHECK(similarity(v, v) == doctest::Approx(1.0));
  Eigen::VectorXd u(3);
  u << 0.0, 0.0, 1.0;
  CHECK(similarity(v, u) == 0.0);
  CHECK(similarity(2.0 * v, u + v) == doctest::Approx(2.0 * similarity(v, u + v)));
  Eigen::VectorXd w(2);
  CHECK_THROWS_AS(similarity(v, w), DimMismatch);
}

TEST_CASE("masked prediction with a collapsed codebook scores uniformly") {
  ModelConfig m = tiny_model();
  ParamSet p = live_params(m, 10);
  // all codes identical: every candidate gets the same cosine similarity
  for (int c = 1; c < m.codebook_size; ++c) p.codebook.col(c) = p.codebook.col(0);

  TrainConfig tc;
  tc.n_negatives = 9;
  tc.mask_fraction = 0.3;
  tc.mask_span = 2;
  Rng rng(4);
  const auto frames = random_frames(m.phone_dim, 12, 11);
  const UtteranceCache uc = encode_utterance_masked(p, m, frames, tc.mask_fraction, tc.mask_span, rng);
  const MaskedPredCache mp = masked_prediction_forward(p, m, uc, tc.n_negatives, 0.1, rng);
  REQUIRE(mp.n_positions > 0);
  CHECK(mp.ce_sum / mp.n_positions == doctest::Approx(std::log(10.0)).epsilon(1e-9));
}

TEST_CASE("masked forward covers the requested fraction and rejects short input") {
  const ModelConfig m = tiny_model();
  const ParamSet p = init_params(m, 12);
  Rng rng(5);
  const auto frames = random_frames(m.phone_dim, 20, 13);
  const UtteranceCache uc = encode_utterance_masked(p, m, frames, 0.3, 3, rng);
  CHECK(uc.masked_positions.size() >= 6);  // ceil(0.3 * 20)
  CHECK_THROWS_AS(encode_utterance_masked(p, m, random_frames(m.phone_dim, 3, 1), 0.3, 3, rng),
                  UtteranceTooShort);
}

TEST_CASE("diversity penalty has the closed-form extremes") {
  Eigen::VectorXd uniform = Eigen::VectorXd::Constant(8, 5.0);
  CHECK(diversity_from_usage(uniform) == doctest::Approx(0.0).epsilon(1e-12));

  Eigen::VectorXd point = Eigen::VectorXd::Zero(8);
  point[3] = 17.0;
  CHECK(diversity_from_usage(point) == doctest::Approx(7.0 / 8.0).epsilon(1e-12));

  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd usage(8);
    for (int i = 0; i < 8; ++i) usage[i] = static_cast<double>(rng.uniform_int(0, 20));
    if (usage.sum() == 0) usage[0] = 1;
    const double d = diversity_from_usage(usage);
    CHECK(d >= -1e-12);
    CHECK(d <= 7.0 / 8.0 + 1e-12);
  }
  // nonuniform usage is strictly penalized
  Eigen::VectorXd skewed = uniform;
  skewed[0] += 3.0;
  CHECK(diversity_from_usage(skewed) > 0.0);
}

TEST_CASE("InfoNCE closed forms") {
  SUBCASE("single pair carries no contrastive signal") {
    Eigen::MatrixXd a = Eigen::MatrixXd::Random(5, 1);
    Eigen::MatrixXd b = Eigen::MatrixXd::Random(5, 1);
    CHECK(infonce_loss(a, b, 0.1) == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("constant similarities give ln N") {
    for (int n : {2, 3, 7}) {
      Eigen::MatrixXd a = Eigen::MatrixXd::Zero(4, n);
      Eigen::MatrixXd b = Eigen::MatrixXd::Ones(4, n);
      CHECK(infonce_loss(a, b, 0.37) ==
            doctest::Approx(std::log(static_cast<double>(n))).epsilon(1e-9));
    }
  }
  SUBCASE("strong diagonal at unit temperature") {
    // S = [[10,0],[0,10]]: loss = log(1 + e^-10)
    Eigen::MatrixXd a(2, 2), b(2, 2);
    a << std::sqrt(10.0), 0.0, 0.0, std::sqrt(10.0);
    b = a;
    CHECK(infonce_loss(a, b, 1.0) ==
          doctest::Approx(std::log1p(std::exp(-10.0))).epsilon(1e-12));
  }
  SUBCASE("loss decreases as diagonal dominance grows") {
    double prev = std::numeric_limits<double>::infinity();
    for (double c : {1.0, 2.0, 4.0, 8.0}) {
      Eigen::MatrixXd a = Eigen::MatrixXd::Identity(3, 3) * std::sqrt(c);
      const double loss = infonce_loss(a, a, 1.0);
      CHECK(loss < prev);
      CHECK(loss >= 0.0);
      prev = loss;
    }
  }
  SUBCASE("nonnegative on random inputs") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
      Eigen::MatrixXd a(4, 5), b(4, 5);
      for (int i = 0; i < a.size(); ++i) a.data()[i] = rng.gaussian();
      for (int i = 0; i < b.size(); ++i) b.data()[i] = rng.gaussian();
      CHECK(infonce_loss(a, b, 0.5) >= 0.0);
    }
  }
  SUBCASE("mismatched shapes are rejected") {
    Eigen::MatrixXd a(4, 3), b(5, 3);
    CHECK_THROWS_AS(infonce_loss(a, b, 1.0), DimMismatch);
  }
}

TEST_CASE("loss composition identities hold exactly") {
  CHECK(total_loss(2.0, 1.0, 4.0, 1.0).loss_total == 4.0);
  CHECK(total_loss(2.0, 1.0, 4.0, 0.0).loss_total == 2.0 + 0.1 * 1.0);
  CHECK(total_loss(4.0, 0.0, 2.0, 0.5).loss_total == 3.0);
  CHECK(total_loss(1.5, 0.25, std::nullopt, 0.0).loss_total == 1.5 + 0.1 * 0.25);

  const LossBreakdown b = total_loss(0.7, 0.3, 1.9, 0.5);
  CHECK(b.loss_aud == 0.7 + 0.1 * 0.3);
  CHECK(b.loss_total == b.alpha * *b.loss_av + (1.0 - b.alpha) * b.loss_aud);
  CHECK_THROWS_AS(total_loss(1.0, 0.0, 1.0, 1.5), InvalidInput);
}

TEST_CASE("learning-rate schedule ramps and decays linearly") {
  const double lr = 1e-4;
  CHECK(lr_schedule(0, 100, 0.1, lr) == 0.0);
  CHECK(lr_schedule(10, 100, 0.1, lr) == doctest::Approx(lr));
  CHECK(lr_schedule(99, 100, 0.1, lr) == doctest::Approx(0.0));
  CHECK(lr_schedule(5, 100, 0.1, lr) == doctest::Approx(0.5 * lr));
  // halfway through the decay
  CHECK(lr_schedule(54, 100, 0.1, lr) > lr_schedule(80, 100, 0.1, lr));
  CHECK_THROWS_AS(lr_schedule(100, 100, 0.1, lr), InvalidInput);
  // no warmup: immediate peak
  CHECK(lr_schedule(0, 10, 0.0, lr) == doctest::Approx(lr));
}

TEST_CASE("optimizer rejects non-finite gradients") {
  const ModelConfig m = tiny_model();
  LearnerState state = make_learner(m, 2);
  ParamSet grads = zeros_like(state.params);
  grads.enc_w1(0, 0) = std::numeric_limits<double>::quiet_NaN();
  TrainConfig tc;
  CHECK_THROWS_AS(optimizer_step(state, grads, 0, 10, tc), NonFiniteGradient);
}

namespace {

StageData toy_stage_data(const ModelConfig& m, int n_train, int n_val, std::uint64_t seed) {
  Rng rng(seed);
  StageData data;
  const auto make_example = [&] {
    PairExample ex;
    ex.frames = random_frames(m.phone_dim, 8 + static_cast<int>(rng.uniform_int(0, 6)),
                              rng.next_u64());
    ex.objects = random_frames(m.visual_dim, 1 + static_cast<int>(rng.uniform_int(0, 2)),
                               rng.next_u64());
    return ex;
  };
  for (int i = 0; i < n_train; ++i) data.train.push_back(make_example());
  for (int i = 0; i < n_val; ++i) data.validation.push_back(make_example());
  return data;
}

}  // namespace

TEST_CASE("zero-epoch training returns the initial parameters") {
  const ModelConfig m = tiny_model();
  LearnerState state = make_learner(m, 5);
  const ParamSet initial = state.params;
  TrainConfig tc;
  tc.epochs = 0;
  const StageData data = toy_stage_data(m, 4, 0, 21);
  const TrainResult result = train_stage(state, data, tc, Stage::kAuditoryOnly);
  bool equal = true;
  initial.for_each([&](const std::string& name, const auto& t) {
    result.best_params.for_each([&](const std::string& name2, const auto& t2) {
      if (name == name2 && t != t2) equal = false;
    });
  });
  CHECK(equal);
  CHECK(result.trace.empty());
}

TEST_CASE("training is deterministic in the seed") {
  const ModelConfig m = tiny_model();
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.learning_rate = 1e-3;
  tc.seed = 77;
  const StageData data = toy_stage_data(m, 10, 0, 22);

  LearnerState s1 = make_learner(m, 5);
  LearnerState s2 = make_learner(m, 5);
  const TrainResult r1 = train_stage(s1, data, tc, Stage::kAudiovisual);
  const TrainResult r2 = train_stage(s2, data, tc, Stage::kAudiovisual);
  REQUIRE(r1.trace.size() == r2.trace.size());
  for (std::size_t i = 0; i < r1.trace.size(); ++i)
    CHECK(r1.trace[i].loss.loss_total == r2.trace[i].loss.loss_total);
  CHECK(s1.params.enc_w1 == s2.params.enc_w1);
  CHECK(s1.params.vproj_w2 == s2.params.vproj_w2);
}

TEST_CASE("auditory-only training reduces the loss on a small corpus") {
  ModelConfig m = tiny_model();
  m.hidden_dim = 16;
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 10;
  tc.learning_rate = 2e-3;
  tc.mask_span = 2;
  tc.seed = 3;
  StageData data = toy_stage_data(m, 50, 0, 23);
  data.validation.clear();

  LearnerState state = make_learner(m, 9);
  const TrainResult result = train_stage(state, data, tc, Stage::kAuditoryOnly);
  REQUIRE(result.trace.size() == 5);
  for (const auto& epoch : result.trace) CHECK_FALSE(epoch.loss.loss_av.has_value());
  for (std::size_t i = 1; i < result.trace.size(); ++i)
    CHECK(result.trace[i].loss.loss_aud < result.trace[i - 1].loss.loss_aud);
}

TEST_CASE("single-pair batches are counted as skipped for InfoNCE") {
  const ModelConfig m = tiny_model();
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.seed = 9;
  const StageData data = toy_stage_data(m, 5, 0, 24);  // 4 + 1 leftover per epoch

  LearnerState state = make_learner(m, 5);
  const TrainResult result = train_stage(state, data, tc, Stage::kAudiovisual);
  CHECK(result.infonce_skipped_batches == 2);
}

TEST_CASE("audiovisual validation keeps the best recall checkpoint") {
  const ModelConfig m = tiny_model();
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 8;
  tc.validate_every = 2;
  tc.seed = 31;
  const StageData data = toy_stage_data(m, 16, 6, 25);

  LearnerState state = make_learner(m, 5);
  const TrainResult result = train_stage(state, data, tc, Stage::kAudiovisual);
  CHECK(result.validation.size() == 2);
  CHECK(result.best_epoch > 0);
}
