#include <benchmark/benchmark.h>

#include "xslearn/learner.hpp"
#include "xslearn/rng.hpp"

namespace {

using namespace xsl;

ModelConfig bench_model() {
  ModelConfig m;
  m.phone_dim = 16;
  m.visual_dim = 32;
  m.hidden_dim = 40;
  m.embed_dim = 32;
  m.codebook_size = 32;
  m.context_window = 5;
  return m;
}

std::vector<PairExample> bench_batch(const ModelConfig& m, int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PairExample> batch;
  for (int i = 0; i < n; ++i) {
    PairExample ex;
    ex.frames.resize(m.phone_dim, 20 + static_cast<int>(rng.uniform_int(0, 15)));
    for (int j = 0; j < ex.frames.size(); ++j) ex.frames.data()[j] = rng.gaussian();
    ex.objects.resize(m.visual_dim, 3);
    for (int j = 0; j < ex.objects.size(); ++j) ex.objects.data()[j] = rng.gaussian();
    batch.push_back(std::move(ex));
  }
  return batch;
}

void BM_UtteranceForward(benchmark::State& state) {
  const ModelConfig m = bench_model();
  const ParamSet p = init_params(m, 1);
  const auto batch = bench_batch(m, 1, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(encode_utterance(p, m, batch[0].frames));
  }
}
BENCHMARK(BM_UtteranceForward);

void BM_BatchForwardBackward(benchmark::State& state) {
  const ModelConfig m = bench_model();
  ParamSet p = init_params(m, 1);
  perturb_params(p, 0.05, 3);
  const auto batch = bench_batch(m, static_cast<int>(state.range(0)), 2);
  TrainConfig tc;
  ParamSet grads = zeros_like(p);
  std::uint64_t step = 0;
  for (auto _ : state) {
    grads.for_each([](const std::string&, auto& t) { t.setZero(); });
    benchmark::DoNotOptimize(
        compute_loss_and_grads(p, m, batch, tc, Stage::kAudiovisual, step++, &grads));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_BatchForwardBackward)->Arg(16)->Arg(64);

void BM_InfoNCE(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(7);
  Eigen::MatrixXd a(32, n), b(32, n);
  for (int i = 0; i < a.size(); ++i) a.data()[i] = rng.gaussian();
  for (int i = 0; i < b.size(); ++i) b.data()[i] = rng.gaussian();
  Eigen::MatrixXd da = Eigen::MatrixXd::Zero(32, n), db = Eigen::MatrixXd::Zero(32, n);
  for (auto _ : state) {
    da.setZero();
    db.setZero();
    benchmark::DoNotOptimize(infonce_loss_grad(a, b, 0.1, 1.0, da, db));
  }
}
BENCHMARK(BM_InfoNCE)->Arg(32)->Arg(128);

}  // namespace
