#include <benchmark/benchmark.h>

#include "xslearn/eval.hpp"
#include "xslearn/rng.hpp"

namespace {

using namespace xsl;

EmbeddingSet random_set(int n_types, int tokens_per_type, int n_speakers, int dim,
                        std::uint64_t seed) {
  Rng rng(seed);
  EmbeddingSet set;
  long long id = 0;
  for (int t = 0; t < n_types; ++t)
    for (int k = 0; k < tokens_per_type; ++k) {
      EmbeddingItem e;
      e.vector.resize(dim);
      for (int d = 0; d < dim; ++d) e.vector[d] = rng.gaussian();
      e.type_label = t;
      e.speaker_label = k % n_speakers;
      e.token_id = id++;
      set.items.push_back(std::move(e));
    }
  return set;
}

void BM_AbxError(benchmark::State& state) {
  const EmbeddingSet set = random_set(16, 16, 4, 40, 1);
  for (auto _ : state) benchmark::DoNotOptimize(abx_error(set, AbxDistance::kCosine));
}
BENCHMARK(BM_AbxError);

void BM_Lextest(benchmark::State& state) {
  const EmbeddingSet set = random_set(20, 20, 4, 32, 2);
  for (auto _ : state) benchmark::DoNotOptimize(lextest_score(set, 20));
}
BENCHMARK(BM_Lextest);

void BM_Semtest(benchmark::State& state) {
  const EmbeddingSet words = random_set(20, 20, 4, 32, 3);
  EmbeddingSet objects = random_set(20, 20, 1, 32, 4);
  for (auto& e : objects.items) e.token_id += 10000;
  for (auto _ : state) benchmark::DoNotOptimize(semtest_score(words, objects, similarity));
}
BENCHMARK(BM_Semtest);

void BM_Spearman(benchmark::State& state) {
  Rng rng(5);
  std::vector<double> x(80), y(80);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = rng.gaussian();
    y[i] = rng.gaussian();
  }
  for (auto _ : state)
    benchmark::DoNotOptimize(spearman(x, y, static_cast<int>(state.range(0)), 6));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Spearman)->Arg(1000)->Arg(100000);

}  // namespace
