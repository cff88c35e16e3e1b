#include <benchmark/benchmark.h>

#include "xslearn/rng.hpp"
#include "xslearn/world.hpp"

namespace {

using namespace xsl;

std::vector<AudiovisualPair> random_incidence_pool(int n_pairs, int n_cats, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<AudiovisualPair> pool;
  pool.reserve(static_cast<std::size_t>(n_pairs));
  for (int i = 0; i < n_pairs; ++i) {
    AudiovisualPair p;
    p.pair_id = i;
    for (int c = 0; c < n_cats; ++c)
      if (rng.bernoulli(0.15)) p.incidence.emplace_back(c, rng.uniform_int(1, 3));
    pool.push_back(std::move(p));
  }
  return pool;
}

void BM_BuildSubset(benchmark::State& state) {
  const int n_pairs = static_cast<int>(state.range(0));
  const int n_cats = 20;
  const auto pool = random_incidence_pool(n_pairs, n_cats, 1);
  TargetCounts targets;
  targets.per_category.assign(n_cats, n_pairs / 40);
  targets.duration_days = 1;
  for (auto _ : state)
    benchmark::DoNotOptimize(
        build_subset(pool, targets, 7, std::numeric_limits<long long>::max()));
  state.SetItemsProcessed(state.iterations() * n_pairs);
}
BENCHMARK(BM_BuildSubset)->Arg(1000)->Arg(10000);

}  // namespace

BENCHMARK_MAIN();
