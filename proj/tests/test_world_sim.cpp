#include <doctest.h>

#include <algorithm>
#include <set>

#include <Eigen/Dense>

#include "xslearn/errors.hpp"
#include "xslearn/world.hpp"

using namespace xsl;

namespace {

WorldConfig small_config() {
  WorldConfig w;
  w.n_categories = 6;
  w.n_phones = 10;
  w.phone_dim = 8;
  w.visual_dim = 12;
  w.n_speakers = 3;
  w.filler_vocab_size = 8;
  w.seed = 11;
  return w;
}

World small_world(std::uint64_t seed = 11) {
  WorldConfig cfg = small_config();
  cfg.seed = seed;
  return World::generate(cfg, make_zipf_inventory(cfg.n_categories, 1.0, 1.5, 42));
}

// test-side oracle for the counting policy: token repetitions of a category
// count iff the scene holds at least one object of that category
std::vector<std::pair<int, long long>> count_events(const AudiovisualPair& p) {
  std::map<int, long long> tokens;
  for (const auto& t : p.utterance.tokens)
    if (t.category != kFillerCategory) ++tokens[t.category];
  std::set<int> scene;
  for (const auto& o : p.scene.objects) scene.insert(o.category);
  std::vector<std::pair<int, long long>> out;
  for (const auto& [cat, n] : tokens)
    if (scene.count(cat)) out.emplace_back(cat, n);
  return out;
}

AudiovisualPair bare_pair(long long id, std::vector<std::pair<int, long long>> incidence) {
  AudiovisualPair p;
  p.pair_id = id;
  p.incidence = std::move(incidence);
  return p;
}

TargetCounts make_targets(std::vector<long long> counts) {
  TargetCounts t;
  t.per_category = std::move(counts);
  t.duration_days = 1;
  t.condition = Condition::kNatural;
  return t;
}

}  // namespace

TEST_CASE("world generation is deterministic in the seed") {
  const World a = small_world(7);
  const World b = small_world(7);
  const World c = small_world(8);
  CHECK(a.visual_prototypes() == b.visual_prototypes());
  CHECK(a.phone_prototypes() == b.phone_prototypes());
  CHECK(a.pronunciation("w0") == b.pronunciation("w0"));
  CHECK(a.visual_prototypes() != c.visual_prototypes());
}

TEST_CASE("prototypes are unit norm and distinct") {
  WorldConfig cfg = small_config();
  cfg.n_categories = 2;
  cfg.visual_dim = 8;
  const World w = World::generate(cfg, make_zipf_inventory(2, 1.0, 1.5, 3));
  for (int c = 0; c < 2; ++c)
    CHECK(w.visual_prototypes().col(c).norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(w.visual_prototypes().col(0).dot(w.visual_prototypes().col(1))) < 1.0);
}

TEST_CASE("disabled speaker transforms render the bare prototype") {
  WorldConfig cfg = small_config();
  cfg.n_speakers = 1;
  cfg.speaker_transforms = false;
  cfg.phone_noise_sd = 0.0;
  cfg.frames_per_phone_min = cfg.frames_per_phone_max = 2;
  const World w = World::generate(cfg, make_zipf_inventory(cfg.n_categories, 1.0, 1.5, 42));
  Rng rng(1);
  const Eigen::MatrixXd frames = w.render_phone(3, 0, rng);
  REQUIRE(frames.cols() == 2);
  CHECK(frames.col(0) == w.phone_prototypes().col(3));
  CHECK(frames.col(1) == w.phone_prototypes().col(3));
}

TEST_CASE("speaker gains keep eigenvalues in the configured band") {
  const World w = small_world(21);
  for (const auto& sp : w.speakers()) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sp.gain);
    for (int i = 0; i < es.eigenvalues().size(); ++i) {
      CHECK(es.eigenvalues()[i] >= 0.8 - 1e-9);
      CHECK(es.eigenvalues()[i] <= 1.2 + 1e-9);
    }
  }
}

TEST_CASE("pronunciations are unique phone sequences of length 2-6") {
  const World w = small_world(4);
  std::set<std::vector<int>> seen;
  for (const auto& rec : w.inventory().records())
    for (const auto& form : rec.word_forms) {
      const auto& seq = w.pronunciation(form);
      CHECK(seq.size() >= 2);
      CHECK(seq.size() <= 6);
      CHECK(seen.insert(seq).second);
    }
  for (const auto& filler : w.filler_words()) CHECK(seen.insert(w.pronunciation(filler)).second);
}

TEST_CASE("sample_pair computes incidence per the counting policy") {
  WorldConfig cfg = small_config();
  cfg.filler_words_min = cfg.filler_words_max = 0;
  cfg.objects_per_scene_min = cfg.objects_per_scene_max = 1;
  const World w = World::generate(cfg, make_zipf_inventory(cfg.n_categories, 1.0, 1.5, 42));

  SUBCASE("single naming with referent present") {
    Rng rng(5);
    const auto p = sample_pair(w, {2}, {2}, 0, rng, 1);
    REQUIRE(p.incidence.size() == 1);
    CHECK(p.incidence[0] == std::pair<int, long long>{2, 1});
  }
  SUBCASE("word without referent counts nothing") {
    Rng rng(5);
    const auto p = sample_pair(w, {}, {2}, 0, rng, 2);
    CHECK(p.incidence.empty());
    CHECK(p.scene.objects.size() >= 1);  // scenes are never empty
  }
  SUBCASE("repeated naming counts every token") {
    Rng rng(5);
    const auto p = sample_pair(w, {2}, {2, 2}, 0, rng, 3);
    REQUIRE(p.incidence.size() == 1);
    CHECK(p.incidence[0] == std::pair<int, long long>{2, 2});
    CHECK(p.incidence == count_events(p));
  }
}

TEST_CASE("generated pools satisfy the structural invariants") {
  const World w = small_world(13);
  GenerationConfig gen;
  gen.pool_size = 300;
  gen.auditory_utterances = 0;
  const std::vector<long long> max_targets(6, 10);
  auto pool = build_pool(w, gen, 555);
  top_up_pool(w, pool, max_targets, gen.pool_size, 555);
  REQUIRE(pool.size() >= 300);

  for (const auto& p : pool) {
    CHECK(p.incidence == count_events(p));
    double area = 0.0;
    for (const auto& o : p.scene.objects) area += o.area;
    CHECK(area <= 1.0 + 1e-12);
    CHECK(!p.scene.objects.empty());
    // world config demands at least one filler word per utterance
    bool has_filler = false;
    for (const auto& t : p.utterance.tokens) has_filler = has_filler || t.category == kFillerCategory;
    CHECK(has_filler);
  }

  // feasibility top-up: single-event pairs alone cover the max targets
  std::vector<long long> singles(6, 0);
  for (const auto& p : pool)
    if (p.incidence.size() == 1 && p.incidence[0].second == 1)
      ++singles[static_cast<std::size_t>(p.incidence[0].first)];
  for (int c = 0; c < 6; ++c) CHECK(singles[static_cast<std::size_t>(c)] >= 10);
}

TEST_CASE("build_subset handles the hand-built overshoot instance") {
  const std::vector<AudiovisualPair> pool = {
      bare_pair(0, {{0, 2}}), bare_pair(1, {{0, 1}}), bare_pair(2, {{1, 1}})};
  const TargetCounts targets = make_targets({1, 1});

  // exhaustive oracle: the only subset achieving the targets exactly
  std::vector<std::size_t> best;
  for (int mask = 0; mask < 8; ++mask) {
    long long c0 = 0, c1 = 0;
    std::vector<std::size_t> subset;
    for (int i = 0; i < 3; ++i)
      if (mask & (1 << i)) {
        subset.push_back(static_cast<std::size_t>(i));
        c0 += pool[static_cast<std::size_t>(i)].incidence_of(0);
        c1 += pool[static_cast<std::size_t>(i)].incidence_of(1);
      }
    if (c0 == 1 && c1 == 1) best = subset;
  }
  REQUIRE(best == std::vector<std::size_t>{1, 2});

  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    auto result = build_subset(pool, targets, seed, 0);
    std::sort(result.selected.begin(), result.selected.end());
    CHECK(result.selected == best);
    CHECK(result.achieved == std::vector<long long>{1, 1});
  }
}

TEST_CASE("build_subset with all-zero targets returns an empty manifest") {
  const std::vector<AudiovisualPair> pool = {bare_pair(0, {{0, 1}}), bare_pair(1, {{1, 1}})};
  const auto result = build_subset(pool, make_targets({0, 0}), 9, 0);
  CHECK(result.selected.empty());
  CHECK(result.achieved == std::vector<long long>{0, 0});
}

TEST_CASE("build_subset reports deficits and honors the tolerance") {
  const std::vector<AudiovisualPair> pool = {bare_pair(0, {{0, 2}}), bare_pair(1, {{0, 2}})};
  const TargetCounts targets = make_targets({3});
  CHECK_THROWS_AS(build_subset(pool, targets, 1, 0), InsufficientPool);
  const auto result = build_subset(pool, targets, 1, 1);
  CHECK(result.achieved == std::vector<long long>{2});
  CHECK(result.deficit == std::vector<long long>{1});
}

TEST_CASE("build_subset never overshoots on random pools") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const int n_cats = static_cast<int>(rng.uniform_int(2, 5));
    std::vector<AudiovisualPair> pool;
    for (int i = 0; i < 60; ++i) {
      std::vector<std::pair<int, long long>> inc;
      for (int c = 0; c < n_cats; ++c)
        if (rng.bernoulli(0.4)) inc.emplace_back(c, rng.uniform_int(1, 3));
      pool.push_back(bare_pair(i, std::move(inc)));
    }
    std::vector<long long> t(static_cast<std::size_t>(n_cats));
    for (auto& v : t) v = rng.uniform_int(0, 15);
    const auto result = build_subset(pool, make_targets(t), rng.next_u64(),
                                     std::numeric_limits<long long>::max());
    for (std::size_t c = 0; c < t.size(); ++c) CHECK(result.achieved[c] <= t[static_cast<std::size_t>(c)]);
  }
}

TEST_CASE("build_subset reaches planted greedy-reachable covers exactly") {
  Rng rng(71);
  for (int trial = 0; trial < 20; ++trial) {
    const int n_cats = static_cast<int>(rng.uniform_int(2, 6));
    std::vector<long long> t(static_cast<std::size_t>(n_cats));
    for (auto& v : t) v = rng.uniform_int(0, 8);
    std::vector<AudiovisualPair> pool;
    long long id = 0;
    for (int c = 0; c < n_cats; ++c)
      for (long long k = 0; k < t[static_cast<std::size_t>(c)]; ++k)
        pool.push_back(bare_pair(id++, {{c, 1}}));
    for (int j = 0; j < 30; ++j) {  // junk that greedy may or may not take
      std::vector<std::pair<int, long long>> inc;
      for (int c = 0; c < n_cats; ++c)
        if (rng.bernoulli(0.5)) inc.emplace_back(c, rng.uniform_int(1, 4));
      pool.push_back(bare_pair(id++, std::move(inc)));
    }
    const auto result = build_subset(pool, make_targets(t), rng.next_u64(), 0);
    CHECK(result.achieved == t);
  }
}

TEST_CASE("build_subset is deterministic per seed") {
  Rng rng(17);
  std::vector<AudiovisualPair> pool;
  for (int i = 0; i < 40; ++i) {
    std::vector<std::pair<int, long long>> inc;
    for (int c = 0; c < 3; ++c)
      if (rng.bernoulli(0.5)) inc.emplace_back(c, 1);
    pool.push_back(bare_pair(i, std::move(inc)));
  }
  const TargetCounts targets = make_targets({5, 5, 5});
  const auto a = build_subset(pool, targets, 1234, 0);
  const auto b = build_subset(pool, targets, 1234, 0);
  CHECK(a.selected == b.selected);
  CHECK(a.achieved == b.achieved);
  const auto c = build_subset(pool, targets, 1235, 0);
  CHECK((a.selected != c.selected || a.achieved == c.achieved));
}

TEST_CASE("nested subsets grow monotonically") {
  Rng rng(3);
  std::vector<AudiovisualPair> pool;
  for (int i = 0; i < 80; ++i)
    pool.push_back(bare_pair(i, {{static_cast<int>(rng.uniform_int(0, 2)), 1}}));
  const auto small = build_subset(pool, make_targets({4, 4, 4}), 7, 0);
  SubsetCarry carry{small.selected, small.achieved};
  const auto large = build_subset(pool, make_targets({9, 9, 9}), 7, 0, &carry);
  CHECK(large.achieved == std::vector<long long>{9, 9, 9});
  std::set<std::size_t> large_set(large.selected.begin(), large.selected.end());
  for (std::size_t idx : small.selected) CHECK(large_set.count(idx) == 1);
}

TEST_CASE("test sets have the advertised shapes and fresh ids") {
  const World w = small_world(2);
  const TestSets sets = make_test_sets(w, 4, 2, 909);
  CHECK(sets.lextest.size() == 6 * 4);
  CHECK(sets.semtest_words.size() == 6 * 4);
  CHECK(sets.semtest_objects.size() == 6 * 4);
  CHECK(sets.abx.size() == 10u * 3u * 2u);
  for (const auto& item : sets.lextest) CHECK(item.token_id >= 3'000'000'000LL);
  for (const auto& item : sets.semtest_objects) CHECK(item.object_id >= 3'500'000'000LL);

  // the published test scale: 80 categories x 20 tokens per side
  WorldConfig big = small_config();
  big.n_categories = 80;
  big.n_phones = 24;
  const World w80 = World::generate(big, make_zipf_inventory(80, 1.0, 1.5, 5));
  const TestSets big_sets = make_test_sets(w80, 20, 1, 11);
  CHECK(big_sets.semtest_words.size() == 1600);
  CHECK(big_sets.semtest_objects.size() == 1600);
}

TEST_CASE("test set construction rejects degenerate requests") {
  const World w = small_world(2);
  CHECK_THROWS_AS(make_test_sets(w, 1, 2, 1), InvalidInput);
  WorldConfig cfg = small_config();
  cfg.n_speakers = 1;
  const World solo = World::generate(cfg, make_zipf_inventory(cfg.n_categories, 1.0, 1.5, 42));
  CHECK_THROWS_AS(make_test_sets(solo, 4, 2, 1), InvalidInput);
}

TEST_CASE("dataset manifests round-trip achieved counts and structure") {
  const World w = small_world(6);
  GenerationConfig gen;
  gen.pool_size = 25;
  const auto pool = build_pool(w, gen, 808);

  Dataset ds;
  ds.info.condition = "pool";
  ds.info.n_categories = 6;
  ds.info.frames_file = "t.frames.tns";
  ds.info.objects_file = "t.objects.tns";
  ds.pairs = pool;
  ds.info.achieved = sum_incidence(ds.pairs, 6);
  ds.info.deficit.assign(6, 0);

  const auto dir = std::filesystem::temp_directory_path() / "xsl_manifest_test";
  std::filesystem::create_directories(dir);
  save_dataset(dir, "t", ds, true);
  const Dataset back = load_dataset(dir, "t");
  CHECK(back.info.achieved == ds.info.achieved);
  CHECK(back.pairs.size() == ds.pairs.size());
  for (std::size_t i = 0; i < back.pairs.size(); ++i) {
    CHECK(back.pairs[i].pair_id == ds.pairs[i].pair_id);
    CHECK(back.pairs[i].incidence == ds.pairs[i].incidence);
    CHECK(back.pairs[i].utterance.tokens.size() == ds.pairs[i].utterance.tokens.size());
    CHECK(back.pairs[i].scene.objects.size() == ds.pairs[i].scene.objects.size());
    // features survive the f32 sidecar round trip
    CHECK((back.pairs[i].utterance.frame_matrix().cast<float>() ==
           ds.pairs[i].utterance.frame_matrix().cast<float>()));
  }
  std::filesystem::remove_all(dir);
}
