#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "xslearn/errors.hpp"
#include "xslearn/naming_stats.hpp"
#include "xslearn/rng.hpp"

using namespace xsl;

namespace {

const std::filesystem::path kInventoryPath =
    std::filesystem::path(XSL_DATA_DIR) / "coco_inventory.tsv";

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("daily naming rate follows the product formula") {
  CHECK(daily_naming_rate({0.0, 56.1, 0.5}) == 0.0);
  CHECK(daily_naming_rate({1.0, 60.0, 1.0}) == doctest::Approx(1.0));

  // invert the most frequent row of the shipped table through the formula,
  // then verify the round trip reproduces its daily rate exactly
  const double per_hour = 1.482 / ((56.1 / 60.0) * 0.5);
  CHECK(daily_naming_rate({per_hour, 56.1, 0.5}) == doctest::Approx(1.482).epsilon(1e-12));
  CHECK(per_hour == doctest::Approx(3.170).epsilon(1e-3));
}

TEST_CASE("daily naming rate rejects invalid inputs") {
  CHECK_THROWS_AS(daily_naming_rate({-1.0, 56.1, 0.5}), InvalidInput);
  CHECK_THROWS_AS(daily_naming_rate({1.0, -5.0, 0.5}), InvalidInput);
  CHECK_THROWS_AS(daily_naming_rate({1.0, 56.1, 1.5}), InvalidInput);
}

TEST_CASE("daily naming rate is linear in each factor") {
  Rng rng(77);
  for (int i = 0; i < 100; ++i) {
    NamingRateInputs in;
    in.per_hour_rate = rng.uniform(0.0, 5.0);
    in.mealtime_minutes = rng.uniform(1.0, 120.0);
    in.cooccurrence_likelihood = rng.uniform(0.0, 1.0);
    NamingRateInputs doubled = in;
    doubled.mealtime_minutes *= 2.0;
    CHECK(daily_naming_rate(doubled) ==
          doctest::Approx(2.0 * daily_naming_rate(in)).epsilon(1e-12));
  }
}

TEST_CASE("round_half_up behaves at the boundary") {
  CHECK(round_half_up(0.0) == 0);
  CHECK(round_half_up(0.5) == 1);
  CHECK(round_half_up(1.49) == 1);
  CHECK(round_half_up(1.5) == 2);
  CHECK(round_half_up(2.5) == 3);
}

TEST_CASE("shipped table reproduces the published extrapolated counts") {
  const CategoryInventory inv = CategoryInventory::load(kInventoryPath);
  REQUIRE(inv.size() == 80);
  REQUIRE(inv.record(0).name == "person");

  for (const auto& [days, expected] : {std::pair{60, 89LL}, {120, 178LL}, {180, 267LL}}) {
    const TargetCounts t = target_counts(inv, days, Condition::kNatural);
    CHECK(t.per_category[0] == expected);
    // the most frequent category is the per-category maximum
    for (long long v : t.per_category) CHECK(v <= expected);
  }

  // rarest rows: 0.028/day over 60 days
  const TargetCounts t60 = target_counts(inv, 60, Condition::kNatural);
  CHECK(t60.per_category[79] == 2);

  const TargetCounts u = target_counts(inv, 120, Condition::kUniform);
  for (long long v : u.per_category) CHECK(v == 37);

  // uniform total stays within C of the natural total
  const TargetCounts n120 = target_counts(inv, 120, Condition::kNatural);
  CHECK(std::abs(u.total() - n120.total()) <= inv.size());
}

TEST_CASE("zero duration gives zero targets") {
  const CategoryInventory inv = CategoryInventory::load(kInventoryPath);
  for (auto condition : {Condition::kNatural, Condition::kUniform})
    for (long long v : target_counts(inv, 0, condition).per_category) CHECK(v == 0);
}

TEST_CASE("targets are monotone in duration") {
  const CategoryInventory inv = make_zipf_inventory(12, 1.0, 2.5, 99);
  TargetCounts prev = target_counts(inv, 0, Condition::kNatural);
  for (int days : {1, 5, 20, 60, 120, 240}) {
    const TargetCounts cur = target_counts(inv, days, Condition::kNatural);
    for (std::size_t c = 0; c < cur.per_category.size(); ++c)
      CHECK(cur.per_category[c] >= prev.per_category[c]);
    prev = cur;
  }
}

TEST_CASE("uniform total is within C of natural total for synthetic inventories") {
  Rng rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    const int c = static_cast<int>(rng.uniform_int(2, 30));
    const CategoryInventory inv =
        make_zipf_inventory(c, rng.uniform(0.5, 1.5), rng.uniform(0.2, 4.0), rng.next_u64());
    const int days = static_cast<int>(rng.uniform_int(1, 365));
    const auto natural = target_counts(inv, days, Condition::kNatural);
    const auto uniform = target_counts(inv, days, Condition::kUniform);
    CHECK(std::abs(uniform.total() - natural.total()) <= c);
  }
}

TEST_CASE("shipped inventory round-trips byte-identically") {
  const std::string original = slurp(kInventoryPath);
  const CategoryInventory inv = CategoryInventory::from_text(original);
  CHECK(inv.to_text() == original);
  CHECK(inv.has_uniform_override());
  CHECK(inv.uniform_daily_rate() == doctest::Approx(0.31).epsilon(1e-12));
}

TEST_CASE("synthetic inventory save/load preserves every field") {
  const CategoryInventory inv = make_zipf_inventory(9, 1.1, 3.0, 1234);
  const auto path = std::filesystem::temp_directory_path() / "xsl_test_inventory.tsv";
  inv.save(path);
  const CategoryInventory back = CategoryInventory::load(path);
  REQUIRE(back.size() == inv.size());
  for (int c = 0; c < inv.size(); ++c) {
    CHECK(back.record(c).name == inv.record(c).name);
    CHECK(back.record(c).daily_rate == inv.record(c).daily_rate);
    CHECK(back.record(c).mean_area == inv.record(c).mean_area);
    CHECK(back.record(c).word_forms == inv.record(c).word_forms);
  }
  CHECK_FALSE(back.has_uniform_override());
  CHECK(back.uniform_daily_rate() == doctest::Approx(inv.mean_daily_rate()));
  std::filesystem::remove(path);
}

TEST_CASE("inventory validation rejects malformed tables") {
  auto rec = [](int id, const char* name, double rate, std::vector<std::string> words,
                double area) {
    return CategoryRecord{id, name, rate, std::move(words), area};
  };
  CHECK_THROWS_AS(CategoryInventory(std::vector<CategoryRecord>{}), InvalidInput);
  CHECK_THROWS_AS(CategoryInventory({rec(1, "a", 1.0, {"a"}, 0.1)}), InvalidInput);  // id gap
  CHECK_THROWS_AS(CategoryInventory({rec(0, "a", -1.0, {"a"}, 0.1)}), InvalidInput);
  CHECK_THROWS_AS(CategoryInventory({rec(0, "a", 0.0, {"a"}, 0.1)}), InvalidInput);  // all zero
  CHECK_THROWS_AS(CategoryInventory({rec(0, "a", 1.0, {}, 0.1)}), InvalidInput);
  CHECK_THROWS_AS(
      CategoryInventory({rec(0, "a", 1.0, {"w"}, 0.1), rec(1, "b", 1.0, {"w"}, 0.1)}),
      InvalidInput);  // duplicate word form
  CHECK_THROWS_AS(CategoryInventory({rec(0, "a", 1.0, {"a"}, 0.0)}), InvalidInput);
  CHECK_THROWS_AS(CategoryInventory({rec(0, "a", 1.0, {"a"}, 1.5)}), InvalidInput);
}

TEST_CASE("condition names round-trip and reject junk") {
  CHECK(condition_from_name("natural") == Condition::kNatural);
  CHECK(condition_from_name("uniform") == Condition::kUniform);
  CHECK(condition_name(Condition::kUniform) == "uniform");
  CHECK_THROWS_AS(condition_from_name("zipf"), BadConfig);
}
