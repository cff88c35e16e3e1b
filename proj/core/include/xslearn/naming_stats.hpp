#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace xsl {

struct CategoryRecord {
  int id = 0;
  std::string name;
  double daily_rate = 0.0;  // naming events per day
  std::vector<std::string> word_forms;
  double mean_area = 0.0;  // fraction of image area, in (0, 1]
};

/// The audiovisual category table: names, daily naming rates, word forms and
/// mean object areas. Either loaded from the shipped statistics file or built
/// synthetically (make_zipf_inventory).
class CategoryInventory {
 public:
  CategoryInventory() = default;
  explicit CategoryInventory(std::vector<CategoryRecord> records, double uniform_daily_rate = 0.0);

  int size() const { return static_cast<int>(records_.size()); }
  const std::vector<CategoryRecord>& records() const { return records_; }
  const CategoryRecord& record(int id) const { return records_.at(static_cast<std::size_t>(id)); }

  double mean_daily_rate() const;

  /// Daily rate used by the uniform condition: the explicit per-file override
  /// when present (the shipped table carries its published value), otherwise
  /// the mean over the per-category daily rates.
  double uniform_daily_rate() const;
  bool has_uniform_override() const { return uniform_override_ > 0.0; }

  void validate() const;

  /// Line-delimited text format, one record per line:
  ///   id \t name \t daily_rate \t word_forms(comma-separated) \t mean_area
  /// preceded by two fixed header comments and an optional
  /// "#uniform_daily_rate" directive. save(load(f)) is byte-identical for
  /// canonical files.
  std::string to_text() const;
  static CategoryInventory from_text(std::string_view text, std::string_view origin = "<inventory>");

  void save(const std::filesystem::path& path) const;
  static CategoryInventory load(const std::filesystem::path& path);

 private:
  std::vector<CategoryRecord> records_;
  double uniform_override_ = 0.0;
};

/// Synthetic inventory with Zipf-distributed daily rates:
/// rate[c] = base_rate / (c+1)^exponent. Word forms and areas are generated
/// deterministically from the seed.
CategoryInventory make_zipf_inventory(int n_categories, double exponent, double base_rate,
                                      std::uint64_t seed);

struct NamingRateInputs {
  double per_hour_rate = 0.0;          // naming events per hour
  double mealtime_minutes = 56.1;      // minutes of mealtime per day
  double cooccurrence_likelihood = 0.5;  // probability the referent is present
  void validate() const;
};

/// events/day = per-hour rate x daily mealtime (hours) x co-occurrence likelihood
double daily_naming_rate(const NamingRateInputs& inputs);

enum class Condition { kNatural, kUniform };

std::string_view condition_name(Condition c);
Condition condition_from_name(std::string_view name);

struct TargetCounts {
  std::vector<long long> per_category;
  int duration_days = 0;
  Condition condition = Condition::kNatural;

  long long total() const;
};

/// Round to nearest integer, half away from zero for the nonnegative inputs
/// used here (round-half-up).
long long round_half_up(double x);

/// Per-category co-occurrence targets for one simulated interval.
/// Natural: round_half_up(daily_rate[c] * days). Uniform: every category gets
/// round_half_up(uniform_daily_rate * days).
TargetCounts target_counts(const CategoryInventory& inventory, int duration_days,
                           Condition condition);

}  // namespace xsl
