#include "xslearn/naming_stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "xslearn/errors.hpp"
#include "xslearn/rng.hpp"
#include "xslearn/text_io.hpp"

namespace xsl {

namespace {
constexpr std::string_view kHeader1 = "# xsl-inventory v1";
constexpr std::string_view kHeader2 = "# id\tname\tdaily_rate\tword_forms\tmean_area";
constexpr std::string_view kUniformDirective = "#uniform_daily_rate";
}  // namespace

CategoryInventory::CategoryInventory(std::vector<CategoryRecord> records, double uniform_daily_rate)
    : records_(std::move(records)), uniform_override_(uniform_daily_rate) {
  validate();
}

double CategoryInventory::mean_daily_rate() const {
  if (records_.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& r : records_) sum += r.daily_rate;
  return sum / static_cast<double>(records_.size());
}

double CategoryInventory::uniform_daily_rate() const {
  return has_uniform_override() ? uniform_override_ : mean_daily_rate();
}

void CategoryInventory::validate() const {
  if (records_.empty()) throw InvalidInput("inventory has no categories");
  std::set<std::string> seen_words;
  bool any_positive = false;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    if (r.id != static_cast<int>(i))
      throw InvalidInput("inventory ids must be contiguous 0..C-1; got id " +
                         std::to_string(r.id) + " at position " + std::to_string(i));
    if (!(r.daily_rate >= 0.0))
      throw InvalidInput("category '" + r.name + "' has negative daily_rate");
    any_positive = any_positive || r.daily_rate > 0.0;
    if (r.word_forms.empty())
      throw InvalidInput("category '" + r.name + "' has no word forms");
    for (const auto& w : r.word_forms) {
      if (w.empty()) throw InvalidInput("category '" + r.name + "' has an empty word form");
      if (!seen_words.insert(w).second)
        throw InvalidInput("word form '" + w + "' appears in two categories");
    }
    if (!(r.mean_area > 0.0 && r.mean_area <= 1.0))
      throw InvalidInput("category '" + r.name + "' mean_area must be in (0,1]");
  }
  if (!any_positive) throw InvalidInput("all daily rates are zero");
  if (uniform_override_ < 0.0) throw InvalidInput("uniform daily rate override is negative");
}

std::string CategoryInventory::to_text() const {
  std::string out;
  out += kHeader1;
  out += '\n';
  out += kHeader2;
  out += '\n';
  if (has_uniform_override()) {
    out += kUniformDirective;
    out += '\t';
    out += format_double(uniform_override_);
    out += '\n';
  }
  for (const auto& r : records_) {
    out += std::to_string(r.id);
    out += '\t';
    out += r.name;
    out += '\t';
    out += format_double(r.daily_rate);
    out += '\t';
    for (std::size_t i = 0; i < r.word_forms.size(); ++i) {
      if (i) out += ',';
      out += r.word_forms[i];
    }
    out += '\t';
    out += format_double(r.mean_area);
    out += '\n';
  }
  return out;
}

CategoryInventory CategoryInventory::from_text(std::string_view text, std::string_view origin) {
  std::vector<CategoryRecord> records;
  double uniform_override = 0.0;
  std::size_t line_no = 0;
  for (std::string_view rest = text; !rest.empty();) {
    const std::size_t eol = rest.find('\n');
    std::string_view line = rest.substr(0, eol);
    rest = eol == std::string_view::npos ? std::string_view{} : rest.substr(eol + 1);
    ++line_no;
    if (line.empty()) continue;
    if (line.starts_with(kUniformDirective)) {
      const auto fields = split(line, '\t');
      if (fields.size() != 2)
        throw FormatError(std::string(origin) + ": malformed uniform_daily_rate directive");
      uniform_override = parse_double(fields[1], "uniform_daily_rate");
      continue;
    }
    if (line.front() == '#') continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 5)
      throw FormatError(std::string(origin) + ":" + std::to_string(line_no) +
                        ": expected 5 tab-separated fields, got " + std::to_string(fields.size()));
    CategoryRecord r;
    r.id = static_cast<int>(parse_int(fields[0], "inventory id"));
    r.name = std::string(fields[1]);
    r.daily_rate = parse_double(fields[2], "daily_rate");
    for (auto w : split(fields[3], ',')) r.word_forms.emplace_back(w);
    r.mean_area = parse_double(fields[4], "mean_area");
    records.push_back(std::move(r));
  }
  return CategoryInventory(std::move(records), uniform_override);
}

void CategoryInventory::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write inventory file: " + path.string());
  out << to_text();
}

CategoryInventory CategoryInventory::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open inventory file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str(), path.string());
}

CategoryInventory make_zipf_inventory(int n_categories, double exponent, double base_rate,
                                      std::uint64_t seed) {
  if (n_categories < 1) throw InvalidInput("zipf inventory needs at least one category");
  if (base_rate <= 0.0) throw InvalidInput("zipf base_rate must be positive");
  Rng rng(derive_seed(seed, "zipf_inventory"));
  std::vector<CategoryRecord> records;
  records.reserve(static_cast<std::size_t>(n_categories));
  for (int c = 0; c < n_categories; ++c) {
    CategoryRecord r;
    r.id = c;
    r.name = "obj" + std::to_string(c);
    r.daily_rate = base_rate / std::pow(static_cast<double>(c + 1), exponent);
    r.word_forms = {"w" + std::to_string(c)};
    r.mean_area = rng.uniform(0.05, 0.25);
    records.push_back(std::move(r));
  }
  return CategoryInventory(std::move(records));
}

void NamingRateInputs::validate() const {
  if (per_hour_rate < 0.0 || mealtime_minutes < 0.0 || cooccurrence_likelihood < 0.0)
    throw InvalidInput("naming rate inputs must be nonnegative");
  if (cooccurrence_likelihood > 1.0)
    throw InvalidInput("co-occurrence likelihood must be at most 1");
}

double daily_naming_rate(const NamingRateInputs& inputs) {
  inputs.validate();
  return inputs.per_hour_rate * (inputs.mealtime_minutes / 60.0) * inputs.cooccurrence_likelihood;
}

std::string_view condition_name(Condition c) {
  return c == Condition::kNatural ? "natural" : "uniform";
}

Condition condition_from_name(std::string_view name) {
  if (name == "natural") return Condition::kNatural;
  if (name == "uniform") return Condition::kUniform;
  throw BadConfig("unknown condition '" + std::string(name) + "' (expected natural|uniform)");
}

long long TargetCounts::total() const {
  long long sum = 0;
  for (long long v : per_category) sum += v;
  return sum;
}

long long round_half_up(double x) { return static_cast<long long>(std::floor(x + 0.5)); }

TargetCounts target_counts(const CategoryInventory& inventory, int duration_days,
                           Condition condition) {
  if (duration_days < 0) throw InvalidInput("duration_days must be nonnegative");
  TargetCounts out;
  out.duration_days = duration_days;
  out.condition = condition;
  out.per_category.resize(static_cast<std::size_t>(inventory.size()));
  const double days = static_cast<double>(duration_days);
  if (condition == Condition::kNatural) {
    for (const auto& r : inventory.records())
      out.per_category[static_cast<std::size_t>(r.id)] = round_half_up(r.daily_rate * days);
  } else {
    const long long uniform = round_half_up(inventory.uniform_daily_rate() * days);
    std::fill(out.per_category.begin(), out.per_category.end(), uniform);
  }
  return out;
}

}  // namespace xsl
