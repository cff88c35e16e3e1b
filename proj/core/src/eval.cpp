#include "xslearn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "xslearn/errors.hpp"
#include "xslearn/rng.hpp"

namespace xsl {

using ordered_json = nlohmann::ordered_json;

void EmbeddingSet::validate() const {
  if (items.empty()) throw EmptyInput("embedding set is empty");
  const auto d = items.front().vector.size();
  std::set<long long> ids;
  for (const auto& it : items) {
    if (it.vector.size() != d) throw DimMismatch("embedding set has mixed dimensions");
    if (!it.vector.allFinite()) throw InvalidInput("embedding set contains non-finite values");
    if (!ids.insert(it.token_id).second)
      throw InvalidInput("duplicate token_id " + std::to_string(it.token_id));
  }
}

namespace {

double distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b, AbxDistance kind) {
  if (kind == AbxDistance::kEuclidean) return (a - b).norm();
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 1.0;  // zero vectors carry no direction
  return 1.0 - a.dot(b) / (na * nb);
}

double cosine_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return distance(a, b, AbxDistance::kCosine);
}

}  // namespace

double abx_error(const EmbeddingSet& set, AbxDistance dist_kind) {
  set.validate();
  std::set<int> types, speakers;
  for (const auto& it : set.items) {
    types.insert(it.type_label);
    speakers.insert(it.speaker_label);
  }
  if (types.size() < 2 || speakers.size() < 2)
    throw InsufficientData("across-speaker ABX needs >= 2 types and >= 2 speakers");

  const auto n = set.items.size();
  std::map<std::pair<int, int>, std::vector<std::size_t>> groups;  // (type, speaker) -> items
  for (std::size_t i = 0; i < n; ++i)
    groups[{set.items[i].type_label, set.items[i].speaker_label}].push_back(i);

  Eigen::MatrixXd d(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = distance(set.items[i].vector, set.items[j].vector, dist_kind);
      d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
      d(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = v;
    }
  }

  double cell_sum = 0.0;
  long long cell_count = 0;
  for (int p : types) {
    for (int q : types) {
      if (p == q) continue;
      for (int s1 : speakers) {
        for (int s2 : speakers) {
          if (s1 == s2) continue;
          const auto a_it = groups.find({p, s1});
          const auto b_it = groups.find({q, s1});
          const auto x_it = groups.find({p, s2});
          if (a_it == groups.end() || b_it == groups.end() || x_it == groups.end()) continue;
          double err = 0.0;
          long long count = 0;
          for (std::size_t a : a_it->second) {
            for (std::size_t b : b_it->second) {
              for (std::size_t x : x_it->second) {
                const double dax = d(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(x));
                const double dbx = d(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(x));
                if (dax > dbx)
                  err += 1.0;
                else if (dax == dbx)
                  err += 0.5;
                ++count;
              }
            }
          }
          if (count == 0) continue;
          cell_sum += err / static_cast<double>(count);
          ++cell_count;
        }
      }
    }
  }
  if (cell_count == 0) throw InsufficientData("no valid ABX triplet cells");
  return 100.0 * cell_sum / static_cast<double>(cell_count);
}

double lextest_score(const EmbeddingSet& set, int tokens_per_type) {
  set.validate();
  if (tokens_per_type < 2) throw UnbalancedTypes("lextest needs >= 2 tokens per type");
  std::map<int, int> type_counts;
  for (const auto& it : set.items) ++type_counts[it.type_label];
  for (const auto& [type, count] : type_counts)
    if (count != tokens_per_type)
      throw UnbalancedTypes("type " + std::to_string(type) + " has " + std::to_string(count) +
                            " tokens, expected " + std::to_string(tokens_per_type));

  const auto n = set.items.size();
  const int neighbors = tokens_per_type - 1;
  double total = 0.0;
  std::vector<std::pair<double, long long>> order;  // (distance, token_id tie-break)
  std::vector<std::size_t> item_of;
  for (std::size_t i = 0; i < n; ++i) {
    order.clear();
    item_of.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      order.emplace_back(cosine_distance(set.items[i].vector, set.items[j].vector),
                         set.items[j].token_id);
      item_of.push_back(j);
    }
    std::vector<std::size_t> idx(order.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return order[a] < order[b]; });
    int same = 0;
    for (int r = 0; r < neighbors; ++r)
      if (set.items[item_of[idx[static_cast<std::size_t>(r)]]].type_label ==
          set.items[i].type_label)
        ++same;
    total += static_cast<double>(same) / static_cast<double>(neighbors);
  }
  return 100.0 * total / static_cast<double>(n);
}

SemtestResult semtest_score(const EmbeddingSet& words, const EmbeddingSet& objects,
                            const SimilarityScorer& scorer) {
  words.validate();
  objects.validate();
  std::map<int, std::vector<std::size_t>> word_cats, object_cats;
  for (std::size_t i = 0; i < words.items.size(); ++i)
    word_cats[words.items[i].type_label].push_back(i);
  for (std::size_t i = 0; i < objects.items.size(); ++i)
    object_cats[objects.items[i].type_label].push_back(i);
  if (word_cats.size() < 2)
    throw CategoryMismatch("semtest needs at least two categories");
  if (word_cats.size() != object_cats.size())
    throw CategoryMismatch("word and object category sets differ");
  const std::size_t k_words = word_cats.begin()->second.size();
  const std::size_t k_objects = object_cats.begin()->second.size();
  for (const auto& [cat, idx] : word_cats) {
    if (!object_cats.count(cat)) throw CategoryMismatch("category " + std::to_string(cat) +
                                                        " missing from object set");
    if (idx.size() != k_words)
      throw CategoryMismatch("unbalanced word tokens in category " + std::to_string(cat));
  }
  for (const auto& [cat, idx] : object_cats)
    if (idx.size() != k_objects)
      throw CategoryMismatch("unbalanced object images in category " + std::to_string(cat));

  const int max_cat = word_cats.rbegin()->first;
  SemtestResult result;
  result.per_category_pct.assign(static_cast<std::size_t>(max_cat) + 1, 0.0);

  std::vector<double> scores(objects.items.size());
  std::vector<double> mismatch;
  double cat_total = 0.0;
  for (const auto& [cat, word_idx] : word_cats) {
    double cat_score = 0.0;
    for (std::size_t w : word_idx) {
      for (std::size_t o = 0; o < objects.items.size(); ++o)
        scores[o] = scorer(words.items[w].vector, objects.items[o].vector);
      mismatch.clear();
      for (const auto& [other_cat, object_idx] : object_cats) {
        if (other_cat == cat) continue;
        for (std::size_t o : object_idx) mismatch.push_back(scores[o]);
      }
      std::sort(mismatch.begin(), mismatch.end());
      double wins = 0.0;
      for (std::size_t o : object_cats.at(cat)) {
        const double s = scores[o];
        const auto lo = std::lower_bound(mismatch.begin(), mismatch.end(), s);
        const auto hi = std::upper_bound(mismatch.begin(), mismatch.end(), s);
        wins += static_cast<double>(lo - mismatch.begin());  // strictly below
        wins += 0.5 * static_cast<double>(hi - lo);          // ties
      }
      cat_score += wins / (static_cast<double>(k_objects) * static_cast<double>(mismatch.size()));
    }
    const double pct = 100.0 * cat_score / static_cast<double>(word_idx.size());
    result.per_category_pct[static_cast<std::size_t>(cat)] = pct;
    cat_total += pct;
  }
  result.mean_pct = cat_total / static_cast<double>(word_cats.size());
  return result;
}

RecallResult recall_at_k(const Eigen::MatrixXd& similarity, int k) {
  const auto n = similarity.rows();
  if (n != similarity.cols()) throw DimMismatch("similarity matrix must be square");
  if (n < 1) throw EmptyInput("empty similarity matrix");
  if (k < 1 || k > n) throw BadK("k must be in [1, N]");

  long long row_hits = 0, col_hits = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    // rank of the diagonal within row i, ties by column index ascending
    long long ahead = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (similarity(i, j) > similarity(i, i) || (similarity(i, j) == similarity(i, i) && j < i))
        ++ahead;
    }
    if (ahead < k) ++row_hits;
    ahead = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (similarity(j, i) > similarity(i, i) || (similarity(j, i) == similarity(i, i) && j < i))
        ++ahead;
    }
    if (ahead < k) ++col_hits;
  }
  RecallResult r;
  r.speech_to_image = static_cast<double>(row_hits) / static_cast<double>(n);
  r.image_to_speech = static_cast<double>(col_hits) / static_cast<double>(n);
  r.mean = 0.5 * (r.speech_to_image + r.image_to_speech);
  return r;
}

int vocab_size(std::span<const double> per_category_pct, double threshold_pct) {
  int count = 0;
  for (double v : per_category_pct)
    if (v > threshold_pct) ++count;
  return count;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  const auto n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;  // average of 1-based ranks
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = rank;
    i = j + 1;
  }
  return ranks;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw DegenerateInput("constant vector in correlation");
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

SpearmanResult spearman(std::span<const double> x, std::span<const double> y, int n_permutations,
                        std::uint64_t seed) {
  if (x.size() != y.size()) throw LengthMismatch("spearman inputs differ in length");
  if (x.size() < 3) throw LengthMismatch("spearman needs n >= 3");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  SpearmanResult result;
  result.rho = pearson(rx, ry);

  if (n_permutations < 1) throw InvalidInput("permutation count must be positive");
  Rng rng(seed);
  std::vector<double> perm = ry;
  long long at_least = 0;
  const double target = std::abs(result.rho) - 1e-12;
  for (int i = 0; i < n_permutations; ++i) {
    rng.shuffle(perm);
    if (std::abs(pearson(rx, perm)) >= target) ++at_least;
  }
  result.p = static_cast<double>(at_least + 1) / static_cast<double>(n_permutations + 1);
  return result;
}

std::string_view probe_layer_name(ProbeLayer layer) {
  switch (layer) {
    case ProbeLayer::kFrame: return "frame";
    case ProbeLayer::kContext: return "context";
    case ProbeLayer::kPooled: return "pooled";
    case ProbeLayer::kFinal: return "final";
  }
  return "unknown";
}

ProbeLayer probe_layer_from_name(std::string_view name) {
  for (ProbeLayer layer : kAllProbeLayers)
    if (name == probe_layer_name(layer)) return layer;
  throw UnknownLayer("unknown probe layer '" + std::string(name) + "'");
}

Eigen::VectorXd probe_utterance(const ParamSet& params, const ModelConfig& cfg,
                                const Eigen::MatrixXd& frames, ProbeLayer layer) {
  const UtteranceCache uc = encode_utterance_cache(params, cfg, frames);
  switch (layer) {
    case ProbeLayer::kFrame: return uc.z.rowwise().mean();
    case ProbeLayer::kContext: return uc.c.rowwise().mean();
    case ProbeLayer::kPooled: return uc.pooled;
    case ProbeLayer::kFinal: return uc.embedding;
  }
  throw UnknownLayer("unknown probe layer");
}

// ---------------------------------------------------------------------------
// MetricsReport
// ---------------------------------------------------------------------------

void MetricsReport::validate() const {
  auto check_pct = [](double v, const char* what) {
    if (!(v >= 0.0 && v <= 100.0))
      throw InvalidInput(std::string(what) + " outside [0,100]: " + std::to_string(v));
  };
  check_pct(abx_error_pct, "abx_error_pct");
  check_pct(lextest_pct, "lextest_pct");
  check_pct(semtest_mean_pct, "semtest_mean_pct");
  for (double v : semtest_per_category_pct) check_pct(v, "semtest category score");
  for (const auto& [k, v] : recall)
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput("recall outside [0,1]");
  for (std::size_t i = 1; i < vocab_sizes.size(); ++i)
    if (vocab_sizes[i].threshold_pct >= vocab_sizes[i - 1].threshold_pct &&
        vocab_sizes[i].count > vocab_sizes[i - 1].count)
      throw InvalidInput("vocab sizes must be nonincreasing in threshold");
}

std::string metrics_report_to_text(const MetricsReport& r) {
  ordered_json j;
  j["checkpoint"] = r.checkpoint;
  ordered_json abx;
  abx["per_layer_pct"] = r.abx_per_layer_pct;
  abx["best_layer"] = r.abx_best_layer;
  abx["error_pct"] = r.abx_error_pct;
  j["abx"] = abx;
  ordered_json lex;
  lex["per_layer_pct"] = r.lextest_per_layer_pct;
  lex["best_layer"] = r.lextest_best_layer;
  lex["score_pct"] = r.lextest_pct;
  j["lextest"] = lex;
  ordered_json sem;
  sem["mean_pct"] = r.semtest_mean_pct;
  sem["per_category_pct"] = r.semtest_per_category_pct;
  j["semtest"] = sem;
  ordered_json rec;
  for (const auto& [k, v] : r.recall) rec[std::to_string(k)] = v;
  j["recall_at_k"] = rec;
  j["recall_speech_to_image"] = r.recall_speech_to_image;
  j["recall_image_to_speech"] = r.recall_image_to_speech;
  ordered_json vocab = ordered_json::array();
  for (const auto& v : r.vocab_sizes)
    vocab.push_back({{"name", v.name}, {"threshold_pct", v.threshold_pct}, {"count", v.count}});
  j["vocab_sizes"] = vocab;
  ordered_json corr = ordered_json::array();
  for (const auto& c : r.correlations)
    corr.push_back({{"variable", c.variable}, {"rho", c.rho}, {"p", c.p}});
  j["correlations"] = corr;
  return j.dump(2) + "\n";
}

MetricsReport metrics_report_from_text(std::string_view text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics report parse error: ") + e.what());
  }
  try {
    MetricsReport r;
    r.checkpoint = j.at("checkpoint").get<std::string>();
    r.abx_per_layer_pct = j.at("abx").at("per_layer_pct").get<std::map<std::string, double>>();
    r.abx_best_layer = j.at("abx").at("best_layer").get<std::string>();
    r.abx_error_pct = j.at("abx").at("error_pct").get<double>();
    r.lextest_per_layer_pct =
        j.at("lextest").at("per_layer_pct").get<std::map<std::string, double>>();
    r.lextest_best_layer = j.at("lextest").at("best_layer").get<std::string>();
    r.lextest_pct = j.at("lextest").at("score_pct").get<double>();
    r.semtest_mean_pct = j.at("semtest").at("mean_pct").get<double>();
    r.semtest_per_category_pct =
        j.at("semtest").at("per_category_pct").get<std::vector<double>>();
    for (const auto& [key, value] : j.at("recall_at_k").items())
      r.recall[static_cast<int>(std::stoi(key))] = value.get<double>();
    r.recall_speech_to_image = j.at("recall_speech_to_image").get<double>();
    r.recall_image_to_speech = j.at("recall_image_to_speech").get<double>();
    for (const auto& v : j.at("vocab_sizes"))
      r.vocab_sizes.push_back({v.at("name").get<std::string>(),
                               v.at("threshold_pct").get<double>(), v.at("count").get<int>()});
    const auto number_or_nan = [](const ordered_json& v) {
      return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
    };
    for (const auto& c : j.at("correlations"))
      r.correlations.push_back({c.at("variable").get<std::string>(),
                                number_or_nan(c.at("rho")), number_or_nan(c.at("p"))});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics report missing field: ") + e.what());
  }
}

void save_metrics_report(const std::filesystem::path& path, const MetricsReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write metrics report: " + path.string());
  out << metrics_report_to_text(report);
}

MetricsReport load_metrics_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open metrics report: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return metrics_report_from_text(ss.str());
}

}  // namespace xsl
