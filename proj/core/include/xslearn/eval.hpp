#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "xslearn/learner.hpp"

namespace xsl {

struct EmbeddingItem {
  Eigen::VectorXd vector;
  int type_label = 0;  // word type / phone / category, depending on the test
  int speaker_label = 0;
  long long token_id = 0;
};

struct EmbeddingSet {
  std::vector<EmbeddingItem> items;
  int dim() const { return items.empty() ? 0 : static_cast<int>(items.front().vector.size()); }
  void validate() const;  // same finite dims, unique token ids
};

enum class AbxDistance { kCosine, kEuclidean };

/// Across-speaker ABX error in percent. For every triplet (A: type p, speaker
/// s1; B: type q != p, speaker s1; X: type p, speaker s2 != s1) an error of 1
/// is charged when d(A,X) > d(B,X) and 0.5 on ties. Scores are averaged within
/// (type pair, speaker pair) cells first, then across cells.
double abx_error(const EmbeddingSet& set, AbxDistance distance);

/// Word discrimination score in percent: fraction of each token's K-1 nearest
/// neighbors (cosine distance, ties broken by token id) sharing its type,
/// averaged over tokens. Every type must have exactly tokens_per_type tokens.
double lextest_score(const EmbeddingSet& set, int tokens_per_type);

using SimilarityScorer =
    std::function<double(const Eigen::VectorXd&, const Eigen::VectorXd&)>;

struct SemtestResult {
  std::vector<double> per_category_pct;  // indexed by category id
  double mean_pct = 0.0;
};

/// Two-alternative forced-choice word meaning score. Each word token is paired
/// with every same-category object image and compared against all
/// mismatching-category images; wins count 1, ties 0.5. Token scores average
/// over all correct pairings, categories over their tokens, the final score
/// over categories.
SemtestResult semtest_score(const EmbeddingSet& words, const EmbeddingSet& objects,
                            const SimilarityScorer& scorer);

struct RecallResult {
  double speech_to_image = 0.0;
  double image_to_speech = 0.0;
  double mean = 0.0;
};

/// Fraction of rows (columns) whose diagonal entry ranks within the k largest
/// of its row (column); ties broken by column (row) index ascending.
RecallResult recall_at_k(const Eigen::MatrixXd& similarity, int k);

/// Number of categories whose score strictly exceeds the threshold (percent).
int vocab_size(std::span<const double> per_category_pct, double threshold_pct);

struct SpearmanResult {
  double rho = 0.0;
  double p = 1.0;
};

/// Spearman rank correlation with average ranks for ties; two-sided p-value
/// from a seeded permutation test.
SpearmanResult spearman(std::span<const double> x, std::span<const double> y,
                        int n_permutations = 100000, std::uint64_t seed = 0);

enum class ProbeLayer { kFrame, kContext, kPooled, kFinal };

std::string_view probe_layer_name(ProbeLayer layer);
ProbeLayer probe_layer_from_name(std::string_view name);
inline constexpr ProbeLayer kAllProbeLayers[] = {ProbeLayer::kFrame, ProbeLayer::kContext,
                                                 ProbeLayer::kPooled, ProbeLayer::kFinal};

/// One vector per utterance at a named internal stage (sequence stages are
/// mean-pooled over frames).
Eigen::VectorXd probe_utterance(const ParamSet& params, const ModelConfig& cfg,
                                const Eigen::MatrixXd& frames, ProbeLayer layer);

// ---------------------------------------------------------------------------
// MetricsReport
// ---------------------------------------------------------------------------

struct CorrelationEntry {
  std::string variable;
  double rho = 0.0;
  double p = 1.0;
};

struct VocabPoint {
  std::string name;      // "above_chance", "two_thirds", "four_fifths"
  double threshold_pct = 0.0;
  int count = 0;
};

struct MetricsReport {
  std::string checkpoint;
  std::map<std::string, double> abx_per_layer_pct;
  std::string abx_best_layer;
  double abx_error_pct = 0.0;  // best layer
  std::map<std::string, double> lextest_per_layer_pct;
  std::string lextest_best_layer;
  double lextest_pct = 0.0;  // best layer
  double semtest_mean_pct = 0.0;
  std::vector<double> semtest_per_category_pct;
  std::map<int, double> recall; // k -> mean recall
  double recall_speech_to_image = 0.0;
  double recall_image_to_speech = 0.0;
  std::vector<VocabPoint> vocab_sizes;
  std::vector<CorrelationEntry> correlations;

  void validate() const;
};

/// Stable-key-order single-document serialization; identical runs produce
/// byte-identical files.
std::string metrics_report_to_text(const MetricsReport& report);
MetricsReport metrics_report_from_text(std::string_view text);
void save_metrics_report(const std::filesystem::path& path, const MetricsReport& report);
MetricsReport load_metrics_report(const std::filesystem::path& path);

}  // namespace xsl
