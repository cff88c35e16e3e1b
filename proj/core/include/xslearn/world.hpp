#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "xslearn/naming_stats.hpp"
#include "xslearn/rng.hpp"

namespace xsl {

struct WorldConfig {
  int n_categories = 20;
  int n_phones = 16;
  int phone_dim = 16;
  int visual_dim = 32;
  int n_speakers = 4;
  int frames_per_phone_min = 2;
  int frames_per_phone_max = 3;
  double phone_noise_sd = 0.3;
  double visual_noise_sd = 0.3;
  int filler_vocab_size = 40;
  int objects_per_scene_min = 2;
  int objects_per_scene_max = 4;
  int filler_words_min = 1;
  int filler_words_max = 2;
  bool speaker_transforms = true;
  std::uint64_t seed = 1;
  void validate() const;
};

inline constexpr int kFillerCategory = -1;

struct Token {
  std::string word;
  int category = kFillerCategory;
  long long token_id = 0;
  Eigen::MatrixXd frames;  // phone_dim x T
};

struct Utterance {
  long long utterance_id = 0;
  int speaker_id = 0;
  std::vector<Token> tokens;
  int total_frames() const;
  Eigen::MatrixXd frame_matrix() const;  // tokens concatenated in order
};

struct SceneObject {
  int category = 0;
  double area = 0.0;
  long long object_id = 0;
  Eigen::VectorXd features;
};

struct Scene {
  long long scene_id = 0;
  std::vector<SceneObject> objects;
  Eigen::MatrixXd object_matrix() const;  // visual_dim x M
};

struct AudiovisualPair {
  long long pair_id = 0;
  Scene scene;
  Utterance utterance;
  // (category, count) of naming events, sorted by category; a category counts
  // iff it has >=1 object in the scene AND >=1 word token in the utterance,
  // with every token repetition counted
  std::vector<std::pair<int, long long>> incidence;
  long long incidence_of(int category) const;
};

struct SpeakerTransform {
  Eigen::MatrixXd gain;
  Eigen::VectorXd offset;
};

/// Deterministic synthetic audiovisual world: per-category visual prototypes,
/// a phone inventory with per-word pronunciations, speaker transforms and a
/// filler vocabulary.
class World {
 public:
  static World generate(const WorldConfig& config, const CategoryInventory& inventory);

  const WorldConfig& config() const { return config_; }
  const CategoryInventory& inventory() const { return inventory_; }
  const Eigen::MatrixXd& visual_prototypes() const { return visual_prototypes_; }
  const Eigen::MatrixXd& phone_prototypes() const { return phone_prototypes_; }
  const std::vector<SpeakerTransform>& speakers() const { return speakers_; }
  const std::vector<std::string>& filler_words() const { return filler_words_; }
  const std::vector<int>& pronunciation(const std::string& word) const;

  Eigen::MatrixXd render_word(const std::string& word, int speaker_id, Rng& rng) const;
  Eigen::MatrixXd render_phone(int phone_id, int speaker_id, Rng& rng) const;
  Eigen::VectorXd make_object_features(int category, Rng& rng) const;

 private:
  WorldConfig config_;
  CategoryInventory inventory_;
  Eigen::MatrixXd visual_prototypes_;  // visual_dim x C, unit columns
  Eigen::MatrixXd phone_prototypes_;   // phone_dim x n_phones, unit columns
  std::vector<SpeakerTransform> speakers_;
  std::map<std::string, std::vector<int>> lexicon_;
  std::vector<std::string> filler_words_;
};

/// One naming situation. `named` entries may repeat (repeated namings of the
/// same category in one utterance); `present` lists the categories whose
/// referent objects appear in the scene. Distractor objects and filler words
/// are added per the world config, never drawing from `named` categories.
AudiovisualPair sample_pair(const World& world, const std::vector<int>& present,
                            const std::vector<int>& named, int speaker_id, Rng& rng,
                            long long pair_id);

// ---------------------------------------------------------------------------
// Pool generation and subset construction
// ---------------------------------------------------------------------------

struct GenerationConfig {
  long long pool_size = 9000;
  double referent_present_prob = 0.5;
  int named_min = 1;
  int named_max = 2;
  double name_repeat_prob = 0.1;
  double validation_fraction = 0.05;
  long long auditory_utterances = 1500;
  long long deficit_tolerance = 0;
  bool nested_bins = false;
  // top up the pool with single-event pairs until every category alone could
  // cover its maximum target, which makes greedy selection provably exact
  bool guarantee_feasibility = true;
  void validate() const;
};

/// Randomly generated candidate pairs whose naming statistics follow the
/// inventory rates.
std::vector<AudiovisualPair> build_pool(const World& world, const GenerationConfig& gen,
                                        std::uint64_t seed);

/// Appends single-event pairs until every category alone could cover its
/// entry in `max_targets`, which makes greedy subset selection provably exact
/// on the augmented pool. New pair ids start at `first_pair_id`.
void top_up_pool(const World& world, std::vector<AudiovisualPair>& pool,
                 const std::vector<long long>& max_targets, long long first_pair_id,
                 std::uint64_t seed);

/// Utterance-only pairs for the auditory stage (scenes present but unused).
std::vector<AudiovisualPair> build_auditory_set(const World& world, const GenerationConfig& gen,
                                                std::uint64_t seed);

struct SubsetCarry {
  std::vector<std::size_t> selected;
  std::vector<long long> achieved;
};

struct SubsetResult {
  std::vector<std::size_t> selected;  // indices into the pool, acceptance order
  std::vector<long long> achieved;
  std::vector<long long> deficit;
};

/// Greedy subset construction over one seeded permutation of the pool: a pair
/// is accepted iff it contributes at least one event and fits under the
/// targets elementwise; iteration stops when targets are met. On exhaustion a
/// best-effort result with per-category deficits is returned unless any
/// deficit exceeds deficit_tolerance (InsufficientPool). `carry` continues
/// from a previous subset (nested age bins).
SubsetResult build_subset(const std::vector<AudiovisualPair>& pool, const TargetCounts& targets,
                          std::uint64_t seed, long long deficit_tolerance,
                          const SubsetCarry* carry = nullptr);

// ---------------------------------------------------------------------------
// Test sets
// ---------------------------------------------------------------------------

struct TestAudioItem {
  long long token_id = 0;
  int type_label = 0;  // category (lextest/semtest) or phone id (abx)
  int speaker_label = 0;
  Eigen::MatrixXd frames;
};

struct TestObjectItem {
  long long object_id = 0;
  int category = 0;
  double area = 0.0;
  Eigen::VectorXd features;
};

struct TestSets {
  std::vector<TestAudioItem> lextest;        // K tokens per category
  std::vector<TestAudioItem> semtest_words;  // K tokens per category
  std::vector<TestObjectItem> semtest_objects;  // K single-object scenes per category
  std::vector<TestAudioItem> abx;            // phone-labeled bundles per speaker
};

/// Held-out evaluation items, disjoint from all training pairs by id.
TestSets make_test_sets(const World& world, int tokens_per_type, int abx_tokens_per_speaker,
                        std::uint64_t seed);

// ---------------------------------------------------------------------------
// Manifest + sidecar serialization
// ---------------------------------------------------------------------------

struct ManifestInfo {
  std::string condition;  // pool | natural | uniform | validation | auditory
  int duration_days = 0;
  int n_categories = 0;
  std::vector<long long> achieved;
  std::vector<long long> deficit;
  std::string frames_file;   // sidecar names relative to the manifest
  std::string objects_file;
};

struct Dataset {
  ManifestInfo info;
  std::vector<AudiovisualPair> pairs;
};

std::vector<long long> sum_incidence(const std::vector<AudiovisualPair>& pairs,
                                     int n_categories);

/// Writes <stem>.manifest.jsonl plus (optionally) the binary feature sidecars
/// named in `info`. Bin manifests share the pool's sidecars.
void save_dataset(const std::filesystem::path& dir, const std::string& stem, const Dataset& ds,
                  bool write_sidecars);

Dataset load_dataset(const std::filesystem::path& dir, const std::string& stem);

void save_test_sets(const std::filesystem::path& dir, const TestSets& sets, int phone_dim,
                    int visual_dim);
TestSets load_test_sets(const std::filesystem::path& dir);

}  // namespace xsl
