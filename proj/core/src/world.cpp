#include "xslearn/world.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "xslearn/errors.hpp"
#include "xslearn/tensor_file.hpp"

namespace xsl {

using ordered_json = nlohmann::ordered_json;

namespace {
// id layout keeps every token/object id inside u32 for the tensor sidecars:
// pool pairs start at 0, auditory pairs and test items get their own bases
constexpr long long kAuditoryPairBase = 20'000'000;
constexpr long long kTestAudioIdBase = 3'000'000'000;
constexpr long long kTestObjectIdBase = 3'500'000'000;
constexpr long long kIdsPerPair = 100;
}  // namespace

void WorldConfig::validate() const {
  if (n_categories < 2) throw BadConfig("world needs at least 2 categories");
  if (n_phones < 2) throw BadConfig("world needs at least 2 phones");
  if (phone_dim < 1 || visual_dim < 1) throw BadConfig("feature dims must be positive");
  if (n_speakers < 1) throw BadConfig("world needs at least 1 speaker");
  if (frames_per_phone_min < 1 || frames_per_phone_max < frames_per_phone_min)
    throw BadConfig("frames_per_phone range is empty");
  if (phone_noise_sd < 0.0 || visual_noise_sd < 0.0) throw BadConfig("noise SDs must be >= 0");
  if (filler_vocab_size < 1) throw BadConfig("filler vocabulary must be nonempty");
  if (objects_per_scene_min < 1 || objects_per_scene_max < objects_per_scene_min)
    throw BadConfig("objects_per_scene range is empty");
  if (filler_words_min < 0 || filler_words_max < filler_words_min)
    throw BadConfig("filler_words range is empty");
}

void GenerationConfig::validate() const {
  if (pool_size < 1 || pool_size >= kAuditoryPairBase)
    throw BadConfig("pool_size out of range");
  if (referent_present_prob < 0.0 || referent_present_prob > 1.0)
    throw BadConfig("referent_present_prob must be in [0,1]");
  if (named_min < 1 || named_max < named_min) throw BadConfig("named_per_pair range is empty");
  if (name_repeat_prob < 0.0 || name_repeat_prob > 1.0)
    throw BadConfig("name_repeat_prob must be in [0,1]");
  if (validation_fraction < 0.0 || validation_fraction >= 1.0)
    throw BadConfig("validation_fraction must be in [0,1)");
  if (auditory_utterances < 0 || auditory_utterances >= kAuditoryPairBase)
    throw BadConfig("auditory_utterances out of range");
  if (deficit_tolerance < 0) throw BadConfig("deficit_tolerance must be >= 0");
}

int Utterance::total_frames() const {
  int total = 0;
  for (const auto& t : tokens) total += static_cast<int>(t.frames.cols());
  return total;
}

Eigen::MatrixXd Utterance::frame_matrix() const {
  if (tokens.empty()) throw EmptyInput("utterance has no tokens");
  const auto dim = tokens.front().frames.rows();
  Eigen::MatrixXd out(dim, total_frames());
  int col = 0;
  for (const auto& t : tokens) {
    out.middleCols(col, t.frames.cols()) = t.frames;
    col += static_cast<int>(t.frames.cols());
  }
  return out;
}

Eigen::MatrixXd Scene::object_matrix() const {
  if (objects.empty()) throw EmptyInput("scene has no objects");
  const auto dim = objects.front().features.size();
  Eigen::MatrixXd out(dim, static_cast<Eigen::Index>(objects.size()));
  for (std::size_t i = 0; i < objects.size(); ++i)
    out.col(static_cast<Eigen::Index>(i)) = objects[i].features;
  return out;
}

long long AudiovisualPair::incidence_of(int category) const {
  for (const auto& [cat, count] : incidence)
    if (cat == category) return count;
  return 0;
}

// ---------------------------------------------------------------------------
// World generation
// ---------------------------------------------------------------------------

World World::generate(const WorldConfig& config, const CategoryInventory& inventory) {
  config.validate();
  inventory.validate();
  if (inventory.size() != config.n_categories)
    throw ConfigMismatch("inventory has " + std::to_string(inventory.size()) +
                         " categories, world config expects " +
                         std::to_string(config.n_categories));

  World w;
  w.config_ = config;
  w.inventory_ = inventory;

  {
    Rng rng(derive_seed(config.seed, "visual_prototypes"));
    w.visual_prototypes_.resize(config.visual_dim, config.n_categories);
    for (int c = 0; c < config.n_categories; ++c) {
      for (int r = 0; r < config.visual_dim; ++r) w.visual_prototypes_(r, c) = rng.gaussian();
      w.visual_prototypes_.col(c).normalize();
    }
  }
  {
    Rng rng(derive_seed(config.seed, "phone_prototypes"));
    w.phone_prototypes_.resize(config.phone_dim, config.n_phones);
    for (int p = 0; p < config.n_phones; ++p) {
      for (int r = 0; r < config.phone_dim; ++r) w.phone_prototypes_(r, p) = rng.gaussian();
      w.phone_prototypes_.col(p).normalize();
    }
  }

  w.speakers_.resize(static_cast<std::size_t>(config.n_speakers));
  for (int s = 0; s < config.n_speakers; ++s) {
    auto& sp = w.speakers_[static_cast<std::size_t>(s)];
    if (!config.speaker_transforms) {
      sp.gain = Eigen::MatrixXd::Identity(config.phone_dim, config.phone_dim);
      sp.offset = Eigen::VectorXd::Zero(config.phone_dim);
      continue;
    }
    Rng rng(derive_seed(config.seed, "speaker." + std::to_string(s)));
    Eigen::MatrixXd raw(config.phone_dim, config.phone_dim);
    for (int c = 0; c < config.phone_dim; ++c)
      for (int r = 0; r < config.phone_dim; ++r) raw(r, c) = rng.gaussian();
    Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(raw).householderQ();
    Eigen::VectorXd eig(config.phone_dim);
    for (int i = 0; i < config.phone_dim; ++i) eig[i] = rng.uniform(0.8, 1.2);
    sp.gain = q * eig.asDiagonal() * q.transpose();
    sp.offset.resize(config.phone_dim);
    for (int i = 0; i < config.phone_dim; ++i) sp.offset[i] = 0.05 * rng.gaussian();
  }

  // pronunciations: unique phone-id sequence (length 2..6) per word
  {
    Rng rng(derive_seed(config.seed, "lexicon"));
    std::set<std::vector<int>> used;
    auto assign = [&](const std::string& word) {
      for (int attempt = 0; attempt < 1000; ++attempt) {
        const auto len = rng.uniform_int(2, 6);
        std::vector<int> seq(static_cast<std::size_t>(len));
        for (auto& p : seq) p = static_cast<int>(rng.uniform_int(0, config.n_phones - 1));
        if (used.insert(seq).second) {
          w.lexicon_[word] = std::move(seq);
          return;
        }
      }
      throw InvalidInput("phone inventory too small for a unique pronunciation of '" + word + "'");
    };
    for (const auto& rec : inventory.records())
      for (const auto& form : rec.word_forms) assign(form);
    for (int f = 0; f < config.filler_vocab_size; ++f) {
      std::string word = "filler" + std::to_string(f);
      w.filler_words_.push_back(word);
      assign(word);
    }
  }
  return w;
}

const std::vector<int>& World::pronunciation(const std::string& word) const {
  const auto it = lexicon_.find(word);
  if (it == lexicon_.end()) throw InvalidInput("word '" + word + "' is not in the lexicon");
  return it->second;
}

Eigen::MatrixXd World::render_phone(int phone_id, int speaker_id, Rng& rng) const {
  if (phone_id < 0 || phone_id >= config_.n_phones) throw InvalidInput("phone id out of range");
  if (speaker_id < 0 || speaker_id >= config_.n_speakers)
    throw InvalidInput("speaker id out of range");
  const auto& sp = speakers_[static_cast<std::size_t>(speaker_id)];
  const Eigen::VectorXd transformed =
      sp.gain * phone_prototypes_.col(phone_id) + sp.offset;
  const auto n_frames =
      rng.uniform_int(config_.frames_per_phone_min, config_.frames_per_phone_max);
  Eigen::MatrixXd frames(config_.phone_dim, n_frames);
  for (Eigen::Index f = 0; f < n_frames; ++f) {
    frames.col(f) = transformed;
    for (int r = 0; r < config_.phone_dim; ++r)
      frames(r, f) += config_.phone_noise_sd * rng.gaussian();
  }
  return frames;
}

Eigen::MatrixXd World::render_word(const std::string& word, int speaker_id, Rng& rng) const {
  const auto& phones = pronunciation(word);
  std::vector<Eigen::MatrixXd> parts;
  parts.reserve(phones.size());
  int total = 0;
  for (int p : phones) {
    parts.push_back(render_phone(p, speaker_id, rng));
    total += static_cast<int>(parts.back().cols());
  }
  Eigen::MatrixXd frames(config_.phone_dim, total);
  int col = 0;
  for (const auto& part : parts) {
    frames.middleCols(col, part.cols()) = part;
    col += static_cast<int>(part.cols());
  }
  return frames;
}

Eigen::VectorXd World::make_object_features(int category, Rng& rng) const {
  if (category < 0 || category >= config_.n_categories)
    throw InvalidInput("category out of range");
  Eigen::VectorXd f = visual_prototypes_.col(category);
  for (int r = 0; r < config_.visual_dim; ++r) f[r] += config_.visual_noise_sd * rng.gaussian();
  return f;
}

// ---------------------------------------------------------------------------
// Pair sampling
// ---------------------------------------------------------------------------

AudiovisualPair sample_pair(const World& world, const std::vector<int>& present,
                            const std::vector<int>& named, int speaker_id, Rng& rng,
                            long long pair_id) {
  const auto& cfg = world.config();
  if (speaker_id < 0 || speaker_id >= cfg.n_speakers)
    throw InvalidInput("speaker id out of range");

  std::vector<int> present_unique;
  for (int c : present)
    if (std::find(present_unique.begin(), present_unique.end(), c) == present_unique.end())
      present_unique.push_back(c);

  std::set<int> excluded(named.begin(), named.end());
  excluded.insert(present_unique.begin(), present_unique.end());

  const auto n_target =
      static_cast<int>(rng.uniform_int(cfg.objects_per_scene_min, cfg.objects_per_scene_max));
  int n_distractors = std::max(0, n_target - static_cast<int>(present_unique.size()));
  if (present_unique.empty() && n_distractors == 0) n_distractors = 1;  // scenes are never empty

  std::vector<int> candidates;
  for (int c = 0; c < cfg.n_categories; ++c)
    if (!excluded.count(c)) candidates.push_back(c);
  rng.shuffle(candidates);
  if (n_distractors > static_cast<int>(candidates.size()))
    n_distractors = static_cast<int>(candidates.size());
  if (present_unique.empty() && n_distractors == 0)
    throw InvalidInput("cannot build a nonempty scene: no distractor categories available");

  AudiovisualPair pair;
  pair.pair_id = pair_id;
  pair.scene.scene_id = pair_id;
  pair.utterance.utterance_id = pair_id;
  pair.utterance.speaker_id = speaker_id;

  long long next_id = pair_id * kIdsPerPair;
  auto add_object = [&](int category) {
    SceneObject obj;
    obj.category = category;
    obj.area = world.inventory().record(category).mean_area;
    obj.object_id = next_id++;
    obj.features = world.make_object_features(category, rng);
    pair.scene.objects.push_back(std::move(obj));
  };
  for (int c : present_unique) add_object(c);
  for (int i = 0; i < n_distractors; ++i) add_object(candidates[static_cast<std::size_t>(i)]);

  double area_sum = 0.0;
  for (const auto& o : pair.scene.objects) area_sum += o.area;
  if (area_sum > 1.0)
    for (auto& o : pair.scene.objects) o.area /= area_sum;

  // utterance: named word tokens plus fillers, in shuffled order
  struct TokenDraft {
    std::string word;
    int category;
  };
  std::vector<TokenDraft> drafts;
  for (int c : named) {
    const auto& forms = world.inventory().record(c).word_forms;
    const auto pick = rng.uniform_int(0, static_cast<std::int64_t>(forms.size()) - 1);
    drafts.push_back({forms[static_cast<std::size_t>(pick)], c});
  }
  const auto n_fillers = rng.uniform_int(cfg.filler_words_min, cfg.filler_words_max);
  for (std::int64_t i = 0; i < n_fillers; ++i) {
    const auto pick =
        rng.uniform_int(0, static_cast<std::int64_t>(world.filler_words().size()) - 1);
    drafts.push_back({world.filler_words()[static_cast<std::size_t>(pick)], kFillerCategory});
  }
  if (drafts.empty()) throw InvalidInput("utterance would be empty");
  rng.shuffle(drafts);

  for (const auto& d : drafts) {
    Token tok;
    tok.word = d.word;
    tok.category = d.category;
    tok.token_id = next_id++;
    tok.frames = world.render_word(d.word, speaker_id, rng);
    pair.utterance.tokens.push_back(std::move(tok));
  }

  // incidence: utterance-driven naming events gated on referent presence
  std::map<int, long long> token_counts;
  for (const auto& t : pair.utterance.tokens)
    if (t.category != kFillerCategory) ++token_counts[t.category];
  std::set<int> scene_cats;
  for (const auto& o : pair.scene.objects) scene_cats.insert(o.category);
  for (const auto& [cat, count] : token_counts)
    if (scene_cats.count(cat)) pair.incidence.emplace_back(cat, count);
  return pair;
}

// ---------------------------------------------------------------------------
// Pool generation
// ---------------------------------------------------------------------------

namespace {

AudiovisualPair sample_pool_pair(const World& world, const GenerationConfig& gen,
                                 std::uint64_t stream_seed, long long pair_id) {
  const auto& cfg = world.config();
  Rng rng(derive_seed(stream_seed, static_cast<std::uint64_t>(pair_id)));
  const int speaker = static_cast<int>(rng.uniform_int(0, cfg.n_speakers - 1));
  const auto n_named =
      std::min<std::int64_t>(rng.uniform_int(gen.named_min, gen.named_max), cfg.n_categories);

  std::vector<double> weights;
  weights.reserve(world.inventory().records().size());
  for (const auto& r : world.inventory().records()) weights.push_back(r.daily_rate);

  std::vector<int> named;
  for (std::int64_t i = 0; i < n_named; ++i) {
    const auto c = rng.weighted_index(weights);
    weights[c] = 0.0;
    named.push_back(static_cast<int>(c));
  }
  const auto base_named = named;
  for (int c : base_named)
    if (rng.bernoulli(gen.name_repeat_prob)) named.push_back(c);

  std::vector<int> present;
  for (int c : base_named)
    if (rng.bernoulli(gen.referent_present_prob)) present.push_back(c);

  return sample_pair(world, present, named, speaker, rng, pair_id);
}

}  // namespace

std::vector<AudiovisualPair> build_pool(const World& world, const GenerationConfig& gen,
                                        std::uint64_t seed) {
  gen.validate();
  std::vector<AudiovisualPair> pool;
  pool.reserve(static_cast<std::size_t>(gen.pool_size));
  const auto pair_seed = derive_seed(seed, "pool_pair");
  for (long long i = 0; i < gen.pool_size; ++i)
    pool.push_back(sample_pool_pair(world, gen, pair_seed, i));
  return pool;
}

void top_up_pool(const World& world, std::vector<AudiovisualPair>& pool,
                 const std::vector<long long>& max_targets, long long first_pair_id,
                 std::uint64_t seed) {
  const int n_cats = world.config().n_categories;
  if (static_cast<int>(max_targets.size()) != n_cats)
    throw LengthMismatch("max_targets length does not match category count");

  std::vector<long long> singles(static_cast<std::size_t>(n_cats), 0);
  for (const auto& p : pool)
    if (p.incidence.size() == 1 && p.incidence.front().second == 1)
      ++singles[static_cast<std::size_t>(p.incidence.front().first)];

  const auto topup_seed = derive_seed(seed, "pool_topup");
  long long next_id = first_pair_id;
  for (int c = 0; c < n_cats; ++c) {
    for (long long need =
             max_targets[static_cast<std::size_t>(c)] - singles[static_cast<std::size_t>(c)];
         need > 0; --need) {
      Rng rng(derive_seed(topup_seed, static_cast<std::uint64_t>(next_id)));
      const int speaker = static_cast<int>(rng.uniform_int(0, world.config().n_speakers - 1));
      pool.push_back(sample_pair(world, {c}, {c}, speaker, rng, next_id));
      ++next_id;
    }
  }
}

std::vector<AudiovisualPair> build_auditory_set(const World& world, const GenerationConfig& gen,
                                                std::uint64_t seed) {
  gen.validate();
  std::vector<AudiovisualPair> out;
  out.reserve(static_cast<std::size_t>(gen.auditory_utterances));
  const auto pair_seed = derive_seed(seed, "auditory_pair");
  for (long long i = 0; i < gen.auditory_utterances; ++i)
    out.push_back(sample_pool_pair(world, gen, pair_seed, kAuditoryPairBase + i));
  return out;
}

// ---------------------------------------------------------------------------
// Greedy subset construction
// ---------------------------------------------------------------------------

std::vector<long long> sum_incidence(const std::vector<AudiovisualPair>& pairs, int n_categories) {
  std::vector<long long> out(static_cast<std::size_t>(n_categories), 0);
  for (const auto& p : pairs)
    for (const auto& [cat, count] : p.incidence) {
      if (cat < 0 || cat >= n_categories)
        throw InvalidInput("incidence category out of range: " + std::to_string(cat));
      out[static_cast<std::size_t>(cat)] += count;
    }
  return out;
}

SubsetResult build_subset(const std::vector<AudiovisualPair>& pool, const TargetCounts& targets,
                          std::uint64_t seed, long long deficit_tolerance,
                          const SubsetCarry* carry) {
  const auto n_cats = targets.per_category.size();
  SubsetResult result;
  result.achieved.assign(n_cats, 0);
  std::vector<char> taken(pool.size(), 0);
  if (carry != nullptr) {
    if (carry->achieved.size() != n_cats)
      throw LengthMismatch("carry achieved length does not match targets");
    result.achieved = carry->achieved;
    result.selected = carry->selected;
    for (std::size_t idx : carry->selected) taken.at(idx) = 1;
    for (std::size_t c = 0; c < n_cats; ++c)
      if (result.achieved[c] > targets.per_category[c])
        throw InvalidInput("carry already exceeds targets");
  }

  long long remaining = 0;
  for (std::size_t c = 0; c < n_cats; ++c)
    remaining += targets.per_category[c] - result.achieved[c];

  std::vector<std::size_t> order;
  order.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (!taken[i]) order.push_back(i);
  Rng rng(derive_seed(seed, "subset_order"));
  rng.shuffle(order);

  for (std::size_t idx : order) {
    if (remaining == 0) break;
    const auto& inc = pool[idx].incidence;
    if (inc.empty()) continue;
    bool fits = true;
    for (const auto& [cat, count] : inc) {
      if (cat < 0 || static_cast<std::size_t>(cat) >= n_cats ||
          result.achieved[static_cast<std::size_t>(cat)] + count >
              targets.per_category[static_cast<std::size_t>(cat)]) {
        fits = false;
        break;
      }
    }
    if (!fits) continue;
    result.selected.push_back(idx);
    for (const auto& [cat, count] : inc) {
      result.achieved[static_cast<std::size_t>(cat)] += count;
      remaining -= count;
    }
  }

  result.deficit.resize(n_cats);
  long long max_deficit = 0;
  for (std::size_t c = 0; c < n_cats; ++c) {
    result.deficit[c] = targets.per_category[c] - result.achieved[c];
    max_deficit = std::max(max_deficit, result.deficit[c]);
  }
  if (max_deficit > deficit_tolerance) {
    std::string detail;
    for (std::size_t c = 0; c < n_cats; ++c)
      if (result.deficit[c] > 0)
        detail += " c" + std::to_string(c) + ":" + std::to_string(result.deficit[c]);
    throw InsufficientPool("pool exhausted with per-category deficits:" + detail);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Test sets
// ---------------------------------------------------------------------------

TestSets make_test_sets(const World& world, int tokens_per_type, int abx_tokens_per_speaker,
                        std::uint64_t seed) {
  const auto& cfg = world.config();
  if (tokens_per_type < 2)
    throw InvalidInput("lextest needs at least 2 tokens per type");
  if (cfg.n_speakers < 2)
    throw InvalidInput("across-speaker ABX needs at least 2 speakers");
  if (abx_tokens_per_speaker < 1) throw InvalidInput("abx_tokens_per_speaker must be >= 1");

  TestSets sets;
  long long audio_id = kTestAudioIdBase;
  long long object_id = kTestObjectIdBase;

  const auto make_word_items = [&](std::string_view stream, std::vector<TestAudioItem>& out) {
    Rng rng(derive_seed(seed, stream));
    for (const auto& rec : world.inventory().records()) {
      const std::string& word = rec.word_forms.front();  // canonical form
      for (int k = 0; k < tokens_per_type; ++k) {
        TestAudioItem item;
        item.token_id = audio_id++;
        item.type_label = rec.id;
        item.speaker_label = k % cfg.n_speakers;
        item.frames = world.render_word(word, item.speaker_label, rng);
        out.push_back(std::move(item));
      }
    }
  };
  make_word_items("test_lextest", sets.lextest);
  make_word_items("test_semtest_words", sets.semtest_words);

  {
    Rng rng(derive_seed(seed, "test_semtest_objects"));
    for (const auto& rec : world.inventory().records()) {
      for (int k = 0; k < tokens_per_type; ++k) {
        TestObjectItem item;
        item.object_id = object_id++;
        item.category = rec.id;
        item.area = rec.mean_area;
        item.features = world.make_object_features(rec.id, rng);
        sets.semtest_objects.push_back(std::move(item));
      }
    }
  }
  {
    Rng rng(derive_seed(seed, "test_abx"));
    for (int p = 0; p < cfg.n_phones; ++p) {
      for (int s = 0; s < cfg.n_speakers; ++s) {
        for (int j = 0; j < abx_tokens_per_speaker; ++j) {
          TestAudioItem item;
          item.token_id = audio_id++;
          item.type_label = p;
          item.speaker_label = s;
          item.frames = world.render_phone(p, s, rng);
          sets.abx.push_back(std::move(item));
        }
      }
    }
  }
  return sets;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

std::uint32_t category_to_u32(int category) {
  return category == kFillerCategory ? kNoCategory : static_cast<std::uint32_t>(category);
}

ordered_json pair_to_json(const AudiovisualPair& p) {
  ordered_json scene = ordered_json::array();
  for (const auto& o : p.scene.objects)
    scene.push_back(
        {{"category", o.category}, {"area", o.area}, {"object_id", o.object_id}});
  ordered_json utt = ordered_json::array();
  for (const auto& t : p.utterance.tokens)
    utt.push_back({{"word", t.word},
                   {"category", t.category},
                   {"token_id", t.token_id},
                   {"frames", static_cast<long long>(t.frames.cols())}});
  ordered_json inc = ordered_json::array();
  for (const auto& [cat, count] : p.incidence) inc.push_back({cat, count});
  return ordered_json{{"pair_id", p.pair_id},
                      {"speaker", p.utterance.speaker_id},
                      {"scene", scene},
                      {"utterance", utt},
                      {"incidence", inc}};
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ordered_json parse_json_line(std::string_view line, const std::filesystem::path& path,
                             std::size_t line_no) {
  try {
    return ordered_json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
  }
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const std::string& stem, const Dataset& ds,
                  bool write_sidecars) {
  const auto manifest_path = dir / (stem + ".manifest.jsonl");
  std::ofstream out(manifest_path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest: " + manifest_path.string());

  ordered_json header{{"format", "xsl-manifest"},
                      {"version", 1},
                      {"condition", ds.info.condition},
                      {"duration_days", ds.info.duration_days},
                      {"n_categories", ds.info.n_categories},
                      {"achieved", ds.info.achieved},
                      {"deficit", ds.info.deficit},
                      {"frames_file", ds.info.frames_file},
                      {"objects_file", ds.info.objects_file}};
  out << header.dump() << '\n';
  for (const auto& p : ds.pairs) out << pair_to_json(p).dump() << '\n';
  if (!out) throw DataError("manifest write failed: " + manifest_path.string());

  if (!write_sidecars) return;
  TensorFile frames, objects;
  frames.dim = 0;
  objects.dim = 0;
  for (const auto& p : ds.pairs) {
    for (const auto& t : p.utterance.tokens) {
      if (frames.dim == 0) frames.dim = static_cast<std::uint32_t>(t.frames.rows());
      for (Eigen::Index f = 0; f < t.frames.cols(); ++f) {
        TensorRecord rec;
        rec.category = category_to_u32(t.category);
        rec.speaker = static_cast<std::uint32_t>(p.utterance.speaker_id);
        rec.token_id = static_cast<std::uint32_t>(t.token_id);
        rec.values = t.frames.col(f).cast<float>();
        frames.records.push_back(std::move(rec));
      }
    }
    for (const auto& o : p.scene.objects) {
      if (objects.dim == 0) objects.dim = static_cast<std::uint32_t>(o.features.size());
      TensorRecord rec;
      rec.category = category_to_u32(o.category);
      rec.speaker = 0;
      rec.token_id = static_cast<std::uint32_t>(o.object_id);
      rec.values = o.features.cast<float>();
      objects.records.push_back(std::move(rec));
    }
  }
  frames.save(dir / ds.info.frames_file);
  objects.save(dir / ds.info.objects_file);
}

Dataset load_dataset(const std::filesystem::path& dir, const std::string& stem) {
  const auto manifest_path = dir / (stem + ".manifest.jsonl");
  const std::string text = read_file(manifest_path);

  Dataset ds;
  std::size_t line_no = 0;
  bool have_header = false;
  std::unordered_map<std::uint32_t, std::vector<const TensorRecord*>> frame_groups;
  std::unordered_map<std::uint32_t, const TensorRecord*> object_map;
  TensorFile frames, objects;

  for (std::string_view rest = text; !rest.empty();) {
    const std::size_t eol = rest.find('\n');
    std::string_view line = rest.substr(0, eol);
    rest = eol == std::string_view::npos ? std::string_view{} : rest.substr(eol + 1);
    ++line_no;
    if (line.empty()) continue;
    ordered_json j = parse_json_line(line, manifest_path, line_no);
    try {
      if (!have_header) {
        if (j.value("format", "") != "xsl-manifest" || j.value("version", 0) != 1)
          throw FormatError("not an xsl-manifest v1 file: " + manifest_path.string());
        ds.info.condition = j.at("condition").get<std::string>();
        ds.info.duration_days = j.at("duration_days").get<int>();
        ds.info.n_categories = j.at("n_categories").get<int>();
        ds.info.achieved = j.at("achieved").get<std::vector<long long>>();
        ds.info.deficit = j.at("deficit").get<std::vector<long long>>();
        ds.info.frames_file = j.at("frames_file").get<std::string>();
        ds.info.objects_file = j.at("objects_file").get<std::string>();
        have_header = true;
        frames = TensorFile::load(dir / ds.info.frames_file);
        objects = TensorFile::load(dir / ds.info.objects_file);
        for (const auto& r : frames.records) frame_groups[r.token_id].push_back(&r);
        for (const auto& r : objects.records) object_map[r.token_id] = &r;
        continue;
      }
      AudiovisualPair p;
      p.pair_id = j.at("pair_id").get<long long>();
      p.scene.scene_id = p.pair_id;
      p.utterance.utterance_id = p.pair_id;
      p.utterance.speaker_id = j.at("speaker").get<int>();
      for (const auto& so : j.at("scene")) {
        SceneObject obj;
        obj.category = so.at("category").get<int>();
        obj.area = so.at("area").get<double>();
        obj.object_id = so.at("object_id").get<long long>();
        const auto it = object_map.find(static_cast<std::uint32_t>(obj.object_id));
        if (it == object_map.end())
          throw FormatError("object " + std::to_string(obj.object_id) + " missing from sidecar");
        obj.features = it->second->values.cast<double>();
        p.scene.objects.push_back(std::move(obj));
      }
      for (const auto& tj : j.at("utterance")) {
        Token t;
        t.word = tj.at("word").get<std::string>();
        t.category = tj.at("category").get<int>();
        t.token_id = tj.at("token_id").get<long long>();
        const auto n_frames = tj.at("frames").get<long long>();
        const auto it = frame_groups.find(static_cast<std::uint32_t>(t.token_id));
        if (it == frame_groups.end() ||
            static_cast<long long>(it->second.size()) != n_frames)
          throw FormatError("token " + std::to_string(t.token_id) +
                            " frame count mismatch with sidecar");
        t.frames.resize(frames.dim, n_frames);
        for (long long f = 0; f < n_frames; ++f)
          t.frames.col(f) = it->second[static_cast<std::size_t>(f)]->values.cast<double>();
        p.utterance.tokens.push_back(std::move(t));
      }
      for (const auto& ij : j.at("incidence"))
        p.incidence.emplace_back(ij.at(0).get<int>(), ij.at(1).get<long long>());
      ds.pairs.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(manifest_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw FormatError("manifest has no header: " + manifest_path.string());

  const auto recomputed = sum_incidence(ds.pairs, ds.info.n_categories);
  if (recomputed != ds.info.achieved)
    throw FormatError("manifest achieved counts do not match pair incidences: " +
                      manifest_path.string());
  return ds;
}

void save_test_sets(const std::filesystem::path& dir, const TestSets& sets, int phone_dim,
                    int visual_dim) {
  const auto meta_path = dir / "testsets.jsonl";
  std::ofstream out(meta_path, std::ios::binary);
  if (!out) throw DataError("cannot write test sets: " + meta_path.string());

  TensorFile frames, objects;
  frames.dim = static_cast<std::uint32_t>(phone_dim);
  objects.dim = static_cast<std::uint32_t>(visual_dim);

  ordered_json header{{"format", "xsl-testsets"},
                      {"version", 1},
                      {"frames_file", "testsets.frames.tns"},
                      {"objects_file", "testsets.objects.tns"}};
  out << header.dump() << '\n';

  const auto emit_audio = [&](const char* set_name, const std::vector<TestAudioItem>& items) {
    for (const auto& item : items) {
      out << ordered_json{{"set", set_name},
                          {"token_id", item.token_id},
                          {"type", item.type_label},
                          {"speaker", item.speaker_label},
                          {"frames", static_cast<long long>(item.frames.cols())}}
                 .dump()
          << '\n';
      for (Eigen::Index f = 0; f < item.frames.cols(); ++f) {
        TensorRecord rec;
        rec.category = category_to_u32(item.type_label);
        rec.speaker = static_cast<std::uint32_t>(item.speaker_label);
        rec.token_id = static_cast<std::uint32_t>(item.token_id);
        rec.values = item.frames.col(f).cast<float>();
        frames.records.push_back(std::move(rec));
      }
    }
  };
  emit_audio("lextest", sets.lextest);
  emit_audio("semtest_words", sets.semtest_words);
  for (const auto& item : sets.semtest_objects) {
    out << ordered_json{{"set", "semtest_objects"},
                        {"object_id", item.object_id},
                        {"category", item.category},
                        {"area", item.area}}
               .dump()
        << '\n';
    TensorRecord rec;
    rec.category = category_to_u32(item.category);
    rec.speaker = 0;
    rec.token_id = static_cast<std::uint32_t>(item.object_id);
    rec.values = item.features.cast<float>();
    objects.records.push_back(std::move(rec));
  }
  emit_audio("abx", sets.abx);
  if (!out) throw DataError("test set write failed: " + meta_path.string());

  frames.save(dir / "testsets.frames.tns");
  objects.save(dir / "testsets.objects.tns");
}

TestSets load_test_sets(const std::filesystem::path& dir) {
  const auto meta_path = dir / "testsets.jsonl";
  const std::string text = read_file(meta_path);

  TestSets sets;
  TensorFile frames, objects;
  std::unordered_map<std::uint32_t, std::vector<const TensorRecord*>> frame_groups;
  std::unordered_map<std::uint32_t, const TensorRecord*> object_map;
  bool have_header = false;
  std::size_t line_no = 0;

  for (std::string_view rest = text; !rest.empty();) {
    const std::size_t eol = rest.find('\n');
    std::string_view line = rest.substr(0, eol);
    rest = eol == std::string_view::npos ? std::string_view{} : rest.substr(eol + 1);
    ++line_no;
    if (line.empty()) continue;
    ordered_json j = parse_json_line(line, meta_path, line_no);
    try {
      if (!have_header) {
        if (j.value("format", "") != "xsl-testsets" || j.value("version", 0) != 1)
          throw FormatError("not an xsl-testsets v1 file: " + meta_path.string());
        frames = TensorFile::load(dir / j.at("frames_file").get<std::string>());
        objects = TensorFile::load(dir / j.at("objects_file").get<std::string>());
        for (const auto& r : frames.records) frame_groups[r.token_id].push_back(&r);
        for (const auto& r : objects.records) object_map[r.token_id] = &r;
        have_header = true;
        continue;
      }
      const std::string set = j.at("set").get<std::string>();
      if (set == "semtest_objects") {
        TestObjectItem item;
        item.object_id = j.at("object_id").get<long long>();
        item.category = j.at("category").get<int>();
        item.area = j.at("area").get<double>();
        const auto it = object_map.find(static_cast<std::uint32_t>(item.object_id));
        if (it == object_map.end())
          throw FormatError("test object " + std::to_string(item.object_id) + " missing");
        item.features = it->second->values.cast<double>();
        sets.semtest_objects.push_back(std::move(item));
        continue;
      }
      TestAudioItem item;
      item.token_id = j.at("token_id").get<long long>();
      item.type_label = j.at("type").get<int>();
      item.speaker_label = j.at("speaker").get<int>();
      const auto n_frames = j.at("frames").get<long long>();
      const auto it = frame_groups.find(static_cast<std::uint32_t>(item.token_id));
      if (it == frame_groups.end() || static_cast<long long>(it->second.size()) != n_frames)
        throw FormatError("test token " + std::to_string(item.token_id) + " frame mismatch");
      item.frames.resize(frames.dim, n_frames);
      for (long long f = 0; f < n_frames; ++f)
        item.frames.col(f) = it->second[static_cast<std::size_t>(f)]->values.cast<double>();
      if (set == "lextest")
        sets.lextest.push_back(std::move(item));
      else if (set == "semtest_words")
        sets.semtest_words.push_back(std::move(item));
      else if (set == "abx")
        sets.abx.push_back(std::move(item));
      else
        throw FormatError("unknown test set '" + set + "'");
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(meta_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw FormatError("test set file has no header: " + meta_path.string());
  return sets;
}

}  // namespace xsl
