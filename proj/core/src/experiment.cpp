#include "xslearn/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "xslearn/checkpoint.hpp"
#include "xslearn/errors.hpp"
#include "xslearn/rng.hpp"
#include "xslearn/text_io.hpp"

namespace xsl {

using ordered_json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

void require_known_keys(const ordered_json& j, std::initializer_list<const char*> allowed,
                        const std::string& section) {
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* a) { return key == a; }) == allowed.end())
      throw BadConfig("unknown key '" + key + "' in " + section);
  }
}

template <typename T>
void read_field(const ordered_json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw BadConfig("bad value for '" + std::string(key) + "': " + e.what());
  }
}

void read_range(const ordered_json& j, const char* key, int& lo, int& hi) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2)
    throw BadConfig("'" + std::string(key) + "' must be a [min, max] pair");
  lo = v.at(0).get<int>();
  hi = v.at(1).get<int>();
}

WorldConfig parse_world(const ordered_json& j) {
  require_known_keys(j,
                     {"n_categories", "n_phones", "phone_dim", "visual_dim", "n_speakers",
                      "frames_per_phone", "phone_noise_sd", "visual_noise_sd",
                      "filler_vocab_size", "objects_per_scene", "filler_words_per_utterance",
                      "speaker_transforms"},
                     "world");
  WorldConfig w;
  read_field(j, "n_categories", w.n_categories);
  read_field(j, "n_phones", w.n_phones);
  read_field(j, "phone_dim", w.phone_dim);
  read_field(j, "visual_dim", w.visual_dim);
  read_field(j, "n_speakers", w.n_speakers);
  read_range(j, "frames_per_phone", w.frames_per_phone_min, w.frames_per_phone_max);
  read_field(j, "phone_noise_sd", w.phone_noise_sd);
  read_field(j, "visual_noise_sd", w.visual_noise_sd);
  read_field(j, "filler_vocab_size", w.filler_vocab_size);
  read_range(j, "objects_per_scene", w.objects_per_scene_min, w.objects_per_scene_max);
  read_range(j, "filler_words_per_utterance", w.filler_words_min, w.filler_words_max);
  read_field(j, "speaker_transforms", w.speaker_transforms);
  return w;
}

StatisticsSource parse_statistics(const ordered_json& j, const std::filesystem::path& base_dir) {
  require_known_keys(j, {"source", "path", "exponent", "base_rate"}, "statistics");
  StatisticsSource s;
  std::string source = "zipf";
  read_field(j, "source", source);
  if (source == "file") {
    s.kind = StatisticsSource::Kind::kFile;
    std::string path;
    read_field(j, "path", path);
    if (path.empty()) throw BadConfig("statistics source 'file' needs a 'path'");
    s.path = std::filesystem::path(path);
    if (s.path.is_relative()) s.path = base_dir / s.path;
  } else if (source == "zipf") {
    s.kind = StatisticsSource::Kind::kZipf;
    read_field(j, "exponent", s.exponent);
    read_field(j, "base_rate", s.base_rate);
  } else {
    throw BadConfig("statistics source must be 'file' or 'zipf'");
  }
  return s;
}

GenerationConfig parse_generation(const ordered_json& j) {
  require_known_keys(j,
                     {"pool_size", "referent_present_prob", "named_per_pair", "name_repeat_prob",
                      "validation_fraction", "auditory_utterances", "deficit_tolerance",
                      "nested_bins", "guarantee_feasibility"},
                     "generation");
  GenerationConfig g;
  read_field(j, "pool_size", g.pool_size);
  read_field(j, "referent_present_prob", g.referent_present_prob);
  read_range(j, "named_per_pair", g.named_min, g.named_max);
  read_field(j, "name_repeat_prob", g.name_repeat_prob);
  read_field(j, "validation_fraction", g.validation_fraction);
  read_field(j, "auditory_utterances", g.auditory_utterances);
  read_field(j, "deficit_tolerance", g.deficit_tolerance);
  read_field(j, "nested_bins", g.nested_bins);
  read_field(j, "guarantee_feasibility", g.guarantee_feasibility);
  return g;
}

ModelConfig parse_model(const ordered_json& j) {
  require_known_keys(j, {"hidden_dim", "embed_dim", "codebook_size", "context_window"}, "model");
  ModelConfig m;
  read_field(j, "hidden_dim", m.hidden_dim);
  read_field(j, "embed_dim", m.embed_dim);
  read_field(j, "codebook_size", m.codebook_size);
  read_field(j, "context_window", m.context_window);
  return m;
}

TrainConfig parse_train(const ordered_json& j, const std::string& section) {
  require_known_keys(j,
                     {"alpha", "temperature", "learning_rate", "warmup_fraction", "epochs",
                      "batch_size", "mask_fraction", "mask_span", "n_negatives",
                      "freeze_visual_encoder", "validate_every"},
                     section);
  TrainConfig t;
  read_field(j, "alpha", t.alpha);
  read_field(j, "temperature", t.temperature);
  read_field(j, "learning_rate", t.learning_rate);
  read_field(j, "warmup_fraction", t.warmup_fraction);
  read_field(j, "epochs", t.epochs);
  read_field(j, "batch_size", t.batch_size);
  read_field(j, "mask_fraction", t.mask_fraction);
  read_field(j, "mask_span", t.mask_span);
  read_field(j, "n_negatives", t.n_negatives);
  read_field(j, "freeze_visual_encoder", t.freeze_visual_encoder);
  read_field(j, "validate_every", t.validate_every);
  return t;
}

EvalConfig parse_eval(const ordered_json& j) {
  require_known_keys(j,
                     {"tokens_per_type", "abx_tokens_per_speaker", "recall_ks",
                      "chance_band_pct", "spearman_permutations"},
                     "eval");
  EvalConfig e;
  read_field(j, "tokens_per_type", e.tokens_per_type);
  read_field(j, "abx_tokens_per_speaker", e.abx_tokens_per_speaker);
  read_field(j, "recall_ks", e.recall_ks);
  read_field(j, "chance_band_pct", e.chance_band_pct);
  read_field(j, "spearman_permutations", e.spearman_permutations);
  return e;
}

bool filename_safe(const std::string& name) {
  if (name.empty()) return false;
  for (char c : name)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') return false;
  return true;
}

// ---------------------------------------------------------------------------
// Output-directory advisory lock
// ---------------------------------------------------------------------------

class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    std::filesystem::create_directories(dir);
    std::FILE* f = std::fopen(path_.string().c_str(), "wx");
    if (f == nullptr)
      throw DataError("output directory is locked by another command (remove " + path_.string() +
                      " if stale)");
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::filesystem::path path_;
};

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

ModelConfig effective_model(const ExperimentConfig& config) {
  ModelConfig m = config.model;
  m.phone_dim = config.world.phone_dim;
  m.visual_dim = config.world.visual_dim;
  return m;
}

WorldConfig effective_world(const ExperimentConfig& config) {
  WorldConfig w = config.world;
  w.seed = derive_seed(config.seed, "world");
  return w;
}

const AgeBin& find_bin(const ExperimentConfig& config, const std::string& name) {
  for (const auto& bin : config.age_bins)
    if (bin.name == name) return bin;
  throw BadConfig("unknown age bin '" + name + "'");
}

std::string checkpoint_file(const std::string& name, bool best) {
  return "checkpoint_" + name + (best ? ".best.xsl" : ".final.xsl");
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace

void ExperimentConfig::validate() const {
  world.validate();
  generation.validate();
  train_auditory.validate();
  train_audiovisual.validate();
  if (age_bins.empty()) throw BadConfig("age_bins must be nonempty");
  std::set<std::string> names;
  for (const auto& bin : age_bins) {
    if (!filename_safe(bin.name)) throw BadConfig("age bin name '" + bin.name + "' is not usable");
    if (bin.name == "auditory" || bin.name == "baseline" || bin.name == "pool" ||
        bin.name == "validation")
      throw BadConfig("age bin name '" + bin.name + "' is reserved");
    if (!names.insert(bin.name).second)
      throw BadConfig("duplicate age bin name '" + bin.name + "'");
    if (bin.duration_days <= 0) throw BadConfig("age bin durations must be positive");
  }
  if (eval.tokens_per_type < 2) throw BadConfig("eval.tokens_per_type must be >= 2");
  if (eval.abx_tokens_per_speaker < 1) throw BadConfig("eval.abx_tokens_per_speaker must be >= 1");
  if (eval.recall_ks.empty()) throw BadConfig("eval.recall_ks must be nonempty");
  for (int k : eval.recall_ks)
    if (k < 1) throw BadConfig("eval.recall_ks entries must be >= 1");
  if (eval.spearman_permutations < 1)
    throw BadConfig("eval.spearman_permutations must be >= 1");
  if (statistics.kind == StatisticsSource::Kind::kZipf && statistics.base_rate <= 0.0)
    throw BadConfig("statistics.base_rate must be positive");
}

ExperimentConfig ExperimentConfig::from_json_text(std::string_view text,
                                                  const std::filesystem::path& base_dir) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw BadConfig(std::string("config parse error: ") + e.what());
  }
  require_known_keys(
      j, {"seed", "world", "statistics", "age_bins", "generation", "model", "train", "eval"},
      "config");
  ExperimentConfig c;
  read_field(j, "seed", c.seed);
  if (j.contains("world")) c.world = parse_world(j.at("world"));
  if (j.contains("statistics")) c.statistics = parse_statistics(j.at("statistics"), base_dir);
  if (j.contains("generation")) c.generation = parse_generation(j.at("generation"));
  if (j.contains("model")) c.model = parse_model(j.at("model"));
  if (j.contains("train")) {
    const auto& t = j.at("train");
    require_known_keys(t, {"auditory", "audiovisual"}, "train");
    if (t.contains("auditory")) c.train_auditory = parse_train(t.at("auditory"), "train.auditory");
    if (t.contains("audiovisual"))
      c.train_audiovisual = parse_train(t.at("audiovisual"), "train.audiovisual");
  }
  if (j.contains("eval")) c.eval = parse_eval(j.at("eval"));
  if (j.contains("age_bins")) {
    for (const auto& bj : j.at("age_bins")) {
      require_known_keys(bj, {"name", "duration_days", "condition"}, "age_bins[]");
      AgeBin bin;
      read_field(bj, "name", bin.name);
      read_field(bj, "duration_days", bin.duration_days);
      std::string cond = "natural";
      read_field(bj, "condition", cond);
      bin.condition = condition_from_name(cond);
      c.age_bins.push_back(std::move(bin));
    }
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BadConfig("cannot open config file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str(), path.parent_path());
}

CategoryInventory load_statistics(const ExperimentConfig& config) {
  if (config.statistics.kind == StatisticsSource::Kind::kFile) {
    CategoryInventory inv = CategoryInventory::load(config.statistics.path);
    if (inv.size() != config.world.n_categories)
      throw ConfigMismatch("statistics file has " + std::to_string(inv.size()) +
                           " categories but world.n_categories is " +
                           std::to_string(config.world.n_categories));
    return inv;
  }
  return make_zipf_inventory(config.world.n_categories, config.statistics.exponent,
                             config.statistics.base_rate, derive_seed(config.seed, "statistics"));
}

std::vector<PairExample> dataset_to_examples(const Dataset& dataset) {
  std::vector<PairExample> out;
  out.reserve(dataset.pairs.size());
  for (const auto& p : dataset.pairs) {
    PairExample ex;
    ex.frames = p.utterance.frame_matrix();
    ex.objects = p.scene.object_matrix();
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

void cmd_stats(const ExperimentConfig& config, const std::filesystem::path& out) {
  config.validate();
  DirLock lock(out);
  const CategoryInventory inventory = load_statistics(config);
  for (const auto& bin : config.age_bins) {
    const TargetCounts targets = target_counts(inventory, bin.duration_days, bin.condition);
    std::string text = "# category\tdaily_rate\ttarget\n";
    double rate_total = 0.0;
    for (const auto& rec : inventory.records()) {
      text += rec.name;
      text += '\t';
      text += format_double(rec.daily_rate);
      text += '\t';
      text += std::to_string(targets.per_category[static_cast<std::size_t>(rec.id)]);
      text += '\n';
      rate_total += rec.daily_rate;
    }
    text += "TOTAL\t" + format_double(rate_total) + '\t' + std::to_string(targets.total()) + '\n';
    write_text_file(out / ("targets_" + bin.name + ".tsv"), text);
  }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

void cmd_generate(const ExperimentConfig& config, const std::filesystem::path& out) {
  config.validate();
  DirLock lock(out);
  const CategoryInventory inventory = load_statistics(config);
  const World world = World::generate(effective_world(config), inventory);
  inventory.save(out / "inventory.tsv");

  const int n_cats = config.world.n_categories;
  std::vector<TargetCounts> bin_targets;
  std::vector<long long> max_targets(static_cast<std::size_t>(n_cats), 0);
  for (const auto& bin : config.age_bins) {
    bin_targets.push_back(target_counts(inventory, bin.duration_days, bin.condition));
    for (int c = 0; c < n_cats; ++c)
      max_targets[static_cast<std::size_t>(c)] =
          std::max(max_targets[static_cast<std::size_t>(c)],
                   bin_targets.back().per_category[static_cast<std::size_t>(c)]);
  }

  std::vector<AudiovisualPair> pool =
      build_pool(world, config.generation, derive_seed(config.seed, "generate.pool"));

  // held-out validation split, never part of any training bin
  std::vector<std::size_t> indices(pool.size());
  std::iota(indices.begin(), indices.end(), 0);
  Rng split_rng(derive_seed(config.seed, "generate.validation_split"));
  split_rng.shuffle(indices);
  const auto n_val = static_cast<std::size_t>(config.generation.validation_fraction *
                                              static_cast<double>(pool.size()));
  std::vector<char> is_val(pool.size(), 0);
  for (std::size_t i = 0; i < n_val; ++i) is_val[indices[i]] = 1;

  std::vector<AudiovisualPair> train_pool, val_pairs;
  train_pool.reserve(pool.size() - n_val);
  val_pairs.reserve(n_val);
  for (std::size_t i = 0; i < pool.size(); ++i)
    (is_val[i] ? val_pairs : train_pool).push_back(std::move(pool[i]));

  // feasibility top-up happens after the split so the held-out pairs cannot
  // starve a category of its cover
  if (config.generation.guarantee_feasibility)
    top_up_pool(world, train_pool, max_targets, config.generation.pool_size,
                derive_seed(config.seed, "generate.pool"));

  const auto save_with_sidecars = [&](const std::string& stem,
                                      std::vector<AudiovisualPair> pairs,
                                      const std::string& condition) {
    Dataset ds;
    ds.info.condition = condition;
    ds.info.duration_days = 0;
    ds.info.n_categories = n_cats;
    ds.info.frames_file = stem + ".frames.tns";
    ds.info.objects_file = stem + ".objects.tns";
    ds.pairs = std::move(pairs);
    ds.info.achieved = sum_incidence(ds.pairs, n_cats);
    ds.info.deficit.assign(static_cast<std::size_t>(n_cats), 0);
    save_dataset(out, stem, ds, /*write_sidecars=*/true);
  };
  save_with_sidecars("pool", std::move(train_pool), "pool");
  save_with_sidecars("validation", std::move(val_pairs), "validation");
  save_with_sidecars("auditory",
                     build_auditory_set(world, config.generation,
                                        derive_seed(config.seed, "generate.auditory")),
                     "auditory");

  // bin subsets reference the pool sidecars
  const Dataset pool_ds = load_dataset(out, "pool");
  SubsetCarry carry;
  bool have_carry = false;
  Condition carry_condition = Condition::kNatural;
  for (std::size_t b = 0; b < config.age_bins.size(); ++b) {
    const auto& bin = config.age_bins[b];
    const auto& targets = bin_targets[b];
    const SubsetCarry* use_carry =
        (config.generation.nested_bins && have_carry && carry_condition == bin.condition)
            ? &carry
            : nullptr;
    SubsetResult subset =
        build_subset(pool_ds.pairs, targets, derive_seed(config.seed, "subset." + bin.name),
                     config.generation.deficit_tolerance, use_carry);

    Dataset ds;
    ds.info.condition = std::string(condition_name(bin.condition));
    ds.info.duration_days = bin.duration_days;
    ds.info.n_categories = n_cats;
    ds.info.achieved = subset.achieved;
    ds.info.deficit = subset.deficit;
    ds.info.frames_file = "pool.frames.tns";
    ds.info.objects_file = "pool.objects.tns";
    for (std::size_t idx : subset.selected) ds.pairs.push_back(pool_ds.pairs[idx]);
    save_dataset(out, "bin_" + bin.name, ds, /*write_sidecars=*/false);

    long long deficit_total = 0;
    for (long long d : subset.deficit) deficit_total += d;
    std::fprintf(stderr, "bin %s: target=%lld achieved=%lld deficit=%lld pairs=%zu\n",
                 bin.name.c_str(), targets.total(),
                 targets.total() - deficit_total, deficit_total, subset.selected.size());

    if (config.generation.nested_bins) {
      carry.selected = std::move(subset.selected);
      carry.achieved = std::move(subset.achieved);
      carry_condition = bin.condition;
      have_carry = true;
    }
  }

  const TestSets sets = make_test_sets(world, config.eval.tokens_per_type,
                                       config.eval.abx_tokens_per_speaker,
                                       derive_seed(config.seed, "generate.testsets"));
  save_test_sets(out, sets, config.world.phone_dim, config.world.visual_dim);
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

void cmd_train(const ExperimentConfig& config, const std::filesystem::path& out,
               const std::string& bin_name) {
  config.validate();
  DirLock lock(out);
  const ModelConfig model = effective_model(config);
  const bool auditory = bin_name == "auditory";
  if (!auditory) find_bin(config, bin_name);  // throws for unknown names

  StageData data;
  data.train = dataset_to_examples(load_dataset(out, auditory ? "auditory" : "bin_" + bin_name));
  data.validation = dataset_to_examples(load_dataset(out, "validation"));

  LearnerState state = make_learner(model, derive_seed(config.seed, "learner_init"));
  TrainConfig tc = auditory ? config.train_auditory : config.train_audiovisual;
  tc.seed = derive_seed(config.seed, "train." + bin_name);

  if (!auditory) {
    const auto prior = out / checkpoint_file("auditory", /*best=*/true);
    if (!std::filesystem::exists(prior))
      throw MissingCheckpoint("audiovisual bin '" + bin_name +
                              "' needs the auditory checkpoint " + prior.string() +
                              " (run `train --bin auditory` first)");
    state.params = load_checkpoint(prior, model);
  }

  const Stage stage = auditory ? Stage::kAuditoryOnly : Stage::kAudiovisual;
  const TrainResult result = train_stage(state, data, tc, stage);

  save_checkpoint(out / checkpoint_file(bin_name, true), result.best_params);
  save_checkpoint(out / checkpoint_file(bin_name, false), result.final_params);

  std::string trace = auditory
                          ? "# epoch\tloss_aud_r\tloss_aud_d\tloss_aud\tloss_total\tvalidation\n"
                          : "# epoch\tloss_aud_r\tloss_aud_d\tloss_aud\tloss_av\tloss_total"
                            "\tvalidation\n";
  std::map<int, double> val_by_epoch;
  for (const auto& v : result.validation) val_by_epoch[v.epoch] = v.value;
  for (const auto& e : result.trace) {
    trace += std::to_string(e.epoch);
    trace += '\t';
    trace += format_double(e.loss.loss_aud_r);
    trace += '\t';
    trace += format_double(e.loss.loss_aud_d);
    trace += '\t';
    trace += format_double(e.loss.loss_aud);
    if (!auditory) {
      trace += '\t';
      trace += e.loss.loss_av ? format_double(*e.loss.loss_av) : std::string("-");
    }
    trace += '\t';
    trace += format_double(e.loss.loss_total);
    trace += '\t';
    const auto it = val_by_epoch.find(e.epoch);
    trace += it == val_by_epoch.end() ? std::string("-") : format_double(it->second);
    trace += '\n';
  }
  write_text_file(out / ("trace_" + bin_name + ".tsv"), trace);
  std::fprintf(stderr, "trained %s: best epoch %d, %lld single-pair batches skipped\n",
               bin_name.c_str(), result.best_epoch, result.infonce_skipped_batches);
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

namespace {

EmbeddingSet embed_audio_items(const ParamSet& params, const ModelConfig& model,
                               const std::vector<TestAudioItem>& items, ProbeLayer layer) {
  EmbeddingSet set;
  set.items.reserve(items.size());
  for (const auto& item : items) {
    EmbeddingItem e;
    e.vector = probe_utterance(params, model, item.frames, layer);
    e.type_label = item.type_label;
    e.speaker_label = item.speaker_label;
    e.token_id = item.token_id;
    set.items.push_back(std::move(e));
  }
  return set;
}

EmbeddingSet embed_object_items(const ParamSet& params, const ModelConfig& model,
                                const std::vector<TestObjectItem>& items) {
  EmbeddingSet set;
  set.items.reserve(items.size());
  for (const auto& item : items) {
    EmbeddingItem e;
    e.vector = encode_scene(params, model, item.features);
    e.type_label = item.category;
    e.speaker_label = 0;
    e.token_id = item.object_id;
    set.items.push_back(std::move(e));
  }
  return set;
}

}  // namespace

void cmd_eval(const ExperimentConfig& config, const std::filesystem::path& out,
              const std::string& checkpoint_name) {
  config.validate();
  DirLock lock(out);
  const ModelConfig model = effective_model(config);
  const CategoryInventory inventory = CategoryInventory::load(out / "inventory.tsv");

  ParamSet params = [&] {
    if (checkpoint_name == "baseline")
      return init_params(model, derive_seed(config.seed, "learner_init"));
    if (checkpoint_name != "auditory") find_bin(config, checkpoint_name);
    const auto path = out / checkpoint_file(checkpoint_name, /*best=*/true);
    if (!std::filesystem::exists(path))
      throw MissingArtifact("checkpoint not found: " + path.string());
    return load_checkpoint(path, model);
  }();

  const TestSets sets = load_test_sets(out);

  MetricsReport report;
  report.checkpoint = checkpoint_name;

  // probe every stage for the discrimination tests, report the best layer
  for (ProbeLayer layer : kAllProbeLayers) {
    const std::string name(probe_layer_name(layer));
    report.abx_per_layer_pct[name] =
        abx_error(embed_audio_items(params, model, sets.abx, layer), AbxDistance::kCosine);
    report.lextest_per_layer_pct[name] = lextest_score(
        embed_audio_items(params, model, sets.lextest, layer), config.eval.tokens_per_type);
  }
  report.abx_best_layer = "frame";
  report.abx_error_pct = report.abx_per_layer_pct.at("frame");
  report.lextest_best_layer = "frame";
  report.lextest_pct = report.lextest_per_layer_pct.at("frame");
  for (ProbeLayer layer : kAllProbeLayers) {
    const std::string name(probe_layer_name(layer));
    if (report.abx_per_layer_pct.at(name) < report.abx_error_pct) {
      report.abx_error_pct = report.abx_per_layer_pct.at(name);
      report.abx_best_layer = name;
    }
    if (report.lextest_per_layer_pct.at(name) > report.lextest_pct) {
      report.lextest_pct = report.lextest_per_layer_pct.at(name);
      report.lextest_best_layer = name;
    }
  }

  // word meaning via the learner's dot-product scorer on final embeddings
  const EmbeddingSet words = embed_audio_items(params, model, sets.semtest_words,
                                               ProbeLayer::kFinal);
  const EmbeddingSet objects = embed_object_items(params, model, sets.semtest_objects);
  const SemtestResult sem = semtest_score(words, objects, similarity);
  report.semtest_mean_pct = sem.mean_pct;
  report.semtest_per_category_pct = sem.per_category_pct;

  // cross-modal retrieval on the held-out validation split
  {
    const Dataset val = load_dataset(out, "validation");
    const auto examples = dataset_to_examples(val);
    const auto n = static_cast<int>(examples.size());
    if (n > 0) {
      Eigen::MatrixXd ea(model.embed_dim, n), ev(model.embed_dim, n);
      for (int i = 0; i < n; ++i) {
        ea.col(i) = encode_utterance(params, model, examples[static_cast<std::size_t>(i)].frames);
        ev.col(i) = encode_scene(params, model, examples[static_cast<std::size_t>(i)].objects);
      }
      const Eigen::MatrixXd s = ea.transpose() * ev;
      for (int k : config.eval.recall_ks) {
        if (k > n) continue;
        const RecallResult r = recall_at_k(s, k);
        report.recall[k] = r.mean;
        if (k == 10) {
          report.recall_speech_to_image = r.speech_to_image;
          report.recall_image_to_speech = r.image_to_speech;
        }
      }
    }
  }

  // vocabulary sizes at the three comprehension thresholds
  {
    const int c = config.world.n_categories;
    const int k = config.eval.tokens_per_type;
    double band = config.eval.chance_band_pct;
    if (band < 0.0) {
      const double trials = static_cast<double>(k) * static_cast<double>(c - 1) *
                            static_cast<double>(k);
      band = 2.0 * 100.0 * std::sqrt(0.25 / trials);
    }
    const std::vector<std::pair<std::string, double>> thresholds = {
        {"above_chance", 50.0 + band}, {"two_thirds", 200.0 / 3.0}, {"four_fifths", 80.0}};
    for (const auto& [name, pct] : thresholds)
      report.vocab_sizes.push_back(
          {name, pct, vocab_size(report.semtest_per_category_pct, pct)});
  }

  // post-hoc rank correlations against the naming statistics
  {
    std::vector<double> scores = report.semtest_per_category_pct;
    std::vector<double> rates, areas;
    for (const auto& rec : inventory.records()) {
      rates.push_back(rec.daily_rate);
      areas.push_back(rec.mean_area);
    }
    const auto seed = derive_seed(config.seed, "eval.spearman");
    const auto correlate = [&](const char* variable, const std::vector<double>& x,
                               std::uint64_t s) {
      try {
        const SpearmanResult r = spearman(x, scores, config.eval.spearman_permutations, s);
        report.correlations.push_back({variable, r.rho, r.p});
      } catch (const DegenerateInput&) {
        // constant scores (e.g. an untrained cross-modal path): undefined rank
        // correlation, recorded as null
        const double nan = std::numeric_limits<double>::quiet_NaN();
        report.correlations.push_back({variable, nan, nan});
      }
    };
    correlate("naming_frequency", rates, seed);
    correlate("object_area", areas, derive_seed(seed, 1));
  }

  report.validate();
  save_metrics_report(out / ("report_" + checkpoint_name + ".json"), report);

  // per-category table in the statistics-table column layout
  std::string table = "# category\tdaily_rate\tmean_area\tsemtest_pct\n";
  for (const auto& rec : inventory.records()) {
    table += rec.name;
    table += '\t';
    table += format_double(rec.daily_rate);
    table += '\t';
    table += format_double(rec.mean_area);
    table += '\t';
    table += format_double(report.semtest_per_category_pct[static_cast<std::size_t>(rec.id)]);
    table += '\n';
  }
  write_text_file(out / ("semtest_categories_" + checkpoint_name + ".tsv"), table);
}

// ---------------------------------------------------------------------------
// curves
// ---------------------------------------------------------------------------

void cmd_curves(const ExperimentConfig& config, const std::filesystem::path& out) {
  config.validate();
  DirLock lock(out);

  std::vector<std::string> names;
  for (const char* extra : {"baseline", "auditory"})
    if (std::filesystem::exists(out / ("report_" + std::string(extra) + ".json")))
      names.emplace_back(extra);
  for (const auto& bin : config.age_bins) names.push_back(bin.name);

  std::string vocab = "# bin\tthreshold_name\tthreshold_pct\tvocab_count\n";
  std::string traj = "# bin\tmetric\tvalue\n";
  bool any = false;
  for (const auto& name : names) {
    const auto path = out / ("report_" + name + ".json");
    if (!std::filesystem::exists(path)) {
      if (name == "baseline" || name == "auditory") continue;
      throw MissingArtifact("missing report for bin '" + name + "': " + path.string());
    }
    const MetricsReport r = load_metrics_report(path);
    any = true;
    for (const auto& v : r.vocab_sizes) {
      vocab += name + '\t' + v.name + '\t' + format_double(v.threshold_pct) + '\t' +
               std::to_string(v.count) + '\n';
    }
    traj += name + "\tsemtest_mean_pct\t" + format_double(r.semtest_mean_pct) + '\n';
    traj += name + "\tlextest_pct\t" + format_double(r.lextest_pct) + '\n';
    traj += name + "\tabx_error_pct\t" + format_double(r.abx_error_pct) + '\n';
    const auto it = r.recall.find(10);
    if (it != r.recall.end())
      traj += name + "\trecall_at_10\t" + format_double(it->second) + '\n';
  }
  if (!any) throw MissingArtifact("no metrics reports found in " + out.string());
  write_text_file(out / "vocab_curves.tsv", vocab);
  write_text_file(out / "trajectories.tsv", traj);
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

GradcheckSetup make_gradcheck_setup(std::uint64_t seed) {
  GradcheckSetup s;
  s.model.phone_dim = 3;
  s.model.visual_dim = 4;
  s.model.hidden_dim = 5;
  s.model.embed_dim = 4;
  s.model.codebook_size = 6;
  s.model.context_window = 3;

  s.train.alpha = 0.5;
  s.train.temperature = 0.2;
  s.train.mask_fraction = 0.3;
  s.train.mask_span = 2;
  s.train.n_negatives = 3;
  s.train.seed = derive_seed(seed, "gradcheck_setup");

  Rng rng(derive_seed(seed, "gradcheck_batch"));
  const int frame_counts[] = {8, 9, 7};
  const int object_counts[] = {2, 3, 2};
  for (int i = 0; i < 3; ++i) {
    PairExample ex;
    ex.frames.resize(s.model.phone_dim, frame_counts[i]);
    for (Eigen::Index c = 0; c < ex.frames.cols(); ++c)
      for (Eigen::Index r = 0; r < ex.frames.rows(); ++r) ex.frames(r, c) = rng.gaussian();
    ex.objects.resize(s.model.visual_dim, object_counts[i]);
    for (Eigen::Index c = 0; c < ex.objects.cols(); ++c)
      for (Eigen::Index r = 0; r < ex.objects.rows(); ++r) ex.objects(r, c) = rng.gaussian();
    s.batch.push_back(std::move(ex));
  }
  return s;
}

double cmd_gradcheck(std::uint64_t seed) {
  const GradcheckSetup setup = make_gradcheck_setup(seed);
  LearnerState state = make_learner(setup.model, derive_seed(seed, "gradcheck_init"));
  // move every tensor off its init point so all paths carry gradient
  perturb_params(state.params, 0.1, derive_seed(seed, "gradcheck_jitter"));
  return gradient_check(state, setup.batch, setup.train, Stage::kAudiovisual, 1e-5);
}

// ---------------------------------------------------------------------------
// full pipeline
// ---------------------------------------------------------------------------

void run_full_pipeline(const ExperimentConfig& config, const std::filesystem::path& out) {
  cmd_stats(config, out);
  cmd_generate(config, out);
  cmd_train(config, out, "auditory");
  for (const auto& bin : config.age_bins) cmd_train(config, out, bin.name);
  cmd_eval(config, out, "baseline");
  cmd_eval(config, out, "auditory");
  for (const auto& bin : config.age_bins) cmd_eval(config, out, bin.name);
  cmd_curves(config, out);
}

}  // namespace xsl
