#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "xslearn/checkpoint.hpp"
#include "xslearn/errors.hpp"
#include "xslearn/experiment.hpp"
#include "xslearn/rng.hpp"

using namespace xsl;

namespace {

// compact but complete experiment: every stage runs in well under a second
constexpr const char* kMicroConfig = R"({
  "seed": 5,
  "world": {
    "n_categories": 6, "n_phones": 10, "phone_dim": 8, "visual_dim": 12,
    "n_speakers": 3, "frames_per_phone": [2, 3], "phone_noise_sd": 0.2,
    "visual_noise_sd": 0.2, "filler_vocab_size": 10, "objects_per_scene": [2, 2],
    "filler_words_per_utterance": [1, 1]
  },
  "statistics": { "source": "zipf", "exponent": 1.0, "base_rate": 1.4 },
  "age_bins": [
    { "name": "early", "duration_days": 20, "condition": "natural" },
    { "name": "late", "duration_days": 40, "condition": "natural" },
    { "name": "flat", "duration_days": 40, "condition": "uniform" }
  ],
  "generation": { "pool_size": 300, "auditory_utterances": 80, "validation_fraction": 0.1,
                  "named_per_pair": [1, 2] },
  "model": { "hidden_dim": 12, "embed_dim": 8, "codebook_size": 8, "context_window": 3 },
  "train": {
    "auditory": { "epochs": 2, "batch_size": 16, "learning_rate": 0.001, "validate_every": 2 },
    "audiovisual": { "epochs": 3, "batch_size": 16, "learning_rate": 0.001, "validate_every": 2 }
  },
  "eval": { "tokens_per_type": 4, "abx_tokens_per_speaker": 2, "recall_ks": [1, 5, 10],
            "spearman_permutations": 500 }
})";

struct TmpOut {
  std::filesystem::path dir;
  explicit TmpOut(const char* name)
      : dir(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(dir);
  }
  ~TmpOut() { std::filesystem::remove_all(dir); }
};

ExperimentConfig micro_config() { return ExperimentConfig::from_json_text(kMicroConfig, "."); }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("stats command writes per-bin target tables") {
  TmpOut out("xsl_stats_test");
  const ExperimentConfig config = micro_config();
  cmd_stats(config, out.dir);

  const CategoryInventory inv = load_statistics(config);
  const std::string table = slurp(out.dir / "targets_late.tsv");
  std::istringstream lines(table);
  std::string line;
  std::getline(lines, line);  // header
  std::getline(lines, line);  // most frequent category
  CHECK(line.find("obj0\t") == 0);
  const auto targets = target_counts(inv, 40, Condition::kNatural);
  CHECK(line.find("\t" + std::to_string(targets.per_category[0])) != std::string::npos);
  CHECK(table.find("TOTAL\t") != std::string::npos);

  // uniform bin rows all carry the same target
  const std::string flat = slurp(out.dir / "targets_flat.tsv");
  const auto uniform = target_counts(inv, 40, Condition::kUniform);
  for (int c = 0; c < inv.size(); ++c)
    CHECK(flat.find("\t" + std::to_string(uniform.per_category[0]) + "\n") != std::string::npos);
}

TEST_CASE("generate satisfies bin targets and reproduces byte-identically") {
  TmpOut out("xsl_generate_test");
  TmpOut out2("xsl_generate_test2");
  const ExperimentConfig config = micro_config();
  const CategoryInventory inv = load_statistics(config);
  cmd_generate(config, out.dir);

  for (const auto& bin : config.age_bins) {
    const Dataset ds = load_dataset(out.dir, "bin_" + bin.name);
    const auto targets = target_counts(inv, bin.duration_days, bin.condition);
    CHECK(ds.info.achieved == targets.per_category);
    for (long long d : ds.info.deficit) CHECK(d == 0);
    CHECK(ds.info.condition == condition_name(bin.condition));
  }

  cmd_generate(config, out2.dir);
  for (const char* name :
       {"pool.manifest.jsonl", "pool.frames.tns", "pool.objects.tns", "validation.manifest.jsonl",
        "auditory.manifest.jsonl", "bin_early.manifest.jsonl", "bin_late.manifest.jsonl",
        "testsets.jsonl", "testsets.frames.tns", "inventory.tsv"})
    CHECK(slurp(out.dir / name) == slurp(out2.dir / name));
}

TEST_CASE("generate fails loudly when the pool cannot cover the targets") {
  TmpOut out("xsl_deficit_test");
  ExperimentConfig config = micro_config();
  config.generation.pool_size = 20;
  config.generation.guarantee_feasibility = false;
  CHECK_THROWS_AS(cmd_generate(config, out.dir), InsufficientPool);
}

TEST_CASE("training stages produce checkpoints, traces and ordering constraints") {
  TmpOut out("xsl_train_test");
  const ExperimentConfig config = micro_config();
  cmd_generate(config, out.dir);

  // audiovisual bins require the auditory checkpoint first
  CHECK_THROWS_AS(cmd_train(config, out.dir, "early"), MissingCheckpoint);
  CHECK_THROWS_AS(cmd_train(config, out.dir, "nosuchbin"), BadConfig);

  cmd_train(config, out.dir, "auditory");
  cmd_train(config, out.dir, "early");

  const std::string aud_trace = slurp(out.dir / "trace_auditory.tsv");
  CHECK(aud_trace.find("loss_av") == std::string::npos);
  const std::string av_trace = slurp(out.dir / "trace_early.tsv");
  CHECK(av_trace.find("loss_av") != std::string::npos);

  ModelConfig model = config.model;
  model.phone_dim = config.world.phone_dim;
  model.visual_dim = config.world.visual_dim;
  CHECK_NOTHROW(load_checkpoint(out.dir / "checkpoint_early.best.xsl", model));
  CHECK_NOTHROW(load_checkpoint(out.dir / "checkpoint_early.final.xsl", model));
}

TEST_CASE("zero-epoch training checkpoints the untouched initialization") {
  TmpOut out("xsl_zeroepoch_test");
  ExperimentConfig config = micro_config();
  config.train_auditory.epochs = 0;
  cmd_generate(config, out.dir);
  cmd_train(config, out.dir, "auditory");

  ModelConfig model = config.model;
  model.phone_dim = config.world.phone_dim;
  model.visual_dim = config.world.visual_dim;
  const ParamSet loaded = load_checkpoint(out.dir / "checkpoint_auditory.best.xsl", model);
  ParamSet expected = init_params(model, derive_seed(config.seed, "learner_init"));
  bool equal = true;
  expected.for_each([&](const std::string& name, const auto& t) {
    loaded.for_each([&](const std::string& name2, const auto& t2) {
      if (name != name2) return;
      for (Eigen::Index i = 0; i < t.size(); ++i)
        if (static_cast<float>(t.data()[i]) != static_cast<float>(t2.data()[i])) equal = false;
    });
  });
  CHECK(equal);
}

TEST_CASE("eval writes a coherent report and per-category table") {
  TmpOut out("xsl_eval_test");
  const ExperimentConfig config = micro_config();
  cmd_generate(config, out.dir);
  cmd_eval(config, out.dir, "baseline");

  const MetricsReport r = load_metrics_report(out.dir / "report_baseline.json");
  CHECK(r.checkpoint == "baseline");
  r.validate();

  // best-layer bookkeeping is the argmin/argmax over the per-layer maps
  for (const auto& [layer, value] : r.abx_per_layer_pct) CHECK(r.abx_error_pct <= value);
  for (const auto& [layer, value] : r.lextest_per_layer_pct) CHECK(r.lextest_pct >= value);
  CHECK(r.abx_per_layer_pct.at(r.abx_best_layer) == r.abx_error_pct);
  CHECK(r.lextest_per_layer_pct.at(r.lextest_best_layer) == r.lextest_pct);

  // an untrained cross-modal path scores every pair 0: exact chance
  CHECK(r.semtest_mean_pct == doctest::Approx(50.0));
  CHECK(r.vocab_sizes.size() == 3);
  CHECK(std::isnan(r.correlations[0].rho));

  const std::string table = slurp(out.dir / "semtest_categories_baseline.tsv");
  int rows = 0;
  for (char c : table) rows += c == '\n';
  CHECK(rows == config.world.n_categories + 1);

  CHECK_THROWS_AS(cmd_eval(config, out.dir, "late"), MissingArtifact);
}

TEST_CASE("curves aggregate the reports into monotone tables") {
  TmpOut out("xsl_curves_test");
  ExperimentConfig config = micro_config();
  run_full_pipeline(config, out.dir);

  const std::string vocab = slurp(out.dir / "vocab_curves.tsv");
  // per bin, counts at the three thresholds are nonincreasing
  std::istringstream lines(vocab);
  std::string line;
  std::getline(lines, line);  // header
  std::map<std::string, std::vector<int>> by_bin;
  while (std::getline(lines, line)) {
    std::istringstream fields(line);
    std::string bin, name, threshold, count;
    std::getline(fields, bin, '\t');
    std::getline(fields, name, '\t');
    std::getline(fields, threshold, '\t');
    std::getline(fields, count, '\t');
    by_bin[bin].push_back(std::stoi(count));
  }
  CHECK(by_bin.size() >= 5);  // baseline, auditory and the three bins
  for (const auto& [bin, counts] : by_bin) {
    REQUIRE(counts.size() == 3);
    CHECK(counts[0] >= counts[1]);
    CHECK(counts[1] >= counts[2]);
  }

  const std::string traj = slurp(out.dir / "trajectories.tsv");
  CHECK(traj.find("late\tsemtest_mean_pct\t") != std::string::npos);
  CHECK(traj.find("auditory\tlextest_pct\t") != std::string::npos);
}

TEST_CASE("a stale lock blocks commands with a data error") {
  TmpOut out("xsl_lock_test");
  std::filesystem::create_directories(out.dir);
  std::ofstream(out.dir / ".lock").put('x');
  CHECK_THROWS_AS(cmd_stats(micro_config(), out.dir), DataError);
}

TEST_CASE("stats on the shipped table reproduces the published counts") {
  TmpOut out("xsl_stats_coco_test");
  const auto config =
      ExperimentConfig::load(std::filesystem::path(XSL_CONFIG_DIR) / "coco_table.json");
  cmd_stats(config, out.dir);

  const std::string t12 = slurp(out.dir / "targets_12mo.tsv");
  CHECK(t12.find("person\t1.482\t267\n") != std::string::npos);
  const std::string t8 = slurp(out.dir / "targets_8mo.tsv");
  CHECK(t8.find("person\t1.482\t89\n") != std::string::npos);
  CHECK(t8.find("hair drier\t0.028\t2\n") != std::string::npos);

  const std::string flat = slurp(out.dir / "targets_10mo_uniform.tsv");
  std::istringstream lines(flat);
  std::string line;
  std::getline(lines, line);  // header
  int rows = 0;
  while (std::getline(lines, line) && line.rfind("TOTAL", 0) != 0) {
    CHECK(line.substr(line.rfind('\t')) == "\t37");
    ++rows;
  }
  CHECK(rows == 80);
}

TEST_CASE("gradcheck setup is the documented tiny model") {
  const GradcheckSetup setup = make_gradcheck_setup(1);
  CHECK(setup.model.phone_dim <= 8);
  CHECK(setup.model.visual_dim <= 8);
  CHECK(setup.model.hidden_dim <= 8);
  CHECK(setup.model.embed_dim <= 8);
  CHECK(setup.model.codebook_size <= 8);
  CHECK(setup.batch.size() == 3);
}
