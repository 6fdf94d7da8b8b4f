#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "met/corpus.hpp"
#include "met/lm.hpp"
#include "met/strategies.hpp"
#include "met/train_loop.hpp"

namespace met {

// A run is a pure function of (config, seed): identical inputs give
// bit-identical metrics. Wall-clock timings therefore live in a sidecar run
// log, never in metrics.json.
struct ExperimentConfig {
  std::string name = "experiment";

  std::string corpus_kind = "synthetic";  // "synthetic" | "jsonl"
  SyntheticSpec synth;
  std::string jsonl_path;
  std::vector<std::string> jsonl_features;
  std::map<std::string, std::vector<std::string>> jsonl_held_out;
  int64_t max_vocab = 512;
  int64_t min_freq = 1;

  double train_ratio = 0.8, val_ratio = 0.1, test_ratio = 0.1;

  LmConfig lm;
  PrefixConfig prefix;
  MetHyperparams met;
  OptimConfig optim;
  TrainBudget budget;
  TrainBudget pretrain_budget{.max_steps = 1200, .max_epochs = 1000000,
                              .eval_every = 200, .patience = 3, .min_delta = 1e-3};

  std::vector<std::string> strategies{"met"};
  std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
  int64_t eval_workers = 1;

  static ExperimentConfig from_file(const std::filesystem::path& path);
  std::string hash() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

struct ContextReport {
  FeatureMap context;
  double logppl = 0.0;
  int64_t tokens = 0, sentences = 0;
  std::optional<double> oracle_entropy, oracle_base_ce;
};

struct PartitionReport {
  double logppl = 0.0;       // token-weighted mean NLL (nats/token)
  double sentence_mean = 0.0;  // mean of per-sentence NLLs
  double ci95 = 0.0;           // 1.96 * SE over per-sentence NLLs
  int64_t tokens = 0, sentences = 0;
  std::vector<ContextReport> contexts;
};

nlohmann::json to_json_report(const PartitionReport& p);

struct RunReport {
  uint64_t seed = 0;
  std::string strategy;
  PartitionReport seen, unseen;
  int64_t train_steps = 0;
  double best_val = 0.0;
  double pretrain_val_nll = 0.0;
  std::string note;   // how unseen contexts are represented
  std::string error;  // failure marker; empty on success
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<RunReport> runs;

  nlohmann::json metrics_json() const;
  std::string results_csv() const;
  const RunReport& run(uint64_t seed, const std::string& strategy) const;
};

// Everything one seed needs, built once and shared across strategies.
struct SeedEnv {
  uint64_t seed = 0;
  Corpus corpus;
  Splits splits;
  std::vector<OracleRow> oracle;
  std::shared_ptr<BigramGenerator> generator;  // null for ingested corpora
  LoadedCheckpoint backbone;
  double pretrain_val_nll = 0.0;
  LmConfig lm;  // effective config (vocab sized to the tokenizer)
};

// Generates (or ingests) the corpus, splits it, and pretrains the backbone on
// the pooled training split; cache_dir, when non-empty, caches the backbone
// checkpoint keyed by config hash.
SeedEnv prepare_seed_env(const ExperimentConfig& config, uint64_t seed,
                         const std::filesystem::path& cache_dir = {});

// Trains one strategy on the seed environment (or a subset of its training
// indices) and fills the train fields of `report`.
Strategy train_strategy(const ExperimentConfig& config, const SeedEnv& env, StrategyKind kind,
                        RunReport* report = nullptr,
                        const std::vector<int64_t>* train_indices_override = nullptr);

// Token-weighted mean NLL over the given examples (per-context prefix cache,
// single-threaded); used for validation during training.
double eval_mean_nll(const Strategy& strategy, const Corpus& corpus,
                     std::span<const int64_t> indices);

// Full evaluation with per-context breakdown. `observed`, when set, hides all
// feature values outside it (they resolve to star / unknown-value tokens).
// Sharding across workers is index-strided; any worker count produces the
// same report.
PartitionReport evaluate_partition(const Strategy& strategy, const Corpus& corpus,
                                   std::span<const int64_t> indices, int64_t workers,
                                   const std::vector<OracleRow>* oracle = nullptr,
                                   const std::set<std::string>* observed = nullptr);

void save_strategy(const Strategy& strategy, const std::filesystem::path& path,
                   const nlohmann::json& train_meta);
nlohmann::json load_strategy_params(Strategy& strategy, const std::filesystem::path& path);

// Train + evaluate every (seed, strategy) pair; persists checkpoints,
// metrics.json, results.csv and a wall-time run log under out_dir. Failures
// of one pair are recorded as error markers and do not abort the rest.
ExperimentResult run_experiment(const ExperimentConfig& config,
                                const std::filesystem::path& out_dir);

// Evaluate-only variant over previously persisted checkpoints; writes the
// same metrics.json/results.csv.
ExperimentResult evaluate_experiment(const ExperimentConfig& config,
                                     const std::filesystem::path& out_dir);

// ---- experiment operations -------------------------------------------------

struct SweepPoint {
  int64_t size = 0;
  uint64_t seed = 0;
  std::string strategy;
  double logppl_seen = 0.0;
  double logppl_unseen = 0.0;
};

struct SweepResult {
  std::vector<int64_t> sizes;
  std::vector<SweepPoint> points;
  std::string curve_csv() const;
  nlohmann::json to_json() const;
  double median_seen(int64_t size, const std::string& strategy) const;
  std::vector<double> seen_values(int64_t size, const std::string& strategy) const;
};

SweepResult data_efficiency_sweep(const ExperimentConfig& config,
                                  const std::vector<int64_t>& sizes,
                                  const std::filesystem::path& out_dir);

struct MultiFeatureRun {
  uint64_t seed = 0;
  std::string strategy;
  PartitionReport single_feature;  // secondary features hidden
  PartitionReport multi_feature;   // full context observed
  // Paired per-context deltas: single - multi (positive = secondary helps).
  std::vector<std::pair<FeatureMap, double>> context_deltas;
};

struct MultiFeatureResult {
  std::vector<MultiFeatureRun> runs;
  nlohmann::json to_json() const;
};

MultiFeatureResult multi_feature_compare(const ExperimentConfig& config,
                                         const std::filesystem::path& out_dir);

struct DistinctiveRow {
  int64_t example_index = 0;
  double score = 0.0;   // mean NLL under other values minus NLL under `value`
  double nll_value = 0.0;
  std::string text;
};

std::vector<DistinctiveRow> distinctive_utterances(const Strategy& strategy,
                                                   const Corpus& corpus,
                                                   std::span<const int64_t> indices,
                                                   const std::string& feature,
                                                   const std::string& value, int64_t k);

struct GenerationRecord {
  FeatureMap context;
  std::string prompt;
  std::string text;
  std::vector<int64_t> tokens;
  bool prompt_had_unknown = false;
};

std::vector<GenerationRecord> prompted_generation(const Strategy& strategy,
                                                  const Tokenizer& tokenizer,
                                                  const FeatureMap& context,
                                                  const std::string& prompt, int64_t n,
                                                  const GenerateOptions& opts, uint64_t seed,
                                                  int64_t max_new = 32);

struct PrefixExportRow {
  std::string feature;
  std::string value;  // "*" for the star row
  int64_t row_id = 0;
  std::vector<double> embedding;
  double dist_to_star = 0.0;
  double pc1 = 0.0, pc2 = 0.0;
};

std::vector<PrefixExportRow> export_prefix_embeddings(const Strategy& strategy);
std::string prefix_export_csv(const std::vector<PrefixExportRow>& rows);

struct MlpCompareResult {
  ExperimentResult shared_mlp;
  ExperimentResult independent_mlp;
  int64_t shared_param_count = 0;
  int64_t independent_param_count = 0;
  nlohmann::json to_json() const;
};

MlpCompareResult compare_mlp_architectures(const ExperimentConfig& config,
                                           const std::filesystem::path& out_dir);

// ---- small analysis utilities ----------------------------------------------

// Coordinates in the top-2 principal subspace of the mean-centered rows.
std::vector<std::array<double, 2>> pca2(const std::vector<std::vector<double>>& rows);

// Mean silhouette over Euclidean distances; singleton clusters score 0.
double silhouette(const std::vector<std::vector<double>>& points,
                  const std::vector<int64_t>& labels);

// Minimal static line chart; series are (x, y) pairs in plot space.
std::string plot_svg(const std::string& title, const std::string& x_label,
                     const std::string& y_label,
                     const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series);

std::string feature_map_key(const FeatureMap& m);

}  // namespace met
