#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "met/prefix.hpp"
#include "met/rng.hpp"

namespace met {

// Word-level whitespace tokenizer with reserved specials and an optional
// block of context tokens (feature markers + feature values) used by the
// conditional fine-tuning baseline.
struct Tokenizer {
  std::vector<std::string> id_to_token;
  std::map<std::string, int64_t> token_to_id;
  SpecialTokens specials;
  std::map<std::string, int64_t> feature_marker;
  std::map<std::string, std::map<std::string, int64_t>> context_value;
  int64_t unkval = -1;

  int64_t size() const { return static_cast<int64_t>(id_to_token.size()); }
  int64_t lookup(const std::string& token) const;  // specials.unk for OOV
  std::vector<int64_t> tokenize(const std::string& text) const;
  std::string detokenize(std::span<const int64_t> ids) const;

  static Tokenizer build(const std::vector<std::string>& texts, int64_t max_size,
                         int64_t min_freq);
  static Tokenizer from_word_list(const std::vector<std::string>& words);
  void reserve_context_tokens(const FeatureSchema& schema);
};

void to_json(nlohmann::json& j, const Tokenizer& t);
void from_json(const nlohmann::json& j, Tokenizer& t);

struct Example {
  std::vector<int64_t> tokens;  // word ids only; bos/eos added when scoring
  FeatureMap features;
};

struct Corpus {
  std::vector<Example> examples;
  Tokenizer tokenizer;
  FeatureSchema schema;
  nlohmann::json provenance = nlohmann::json::object();

  void save(const std::filesystem::path& dir) const;
  static Corpus load(const std::filesystem::path& dir);
};

// ---- synthetic hierarchical source ----------------------------------------

struct SyntheticFeature {
  std::string name = "domain";
  int64_t n_values = 10;
  double sigma = 1.0;     // perturbation scale; 0 = uninformative feature
  int64_t held_out = 0;   // trailing values excluded from training
};

struct SyntheticSpec {
  int64_t vocab_words = 32;
  double sigma_base = 1.0;
  std::vector<SyntheticFeature> features;   // primary first
  std::string structure = "crosscut";       // or "nested" (two features)
  int64_t sentences_per_context = 200;
  int64_t heldout_sentences = 0;            // 0 -> sentences_per_context / 10
  double mean_len = 12.0;
  int64_t max_len = 48;
  std::string corpus_name = "synthetic";
  int64_t feature_capacity = kReferenceValueCapacity;
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

// The generating process: per-context bigram chains softmax(B + sum of
// feature perturbations) with geometric sentence length (stop probability
// 1/mean_len after each word, forced stop at max_len). Knows its own exact
// statistics, which the oracle table and the scoring helpers expose.
class BigramGenerator {
 public:
  BigramGenerator(const SyntheticSpec& spec, uint64_t seed);

  const std::vector<FeatureMap>& contexts() const { return contexts_; }
  bool is_heldout(const FeatureMap& ctx) const;

  std::vector<int64_t> sample_sentence(const FeatureMap& ctx, RngStream& rng) const;

  // Exact expected NLL per target token (targets include the closing eos).
  double entropy_rate(const FeatureMap& ctx) const;
  // Expected NLL per token of the base (population) chain on ctx's data.
  double cross_entropy_vs_base(const FeatureMap& ctx) const;
  // NLL of a concrete sentence under the true process for ctx.
  // Returns (total nats, target count).
  std::pair<double, int64_t> true_nll(std::span<const int64_t> words,
                                      const FeatureMap& ctx) const;
  // Expected visit counts per word over a sentence (the restarting chain's
  // stationary measure, scaled to E[length]).
  std::vector<double> visit_distribution(const FeatureMap& ctx) const;

  int64_t word_id_base() const { return word_base_; }
  int64_t vocab_words() const { return v_; }
  double stop_prob() const { return p_stop_; }

 private:
  std::vector<double> context_matrix(const FeatureMap& ctx) const;  // [(V+1) x V]
  double cross_entropy(const FeatureMap& data_ctx, const std::vector<double>& model_m) const;

  SyntheticSpec spec_;
  int64_t v_ = 0;
  int64_t word_base_ = 0;  // tokenizer id of word 0
  double p_stop_ = 0.0;
  std::vector<double> base_;                        // [(V+1) x V] logits
  std::map<std::string, std::map<std::string, std::vector<double>>> perturb_;
  std::vector<FeatureMap> contexts_;
  std::map<std::string, std::string> nested_parent_;  // secondary value -> primary value
};

struct OracleRow {
  FeatureMap context;
  double entropy = 0.0;
  double base_ce = 0.0;
  bool heldout = false;
};

struct SynthResult {
  Corpus corpus;
  std::vector<OracleRow> oracle;
  std::shared_ptr<BigramGenerator> generator;
};

SynthResult synth_generate(const SyntheticSpec& spec, uint64_t seed);

std::string oracle_csv(const std::vector<OracleRow>& rows);

// ---- ingestion -------------------------------------------------------------

struct IngestOptions {
  std::vector<std::string> feature_names;  // order defines prefix slots 1..k
  int64_t max_vocab = 512;
  int64_t min_freq = 1;
  std::string corpus_name = "ingested";
  enum class MissingFeature { error, star };
  MissingFeature missing = MissingFeature::star;
  std::optional<FeatureSchema> schema;  // when set, unknown values stay unseen
  int64_t feature_capacity = kReferenceValueCapacity;
  // Values kept out of the schema so they evaluate as unseen contexts.
  std::map<std::string, std::set<std::string>> held_out;
};

// One JSON record per line with "text" (string) or "tokens" (int list) plus a
// "features" string map. Malformed lines fail with their line number.
Corpus ingest_jsonl(const std::filesystem::path& path, const IngestOptions& opts);

// ---- splits ----------------------------------------------------------------

struct SplitSpec {
  double train = 0.8, val = 0.1, test = 0.1;
  std::map<std::string, std::set<std::string>> held_out;  // feature -> values
};

void to_json(nlohmann::json& j, const SplitSpec& s);
void from_json(const nlohmann::json& j, SplitSpec& s);

struct Splits {
  std::vector<int64_t> train, val, test_seen, test_unseen;
};

// Deterministic under seed. Held-out (or out-of-schema) examples go to
// test_unseen exclusively; the rest is partitioned by largest-remainder
// apportionment of the shuffled order.
Splits split(const Corpus& corpus, const SplitSpec& spec, uint64_t seed);

// SplitSpec whose held_out values come from a synthetic corpus' provenance.
SplitSpec split_spec_for(const Corpus& corpus, double train = 0.8, double val = 0.1,
                         double test = 0.1);

}  // namespace met
