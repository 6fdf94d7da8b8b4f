#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "met/corpus.hpp"
#include "met/lm.hpp"
#include "met/optim.hpp"
#include "met/prefix.hpp"

namespace met {

// The six-way comparison behind one interface: hierarchical prefixes with
// star dropout (met), the two prefix-tuning ablations, end-to-end fine-tuning
// with and without pooling, and conditional fine-tuning (context rendered as
// literal tokens).
enum class StrategyKind {
  met,
  prefix_no_pool,
  prefix_complete_pool,
  finetune_no_pool,
  finetune_complete_pool,
  conditional_finetune,
};

std::string strategy_name(StrategyKind k);
StrategyKind strategy_from_name(const std::string& s);

struct StrategyConfig {
  PrefixConfig prefix;
  MetHyperparams met;
  OptimConfig optim;
};

class Strategy {
 public:
  StrategyKind kind = StrategyKind::met;
  FeatureSchema schema;
  MetHyperparams hyper;  // effective training hyperparameters for this kind
  SpecialTokens specials;
  LmModel backbone;  // frozen for prefix kinds; the pristine fallback for no-pool FT
  std::optional<PrefixParams> prefix;
  std::vector<std::pair<std::string, LmModel>> per_value;  // finetune_no_pool copies
  std::map<std::string, int64_t> feature_marker;           // conditional rendering
  std::map<std::string, std::map<std::string, int64_t>> context_value;
  int64_t unkval = -1;

  static Strategy make(StrategyKind kind, const LoadedCheckpoint& backbone_ckpt,
                       const FeatureSchema& schema, const Tokenizer& tokenizer,
                       const StrategyConfig& cfg, RngStream& init_rng);

  bool uses_prefix() const;
  // Name of the feature whose values get per-model copies (slot 1).
  const std::string& primary_feature() const;

  // ---- evaluation (const; safe from multiple threads) ----
  ContextKey eval_key(const FeatureMap& features) const;  // prefix kinds only
  PrefixActivations activations_for(const ContextKey& key) const;
  const LmModel& model_for(const FeatureMap& features) const;
  SentenceScore score(const FeatureMap& features, std::span<const int64_t> words,
                      const PrefixActivations* cached_prefix = nullptr) const;
  // Input the model actually sees (context tokens prepended for conditional).
  std::vector<int64_t> rendered_input(const FeatureMap& features,
                                      std::span<const int64_t> words) const;
  int64_t context_token_count() const;
  // How this strategy represents a context it never trained on, for reports.
  std::string unseen_fallback_note() const;

  // ---- trainable parameter partition ----
  struct ParamRef {
    std::string name;
    Tensor* tensor;
    bool decay;
  };
  // value selects one finetune_no_pool copy; empty = the main trainable set.
  std::vector<ParamRef> trainable(const std::string& value = "");

  std::vector<std::pair<std::string, uint64_t>> backbone_checksums() const {
    return backbone.checksums();
  }
};

// Single-optimizer training front end over one trainable unit of a strategy.
class StrategyTrainer {
 public:
  StrategyTrainer(Strategy& s, const OptimConfig& opt, std::string value = "");

  // One optimizer step over the batch; returns the batch loss. An empty batch
  // leaves parameters untouched and returns 0.
  double step(std::span<const Example* const> batch, RngStream& dropout_rng);

  void snapshot();
  void restore();
  int64_t steps() const { return adam_.steps_taken(); }

 private:
  Strategy& s_;
  std::string value_;
  std::vector<Strategy::ParamRef> params_;
  AdamW adam_;
  std::vector<Tensor> saved_;
};

}  // namespace met
