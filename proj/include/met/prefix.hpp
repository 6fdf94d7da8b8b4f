#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "met/autodiff.hpp"
#include "met/lm.hpp"
#include "met/rng.hpp"

namespace met {

// Reference values at full scale (128-value feature vocabularies, 512-wide
// prefix embeddings and MLP hidden layer). Desk defaults are 64-wide.
inline constexpr int64_t kReferenceValueCapacity = 128;
inline constexpr int64_t kReferencePrefixEmbedDim = 512;
inline constexpr int64_t kReferencePrefixMlpHidden = 512;

using FeatureMap = std::map<std::string, std::string>;

// Ordered contextual features. Slot 0 is the corpus/task-level feature and
// successive slots are finer-grained; feature i always occupies prefix slot i.
// Every feature has a reserved star value distinct from all observed values.
struct FeatureSchema {
  struct Feature {
    std::string name;
    std::vector<std::string> values;
    int64_t capacity = kReferenceValueCapacity;
  };
  std::vector<Feature> features;

  int64_t slots() const { return static_cast<int64_t>(features.size()); }
  int64_t total_rows() const;
  int64_t row_base(int64_t feature) const;
  int64_t star_id(int64_t feature) const { return row_base(feature); }
  std::optional<int64_t> value_id(int64_t feature, const std::string& value) const;
  int64_t register_value(int64_t feature, const std::string& value);
  int64_t feature_index(const std::string& name) const;  // -1 when absent

  // Reverse lookup for reports: (feature index, value or "*").
  std::pair<int64_t, std::string> describe_row(int64_t row) const;
};

void to_json(nlohmann::json& j, const FeatureSchema& s);
void from_json(const nlohmann::json& j, FeatureSchema& s);

// Concrete per-example assignment: one resolved embedding row per slot plus a
// flag recording whether the raw value was known. Unknown or missing values
// resolve to the star id.
struct ContextKey {
  std::vector<int64_t> ids;
  std::vector<bool> seen;

  bool operator==(const ContextKey& o) const { return ids == o.ids; }
  bool all_star(const FeatureSchema& s) const;
};

struct MetHyperparams {
  double epsilon = 0.1;  // star-token dropout probability
  double beta = 0.01;    // regularizer coefficient
  enum class StarGrad { flow_through, stopped };
  StarGrad star_grad = StarGrad::flow_through;
  enum class Granularity { per_slot, all_or_none };
  Granularity granularity = Granularity::per_slot;

  void validate() const;
};

void to_json(nlohmann::json& j, const MetHyperparams& h);
void from_json(const nlohmann::json& j, MetHyperparams& h);

enum class PrefixArch { shared, independent };
std::string prefix_arch_name(PrefixArch a);
PrefixArch prefix_arch_from_name(const std::string& s);

struct PrefixConfig {
  int64_t embed_dim = 64;
  int64_t mlp_hidden = 64;
  PrefixArch arch = PrefixArch::shared;
  double init_std = 0.02;
};

void to_json(nlohmann::json& j, const PrefixConfig& c);
void from_json(const nlohmann::json& j, PrefixConfig& c);

// Trainable prefix parameters: the embedding table over all prefix-token row
// ids and a two-layer MLP mapping slot embeddings to per-layer key/value
// activations. Shared mode runs one MLP over every slot; independent mode
// keeps one MLP per slot.
struct PrefixParams {
  PrefixConfig cfg;
  int64_t out_dim = 0;  // 2 * n_layers * d_model
  int64_t slots = 0;
  Tensor w_e;  // [schema.total_rows(), embed_dim]
  struct Mlp {
    Tensor w1, b1, w2, b2;
  };
  std::vector<Mlp> mlps;  // one entry in shared mode, `slots` in independent

  static PrefixParams init(const FeatureSchema& schema, const LmConfig& lm,
                           const PrefixConfig& cfg, RngStream& rng);
  std::vector<std::pair<std::string, Tensor*>> named_params();
  std::vector<std::pair<std::string, const Tensor*>> named_params() const;
  void set_requires_grad(bool rg);
  int64_t param_count() const;
};

// Resolves raw feature values to a ContextKey. Train mode applies star
// dropout (one Bernoulli draw per slot per call in per_slot mode, one draw
// total in all_or_none mode); eval mode is a deterministic pure function.
enum class EncodeMode { train, eval };
ContextKey encode_context(const FeatureSchema& schema,
                          const std::map<std::string, std::string>& raw,
                          EncodeMode mode, const MetHyperparams& hyper,
                          RngStream* rng);

ContextKey all_star_key(const FeatureSchema& schema);

// h = MLP(W_E . p) reshaped into per-layer key/value slots. The handle form
// also exposes the flat [slots, out_dim] matrix for the regularizer.
struct PrefixBuild {
  PrefixHandles handles;
  Handle h_matrix;
};
PrefixBuild prefix_handles(Tape& tape, const PrefixParams& params,
                           const ContextKey& key, const LmConfig& lm);
PrefixActivations prefix_activations(const PrefixParams& params,
                                     const ContextKey& key, const LmConfig& lm);

struct MetExample {
  std::span<const int64_t> words;
  ContextKey key;
};

// Training objective: token-weighted mean NLL over the batch plus
// beta * mean_j || h^j - h* ||^2 over the full activation tensor, with h*
// computed from the all-star key in the same pass. Gradients reach only the
// prefix parameters; the backbone must be frozen.
struct MetLossParts {
  Handle loss;
  double nll = 0.0;        // mean per-token NLL component
  double reg = 0.0;        // mean squared distance component (pre-beta)
  int64_t tokens = 0;
};
MetLossParts met_loss(Tape& tape, const LmModel& model, const PrefixParams& params,
                      const MetHyperparams& hyper, const FeatureSchema& schema,
                      std::span<const MetExample> batch, const SpecialTokens& specials);

// || h_value - h* || per registered feature value, against the all-star h*.
struct PrefixDistance {
  std::string feature;
  std::string value;
  double distance = 0.0;
};
std::vector<PrefixDistance> prefix_distance_report(const PrefixParams& params,
                                                   const FeatureSchema& schema,
                                                   const LmConfig& lm);

}  // namespace met
