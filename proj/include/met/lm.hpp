#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "met/autodiff.hpp"
#include "met/checkpoint.hpp"
#include "met/optim.hpp"
#include "met/rng.hpp"
#include "met/tensor.hpp"
#include "met/train_loop.hpp"

namespace met {

struct SpecialTokens {
  int64_t pad = 0, unk = 1, bos = 2, eos = 3;
};

// Full-scale reference values for the backbone this model stands in for
// (a 12-layer decoder with 1024-wide keys/values). Kept as documentation;
// desk-scale defaults below are what actually runs.
inline constexpr int64_t kReferenceBackboneLayers = 12;
inline constexpr int64_t kReferenceBackboneKvDim = 1024;

struct LmConfig {
  int64_t vocab_size = 256;
  int64_t d_model = 64;
  int64_t n_layers = 2;
  int64_t n_heads = 2;
  int64_t max_seq = 64;
  std::string nonlinearity = "tanh";

  int64_t head_dim() const { return d_model / n_heads; }
  Nonlinearity nl() const { return nonlinearity_from_name(nonlinearity); }
  void validate() const;
};

void to_json(nlohmann::json& j, const LmConfig& c);
void from_json(const nlohmann::json& j, LmConfig& c);

// Per-layer key/value activations injected ahead of the token sequence.
// Prefix slots are attendable by every token position but are not themselves
// processed as tokens and carry no positional embedding.
struct PrefixActivations {
  int64_t len = 0;
  std::vector<Tensor> k;  // n_layers tensors of shape [len, d_model]
  std::vector<Tensor> v;
};

// Same thing while a tape is alive (training path).
struct PrefixHandles {
  int64_t len = 0;
  std::vector<Handle> k;
  std::vector<Handle> v;
};

// Decoder-only transformer, pre-norm, untied output projection.
struct LmModel {
  LmConfig cfg;
  bool frozen = false;

  Tensor tok_emb;  // [V, d]
  Tensor pos_emb;  // [max_seq, d]
  struct Layer {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
  };
  std::vector<Layer> layers;
  Tensor lnf_g, lnf_b;
  Tensor w_out;  // [d, V]
  Tensor b_out;  // [V]

  static LmModel init(const LmConfig& cfg, RngStream& rng);
  void set_frozen(bool f);
  std::vector<std::pair<std::string, Tensor*>> named_params();
  std::vector<std::pair<std::string, const Tensor*>> named_params() const;
  std::vector<std::pair<std::string, uint64_t>> checksums() const;
  int64_t param_count() const;

  void save(const std::filesystem::path& path, const nlohmann::json& extra_meta = {}) const;
  static LmModel load(const LoadedCheckpoint& ckpt);
};

// Causal logits over the token sequence; position t attends to every prefix
// slot and to tokens <= t. A null or zero-length prefix is the plain decoder
// forward. `trace`, when given, receives the residual-stream input of every
// layer plus the final pre-norm state (eval path only).
Handle lm_logits(Tape& tape, const LmModel& model, std::span<const int64_t> tokens,
                 const PrefixHandles* prefix = nullptr,
                 std::vector<Handle>* trace = nullptr);
Tensor lm_logits_eval(const LmModel& model, std::span<const int64_t> tokens,
                      const PrefixActivations* prefix = nullptr,
                      std::vector<Tensor>* trace = nullptr);

// Mean per-token negative log-likelihood in nats; targets < 0 are padding.
// Throws if every target is padding.
double nll_per_token(const Tensor& logits, std::span<const int64_t> targets);

// Sentence scoring used everywhere: feed [bos, w1..wn], score [w1..wn, eos].
struct SentenceScore {
  double nll_sum = 0.0;
  int64_t tokens = 0;
};
SentenceScore score_sentence(const LmModel& model, std::span<const int64_t> words,
                             int64_t bos_id, int64_t eos_id,
                             const PrefixActivations* prefix = nullptr);

struct GenerateOptions {
  enum class Sampler { greedy, temperature };
  Sampler sampler = Sampler::greedy;
  double temperature = 1.0;
  std::optional<int64_t> stop_token;  // usually eos
};

// Returns prompt + up to max_new generated ids. Greedy decoding is
// deterministic (ties resolve to the lowest id); temperature sampling is
// reproducible under the caller's stream.
std::vector<int64_t> generate(const LmModel& model, const PrefixActivations* prefix,
                              std::span<const int64_t> prompt, int64_t max_new,
                              const GenerateOptions& opts, RngStream* rng = nullptr);

// Plain language-model training of the backbone on pooled sentences. The
// model must be unfrozen; afterwards prefix-based strategies freeze it.
// Throws TrainingDiverged on a non-finite loss.
struct PretrainResult {
  TrainResult loop;
  double final_val_nll = 0.0;
};
PretrainResult pretrain_backbone(LmModel& model,
                                 const std::vector<std::vector<int64_t>>& train_sentences,
                                 const std::vector<std::vector<int64_t>>& val_sentences,
                                 const SpecialTokens& specials, const OptimConfig& opt,
                                 const TrainBudget& budget, RngStream& rng);

// Token-weighted mean NLL of whole sentences under an optional prefix.
double mean_sentence_nll(const LmModel& model,
                         const std::vector<std::vector<int64_t>>& sentences,
                         const SpecialTokens& specials,
                         const PrefixActivations* prefix = nullptr);

}  // namespace met
