#include "met/strategies.hpp"

#include <stdexcept>

namespace met {

std::string strategy_name(StrategyKind k) {
  switch (k) {
    case StrategyKind::met: return "met";
    case StrategyKind::prefix_no_pool: return "prefix_no_pool";
    case StrategyKind::prefix_complete_pool: return "prefix_complete_pool";
    case StrategyKind::finetune_no_pool: return "finetune_no_pool";
    case StrategyKind::finetune_complete_pool: return "finetune_complete_pool";
    case StrategyKind::conditional_finetune: return "conditional_finetune";
  }
  throw std::logic_error("unreachable strategy kind");
}

StrategyKind strategy_from_name(const std::string& s) {
  if (s == "met") return StrategyKind::met;
  if (s == "prefix_no_pool") return StrategyKind::prefix_no_pool;
  if (s == "prefix_complete_pool") return StrategyKind::prefix_complete_pool;
  if (s == "finetune_no_pool") return StrategyKind::finetune_no_pool;
  if (s == "finetune_complete_pool") return StrategyKind::finetune_complete_pool;
  if (s == "conditional_finetune") return StrategyKind::conditional_finetune;
  throw std::invalid_argument("unknown strategy kind: " + s);
}

bool Strategy::uses_prefix() const {
  return kind == StrategyKind::met || kind == StrategyKind::prefix_no_pool ||
         kind == StrategyKind::prefix_complete_pool;
}

const std::string& Strategy::primary_feature() const {
  if (schema.slots() < 2) {
    throw std::logic_error("strategy needs a feature beyond the corpus slot");
  }
  return schema.features[1].name;
}

Strategy Strategy::make(StrategyKind kind, const LoadedCheckpoint& backbone_ckpt,
                        const FeatureSchema& schema, const Tokenizer& tokenizer,
                        const StrategyConfig& cfg, RngStream& init_rng) {
  Strategy s;
  s.kind = kind;
  s.schema = schema;
  s.specials = tokenizer.specials;
  s.backbone = LmModel::load(backbone_ckpt);

  switch (kind) {
    case StrategyKind::met:
      s.hyper = cfg.met;
      break;
    case StrategyKind::prefix_no_pool:
    case StrategyKind::prefix_complete_pool: {
      s.hyper = cfg.met;
      s.hyper.epsilon = 0.0;
      s.hyper.beta = 0.0;
      break;
    }
    default:
      s.hyper = MetHyperparams{.epsilon = 0.0, .beta = 0.0};
      break;
  }

  if (s.uses_prefix()) {
    s.backbone.set_frozen(true);
    s.prefix = PrefixParams::init(schema, s.backbone.cfg, cfg.prefix, init_rng);
  } else {
    s.backbone.set_frozen(false);
  }

  if (kind == StrategyKind::finetune_no_pool) {
    // One full copy per primary-feature value, trained only on its own data;
    // the untouched backbone serves unseen values.
    s.backbone.set_frozen(true);
    const auto& primary = s.schema.features[1];
    if (s.schema.slots() < 2) {
      throw std::invalid_argument("finetune_no_pool needs a primary feature");
    }
    for (const auto& v : primary.values) {
      LmModel copy = s.backbone;
      copy.set_frozen(false);
      s.per_value.emplace_back(v, std::move(copy));
    }
  }

  if (kind == StrategyKind::conditional_finetune) {
    if (tokenizer.unkval < 0) {
      throw std::invalid_argument("conditional_finetune needs reserved context tokens");
    }
    s.feature_marker = tokenizer.feature_marker;
    s.context_value = tokenizer.context_value;
    s.unkval = tokenizer.unkval;
  }
  return s;
}

ContextKey Strategy::eval_key(const FeatureMap& features) const {
  if (!uses_prefix()) throw std::logic_error("eval_key: strategy has no prefixes");
  if (kind == StrategyKind::prefix_complete_pool) return all_star_key(schema);
  return encode_context(schema, features, EncodeMode::eval, hyper, nullptr);
}

PrefixActivations Strategy::activations_for(const ContextKey& key) const {
  if (!uses_prefix()) throw std::logic_error("activations_for: strategy has no prefixes");
  return prefix_activations(*prefix, key, backbone.cfg);
}

const LmModel& Strategy::model_for(const FeatureMap& features) const {
  if (kind != StrategyKind::finetune_no_pool) return backbone;
  const auto it = features.find(primary_feature());
  if (it != features.end()) {
    for (const auto& [v, model] : per_value) {
      if (v == it->second) return model;
    }
  }
  return backbone;  // unseen value: the pretrained backbone
}

std::vector<int64_t> Strategy::rendered_input(const FeatureMap& features,
                                              std::span<const int64_t> words) const {
  std::vector<int64_t> input;
  if (kind == StrategyKind::conditional_finetune) {
    for (const auto& f : schema.features) {
      input.push_back(feature_marker.at(f.name));
      int64_t value_token = unkval;
      const auto it = features.find(f.name);
      if (it != features.end()) {
        const auto& vals = context_value.at(f.name);
        const auto vit = vals.find(it->second);
        if (vit != vals.end()) value_token = vit->second;
      }
      input.push_back(value_token);
    }
  }
  input.push_back(specials.bos);
  input.insert(input.end(), words.begin(), words.end());
  return input;
}

int64_t Strategy::context_token_count() const {
  return kind == StrategyKind::conditional_finetune ? 2 * schema.slots() : 0;
}

std::string Strategy::unseen_fallback_note() const {
  switch (kind) {
    case StrategyKind::met: return "unseen values use the shared star prefix";
    case StrategyKind::prefix_no_pool: return "unseen values use an untrained star prefix";
    case StrategyKind::prefix_complete_pool: return "single shared prefix by construction";
    case StrategyKind::finetune_no_pool: return "unseen values fall back to the pretrained backbone";
    case StrategyKind::finetune_complete_pool: return "single pooled model by construction";
    case StrategyKind::conditional_finetune: return "unseen values render as the unknown-value token";
  }
  return {};
}

SentenceScore Strategy::score(const FeatureMap& features, std::span<const int64_t> words,
                              const PrefixActivations* cached_prefix) const {
  const LmModel& model = model_for(features);
  const std::vector<int64_t> input = rendered_input(features, words);
  // The <bos> position predicts the first word; context positions stay masked.
  std::vector<int64_t> targets(input.size(), -1);
  const size_t ctx = static_cast<size_t>(context_token_count());
  for (size_t i = 0; i < words.size(); ++i) targets[ctx + i] = words[i];
  targets[input.size() - 1] = specials.eos;

  PrefixActivations local;
  const PrefixActivations* pa = nullptr;
  if (uses_prefix()) {
    if (cached_prefix) {
      pa = cached_prefix;
    } else {
      local = activations_for(eval_key(features));
      pa = &local;
    }
  }
  const Tensor logits = lm_logits_eval(model, input, pa);
  SentenceScore s;
  s.tokens = static_cast<int64_t>(words.size()) + 1;
  s.nll_sum = nll_per_token(logits, targets) * static_cast<double>(s.tokens);
  return s;
}

std::vector<Strategy::ParamRef> Strategy::trainable(const std::string& value) {
  auto decay_flag = [](const std::string& name, const Tensor* t) {
    return t->dim() == 2 && name != "tok_emb" && name != "pos_emb" && name != "prefix.w_e";
  };
  std::vector<ParamRef> out;
  if (uses_prefix()) {
    if (!value.empty()) throw std::invalid_argument("prefix strategies have one trainable set");
    for (auto& [name, t] : prefix->named_params()) out.push_back({name, t, decay_flag(name, t)});
    return out;
  }
  if (kind == StrategyKind::finetune_no_pool) {
    if (value.empty()) throw std::invalid_argument("finetune_no_pool trains per value");
    for (auto& [v, model] : per_value) {
      if (v == value) {
        for (auto& [name, t] : model.named_params()) {
          out.push_back({name, t, decay_flag(name, t)});
        }
        return out;
      }
    }
    throw std::invalid_argument("finetune_no_pool: unknown value '" + value + "'");
  }
  if (!value.empty()) throw std::invalid_argument("this strategy has one trainable set");
  for (auto& [name, t] : backbone.named_params()) out.push_back({name, t, decay_flag(name, t)});
  return out;
}

StrategyTrainer::StrategyTrainer(Strategy& s, const OptimConfig& opt, std::string value)
    : s_(s), value_(std::move(value)), adam_(opt) {
  params_ = s_.trainable(value_);
  for (auto& p : params_) adam_.register_param(p.name, p.tensor, p.decay);
}

double StrategyTrainer::step(std::span<const Example* const> batch, RngStream& dropout_rng) {
  if (batch.empty()) return 0.0;
  Tape tape;
  Handle loss;
  if (s_.uses_prefix()) {
    std::vector<MetExample> mex;
    mex.reserve(batch.size());
    for (const Example* ex : batch) {
      ContextKey key;
      if (s_.kind == StrategyKind::prefix_complete_pool) {
        key = all_star_key(s_.schema);
      } else {
        key = encode_context(s_.schema, ex->features, EncodeMode::train, s_.hyper, &dropout_rng);
      }
      mex.push_back(MetExample{ex->tokens, std::move(key)});
    }
    loss = met_loss(tape, s_.backbone, *s_.prefix, s_.hyper, s_.schema, mex, s_.specials).loss;
  } else {
    const LmModel& model =
        s_.kind == StrategyKind::finetune_no_pool
            ? [&]() -> const LmModel& {
                for (auto& [v, m] : s_.per_value) {
                  if (v == value_) return m;
                }
                throw std::logic_error("trainer bound to unknown value");
              }()
            : s_.backbone;
    Handle ce_total;
    int64_t tokens = 0;
    bool any = false;
    for (const Example* ex : batch) {
      const std::vector<int64_t> input = s_.rendered_input(ex->features, ex->tokens);
      std::vector<int64_t> targets(input.size(), -1);
      const size_t ctx = static_cast<size_t>(s_.context_token_count());
      for (size_t i = 0; i < ex->tokens.size(); ++i) targets[ctx + i] = ex->tokens[i];
      targets[input.size() - 1] = s_.specials.eos;
      Handle ce = tape.cross_entropy_sum(lm_logits(tape, model, input, nullptr), targets);
      tokens += static_cast<int64_t>(ex->tokens.size()) + 1;
      ce_total = any ? tape.add(ce_total, ce) : ce;
      any = true;
    }
    loss = tape.scale(ce_total, 1.0 / static_cast<double>(tokens));
  }
  const double loss_val = tape.value(loss).item();
  tape.backward(loss);
  std::vector<const Tensor*> grads;
  grads.reserve(params_.size());
  for (auto& p : params_) {
    const auto h = tape.find_leaf(*p.tensor);
    grads.push_back(h && tape.has_grad(*h) ? &tape.grad(*h) : nullptr);
  }
  adam_.step(grads);
  return loss_val;
}

void StrategyTrainer::snapshot() {
  saved_.clear();
  for (auto& p : params_) saved_.push_back(*p.tensor);
}

void StrategyTrainer::restore() {
  if (saved_.size() != params_.size()) throw std::logic_error("restore before snapshot");
  for (size_t i = 0; i < params_.size(); ++i) *params_[i].tensor = saved_[i];
}

}  // namespace met
