#include "met/prefix.hpp"

#include <cmath>
#include <stdexcept>

namespace met {

int64_t FeatureSchema::total_rows() const {
  int64_t n = 0;
  for (const auto& f : features) n += 1 + static_cast<int64_t>(f.values.size());
  return n;
}

int64_t FeatureSchema::row_base(int64_t feature) const {
  int64_t base = 0;
  for (int64_t i = 0; i < feature; ++i) {
    base += 1 + static_cast<int64_t>(features[static_cast<size_t>(i)].values.size());
  }
  return base;
}

std::optional<int64_t> FeatureSchema::value_id(int64_t feature, const std::string& value) const {
  const auto& vals = features[static_cast<size_t>(feature)].values;
  for (size_t i = 0; i < vals.size(); ++i) {
    if (vals[i] == value) return row_base(feature) + 1 + static_cast<int64_t>(i);
  }
  return std::nullopt;
}

int64_t FeatureSchema::register_value(int64_t feature, const std::string& value) {
  auto& f = features[static_cast<size_t>(feature)];
  if (auto id = value_id(feature, value)) return *id;
  if (static_cast<int64_t>(f.values.size()) >= f.capacity) {
    throw std::runtime_error("feature '" + f.name + "' vocabulary overflow: capacity " +
                             std::to_string(f.capacity) + " exhausted by value '" + value + "'");
  }
  f.values.push_back(value);
  return row_base(feature) + static_cast<int64_t>(f.values.size());
}

int64_t FeatureSchema::feature_index(const std::string& name) const {
  for (size_t i = 0; i < features.size(); ++i) {
    if (features[i].name == name) return static_cast<int64_t>(i);
  }
  return -1;
}

std::pair<int64_t, std::string> FeatureSchema::describe_row(int64_t row) const {
  for (int64_t i = 0; i < slots(); ++i) {
    const int64_t base = row_base(i);
    const int64_t count = 1 + static_cast<int64_t>(features[static_cast<size_t>(i)].values.size());
    if (row >= base && row < base + count) {
      if (row == base) return {i, "*"};
      return {i, features[static_cast<size_t>(i)].values[static_cast<size_t>(row - base - 1)]};
    }
  }
  throw std::out_of_range("describe_row: row " + std::to_string(row) + " outside table");
}

void to_json(nlohmann::json& j, const FeatureSchema& s) {
  j = nlohmann::json::array();
  for (const auto& f : s.features) {
    j.push_back({{"name", f.name}, {"values", f.values}, {"capacity", f.capacity}});
  }
}

void from_json(const nlohmann::json& j, FeatureSchema& s) {
  s.features.clear();
  for (const auto& e : j) {
    FeatureSchema::Feature f;
    f.name = e.at("name").get<std::string>();
    f.values = e.at("values").get<std::vector<std::string>>();
    f.capacity = e.value("capacity", kReferenceValueCapacity);
    s.features.push_back(std::move(f));
  }
}

bool ContextKey::all_star(const FeatureSchema& s) const {
  for (int64_t i = 0; i < s.slots(); ++i) {
    if (ids[static_cast<size_t>(i)] != s.star_id(i)) return false;
  }
  return true;
}

void MetHyperparams::validate() const {
  if (epsilon < 0.0 || epsilon > 1.0) throw std::invalid_argument("epsilon outside [0,1]");
  if (beta < 0.0) throw std::invalid_argument("beta must be >= 0");
}

void to_json(nlohmann::json& j, const MetHyperparams& h) {
  j = nlohmann::json{
      {"epsilon", h.epsilon},
      {"beta", h.beta},
      {"star_grad", h.star_grad == MetHyperparams::StarGrad::stopped ? "stopped" : "flow_through"},
      {"granularity",
       h.granularity == MetHyperparams::Granularity::all_or_none ? "all_or_none" : "per_slot"}};
}

void from_json(const nlohmann::json& j, MetHyperparams& h) {
  h.epsilon = j.value("epsilon", h.epsilon);
  h.beta = j.value("beta", h.beta);
  const std::string sg = j.value("star_grad", std::string("flow_through"));
  h.star_grad = sg == "stopped" ? MetHyperparams::StarGrad::stopped
                                : MetHyperparams::StarGrad::flow_through;
  const std::string gr = j.value("granularity", std::string("per_slot"));
  h.granularity = gr == "all_or_none" ? MetHyperparams::Granularity::all_or_none
                                      : MetHyperparams::Granularity::per_slot;
  h.validate();
}

std::string prefix_arch_name(PrefixArch a) {
  return a == PrefixArch::independent ? "independent" : "shared";
}

PrefixArch prefix_arch_from_name(const std::string& s) {
  if (s == "shared") return PrefixArch::shared;
  if (s == "independent") return PrefixArch::independent;
  throw std::invalid_argument("unknown prefix arch: " + s);
}

void to_json(nlohmann::json& j, const PrefixConfig& c) {
  j = nlohmann::json{{"embed_dim", c.embed_dim},
                     {"mlp_hidden", c.mlp_hidden},
                     {"arch", prefix_arch_name(c.arch)},
                     {"init_std", c.init_std}};
}

void from_json(const nlohmann::json& j, PrefixConfig& c) {
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.arch = prefix_arch_from_name(j.value("arch", std::string("shared")));
  c.init_std = j.value("init_std", c.init_std);
}

PrefixParams PrefixParams::init(const FeatureSchema& schema, const LmConfig& lm,
                                const PrefixConfig& cfg, RngStream& rng) {
  PrefixParams p;
  p.cfg = cfg;
  p.slots = schema.slots();
  p.out_dim = 2 * lm.n_layers * lm.d_model;
  p.w_e = Tensor::randn({schema.total_rows(), cfg.embed_dim}, rng, cfg.init_std);
  const int64_t n_mlps = cfg.arch == PrefixArch::shared ? 1 : p.slots;
  for (int64_t i = 0; i < n_mlps; ++i) {
    Mlp m;
    m.w1 = Tensor::randn({cfg.embed_dim, cfg.mlp_hidden}, rng, cfg.init_std);
    m.b1 = Tensor({cfg.mlp_hidden});
    m.w2 = Tensor::randn({cfg.mlp_hidden, p.out_dim}, rng, cfg.init_std);
    m.b2 = Tensor({p.out_dim});
    p.mlps.push_back(std::move(m));
  }
  p.set_requires_grad(true);
  return p;
}

std::vector<std::pair<std::string, Tensor*>> PrefixParams::named_params() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("prefix.w_e", &w_e);
  for (size_t i = 0; i < mlps.size(); ++i) {
    const std::string p = "prefix.mlp" + std::to_string(i) + ".";
    out.emplace_back(p + "w1", &mlps[i].w1);
    out.emplace_back(p + "b1", &mlps[i].b1);
    out.emplace_back(p + "w2", &mlps[i].w2);
    out.emplace_back(p + "b2", &mlps[i].b2);
  }
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> PrefixParams::named_params() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [n, t] : const_cast<PrefixParams*>(this)->named_params()) out.emplace_back(n, t);
  return out;
}

void PrefixParams::set_requires_grad(bool rg) {
  for (auto& [n, t] : named_params()) {
    (void)n;
    t->requires_grad = rg;
  }
}

int64_t PrefixParams::param_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : named_params()) {
    (void)name;
    n += t->numel();
  }
  return n;
}

ContextKey encode_context(const FeatureSchema& schema,
                          const std::map<std::string, std::string>& raw,
                          EncodeMode mode, const MetHyperparams& hyper, RngStream* rng) {
  hyper.validate();
  ContextKey key;
  key.ids.resize(static_cast<size_t>(schema.slots()));
  key.seen.resize(static_cast<size_t>(schema.slots()));
  for (int64_t i = 0; i < schema.slots(); ++i) {
    const auto& f = schema.features[static_cast<size_t>(i)];
    const auto it = raw.find(f.name);
    if (it == raw.end()) {
      key.ids[static_cast<size_t>(i)] = schema.star_id(i);
      key.seen[static_cast<size_t>(i)] = false;
      continue;
    }
    if (auto id = schema.value_id(i, it->second)) {
      key.ids[static_cast<size_t>(i)] = *id;
      key.seen[static_cast<size_t>(i)] = true;
    } else {
      key.ids[static_cast<size_t>(i)] = schema.star_id(i);
      key.seen[static_cast<size_t>(i)] = false;
    }
  }
  if (mode == EncodeMode::train) {
    if (rng == nullptr) throw std::invalid_argument("encode_context: train mode needs an RngStream");
    if (hyper.granularity == MetHyperparams::Granularity::all_or_none) {
      if (rng->bernoulli(hyper.epsilon)) {
        for (int64_t i = 0; i < schema.slots(); ++i) {
          key.ids[static_cast<size_t>(i)] = schema.star_id(i);
        }
      }
    } else {
      for (int64_t i = 0; i < schema.slots(); ++i) {
        // One draw per slot regardless of outcome keeps the stream aligned.
        if (rng->bernoulli(hyper.epsilon)) {
          key.ids[static_cast<size_t>(i)] = schema.star_id(i);
        }
      }
    }
  }
  return key;
}

ContextKey all_star_key(const FeatureSchema& schema) {
  ContextKey key;
  for (int64_t i = 0; i < schema.slots(); ++i) {
    key.ids.push_back(schema.star_id(i));
    key.seen.push_back(false);
  }
  return key;
}

namespace {

Handle mlp_apply(Tape& tape, const PrefixParams::Mlp& mlp, Handle in, Nonlinearity nl) {
  Handle h = tape.add_bias(tape.matmul(in, tape.leaf(mlp.w1)), tape.leaf(mlp.b1));
  h = tape.activation(h, nl);
  return tape.add_bias(tape.matmul(h, tape.leaf(mlp.w2)), tape.leaf(mlp.b2));
}

Handle prefix_matrix(Tape& tape, const PrefixParams& params, const ContextKey& key,
                     Nonlinearity nl) {
  if (static_cast<int64_t>(key.ids.size()) != params.slots) {
    throw ShapeError("prefix_activations: key has " + std::to_string(key.ids.size()) +
                     " slots, params expect " + std::to_string(params.slots));
  }
  Handle emb = tape.embedding(tape.leaf(params.w_e), key.ids);
  if (params.cfg.arch == PrefixArch::shared) {
    return mlp_apply(tape, params.mlps[0], emb, nl);
  }
  Handle out;
  for (int64_t i = 0; i < params.slots; ++i) {
    Handle row = tape.slice_rows(emb, i, i + 1);
    Handle h = mlp_apply(tape, params.mlps[static_cast<size_t>(i)], row, nl);
    out = (i == 0) ? h : tape.concat_rows(out, h);
  }
  return out;
}

PrefixHandles split_layers(Tape& tape, Handle h_matrix, const LmConfig& lm, int64_t slots) {
  PrefixHandles ph;
  ph.len = slots;
  const int64_t d = lm.d_model;
  for (int64_t l = 0; l < lm.n_layers; ++l) {
    ph.k.push_back(tape.slice_cols(h_matrix, (2 * l) * d, (2 * l + 1) * d));
    ph.v.push_back(tape.slice_cols(h_matrix, (2 * l + 1) * d, (2 * l + 2) * d));
  }
  return ph;
}

}  // namespace

PrefixBuild prefix_handles(Tape& tape, const PrefixParams& params, const ContextKey& key,
                           const LmConfig& lm) {
  if (params.out_dim != 2 * lm.n_layers * lm.d_model) {
    throw ShapeError("prefix_handles: params built for out_dim " + std::to_string(params.out_dim) +
                     ", model needs " + std::to_string(2 * lm.n_layers * lm.d_model));
  }
  PrefixBuild b;
  b.h_matrix = prefix_matrix(tape, params, key, lm.nl());
  b.handles = split_layers(tape, b.h_matrix, lm, params.slots);
  return b;
}

PrefixActivations prefix_activations(const PrefixParams& params, const ContextKey& key,
                                     const LmConfig& lm) {
  Tape tape(/*grad_enabled=*/false);
  PrefixBuild b = prefix_handles(tape, params, key, lm);
  PrefixActivations act;
  act.len = params.slots;
  for (int64_t l = 0; l < lm.n_layers; ++l) {
    act.k.push_back(tape.value(b.handles.k[static_cast<size_t>(l)]));
    act.v.push_back(tape.value(b.handles.v[static_cast<size_t>(l)]));
  }
  return act;
}

MetLossParts met_loss(Tape& tape, const LmModel& model, const PrefixParams& params,
                      const MetHyperparams& hyper, const FeatureSchema& schema,
                      std::span<const MetExample> batch, const SpecialTokens& specials) {
  hyper.validate();
  if (!model.frozen) {
    throw std::logic_error("met_loss: backbone must be frozen before prefix training");
  }
  if (batch.empty()) throw std::invalid_argument("met_loss: empty batch");

  const bool use_reg = hyper.beta > 0.0;
  Handle h_star_for_reg;
  if (use_reg) {
    Handle h_star = prefix_matrix(tape, params, all_star_key(schema), model.cfg.nl());
    h_star_for_reg = hyper.star_grad == MetHyperparams::StarGrad::stopped
                         ? tape.detach(h_star)
                         : h_star;
  }

  MetLossParts parts;
  Handle ce_total;
  Handle reg_total;
  for (size_t j = 0; j < batch.size(); ++j) {
    const MetExample& ex = batch[j];
    PrefixBuild pb = prefix_handles(tape, params, ex.key, model.cfg);
    std::vector<int64_t> input;
    input.reserve(ex.words.size() + 1);
    input.push_back(specials.bos);
    input.insert(input.end(), ex.words.begin(), ex.words.end());
    std::vector<int64_t> targets(ex.words.begin(), ex.words.end());
    targets.push_back(specials.eos);
    Handle logits = lm_logits(tape, model, input, &pb.handles);
    Handle ce = tape.cross_entropy_sum(logits, targets);
    parts.tokens += static_cast<int64_t>(targets.size());
    ce_total = (j == 0) ? ce : tape.add(ce_total, ce);
    if (use_reg) {
      Handle diff = tape.sub(pb.h_matrix, h_star_for_reg);
      Handle r = tape.sum_squares(diff);
      reg_total = (j == 0) ? r : tape.add(reg_total, r);
    }
  }
  parts.nll = tape.value(ce_total).item() / static_cast<double>(parts.tokens);
  Handle loss = tape.scale(ce_total, 1.0 / static_cast<double>(parts.tokens));
  if (use_reg) {
    parts.reg = tape.value(reg_total).item() / static_cast<double>(batch.size());
    loss = tape.add(loss, tape.scale(reg_total, hyper.beta / static_cast<double>(batch.size())));
  }
  parts.loss = loss;
  return parts;
}

std::vector<PrefixDistance> prefix_distance_report(const PrefixParams& params,
                                                   const FeatureSchema& schema,
                                                   const LmConfig& lm) {
  std::vector<PrefixDistance> out;
  Tape tape(/*grad_enabled=*/false);
  const Tensor& h_star = tape.value(prefix_matrix(tape, params, all_star_key(schema), lm.nl()));
  for (int64_t i = 0; i < schema.slots(); ++i) {
    const auto& f = schema.features[static_cast<size_t>(i)];
    for (const auto& value : f.values) {
      ContextKey key = all_star_key(schema);
      key.ids[static_cast<size_t>(i)] = *schema.value_id(i, value);
      key.seen[static_cast<size_t>(i)] = true;
      Tape t2(/*grad_enabled=*/false);
      const Tensor& h = t2.value(prefix_matrix(t2, params, key, lm.nl()));
      double d2 = 0.0;
      for (int64_t e = 0; e < h.numel(); ++e) {
        const double d = h[e] - h_star[e];
        d2 += d * d;
      }
      out.push_back({f.name, value, std::sqrt(d2)});
    }
  }
  return out;
}

}  // namespace met
