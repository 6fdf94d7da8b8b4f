#include "met/lm.hpp"

#include <cmath>
#include <stdexcept>

namespace met {

void LmConfig::validate() const {
  if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || max_seq <= 0) {
    throw std::invalid_argument("LmConfig: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("LmConfig: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
  nonlinearity_from_name(nonlinearity);
}

void to_json(nlohmann::json& j, const LmConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                     {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                     {"max_seq", c.max_seq},       {"nonlinearity", c.nonlinearity}};
}

void from_json(const nlohmann::json& j, LmConfig& c) {
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.max_seq = j.value("max_seq", c.max_seq);
  c.nonlinearity = j.value("nonlinearity", c.nonlinearity);
}

LmModel LmModel::init(const LmConfig& cfg, RngStream& rng) {
  cfg.validate();
  LmModel m;
  m.cfg = cfg;
  const int64_t d = cfg.d_model, v = cfg.vocab_size, ff = 4 * cfg.d_model;
  const double std0 = 0.02;
  // Residual-branch projections scaled down with depth, GPT-2 style.
  const double std_res = std0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  m.tok_emb = Tensor::randn({v, d}, rng, std0);
  m.pos_emb = Tensor::randn({cfg.max_seq, d}, rng, std0);
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    Layer lay;
    lay.ln1_g = Tensor({d}, 1.0);
    lay.ln1_b = Tensor({d});
    lay.wq = Tensor::randn({d, d}, rng, std0);
    lay.bq = Tensor({d});
    lay.wk = Tensor::randn({d, d}, rng, std0);
    lay.bk = Tensor({d});
    lay.wv = Tensor::randn({d, d}, rng, std0);
    lay.bv = Tensor({d});
    lay.wo = Tensor::randn({d, d}, rng, std_res);
    lay.bo = Tensor({d});
    lay.ln2_g = Tensor({d}, 1.0);
    lay.ln2_b = Tensor({d});
    lay.w1 = Tensor::randn({d, ff}, rng, std0);
    lay.b1 = Tensor({ff});
    lay.w2 = Tensor::randn({ff, d}, rng, std_res);
    lay.b2 = Tensor({d});
    m.layers.push_back(std::move(lay));
  }
  m.lnf_g = Tensor({d}, 1.0);
  m.lnf_b = Tensor({d});
  m.w_out = Tensor::randn({d, v}, rng, std0);
  m.b_out = Tensor({v});
  m.set_frozen(false);
  return m;
}

void LmModel::set_frozen(bool f) {
  frozen = f;
  for (auto& [name, t] : named_params()) {
    (void)name;
    t->requires_grad = !f;
  }
}

std::vector<std::pair<std::string, Tensor*>> LmModel::named_params() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("tok_emb", &tok_emb);
  out.emplace_back("pos_emb", &pos_emb);
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    Layer& lay = layers[l];
    out.emplace_back(p + "ln1_g", &lay.ln1_g);
    out.emplace_back(p + "ln1_b", &lay.ln1_b);
    out.emplace_back(p + "wq", &lay.wq);
    out.emplace_back(p + "bq", &lay.bq);
    out.emplace_back(p + "wk", &lay.wk);
    out.emplace_back(p + "bk", &lay.bk);
    out.emplace_back(p + "wv", &lay.wv);
    out.emplace_back(p + "bv", &lay.bv);
    out.emplace_back(p + "wo", &lay.wo);
    out.emplace_back(p + "bo", &lay.bo);
    out.emplace_back(p + "ln2_g", &lay.ln2_g);
    out.emplace_back(p + "ln2_b", &lay.ln2_b);
    out.emplace_back(p + "w1", &lay.w1);
    out.emplace_back(p + "b1", &lay.b1);
    out.emplace_back(p + "w2", &lay.w2);
    out.emplace_back(p + "b2", &lay.b2);
  }
  out.emplace_back("lnf_g", &lnf_g);
  out.emplace_back("lnf_b", &lnf_b);
  out.emplace_back("w_out", &w_out);
  out.emplace_back("b_out", &b_out);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> LmModel::named_params() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<LmModel*>(this)->named_params()) out.emplace_back(name, t);
  return out;
}

std::vector<std::pair<std::string, uint64_t>> LmModel::checksums() const {
  std::vector<std::pair<std::string, uint64_t>> out;
  for (const auto& [name, t] : named_params()) out.emplace_back(name, t->bit_checksum());
  return out;
}

int64_t LmModel::param_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : named_params()) {
    (void)name;
    n += t->numel();
  }
  return n;
}

void LmModel::save(const std::filesystem::path& path, const nlohmann::json& extra_meta) const {
  CheckpointMeta meta;
  meta.nonlinearity = cfg.nonlinearity;
  meta.extra = extra_meta.is_null() ? nlohmann::json::object() : extra_meta;
  meta.extra["lm_config"] = cfg;
  save_checkpoint(path, named_params(), meta);
}

LmModel LmModel::load(const LoadedCheckpoint& ckpt) {
  LmConfig cfg = ckpt.meta.extra.at("lm_config").get<LmConfig>();
  RngStream dummy(0, "load");
  LmModel m = LmModel::init(cfg, dummy);
  for (auto& [name, t] : m.named_params()) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) {
      throw std::runtime_error("checkpoint missing backbone tensor " + name);
    }
    if (!t->same_shape(it->second)) {
      throw ShapeError("checkpoint tensor " + name + " has shape " +
                       shape_str(it->second.shape()) + ", expected " + shape_str(t->shape()));
    }
    *t = it->second;
  }
  m.set_frozen(false);
  return m;
}

namespace {

struct TapeParams {
  Tape& tape;
  Handle h(const Tensor& t) { return tape.leaf(t); }
};

}  // namespace

Handle lm_logits(Tape& tape, const LmModel& model, std::span<const int64_t> tokens,
                 const PrefixHandles* prefix, std::vector<Handle>* trace) {
  const LmConfig& cfg = model.cfg;
  if (prefix && prefix->len == 0) prefix = nullptr;
  const int64_t t_len = static_cast<int64_t>(tokens.size());
  const int64_t p_len = prefix ? prefix->len : 0;
  if (t_len == 0) throw ShapeError("lm_forward: empty token sequence");
  if (t_len + p_len > cfg.max_seq) {
    throw ShapeError("lm_forward: sequence " + std::to_string(t_len) + " + prefix " +
                     std::to_string(p_len) + " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  for (const int64_t t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) {
      throw ShapeError("lm_forward: token id " + std::to_string(t) + " outside vocab " +
                       std::to_string(cfg.vocab_size));
    }
  }
  if (prefix && (static_cast<int64_t>(prefix->k.size()) != cfg.n_layers ||
                 static_cast<int64_t>(prefix->v.size()) != cfg.n_layers)) {
    throw ShapeError("lm_forward: prefix layer count mismatch");
  }

  TapeParams tp{tape};
  const int64_t d = cfg.d_model, hd = cfg.head_dim();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  const Nonlinearity nl = cfg.nl();

  Handle x = tape.add(tape.embedding(tp.h(model.tok_emb), {tokens.begin(), tokens.end()}),
                      tape.slice_rows(tp.h(model.pos_emb), 0, t_len));
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    if (trace) trace->push_back(x);
    const LmModel::Layer& lay = model.layers[static_cast<size_t>(l)];
    Handle xn = tape.layer_norm(x, tp.h(lay.ln1_g), tp.h(lay.ln1_b));
    Handle q = tape.add_bias(tape.matmul(xn, tp.h(lay.wq)), tp.h(lay.bq));
    Handle k = tape.add_bias(tape.matmul(xn, tp.h(lay.wk)), tp.h(lay.bk));
    Handle v = tape.add_bias(tape.matmul(xn, tp.h(lay.wv)), tp.h(lay.bv));
    if (prefix) {
      // Injected key/value slots sit ahead of the token keys; they are
      // attended to but never attend.
      const auto& ph = *prefix;
      if (tape.value(ph.k[static_cast<size_t>(l)]).rows() != p_len ||
          tape.value(ph.k[static_cast<size_t>(l)]).cols() != d) {
        throw ShapeError("lm_forward: prefix tensor shape mismatch at layer " +
                         std::to_string(l));
      }
      k = tape.concat_rows(ph.k[static_cast<size_t>(l)], k);
      v = tape.concat_rows(ph.v[static_cast<size_t>(l)], v);
    }
    Handle ctx;
    for (int64_t h = 0; h < cfg.n_heads; ++h) {
      Handle qh = tape.slice_cols(q, h * hd, (h + 1) * hd);
      Handle kh = tape.slice_cols(k, h * hd, (h + 1) * hd);
      Handle vh = tape.slice_cols(v, h * hd, (h + 1) * hd);
      Handle scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_hd);
      Handle probs = tape.causal_softmax(scores, p_len);
      Handle ch = tape.matmul(probs, vh);
      ctx = (h == 0) ? ch : tape.concat_cols(ctx, ch);
    }
    Handle attn = tape.add_bias(tape.matmul(ctx, tp.h(lay.wo)), tp.h(lay.bo));
    x = tape.add(x, attn);
    Handle xn2 = tape.layer_norm(x, tp.h(lay.ln2_g), tp.h(lay.ln2_b));
    Handle ff = tape.add_bias(tape.matmul(xn2, tp.h(lay.w1)), tp.h(lay.b1));
    ff = tape.activation(ff, nl);
    ff = tape.add_bias(tape.matmul(ff, tp.h(lay.w2)), tp.h(lay.b2));
    x = tape.add(x, ff);
  }
  if (trace) trace->push_back(x);
  Handle xf = tape.layer_norm(x, tp.h(model.lnf_g), tp.h(model.lnf_b));
  return tape.add_bias(tape.matmul(xf, tp.h(model.w_out)), tp.h(model.b_out));
}

Tensor lm_logits_eval(const LmModel& model, std::span<const int64_t> tokens,
                      const PrefixActivations* prefix, std::vector<Tensor>* trace) {
  Tape tape(/*grad_enabled=*/false);
  PrefixHandles ph;
  PrefixHandles* php = nullptr;
  if (prefix && prefix->len > 0) {
    ph.len = prefix->len;
    for (int64_t l = 0; l < model.cfg.n_layers; ++l) {
      ph.k.push_back(tape.constant(prefix->k[static_cast<size_t>(l)]));
      ph.v.push_back(tape.constant(prefix->v[static_cast<size_t>(l)]));
    }
    php = &ph;
  }
  std::vector<Handle> trace_handles;
  const Handle logits =
      lm_logits(tape, model, tokens, php, trace ? &trace_handles : nullptr);
  if (trace) {
    for (const Handle h : trace_handles) trace->push_back(tape.value(h));
  }
  return tape.value(logits);
}

double nll_per_token(const Tensor& logits, std::span<const int64_t> targets) {
  if (logits.dim() != 2 || logits.rows() != static_cast<int64_t>(targets.size())) {
    throw ShapeError("nll_per_token: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets");
  }
  const int64_t v = logits.cols();
  double total = 0.0;
  int64_t count = 0;
  std::vector<double> probs(static_cast<size_t>(v));
  for (int64_t i = 0; i < logits.rows(); ++i) {
    const int64_t t = targets[static_cast<size_t>(i)];
    if (t < 0) continue;
    if (t >= v) throw ShapeError("nll_per_token: target outside vocab");
    const double* row = logits.data() + i * v;
    double mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    total += mx + std::log(sum) - row[t];
    ++count;
  }
  if (count == 0) throw std::invalid_argument("nll_per_token: all targets are padding");
  return total / static_cast<double>(count);
}

SentenceScore score_sentence(const LmModel& model, std::span<const int64_t> words,
                             int64_t bos_id, int64_t eos_id,
                             const PrefixActivations* prefix) {
  std::vector<int64_t> input;
  input.reserve(words.size() + 1);
  input.push_back(bos_id);
  input.insert(input.end(), words.begin(), words.end());
  std::vector<int64_t> targets(words.begin(), words.end());
  targets.push_back(eos_id);
  const Tensor logits = lm_logits_eval(model, input, prefix);
  SentenceScore s;
  s.tokens = static_cast<int64_t>(targets.size());
  s.nll_sum = nll_per_token(logits, targets) * static_cast<double>(s.tokens);
  return s;
}

std::vector<int64_t> generate(const LmModel& model, const PrefixActivations* prefix,
                              std::span<const int64_t> prompt, int64_t max_new,
                              const GenerateOptions& opts, RngStream* rng) {
  if (opts.sampler == GenerateOptions::Sampler::temperature && rng == nullptr) {
    throw std::invalid_argument("generate: temperature sampling needs an RngStream");
  }
  std::vector<int64_t> seq(prompt.begin(), prompt.end());
  if (seq.empty()) throw std::invalid_argument("generate: empty prompt");
  const int64_t p_len = prefix ? prefix->len : 0;
  for (int64_t step = 0; step < max_new; ++step) {
    if (static_cast<int64_t>(seq.size()) + p_len >= model.cfg.max_seq) break;
    const Tensor logits = lm_logits_eval(model, seq, prefix);
    const int64_t v = logits.cols();
    const double* row = logits.data() + (logits.rows() - 1) * v;
    int64_t next = 0;
    if (opts.sampler == GenerateOptions::Sampler::greedy) {
      for (int64_t j = 1; j < v; ++j) {
        if (row[j] > row[next]) next = j;
      }
    } else {
      const double inv_t = 1.0 / opts.temperature;
      double mx = row[0];
      for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      std::vector<double> p(static_cast<size_t>(v));
      double sum = 0.0;
      for (int64_t j = 0; j < v; ++j) {
        p[static_cast<size_t>(j)] = std::exp((row[j] - mx) * inv_t);
        sum += p[static_cast<size_t>(j)];
      }
      const double u = rng->uniform01() * sum;
      double acc = 0.0;
      next = v - 1;
      for (int64_t j = 0; j < v; ++j) {
        acc += p[static_cast<size_t>(j)];
        if (u < acc) {
          next = j;
          break;
        }
      }
    }
    seq.push_back(next);
    if (opts.stop_token && next == *opts.stop_token) break;
  }
  return seq;
}

double mean_sentence_nll(const LmModel& model,
                         const std::vector<std::vector<int64_t>>& sentences,
                         const SpecialTokens& specials, const PrefixActivations* prefix) {
  double total = 0.0;
  int64_t tokens = 0;
  for (const auto& words : sentences) {
    const SentenceScore s = score_sentence(model, words, specials.bos, specials.eos, prefix);
    total += s.nll_sum;
    tokens += s.tokens;
  }
  if (tokens == 0) throw std::invalid_argument("mean_sentence_nll: no tokens");
  return total / static_cast<double>(tokens);
}

PretrainResult pretrain_backbone(LmModel& model,
                                 const std::vector<std::vector<int64_t>>& train_sentences,
                                 const std::vector<std::vector<int64_t>>& val_sentences,
                                 const SpecialTokens& specials, const OptimConfig& opt,
                                 const TrainBudget& budget, RngStream& rng) {
  if (model.frozen) throw std::logic_error("pretrain_backbone: model is frozen");
  if (train_sentences.empty()) throw std::invalid_argument("pretrain_backbone: empty corpus");

  auto params = model.named_params();
  AdamW adam(opt);
  for (auto& [name, t] : params) {
    const bool decay = t->dim() == 2 && name != "tok_emb" && name != "pos_emb";
    adam.register_param(name, t, decay);
  }

  auto step_fn = [&](std::span<const int64_t> idx) {
    Tape tape;
    Handle ce_total;
    int64_t tokens = 0;
    for (size_t j = 0; j < idx.size(); ++j) {
      const auto& words = train_sentences[static_cast<size_t>(idx[j])];
      std::vector<int64_t> input;
      input.reserve(words.size() + 1);
      input.push_back(specials.bos);
      input.insert(input.end(), words.begin(), words.end());
      std::vector<int64_t> targets(words.begin(), words.end());
      targets.push_back(specials.eos);
      Handle ce = tape.cross_entropy_sum(lm_logits(tape, model, input, nullptr), targets);
      tokens += static_cast<int64_t>(targets.size());
      ce_total = (j == 0) ? ce : tape.add(ce_total, ce);
    }
    Handle loss = tape.scale(ce_total, 1.0 / static_cast<double>(tokens));
    const double loss_val = tape.value(loss).item();
    tape.backward(loss);
    std::vector<const Tensor*> grads;
    grads.reserve(params.size());
    for (auto& [name, t] : params) {
      (void)name;
      const auto h = tape.find_leaf(*t);
      grads.push_back(h && tape.has_grad(*h) ? &tape.grad(*h) : nullptr);
    }
    adam.step(grads);
    return loss_val;
  };
  auto val_fn = [&]() {
    return val_sentences.empty() ? mean_sentence_nll(model, train_sentences, specials)
                                 : mean_sentence_nll(model, val_sentences, specials);
  };
  std::vector<Tensor> saved;
  auto snapshot_fn = [&]() {
    saved.clear();
    for (auto& [name, t] : params) {
      (void)name;
      saved.push_back(*t);
    }
  };
  auto restore_fn = [&]() {
    for (size_t i = 0; i < params.size(); ++i) *params[i].second = saved[i];
  };

  PretrainResult out;
  out.loop = run_train_loop(static_cast<int64_t>(train_sentences.size()), opt.batch_size,
                            budget, rng, step_fn, val_fn, snapshot_fn, restore_fn);
  out.final_val_nll = val_fn();
  return out;
}

}  // namespace met
