#include "met/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "met/checkpoint.hpp"

namespace met {

// ---- tokenizer -------------------------------------------------------------

int64_t Tokenizer::lookup(const std::string& token) const {
  const auto it = token_to_id.find(token);
  return it == token_to_id.end() ? specials.unk : it->second;
}

std::vector<int64_t> Tokenizer::tokenize(const std::string& text) const {
  std::vector<int64_t> out;
  std::istringstream is(text);
  std::string word;
  while (is >> word) out.push_back(lookup(word));
  return out;
}

std::string Tokenizer::detokenize(std::span<const int64_t> ids) const {
  std::string out;
  for (const int64_t id : ids) {
    if (id < 0 || id >= size()) throw std::out_of_range("detokenize: id out of range");
    if (!out.empty()) out += ' ';
    out += id_to_token[static_cast<size_t>(id)];
  }
  return out;
}

namespace {
Tokenizer with_specials() {
  Tokenizer t;
  t.id_to_token = {"<pad>", "<unk>", "<bos>", "<eos>"};
  for (size_t i = 0; i < t.id_to_token.size(); ++i) {
    t.token_to_id[t.id_to_token[i]] = static_cast<int64_t>(i);
  }
  return t;
}

void append_token(Tokenizer& t, const std::string& token) {
  t.token_to_id[token] = t.size();
  t.id_to_token.push_back(token);
}
}  // namespace

Tokenizer Tokenizer::build(const std::vector<std::string>& texts, int64_t max_size,
                           int64_t min_freq) {
  std::map<std::string, int64_t> freq;
  for (const auto& text : texts) {
    std::istringstream is(text);
    std::string word;
    while (is >> word) ++freq[word];
  }
  std::vector<std::pair<std::string, int64_t>> sorted(freq.begin(), freq.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Tokenizer t = with_specials();
  for (const auto& [word, count] : sorted) {
    if (count < min_freq) break;
    if (t.size() >= max_size) break;
    append_token(t, word);
  }
  return t;
}

Tokenizer Tokenizer::from_word_list(const std::vector<std::string>& words) {
  Tokenizer t = with_specials();
  for (const auto& w : words) append_token(t, w);
  return t;
}

void Tokenizer::reserve_context_tokens(const FeatureSchema& schema) {
  for (const auto& f : schema.features) {
    append_token(*this, "[" + f.name + "]");
    feature_marker[f.name] = size() - 1;
    for (const auto& v : f.values) {
      append_token(*this, "[" + f.name + "=" + v + "]");
      context_value[f.name][v] = size() - 1;
    }
  }
  append_token(*this, "[unkval]");
  unkval = size() - 1;
}

void to_json(nlohmann::json& j, const Tokenizer& t) {
  j = nlohmann::json{{"tokens", t.id_to_token},
                     {"specials",
                      {{"pad", t.specials.pad},
                       {"unk", t.specials.unk},
                       {"bos", t.specials.bos},
                       {"eos", t.specials.eos}}},
                     {"feature_marker", t.feature_marker},
                     {"context_value", t.context_value},
                     {"unkval", t.unkval}};
}

void from_json(const nlohmann::json& j, Tokenizer& t) {
  t.id_to_token = j.at("tokens").get<std::vector<std::string>>();
  t.token_to_id.clear();
  for (size_t i = 0; i < t.id_to_token.size(); ++i) {
    t.token_to_id[t.id_to_token[i]] = static_cast<int64_t>(i);
  }
  const auto& sp = j.at("specials");
  t.specials.pad = sp.at("pad").get<int64_t>();
  t.specials.unk = sp.at("unk").get<int64_t>();
  t.specials.bos = sp.at("bos").get<int64_t>();
  t.specials.eos = sp.at("eos").get<int64_t>();
  t.feature_marker = j.value("feature_marker", std::map<std::string, int64_t>{});
  t.context_value =
      j.value("context_value", std::map<std::string, std::map<std::string, int64_t>>{});
  t.unkval = j.value("unkval", int64_t{-1});
}

// ---- synthetic spec --------------------------------------------------------

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  nlohmann::json feats = nlohmann::json::array();
  for (const auto& f : s.features) {
    feats.push_back({{"name", f.name},
                     {"n_values", f.n_values},
                     {"sigma", f.sigma},
                     {"held_out", f.held_out}});
  }
  j = nlohmann::json{{"vocab_words", s.vocab_words},
                     {"sigma_base", s.sigma_base},
                     {"features", feats},
                     {"structure", s.structure},
                     {"sentences_per_context", s.sentences_per_context},
                     {"heldout_sentences", s.heldout_sentences},
                     {"mean_len", s.mean_len},
                     {"max_len", s.max_len},
                     {"corpus_name", s.corpus_name},
                     {"feature_capacity", s.feature_capacity}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  s.vocab_words = j.value("vocab_words", s.vocab_words);
  s.sigma_base = j.value("sigma_base", s.sigma_base);
  if (j.contains("features")) {
    s.features.clear();
    for (const auto& e : j.at("features")) {
      SyntheticFeature f;
      f.name = e.value("name", f.name);
      f.n_values = e.value("n_values", f.n_values);
      f.sigma = e.value("sigma", f.sigma);
      f.held_out = e.value("held_out", f.held_out);
      s.features.push_back(std::move(f));
    }
  }
  s.structure = j.value("structure", s.structure);
  s.sentences_per_context = j.value("sentences_per_context", s.sentences_per_context);
  s.heldout_sentences = j.value("heldout_sentences", s.heldout_sentences);
  s.mean_len = j.value("mean_len", s.mean_len);
  s.max_len = j.value("max_len", s.max_len);
  s.corpus_name = j.value("corpus_name", s.corpus_name);
  s.feature_capacity = j.value("feature_capacity", s.feature_capacity);
}

// ---- generator -------------------------------------------------------------

namespace {
std::string value_name(int64_t idx) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "v%02d", static_cast<int>(idx));
  return buf;
}

void row_softmax(std::vector<double>& m, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    double* row = m.data() + r * cols;
    double mx = row[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    for (int64_t c = 0; c < cols; ++c) row[c] /= sum;
  }
}
}  // namespace

BigramGenerator::BigramGenerator(const SyntheticSpec& spec, uint64_t seed) : spec_(spec) {
  if (spec.features.empty()) throw std::invalid_argument("synthetic spec needs >= 1 feature");
  if (spec.vocab_words < 2) throw std::invalid_argument("synthetic spec needs >= 2 words");
  if (spec.mean_len < 1.0) throw std::invalid_argument("mean_len must be >= 1");
  if (spec.structure == "nested") {
    if (spec.features.size() != 2) {
      throw std::invalid_argument("nested structure needs exactly 2 features");
    }
    if (spec.features[1].n_values % spec.features[0].n_values != 0) {
      throw std::invalid_argument("nested structure needs n_values[1] divisible by n_values[0]");
    }
  }
  v_ = spec.vocab_words;
  word_base_ = 4;  // after <pad>,<unk>,<bos>,<eos>
  p_stop_ = 1.0 / spec.mean_len;
  const int64_t rows = v_ + 1;  // last row is the bos state

  // Contexts: every combination that exists under the structure.
  const auto& f0 = spec.features[0];
  if (spec.features.size() == 1) {
    for (int64_t a = 0; a < f0.n_values; ++a) {
      contexts_.push_back({{"corpus", spec.corpus_name}, {f0.name, value_name(a)}});
    }
  } else if (spec.structure == "nested") {
    const auto& f1 = spec.features[1];
    const int64_t per = f1.n_values / f0.n_values;
    for (int64_t b = 0; b < f1.n_values; ++b) {
      const std::string parent = value_name(b / per);
      nested_parent_[value_name(b)] = parent;
      contexts_.push_back({{"corpus", spec.corpus_name},
                           {f0.name, parent},
                           {spec.features[1].name, value_name(b)}});
    }
  } else {
    const auto& f1 = spec.features[1];
    for (int64_t a = 0; a < f0.n_values; ++a) {
      for (int64_t b = 0; b < f1.n_values; ++b) {
        contexts_.push_back({{"corpus", spec.corpus_name},
                             {f0.name, value_name(a)},
                             {f1.name, value_name(b)}});
      }
    }
  }

  // Draw base + perturbations; retry on (numerically) absorbing chains.
  for (int attempt = 0;; ++attempt) {
    RngStream rng(seed + static_cast<uint64_t>(attempt) * 0x9E3779B9ULL, "synth/params");
    base_.resize(static_cast<size_t>(rows * v_));
    for (auto& x : base_) x = spec.sigma_base * rng.normal();
    perturb_.clear();
    for (const auto& f : spec.features) {
      for (int64_t a = 0; a < f.n_values; ++a) {
        std::vector<double> u(static_cast<size_t>(rows * v_));
        for (auto& x : u) x = f.sigma * rng.normal();
        perturb_[f.name][value_name(a)] = std::move(u);
      }
    }
    bool degenerate = false;
    for (const auto& ctx : contexts_) {
      const std::vector<double> m = context_matrix(ctx);
      for (int64_t r = 0; r < rows && !degenerate; ++r) {
        for (int64_t c = 0; c < v_; ++c) {
          if (m[static_cast<size_t>(r * v_ + c)] > 1.0 - 1e-9) {
            degenerate = true;
            break;
          }
        }
      }
      if (degenerate) break;
    }
    if (!degenerate) break;
    if (attempt >= 4) {
      throw std::runtime_error("synthetic source degenerate after 5 attempts; lower sigma");
    }
  }
}

std::vector<double> BigramGenerator::context_matrix(const FeatureMap& ctx) const {
  const int64_t rows = v_ + 1;
  std::vector<double> m = base_;
  for (const auto& f : spec_.features) {
    const auto it = ctx.find(f.name);
    if (it == ctx.end()) continue;
    const auto& u = perturb_.at(f.name).at(it->second);
    for (size_t i = 0; i < m.size(); ++i) m[i] += u[i];
  }
  row_softmax(m, rows, v_);
  return m;
}

bool BigramGenerator::is_heldout(const FeatureMap& ctx) const {
  for (const auto& f : spec_.features) {
    const auto it = ctx.find(f.name);
    if (it == ctx.end()) continue;
    for (int64_t h = f.n_values - f.held_out; h < f.n_values; ++h) {
      if (it->second == value_name(h)) return true;
    }
  }
  return false;
}

std::vector<int64_t> BigramGenerator::sample_sentence(const FeatureMap& ctx,
                                                      RngStream& rng) const {
  const std::vector<double> m = context_matrix(ctx);
  const double q = 1.0 - p_stop_;
  int64_t len;
  if (q <= 0.0) {
    len = 1;
  } else {
    const double u = rng.uniform01();
    len = 1 + static_cast<int64_t>(std::floor(std::log1p(-u) / std::log(q)));
    len = std::min(len, spec_.max_len);
  }
  std::vector<int64_t> words;
  words.reserve(static_cast<size_t>(len));
  int64_t state = v_;  // bos row
  for (int64_t i = 0; i < len; ++i) {
    const double u = rng.uniform01();
    const double* row = m.data() + state * v_;
    double acc = 0.0;
    int64_t w = v_ - 1;
    for (int64_t c = 0; c < v_; ++c) {
      acc += row[c];
      if (u < acc) {
        w = c;
        break;
      }
    }
    words.push_back(word_base_ + w);
    state = w;
  }
  return words;
}

double BigramGenerator::cross_entropy(const FeatureMap& data_ctx,
                                      const std::vector<double>& mm) const {
  const std::vector<double> mc = context_matrix(data_ctx);
  const double p = p_stop_, q = 1.0 - p;
  const int64_t cap = spec_.max_len;
  // First token from the bos row.
  double num = 0.0;
  std::vector<double> mass(static_cast<size_t>(v_));
  for (int64_t w = 0; w < v_; ++w) {
    const double pc = mc[static_cast<size_t>(v_ * v_ + w)];
    const double pm = mm[static_cast<size_t>(v_ * v_ + w)];
    num += pc * -std::log(pm);
    mass[static_cast<size_t>(w)] = pc;
  }
  const double stop_bits = (p > 0.0 ? p * -std::log(p) : 0.0) +
                           (q > 0.0 ? q * -std::log(q) : 0.0);
  std::vector<double> next(static_cast<size_t>(v_));
  for (int64_t i = 1; i < cap; ++i) {
    double alive = 0.0;
    for (const double x : mass) alive += x;
    num += alive * stop_bits;
    std::fill(next.begin(), next.end(), 0.0);
    for (int64_t r = 0; r < v_; ++r) {
      const double mr = mass[static_cast<size_t>(r)];
      if (mr == 0.0) continue;
      const double* crow = mc.data() + r * v_;
      const double* mrow = mm.data() + r * v_;
      for (int64_t w = 0; w < v_; ++w) {
        num += mr * q * crow[w] * -std::log(mrow[w]);
        next[static_cast<size_t>(w)] += q * mr * crow[w];
      }
    }
    mass.swap(next);
  }
  // Forced eos at the cap carries probability 1 under this process.
  double expected_targets = 1.0;  // the eos target
  double alive = 1.0;
  for (int64_t i = 1; i <= cap; ++i) {
    expected_targets += alive;
    alive *= q;
  }
  return num / expected_targets;
}

double BigramGenerator::entropy_rate(const FeatureMap& ctx) const {
  return cross_entropy(ctx, context_matrix(ctx));
}

double BigramGenerator::cross_entropy_vs_base(const FeatureMap& ctx) const {
  std::vector<double> base = base_;
  row_softmax(base, v_ + 1, v_);
  return cross_entropy(ctx, base);
}

std::pair<double, int64_t> BigramGenerator::true_nll(std::span<const int64_t> words,
                                                     const FeatureMap& ctx) const {
  const std::vector<double> m = context_matrix(ctx);
  const double p = p_stop_, q = 1.0 - p;
  double nll = 0.0;
  int64_t state = v_;
  for (size_t i = 0; i < words.size(); ++i) {
    const int64_t w = words[i] - word_base_;
    if (w < 0 || w >= v_) throw std::out_of_range("true_nll: token outside generator vocab");
    double pr = m[static_cast<size_t>(state * v_ + w)];
    if (i > 0) pr *= q;  // survived the stop decision
    nll += -std::log(pr);
    state = w;
  }
  if (static_cast<int64_t>(words.size()) < spec_.max_len) {
    nll += -std::log(p);
  }
  return {nll, static_cast<int64_t>(words.size()) + 1};
}

std::vector<double> BigramGenerator::visit_distribution(const FeatureMap& ctx) const {
  const std::vector<double> mc = context_matrix(ctx);
  const double q = 1.0 - p_stop_;
  std::vector<double> visits(static_cast<size_t>(v_), 0.0);
  std::vector<double> mass(static_cast<size_t>(v_));
  for (int64_t w = 0; w < v_; ++w) mass[static_cast<size_t>(w)] = mc[static_cast<size_t>(v_ * v_ + w)];
  std::vector<double> next(static_cast<size_t>(v_));
  for (int64_t i = 1; i <= spec_.max_len; ++i) {
    for (int64_t w = 0; w < v_; ++w) visits[static_cast<size_t>(w)] += mass[static_cast<size_t>(w)];
    if (i == spec_.max_len) break;
    std::fill(next.begin(), next.end(), 0.0);
    for (int64_t r = 0; r < v_; ++r) {
      const double mr = mass[static_cast<size_t>(r)];
      if (mr == 0.0) continue;
      const double* crow = mc.data() + r * v_;
      for (int64_t w = 0; w < v_; ++w) next[static_cast<size_t>(w)] += q * mr * crow[w];
    }
    mass.swap(next);
  }
  return visits;
}

// ---- synth_generate --------------------------------------------------------

SynthResult synth_generate(const SyntheticSpec& spec, uint64_t seed) {
  SynthResult out;
  out.generator = std::make_shared<BigramGenerator>(spec, seed);
  const BigramGenerator& gen = *out.generator;

  std::vector<std::string> words;
  for (int64_t w = 0; w < spec.vocab_words; ++w) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "w%03d", static_cast<int>(w));
    words.push_back(buf);
  }
  Corpus corpus;
  corpus.tokenizer = Tokenizer::from_word_list(words);

  FeatureSchema schema;
  schema.features.push_back({"corpus", {spec.corpus_name}, spec.feature_capacity});
  nlohmann::json held = nlohmann::json::object();
  for (const auto& f : spec.features) {
    FeatureSchema::Feature sf;
    sf.name = f.name;
    sf.capacity = spec.feature_capacity;
    schema.features.push_back(std::move(sf));
    held[f.name] = nlohmann::json::array();
  }
  // Seen values register in the schema; held-out values stay out so they
  // resolve to the star token at evaluation.
  for (size_t fi = 0; fi < spec.features.size(); ++fi) {
    const auto& f = spec.features[fi];
    for (int64_t a = 0; a < f.n_values; ++a) {
      const std::string v = value_name(a);
      if (a < f.n_values - f.held_out) {
        schema.register_value(static_cast<int64_t>(fi) + 1, v);
      } else {
        held[f.name].push_back(v);
      }
    }
  }
  corpus.schema = schema;
  corpus.tokenizer.reserve_context_tokens(schema);

  const int64_t heldout_n =
      spec.heldout_sentences > 0 ? spec.heldout_sentences
                                 : std::max<int64_t>(1, spec.sentences_per_context / 10);
  RngStream data_rng(seed, "synth/data");
  for (const auto& ctx : gen.contexts()) {
    const bool ho = gen.is_heldout(ctx);
    const int64_t count = ho ? heldout_n : spec.sentences_per_context;
    for (int64_t s = 0; s < count; ++s) {
      Example ex;
      ex.tokens = gen.sample_sentence(ctx, data_rng);
      ex.features = ctx;
      corpus.examples.push_back(std::move(ex));
    }
    OracleRow row;
    row.context = ctx;
    row.entropy = gen.entropy_rate(ctx);
    row.base_ce = gen.cross_entropy_vs_base(ctx);
    row.heldout = ho;
    out.oracle.push_back(std::move(row));
  }

  corpus.provenance = {{"kind", "synthetic"},
                       {"seed", seed},
                       {"spec", spec},
                       {"held_out", held}};
  out.corpus = std::move(corpus);
  return out;
}

std::string oracle_csv(const std::vector<OracleRow>& rows) {
  std::string csv = "context,entropy_nats_per_token,base_ce_nats_per_token,heldout\n";
  for (const auto& r : rows) {
    std::string ctx;
    for (const auto& [k, v] : r.context) {
      if (!ctx.empty()) ctx += ';';
      ctx += k + "=" + v;
    }
    csv += ctx + "," + nlohmann::json(r.entropy).dump() + "," +
           nlohmann::json(r.base_ce).dump() + "," + (r.heldout ? "1" : "0") + "\n";
  }
  return csv;
}

// ---- ingestion -------------------------------------------------------------

Corpus ingest_jsonl(const std::filesystem::path& path, const IngestOptions& opts) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());

  struct Raw {
    std::optional<std::string> text;
    std::vector<int64_t> tokens;
    FeatureMap features;
  };
  std::vector<Raw> raws;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("malformed JSONL at line " + std::to_string(line_no) + ": " +
                               e.what());
    }
    Raw raw;
    if (rec.contains("text") && rec.at("text").is_string()) {
      raw.text = rec.at("text").get<std::string>();
    } else if (rec.contains("tokens") && rec.at("tokens").is_array()) {
      raw.tokens = rec.at("tokens").get<std::vector<int64_t>>();
    } else {
      throw std::runtime_error("malformed JSONL at line " + std::to_string(line_no) +
                               ": record needs a 'text' string or 'tokens' list");
    }
    if (rec.contains("features")) {
      for (const auto& [k, v] : rec.at("features").items()) {
        raw.features[k] = v.is_string() ? v.get<std::string>() : v.dump();
      }
    }
    for (const auto& fname : opts.feature_names) {
      if (!raw.features.count(fname)) {
        if (opts.missing == IngestOptions::MissingFeature::error) {
          throw std::runtime_error("line " + std::to_string(line_no) + ": missing feature '" +
                                   fname + "'");
        }
        // star policy: leave absent; encode_context resolves it to the star id
      }
    }
    raws.push_back(std::move(raw));
  }

  Corpus corpus;
  std::vector<std::string> texts;
  for (const auto& r : raws) {
    if (r.text) texts.push_back(*r.text);
  }
  corpus.tokenizer = Tokenizer::build(texts, opts.max_vocab, opts.min_freq);

  if (opts.schema) {
    corpus.schema = *opts.schema;
  } else {
    corpus.schema.features.push_back({"corpus", {opts.corpus_name}, opts.feature_capacity});
    for (const auto& fname : opts.feature_names) {
      corpus.schema.features.push_back({fname, {}, opts.feature_capacity});
    }
    for (const auto& r : raws) {
      for (size_t fi = 0; fi < opts.feature_names.size(); ++fi) {
        const auto it = r.features.find(opts.feature_names[fi]);
        if (it == r.features.end()) continue;
        const auto ho = opts.held_out.find(opts.feature_names[fi]);
        if (ho != opts.held_out.end() && ho->second.count(it->second)) continue;
        corpus.schema.register_value(static_cast<int64_t>(fi) + 1, it->second);
      }
    }
  }
  corpus.tokenizer.reserve_context_tokens(corpus.schema);

  for (auto& r : raws) {
    Example ex;
    ex.tokens = r.text ? corpus.tokenizer.tokenize(*r.text) : std::move(r.tokens);
    ex.features = std::move(r.features);
    ex.features["corpus"] = opts.corpus_name;
    corpus.examples.push_back(std::move(ex));
  }
  corpus.provenance = {{"kind", "jsonl"}, {"path", path.string()}};
  nlohmann::json held = nlohmann::json::object();
  for (const auto& [f, vals] : opts.held_out) held[f] = vals;
  corpus.provenance["held_out"] = held;
  if (corpus.examples.empty()) {
    corpus.provenance["warning"] = "empty corpus";
    std::fprintf(stderr, "warning: ingested empty corpus from %s\n", path.string().c_str());
  }
  return corpus;
}

// ---- corpus io -------------------------------------------------------------

void Corpus::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::string jsonl;
  for (const auto& ex : examples) {
    nlohmann::json rec{{"tokens", ex.tokens}, {"features", ex.features}};
    jsonl += rec.dump();
    jsonl += '\n';
  }
  atomic_write_file(dir / "corpus.jsonl", jsonl);
  atomic_write_file(dir / "tokenizer.json", nlohmann::json(tokenizer).dump(2) + "\n");
  atomic_write_file(dir / "schema.json", nlohmann::json(schema).dump(2) + "\n");
  atomic_write_file(dir / "meta.json", provenance.dump(2) + "\n");
}

Corpus Corpus::load(const std::filesystem::path& dir) {
  Corpus corpus;
  {
    std::ifstream in(dir / "tokenizer.json");
    if (!in) throw std::runtime_error("missing tokenizer.json in " + dir.string());
    corpus.tokenizer = nlohmann::json::parse(in).get<Tokenizer>();
  }
  {
    std::ifstream in(dir / "schema.json");
    if (!in) throw std::runtime_error("missing schema.json in " + dir.string());
    corpus.schema = nlohmann::json::parse(in).get<FeatureSchema>();
  }
  {
    std::ifstream in(dir / "meta.json");
    if (in) corpus.provenance = nlohmann::json::parse(in);
  }
  std::ifstream in(dir / "corpus.jsonl");
  if (!in) throw std::runtime_error("missing corpus.jsonl in " + dir.string());
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("malformed corpus.jsonl at line " + std::to_string(line_no) +
                               ": " + e.what());
    }
    Example ex;
    ex.tokens = rec.at("tokens").get<std::vector<int64_t>>();
    for (const auto& [k, v] : rec.at("features").items()) ex.features[k] = v.get<std::string>();
    corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

// ---- splits ----------------------------------------------------------------

void to_json(nlohmann::json& j, const SplitSpec& s) {
  j = nlohmann::json{{"train", s.train}, {"val", s.val}, {"test", s.test}};
  nlohmann::json held = nlohmann::json::object();
  for (const auto& [f, vals] : s.held_out) held[f] = vals;
  j["held_out"] = held;
}

void from_json(const nlohmann::json& j, SplitSpec& s) {
  s.train = j.value("train", s.train);
  s.val = j.value("val", s.val);
  s.test = j.value("test", s.test);
  if (j.contains("held_out")) {
    for (const auto& [f, vals] : j.at("held_out").items()) {
      s.held_out[f] = vals.get<std::set<std::string>>();
    }
  }
}

Splits split(const Corpus& corpus, const SplitSpec& spec, uint64_t seed) {
  if (std::fabs(spec.train + spec.val + spec.test - 1.0) > 1e-9) {
    throw std::invalid_argument("split ratios must sum to 1");
  }
  // Every held-out value must occur somewhere.
  for (const auto& [fname, vals] : spec.held_out) {
    for (const auto& v : vals) {
      bool found = false;
      for (const auto& ex : corpus.examples) {
        const auto it = ex.features.find(fname);
        if (it != ex.features.end() && it->second == v) {
          found = true;
          break;
        }
      }
      if (!found) {
        throw std::runtime_error("held-out value '" + v + "' of feature '" + fname +
                                 "' absent from corpus");
      }
    }
  }

  auto is_unseen = [&](const Example& ex) {
    for (const auto& [fname, value] : ex.features) {
      const auto ho = spec.held_out.find(fname);
      if (ho != spec.held_out.end() && ho->second.count(value)) return true;
      const int64_t fi = corpus.schema.feature_index(fname);
      if (fi >= 0 && !corpus.schema.value_id(fi, value)) return true;  // out of schema
    }
    return false;
  };

  Splits out;
  std::vector<int64_t> eligible;
  for (size_t i = 0; i < corpus.examples.size(); ++i) {
    if (is_unseen(corpus.examples[i])) {
      out.test_unseen.push_back(static_cast<int64_t>(i));
    } else {
      eligible.push_back(static_cast<int64_t>(i));
    }
  }
  RngStream rng(seed, "split");
  rng.shuffle(eligible);

  const int64_t n = static_cast<int64_t>(eligible.size());
  const double ratios[3] = {spec.train, spec.val, spec.test};
  int64_t counts[3];
  double rema[3];
  int64_t assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = ratios[k] * static_cast<double>(n);
    counts[k] = static_cast<int64_t>(std::floor(exact));
    rema[k] = exact - std::floor(exact);
    assigned += counts[k];
  }
  // Largest remainder; ties resolve in partition order (train, val, test).
  while (assigned < n) {
    int best = 0;
    for (int k = 1; k < 3; ++k) {
      if (rema[k] > rema[best]) best = k;
    }
    ++counts[best];
    rema[best] = -1.0;
    ++assigned;
  }
  int64_t pos = 0;
  for (int64_t i = 0; i < counts[0]; ++i) out.train.push_back(eligible[static_cast<size_t>(pos++)]);
  for (int64_t i = 0; i < counts[1]; ++i) out.val.push_back(eligible[static_cast<size_t>(pos++)]);
  for (int64_t i = 0; i < counts[2]; ++i) out.test_seen.push_back(eligible[static_cast<size_t>(pos++)]);
  return out;
}

SplitSpec split_spec_for(const Corpus& corpus, double train, double val, double test) {
  SplitSpec spec;
  spec.train = train;
  spec.val = val;
  spec.test = test;
  if (corpus.provenance.contains("held_out")) {
    for (const auto& [f, vals] : corpus.provenance.at("held_out").items()) {
      for (const auto& v : vals) spec.held_out[f].insert(v.get<std::string>());
    }
  }
  return spec;
}

}  // namespace met
