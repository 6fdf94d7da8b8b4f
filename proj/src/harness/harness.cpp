#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "met/harness.hpp"

namespace met {

namespace {

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (const char c : s) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

LoadedCheckpoint to_loaded(const LmModel& model) {
  LoadedCheckpoint lc;
  lc.meta.nonlinearity = model.cfg.nonlinearity;
  lc.meta.extra["lm_config"] = model.cfg;
  for (const auto& [name, t] : model.named_params()) {
    lc.tensors.emplace(name, *t);
    lc.storage[name] = Dtype::f64;
  }
  return lc;
}

const std::string& schema_corpus_name(const FeatureSchema& schema) {
  return schema.features.at(0).values.at(0);
}

}  // namespace

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{
      {"name", c.name},
      {"corpus",
       {{"kind", c.corpus_kind},
        {"synthetic", c.synth},
        {"jsonl",
         {{"path", c.jsonl_path},
          {"features", c.jsonl_features},
          {"held_out", c.jsonl_held_out},
          {"max_vocab", c.max_vocab},
          {"min_freq", c.min_freq}}}}},
      {"split", {{"train", c.train_ratio}, {"val", c.val_ratio}, {"test", c.test_ratio}}},
      {"lm", c.lm},
      {"prefix", c.prefix},
      {"met", c.met},
      {"optim", c.optim},
      {"budget", c.budget},
      {"pretrain_budget", c.pretrain_budget},
      {"strategies", c.strategies},
      {"seeds", c.seeds},
      {"eval_workers", c.eval_workers}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c.name = j.value("name", c.name);
  if (j.contains("corpus")) {
    const auto& jc = j.at("corpus");
    c.corpus_kind = jc.value("kind", c.corpus_kind);
    if (jc.contains("synthetic")) c.synth = jc.at("synthetic").get<SyntheticSpec>();
    if (jc.contains("jsonl")) {
      const auto& jj = jc.at("jsonl");
      c.jsonl_path = jj.value("path", c.jsonl_path);
      c.jsonl_features = jj.value("features", c.jsonl_features);
      c.jsonl_held_out = jj.value("held_out", c.jsonl_held_out);
      c.max_vocab = jj.value("max_vocab", c.max_vocab);
      c.min_freq = jj.value("min_freq", c.min_freq);
    }
  }
  if (j.contains("split")) {
    const auto& js = j.at("split");
    c.train_ratio = js.value("train", c.train_ratio);
    c.val_ratio = js.value("val", c.val_ratio);
    c.test_ratio = js.value("test", c.test_ratio);
  }
  if (j.contains("lm")) c.lm = j.at("lm").get<LmConfig>();
  if (j.contains("prefix")) c.prefix = j.at("prefix").get<PrefixConfig>();
  if (j.contains("met")) c.met = j.at("met").get<MetHyperparams>();
  if (j.contains("optim")) c.optim = j.at("optim").get<OptimConfig>();
  if (j.contains("budget")) c.budget = j.at("budget").get<TrainBudget>();
  if (j.contains("pretrain_budget")) c.pretrain_budget = j.at("pretrain_budget").get<TrainBudget>();
  c.strategies = j.value("strategies", c.strategies);
  c.seeds = j.value("seeds", c.seeds);
  c.eval_workers = j.value("eval_workers", c.eval_workers);
}

ExperimentConfig ExperimentConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("invalid config JSON in " + path.string() + ": " + e.what());
  }
  ExperimentConfig c = j.get<ExperimentConfig>();
  c.validate();
  return c;
}

std::string ExperimentConfig::hash() const {
  return hex64(fnv1a(nlohmann::json(*this).dump()));
}

void ExperimentConfig::validate() const {
  if (corpus_kind != "synthetic" && corpus_kind != "jsonl") {
    throw std::invalid_argument("corpus kind must be 'synthetic' or 'jsonl'");
  }
  if (std::fabs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9) {
    throw std::invalid_argument("split ratios must sum to 1");
  }
  lm.validate();
  met.validate();
  if (strategies.empty()) throw std::invalid_argument("no strategies configured");
  for (const auto& s : strategies) strategy_from_name(s);
  if (seeds.empty()) throw std::invalid_argument("no seeds configured");
}

SeedEnv prepare_seed_env(const ExperimentConfig& config, uint64_t seed,
                         const std::filesystem::path& cache_dir) {
  config.validate();
  SeedEnv env;
  env.seed = seed;
  SplitSpec split_spec;
  if (config.corpus_kind == "synthetic") {
    SynthResult sr = synth_generate(config.synth, seed);
    env.corpus = std::move(sr.corpus);
    env.oracle = std::move(sr.oracle);
    env.generator = std::move(sr.generator);
    split_spec = split_spec_for(env.corpus, config.train_ratio, config.val_ratio,
                                config.test_ratio);
  } else {
    IngestOptions opts;
    opts.feature_names = config.jsonl_features;
    opts.max_vocab = config.max_vocab;
    opts.min_freq = config.min_freq;
    for (const auto& [f, vals] : config.jsonl_held_out) {
      opts.held_out[f] = std::set<std::string>(vals.begin(), vals.end());
    }
    env.corpus = ingest_jsonl(config.jsonl_path, opts);
    split_spec = split_spec_for(env.corpus, config.train_ratio, config.val_ratio,
                                config.test_ratio);
    for (const auto& [f, vals] : config.jsonl_held_out) {
      split_spec.held_out[f].insert(vals.begin(), vals.end());
    }
  }
  env.splits = split(env.corpus, split_spec, seed);

  env.lm = config.lm;
  env.lm.vocab_size = env.corpus.tokenizer.size();
  int64_t max_words = 0;
  for (const auto& ex : env.corpus.examples) {
    max_words = std::max<int64_t>(max_words, static_cast<int64_t>(ex.tokens.size()));
  }
  const int64_t needed = max_words + 1 + std::max<int64_t>(env.corpus.schema.slots(),
                                                           2 * env.corpus.schema.slots());
  if (needed > env.lm.max_seq) {
    throw std::invalid_argument("max_seq " + std::to_string(env.lm.max_seq) +
                                " too small for sentences of " + std::to_string(max_words) +
                                " words plus context (" + std::to_string(needed) + " needed)");
  }

  const std::filesystem::path ckpt_path =
      cache_dir.empty() ? std::filesystem::path{} : cache_dir / "backbone.ckpt";
  if (!ckpt_path.empty() && std::filesystem::exists(ckpt_path)) {
    LoadedCheckpoint cached = load_checkpoint(ckpt_path);
    if (cached.meta.extra.value("config_hash", "") == config.hash()) {
      env.backbone = std::move(cached);
      env.pretrain_val_nll = env.backbone.meta.extra.value("pretrain_val_nll", 0.0);
      return env;
    }
  }

  LmModel model = [&] {
    RngStream init(seed, "init/backbone");
    return LmModel::init(env.lm, init);
  }();
  std::vector<std::vector<int64_t>> train_sentences, val_sentences;
  for (const int64_t i : env.splits.train) {
    train_sentences.push_back(env.corpus.examples[static_cast<size_t>(i)].tokens);
  }
  for (const int64_t i : env.splits.val) {
    val_sentences.push_back(env.corpus.examples[static_cast<size_t>(i)].tokens);
  }
  RngStream order(seed, "order/backbone");
  const PretrainResult pr = pretrain_backbone(model, train_sentences, val_sentences,
                                              env.corpus.tokenizer.specials, config.optim,
                                              config.pretrain_budget, order);
  env.pretrain_val_nll = pr.final_val_nll;
  env.backbone = to_loaded(model);
  env.backbone.meta.extra["config_hash"] = config.hash();
  env.backbone.meta.extra["seed"] = seed;
  env.backbone.meta.extra["pretrain_val_nll"] = pr.final_val_nll;
  env.backbone.meta.extra["pretrain_steps"] = pr.loop.steps;
  if (!ckpt_path.empty()) {
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    for (const auto& [name, t] : model.named_params()) tensors.emplace_back(name, t);
    CheckpointMeta meta;
    meta.nonlinearity = model.cfg.nonlinearity;
    meta.extra = env.backbone.meta.extra;
    std::filesystem::create_directories(cache_dir);
    save_checkpoint(ckpt_path, tensors, meta);
  }
  return env;
}

Strategy train_strategy(const ExperimentConfig& config, const SeedEnv& env, StrategyKind kind,
                        RunReport* report, const std::vector<int64_t>* train_indices_override) {
  const std::string name = strategy_name(kind);
  StrategyConfig scfg{config.prefix, config.met, config.optim};
  RngStream init(env.seed, "init/" + name);
  Strategy strategy =
      Strategy::make(kind, env.backbone, env.corpus.schema, env.corpus.tokenizer, scfg, init);

  const std::vector<int64_t>& train_idx =
      train_indices_override ? *train_indices_override : env.splits.train;
  const std::vector<int64_t>& val_idx = env.splits.val;

  auto run_unit = [&](const std::string& value, const std::vector<int64_t>& unit_train,
                      const std::vector<int64_t>& unit_val) -> TrainResult {
    StrategyTrainer trainer(strategy, config.optim, value);
    RngStream dropout(env.seed, "dropout/" + name + (value.empty() ? "" : "/" + value));
    RngStream order(env.seed, "order/" + name + (value.empty() ? "" : "/" + value));
    auto step_fn = [&](std::span<const int64_t> batch_pos) {
      std::vector<const Example*> batch;
      batch.reserve(batch_pos.size());
      for (const int64_t pos : batch_pos) {
        batch.push_back(&env.corpus.examples[static_cast<size_t>(
            unit_train[static_cast<size_t>(pos)])]);
      }
      return trainer.step(batch, dropout);
    };
    const std::vector<int64_t>& val_for_unit = unit_val.empty() ? unit_train : unit_val;
    auto val_fn = [&]() { return eval_mean_nll(strategy, env.corpus, val_for_unit); };
    auto snap = [&]() { trainer.snapshot(); };
    auto restore = [&]() { trainer.restore(); };
    try {
      return run_train_loop(static_cast<int64_t>(unit_train.size()), config.optim.batch_size,
                            config.budget, order, step_fn, val_fn, snap, restore);
    } catch (const TrainingDiverged&) {
      // Roll back to the last good snapshot before propagating.
      trainer.restore();
      throw;
    }
  };

  int64_t steps = 0;
  if (kind == StrategyKind::finetune_no_pool) {
    const std::string& primary = strategy.primary_feature();
    for (const auto& value : strategy.schema.features[1].values) {
      std::vector<int64_t> unit_train, unit_val;
      for (const int64_t i : train_idx) {
        const auto it = env.corpus.examples[static_cast<size_t>(i)].features.find(primary);
        if (it != env.corpus.examples[static_cast<size_t>(i)].features.end() &&
            it->second == value) {
          unit_train.push_back(i);
        }
      }
      for (const int64_t i : val_idx) {
        const auto it = env.corpus.examples[static_cast<size_t>(i)].features.find(primary);
        if (it != env.corpus.examples[static_cast<size_t>(i)].features.end() &&
            it->second == value) {
          unit_val.push_back(i);
        }
      }
      if (unit_train.empty()) continue;
      steps += run_unit(value, unit_train, unit_val).steps;
    }
  } else {
    const TrainResult tr = run_unit("", train_idx, val_idx);
    steps = tr.steps;
  }

  if (report) {
    report->train_steps = steps;
    report->best_val = val_idx.empty() ? eval_mean_nll(strategy, env.corpus, train_idx)
                                       : eval_mean_nll(strategy, env.corpus, val_idx);
    report->pretrain_val_nll = env.pretrain_val_nll;
    report->note = strategy.unseen_fallback_note();
  }
  return strategy;
}

void save_strategy(const Strategy& strategy, const std::filesystem::path& path,
                   const nlohmann::json& train_meta) {
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  if (strategy.uses_prefix()) {
    for (const auto& [name, t] : strategy.prefix->named_params()) tensors.emplace_back(name, t);
  } else if (strategy.kind == StrategyKind::finetune_no_pool) {
    for (const auto& [value, model] : strategy.per_value) {
      for (const auto& [name, t] : model.named_params()) {
        tensors.emplace_back("value/" + value + "/" + name, t);
      }
    }
  } else {
    for (const auto& [name, t] : strategy.backbone.named_params()) {
      tensors.emplace_back("model/" + name, t);
    }
  }
  CheckpointMeta meta;
  meta.nonlinearity = strategy.backbone.cfg.nonlinearity;
  meta.extra["strategy"] = strategy_name(strategy.kind);
  meta.extra["schema"] = strategy.schema;
  meta.extra["train"] = train_meta;
  save_checkpoint(path, tensors, meta);
}

nlohmann::json load_strategy_params(Strategy& strategy, const std::filesystem::path& path) {
  const LoadedCheckpoint ckpt = load_checkpoint(path);
  if (ckpt.meta.extra.value("strategy", "") != strategy_name(strategy.kind)) {
    throw std::runtime_error("checkpoint " + path.string() + " holds strategy '" +
                             ckpt.meta.extra.value("strategy", "") + "', expected '" +
                             strategy_name(strategy.kind) + "'");
  }
  auto copy_into = [&](const std::string& key, Tensor* t) {
    const auto it = ckpt.tensors.find(key);
    if (it == ckpt.tensors.end()) throw std::runtime_error("checkpoint missing tensor " + key);
    if (!t->same_shape(it->second)) throw ShapeError("checkpoint tensor shape mismatch at " + key);
    const bool rg = t->requires_grad;
    *t = it->second;
    t->requires_grad = rg;
  };
  if (strategy.uses_prefix()) {
    for (auto& [name, t] : strategy.prefix->named_params()) copy_into(name, t);
  } else if (strategy.kind == StrategyKind::finetune_no_pool) {
    for (auto& [value, model] : strategy.per_value) {
      for (auto& [name, t] : model.named_params()) copy_into("value/" + value + "/" + name, t);
    }
  } else {
    for (auto& [name, t] : strategy.backbone.named_params()) copy_into("model/" + name, t);
  }
  return ckpt.meta.extra.value("train", nlohmann::json::object());
}

namespace {

void persist_experiment(const ExperimentResult& result, const std::filesystem::path& out_dir,
                        const nlohmann::json& run_log) {
  std::filesystem::create_directories(out_dir);
  atomic_write_file(out_dir / "metrics.json", result.metrics_json().dump(2) + "\n");
  atomic_write_file(out_dir / "results.csv", result.results_csv());
  atomic_write_file(out_dir / "run_log.json", run_log.dump(2) + "\n");
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config,
                                const std::filesystem::path& out_dir) {
  config.validate();
  ExperimentResult result;
  result.config = config;
  nlohmann::json run_log = nlohmann::json::array();
  for (const uint64_t seed : config.seeds) {
    const std::filesystem::path seed_dir = out_dir / ("seed_" + std::to_string(seed));
    SeedEnv env = prepare_seed_env(config, seed, seed_dir);
    for (const auto& name : config.strategies) {
      RunReport r;
      r.seed = seed;
      r.strategy = name;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        const StrategyKind kind = strategy_from_name(name);
        Strategy strategy = train_strategy(config, env, kind, &r);
        nlohmann::json tmeta{{"train_steps", r.train_steps},
                             {"best_val", r.best_val},
                             {"pretrain_val_nll", r.pretrain_val_nll}};
        save_strategy(strategy, seed_dir / (name + ".ckpt"), tmeta);
        r.seen = evaluate_partition(strategy, env.corpus, env.splits.test_seen,
                                    config.eval_workers, &env.oracle);
        r.unseen = evaluate_partition(strategy, env.corpus, env.splits.test_unseen,
                                      config.eval_workers, &env.oracle);
      } catch (const std::exception& e) {
        r.error = e.what();
      }
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      run_log.push_back({{"seed", seed}, {"strategy", name}, {"seconds", secs}});
      result.runs.push_back(std::move(r));
    }
  }
  persist_experiment(result, out_dir, run_log);
  return result;
}

ExperimentResult evaluate_experiment(const ExperimentConfig& config,
                                     const std::filesystem::path& out_dir) {
  config.validate();
  ExperimentResult result;
  result.config = config;
  nlohmann::json run_log = nlohmann::json::array();
  for (const uint64_t seed : config.seeds) {
    const std::filesystem::path seed_dir = out_dir / ("seed_" + std::to_string(seed));
    SeedEnv env = prepare_seed_env(config, seed, seed_dir);
    for (const auto& name : config.strategies) {
      RunReport r;
      r.seed = seed;
      r.strategy = name;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        const StrategyKind kind = strategy_from_name(name);
        StrategyConfig scfg{config.prefix, config.met, config.optim};
        RngStream init(seed, "init/" + name);
        Strategy strategy = Strategy::make(kind, env.backbone, env.corpus.schema,
                                           env.corpus.tokenizer, scfg, init);
        const nlohmann::json tmeta = load_strategy_params(strategy, seed_dir / (name + ".ckpt"));
        r.train_steps = tmeta.value("train_steps", int64_t{0});
        r.best_val = tmeta.value("best_val", 0.0);
        r.pretrain_val_nll = tmeta.value("pretrain_val_nll", 0.0);
        r.note = strategy.unseen_fallback_note();
        r.seen = evaluate_partition(strategy, env.corpus, env.splits.test_seen,
                                    config.eval_workers, &env.oracle);
        r.unseen = evaluate_partition(strategy, env.corpus, env.splits.test_unseen,
                                      config.eval_workers, &env.oracle);
      } catch (const std::exception& e) {
        r.error = e.what();
      }
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      run_log.push_back({{"seed", seed}, {"strategy", name}, {"seconds", secs}});
      result.runs.push_back(std::move(r));
    }
  }
  persist_experiment(result, out_dir, run_log);
  return result;
}

SweepResult data_efficiency_sweep(const ExperimentConfig& config,
                                  const std::vector<int64_t>& sizes,
                                  const std::filesystem::path& out_dir) {
  if (sizes.empty()) throw std::invalid_argument("sweep needs at least one size");
  if (!std::is_sorted(sizes.begin(), sizes.end())) {
    throw std::invalid_argument("sweep sizes must be ascending");
  }
  SweepResult sweep;
  sweep.sizes = sizes;
  for (const uint64_t seed : config.seeds) {
    const std::filesystem::path seed_dir = out_dir / ("seed_" + std::to_string(seed));
    // Backbone comes from the full training pool and stays fixed across
    // sizes; only the adaptation data varies.
    SeedEnv env = prepare_seed_env(config, seed, seed_dir);
    std::map<std::string, std::vector<int64_t>> per_context;
    for (const int64_t i : env.splits.train) {
      per_context[feature_map_key(env.corpus.examples[static_cast<size_t>(i)].features)]
          .push_back(i);
    }
    for (const auto& [key, idx] : per_context) {
      if (static_cast<int64_t>(idx.size()) < sizes.back()) {
        throw std::runtime_error("sweep size " + std::to_string(sizes.back()) +
                                 " exceeds the " + std::to_string(idx.size()) +
                                 " training sentences available for context " + key);
      }
    }
    for (const int64_t size : sizes) {
      std::vector<int64_t> sub;
      for (const auto& [key, idx] : per_context) {
        sub.insert(sub.end(), idx.begin(), idx.begin() + size);
      }
      for (const auto& name : config.strategies) {
        RunReport rr;
        Strategy strategy =
            train_strategy(config, env, strategy_from_name(name), &rr, &sub);
        const PartitionReport seen = evaluate_partition(
            strategy, env.corpus, env.splits.test_seen, config.eval_workers, &env.oracle);
        const PartitionReport unseen = evaluate_partition(
            strategy, env.corpus, env.splits.test_unseen, config.eval_workers, &env.oracle);
        sweep.points.push_back({size, seed, name, seen.logppl, unseen.logppl});
      }
    }
  }
  std::filesystem::create_directories(out_dir);
  atomic_write_file(out_dir / "curve.csv", sweep.curve_csv());
  atomic_write_file(out_dir / "sweep.json", sweep.to_json().dump(2) + "\n");
  std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> series;
  for (const auto& name : config.strategies) {
    std::vector<std::pair<double, double>> pts;
    for (const int64_t size : sizes) {
      pts.emplace_back(std::log2(static_cast<double>(size)), sweep.median_seen(size, name));
    }
    series.emplace_back(name, std::move(pts));
  }
  atomic_write_file(out_dir / "plot.svg",
                    plot_svg("data efficiency (test-seen)", "log2(sentences per context)",
                             "log perplexity (nats/token)", series));
  return sweep;
}

MultiFeatureResult multi_feature_compare(const ExperimentConfig& config,
                                         const std::filesystem::path& out_dir) {
  if (config.corpus_kind == "synthetic" && config.synth.features.size() < 2) {
    throw std::invalid_argument("multi-feature comparison needs a 2-feature schema");
  }
  if (config.corpus_kind == "jsonl" && config.jsonl_features.size() < 2) {
    throw std::invalid_argument("multi-feature comparison needs a 2-feature schema");
  }
  MultiFeatureResult result;
  for (const uint64_t seed : config.seeds) {
    const std::filesystem::path seed_dir = out_dir / ("seed_" + std::to_string(seed));
    SeedEnv env = prepare_seed_env(config, seed, seed_dir);
    const std::set<std::string> primary_only{env.corpus.schema.features[0].name,
                                             env.corpus.schema.features[1].name};
    for (const auto& name : config.strategies) {
      MultiFeatureRun run;
      run.seed = seed;
      run.strategy = name;
      RunReport rr;
      Strategy strategy = train_strategy(config, env, strategy_from_name(name), &rr);
      run.single_feature = evaluate_partition(strategy, env.corpus, env.splits.test_seen,
                                              config.eval_workers, &env.oracle, &primary_only);
      run.multi_feature = evaluate_partition(strategy, env.corpus, env.splits.test_seen,
                                             config.eval_workers, &env.oracle);
      for (size_t i = 0; i < run.single_feature.contexts.size(); ++i) {
        const auto& sc = run.single_feature.contexts[i];
        const auto& mc = run.multi_feature.contexts[i];
        run.context_deltas.emplace_back(sc.context, sc.logppl - mc.logppl);
      }
      result.runs.push_back(std::move(run));
    }
  }
  std::filesystem::create_directories(out_dir);
  atomic_write_file(out_dir / "multifeat.json", result.to_json().dump(2) + "\n");
  return result;
}

std::vector<DistinctiveRow> distinctive_utterances(const Strategy& strategy,
                                                   const Corpus& corpus,
                                                   std::span<const int64_t> indices,
                                                   const std::string& feature,
                                                   const std::string& value, int64_t k) {
  const int64_t fi = corpus.schema.feature_index(feature);
  if (fi < 0) throw std::invalid_argument("unknown feature '" + feature + "'");
  const auto& values = corpus.schema.features[static_cast<size_t>(fi)].values;
  if (std::find(values.begin(), values.end(), value) == values.end()) {
    throw std::invalid_argument("unknown value '" + value + "' for feature '" + feature + "'");
  }

  std::vector<FeatureMap> contexts;
  std::vector<PrefixActivations> prefixes;
  for (const auto& v : values) {
    FeatureMap ctx{{"corpus", schema_corpus_name(corpus.schema)}, {feature, v}};
    contexts.push_back(ctx);
    if (strategy.uses_prefix()) {
      prefixes.push_back(strategy.activations_for(strategy.eval_key(ctx)));
    }
  }
  const size_t target = static_cast<size_t>(
      std::find(values.begin(), values.end(), value) - values.begin());

  std::vector<DistinctiveRow> rows;
  for (const int64_t idx : indices) {
    const Example& ex = corpus.examples[static_cast<size_t>(idx)];
    std::vector<double> nll(values.size());
    for (size_t vi = 0; vi < values.size(); ++vi) {
      const SentenceScore s = strategy.score(
          contexts[vi], ex.tokens, strategy.uses_prefix() ? &prefixes[vi] : nullptr);
      nll[vi] = s.nll_sum / static_cast<double>(s.tokens);
    }
    double others = 0.0;
    for (size_t vi = 0; vi < values.size(); ++vi) {
      if (vi != target) others += nll[vi];
    }
    others /= static_cast<double>(values.size() - 1);
    DistinctiveRow row;
    row.example_index = idx;
    row.score = others - nll[target];
    row.nll_value = nll[target];
    row.text = corpus.tokenizer.detokenize(ex.tokens);
    rows.push_back(std::move(row));
  }
  // Ties keep corpus order (stable sort over descending score).
  std::stable_sort(rows.begin(), rows.end(),
                   [](const DistinctiveRow& a, const DistinctiveRow& b) { return a.score > b.score; });
  if (k >= 0 && static_cast<size_t>(k) < rows.size()) rows.resize(static_cast<size_t>(k));
  return rows;
}

std::vector<GenerationRecord> prompted_generation(const Strategy& strategy,
                                                  const Tokenizer& tokenizer,
                                                  const FeatureMap& context,
                                                  const std::string& prompt, int64_t n,
                                                  const GenerateOptions& opts, uint64_t seed,
                                                  int64_t max_new) {
  std::vector<int64_t> prompt_ids = tokenizer.tokenize(prompt);
  bool had_unknown = false;
  for (const int64_t id : prompt_ids) {
    if (id == tokenizer.specials.unk) had_unknown = true;
  }
  if (had_unknown) {
    std::fprintf(stderr, "warning: prompt contains out-of-vocabulary words; using <unk>\n");
  }
  PrefixActivations prefix;
  const PrefixActivations* pa = nullptr;
  if (strategy.uses_prefix()) {
    prefix = strategy.activations_for(strategy.eval_key(context));
    pa = &prefix;
  }
  const std::vector<int64_t> input = strategy.rendered_input(context, prompt_ids);
  GenerateOptions go = opts;
  go.stop_token = tokenizer.specials.eos;
  RngStream rng(seed, "generate");
  std::vector<GenerationRecord> records;
  for (int64_t i = 0; i < n; ++i) {
    const std::vector<int64_t> seq =
        met::generate(strategy.model_for(context), pa, input, max_new, go, &rng);
    GenerationRecord rec;
    rec.context = context;
    rec.prompt = prompt;
    rec.tokens = seq;
    rec.prompt_had_unknown = had_unknown;
    std::vector<int64_t> words;
    for (size_t j = input.size() - prompt_ids.size(); j < seq.size(); ++j) {
      if (seq[j] != tokenizer.specials.eos && seq[j] != tokenizer.specials.bos) {
        words.push_back(seq[j]);
      }
    }
    rec.text = tokenizer.detokenize(words);
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<PrefixExportRow> export_prefix_embeddings(const Strategy& strategy) {
  if (!strategy.uses_prefix()) {
    throw std::invalid_argument("strategy '" + strategy_name(strategy.kind) +
                                "' has no prefix parameters to export");
  }
  const PrefixParams& params = *strategy.prefix;
  const FeatureSchema& schema = strategy.schema;
  std::map<std::string, std::map<std::string, double>> dist;
  for (const auto& d : prefix_distance_report(params, schema, strategy.backbone.cfg)) {
    dist[d.feature][d.value] = d.distance;
  }
  std::vector<PrefixExportRow> rows;
  for (int64_t i = 0; i < schema.slots(); ++i) {
    const auto& f = schema.features[static_cast<size_t>(i)];
    for (const auto& value : f.values) {
      PrefixExportRow row;
      row.feature = f.name;
      row.value = value;
      row.row_id = *schema.value_id(i, value);
      const int64_t e = params.cfg.embed_dim;
      row.embedding.assign(params.w_e.data() + row.row_id * e,
                           params.w_e.data() + (row.row_id + 1) * e);
      row.dist_to_star = dist.at(f.name).at(value);
      rows.push_back(std::move(row));
    }
  }
  std::vector<std::vector<double>> mat;
  for (const auto& r : rows) mat.push_back(r.embedding);
  const auto coords = pca2(mat);
  for (size_t i = 0; i < rows.size(); ++i) {
    rows[i].pc1 = coords[i][0];
    rows[i].pc2 = coords[i][1];
  }
  return rows;
}

MlpCompareResult compare_mlp_architectures(const ExperimentConfig& config,
                                           const std::filesystem::path& out_dir) {
  MlpCompareResult out;
  ExperimentConfig shared_cfg = config;
  shared_cfg.prefix.arch = PrefixArch::shared;
  ExperimentConfig indep_cfg = config;
  indep_cfg.prefix.arch = PrefixArch::independent;
  out.shared_mlp = run_experiment(shared_cfg, out_dir / "shared");
  out.independent_mlp = run_experiment(indep_cfg, out_dir / "independent");

  SeedEnv env = prepare_seed_env(shared_cfg, config.seeds.front(),
                                 out_dir / "shared" / ("seed_" + std::to_string(config.seeds.front())));
  RngStream r1(0, "count/shared"), r2(0, "count/independent");
  out.shared_param_count =
      PrefixParams::init(env.corpus.schema, env.lm, shared_cfg.prefix, r1).param_count();
  out.independent_param_count =
      PrefixParams::init(env.corpus.schema, env.lm, indep_cfg.prefix, r2).param_count();
  std::filesystem::create_directories(out_dir);
  atomic_write_file(out_dir / "mlp_compare.json", out.to_json().dump(2) + "\n");
  return out;
}

}  // namespace met
