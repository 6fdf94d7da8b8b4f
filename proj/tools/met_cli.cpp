// Command-line front end: corpus generation, backbone pretraining, strategy
// training/evaluation, sweeps, the prefix-space analyses and the classical
// mixed-model reference fits. Failures print machine-readable JSON on stdout
// and exit nonzero.

#include <cstdio>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "met/harness.hpp"
#include "met/kernels.hpp"
#include "met/lmm.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GlobalArgs {
  std::string config_path;
  fs::path out = "out";
  int64_t seed = -1;  // -1: use the config's seed list
  int64_t workers = 0;
};

met::ExperimentConfig load_config(const GlobalArgs& g) {
  if (g.config_path.empty()) throw std::runtime_error("--config is required");
  met::ExperimentConfig cfg = met::ExperimentConfig::from_file(g.config_path);
  if (g.seed >= 0) cfg.seeds = {static_cast<uint64_t>(g.seed)};
  if (g.workers > 0) cfg.eval_workers = g.workers;
  return cfg;
}

int check_errors(const met::ExperimentResult& result) {
  int failures = 0;
  for (const auto& r : result.runs) {
    if (!r.error.empty()) {
      std::cout << json{{"error", {{"type", "run_failure"},
                                   {"seed", r.seed},
                                   {"strategy", r.strategy},
                                   {"message", r.error}}}}
                       .dump()
                << "\n";
      ++failures;
    }
  }
  return failures == 0 ? 0 : 3;
}

void print_summary(const met::ExperimentResult& result) {
  for (const auto& r : result.runs) {
    if (!r.error.empty()) continue;
    std::printf("seed %llu  %-24s seen %.4f  unseen %s\n",
                static_cast<unsigned long long>(r.seed), r.strategy.c_str(), r.seen.logppl,
                r.unseen.sentences > 0 ? std::to_string(r.unseen.logppl).c_str() : "n/a");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixed-effects transformer toolkit"};
  app.require_subcommand(1);

  GlobalArgs g;
  app.add_option("--config", g.config_path, "experiment config JSON")->envname("MET_CONFIG");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--seed", g.seed, "override the config's seed list with one seed");
  app.add_option("--workers", g.workers, "evaluation worker threads");

  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus with its oracle table");

  auto* pretrain = app.add_subcommand("pretrain", "pretrain the backbone on the pooled corpus");

  auto* train = app.add_subcommand(
      "train", "train + evaluate every configured (seed, strategy) pair");

  auto* eval = app.add_subcommand("eval", "re-evaluate persisted checkpoints");

  auto* sweep = app.add_subcommand("sweep", "data-efficiency sweep over training sizes");
  std::vector<int64_t> sweep_sizes{32, 256, 2048};
  sweep->add_option("--sizes", sweep_sizes, "sentences per context at each sweep point");

  auto* multifeat =
      app.add_subcommand("multifeat", "single- vs multi-feature context comparison");

  auto* distinctive = app.add_subcommand("distinctive", "top-k most distinctive test sentences");
  std::string d_strategy = "met", d_feature, d_value;
  int64_t d_k = 10;
  distinctive->add_option("--strategy", d_strategy, "strategy checkpoint to query");
  distinctive->add_option("--feature", d_feature, "feature name")->required();
  distinctive->add_option("--value", d_value, "feature value")->required();
  distinctive->add_option("--k", d_k, "number of sentences");

  auto* generate = app.add_subcommand("generate", "prompted generation under a context");
  std::string g_strategy = "met", g_prompt, g_context;
  int64_t g_n = 5, g_max_new = 24;
  double g_temperature = 0.0;
  generate->add_option("--strategy", g_strategy, "strategy checkpoint to use");
  generate->add_option("--prompt", g_prompt, "prompt text")->required();
  generate->add_option("--context", g_context, "context as feat=value[,feat=value...]");
  generate->add_option("--n", g_n, "number of samples");
  generate->add_option("--max-new", g_max_new, "max generated tokens");
  generate->add_option("--temperature", g_temperature,
                       "sampling temperature (0 = greedy)");

  auto* exportp = app.add_subcommand("export-prefixes",
                                     "CSV of prefix embeddings with 2-D PCA coordinates");
  std::string e_strategy = "met";
  exportp->add_option("--strategy", e_strategy, "strategy checkpoint to export");

  auto* comparemlp =
      app.add_subcommand("compare-mlp", "shared vs independent prefix MLP comparison");

  auto* lmm_cmd = app.add_subcommand("lmm", "classical mixed-model fits on CSV data");
  std::string lmm_csv;
  std::string lmm_mode = "known";
  double lmm_sigma = 1.0, lmm_eps = 1.0;
  bool lmm_demo = false;
  lmm_cmd->add_option("--csv", lmm_csv, "input CSV (x columns, y, group)");
  lmm_cmd->add_option("--mode", lmm_mode, "known | estimated");
  lmm_cmd->add_option("--sigma", lmm_sigma, "random-intercept sd (known mode)");
  lmm_cmd->add_option("--eps", lmm_eps, "noise sd (known mode)");
  lmm_cmd->add_flag("--demo", lmm_demo, "emit the shrinkage-curve demo instead");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      met::ExperimentConfig cfg = load_config(g);
      if (cfg.corpus_kind != "synthetic") throw std::runtime_error("synth needs a synthetic corpus config");
      const uint64_t seed = cfg.seeds.front();
      met::SynthResult sr = met::synth_generate(cfg.synth, seed);
      sr.corpus.save(g.out / "corpus");
      met::atomic_write_file(g.out / "corpus" / "oracle.csv", met::oracle_csv(sr.oracle));
      std::printf("synth: %zu sentences, %zu contexts -> %s\n", sr.corpus.examples.size(),
                  sr.oracle.size(), (g.out / "corpus").c_str());
      return 0;
    }
    if (pretrain->parsed()) {
      met::ExperimentConfig cfg = load_config(g);
      const uint64_t seed = cfg.seeds.front();
      const met::SeedEnv env =
          met::prepare_seed_env(cfg, seed, g.out / ("seed_" + std::to_string(seed)));
      std::printf("pretrain: val nll %.4f (checkpoint cached under %s)\n", env.pretrain_val_nll,
                  (g.out / ("seed_" + std::to_string(seed))).c_str());
      return 0;
    }
    if (train->parsed()) {
      met::ExperimentConfig cfg = load_config(g);
      const met::ExperimentResult result = met::run_experiment(cfg, g.out);
      print_summary(result);
      return check_errors(result);
    }
    if (eval->parsed()) {
      met::ExperimentConfig cfg = load_config(g);
      const met::ExperimentResult result = met::evaluate_experiment(cfg, g.out);
      print_summary(result);
      return check_errors(result);
    }
    if (sweep->parsed()) {
      met::ExperimentConfig cfg = load_config(g);
      const met::SweepResult result = met::data_efficiency_sweep(cfg, sweep_sizes, g.out);
      for (const int64_t size : result.sizes) {
        for (const auto& name : cfg.strategies) {
          std::printf("size %-6lld %-24s median seen %.4f\n",
                      static_cast<long long>(size), name.c_str(),
                      result.median_seen(size, name));
        }
      }
      return 0;
    }
    if (multifeat->parsed()) {
      met::ExperimentConfig cfg = load_config(g);
      const met::MultiFeatureResult result = met::multi_feature_compare(cfg, g.out);
      for (const auto& r : result.runs) {
        std::printf("seed %llu %-24s single %.4f  multi %.4f\n",
                    static_cast<unsigned long long>(r.seed), r.strategy.c_str(),
                    r.single_feature.logppl, r.multi_feature.logppl);
      }
      return 0;
    }

    // The remaining subcommands reuse a trained checkpoint from --out.
    auto rebuild = [&](const std::string& strategy_name) {
      met::ExperimentConfig cfg = load_config(g);
      const uint64_t seed = cfg.seeds.front();
      const fs::path seed_dir = g.out / ("seed_" + std::to_string(seed));
      met::SeedEnv env = met::prepare_seed_env(cfg, seed, seed_dir);
      met::StrategyConfig scfg{cfg.prefix, cfg.met, cfg.optim};
      met::RngStream init(seed, "init/" + strategy_name);
      met::Strategy strategy =
          met::Strategy::make(met::strategy_from_name(strategy_name), env.backbone,
                              env.corpus.schema, env.corpus.tokenizer, scfg, init);
      met::load_strategy_params(strategy, seed_dir / (strategy_name + ".ckpt"));
      return std::make_pair(std::move(env), std::move(strategy));
    };

    if (distinctive->parsed()) {
      auto [env, strategy] = rebuild(d_strategy);
      const auto rows = met::distinctive_utterances(strategy, env.corpus, env.splits.test_seen,
                                                    d_feature, d_value, d_k);
      json out = json::array();
      for (const auto& r : rows) {
        out.push_back({{"example_index", r.example_index},
                       {"score", r.score},
                       {"nll_under_value", r.nll_value},
                       {"text", r.text}});
        std::printf("%8.4f  %s\n", r.score, r.text.c_str());
      }
      met::atomic_write_file(g.out / "distinctive.json", out.dump(2) + "\n");
      return 0;
    }
    if (generate->parsed()) {
      auto [env, strategy] = rebuild(g_strategy);
      met::FeatureMap context{{"corpus", env.corpus.schema.features[0].values[0]}};
      std::stringstream ss(g_context);
      std::string kv;
      while (std::getline(ss, kv, ',')) {
        const auto pos = kv.find('=');
        if (pos == std::string::npos) throw std::runtime_error("bad --context entry: " + kv);
        context[kv.substr(0, pos)] = kv.substr(pos + 1);
      }
      met::GenerateOptions opts;
      if (g_temperature > 0.0) {
        opts.sampler = met::GenerateOptions::Sampler::temperature;
        opts.temperature = g_temperature;
      }
      const auto records = met::prompted_generation(strategy, env.corpus.tokenizer, context,
                                                    g_prompt, g_n, opts, env.seed, g_max_new);
      std::string jsonl;
      for (const auto& rec : records) {
        jsonl += json{{"context", rec.context},
                      {"prompt", rec.prompt},
                      {"text", rec.text},
                      {"tokens", rec.tokens}}
                     .dump() +
                 "\n";
        std::printf("%s | %s\n", rec.prompt.c_str(), rec.text.c_str());
      }
      met::atomic_write_file(g.out / "generations.jsonl", jsonl);
      return 0;
    }
    if (exportp->parsed()) {
      auto [env, strategy] = rebuild(e_strategy);
      const auto rows = met::export_prefix_embeddings(strategy);
      met::atomic_write_file(g.out / "prefix_embeddings.csv", met::prefix_export_csv(rows));
      std::printf("exported %zu prefix rows -> %s\n", rows.size(),
                  (g.out / "prefix_embeddings.csv").c_str());
      return 0;
    }
    if (comparemlp->parsed()) {
      met::ExperimentConfig cfg = load_config(g);
      const met::MlpCompareResult result = met::compare_mlp_architectures(cfg, g.out);
      std::printf("shared params %lld, independent params %lld\n",
                  static_cast<long long>(result.shared_param_count),
                  static_cast<long long>(result.independent_param_count));
      return check_errors(result.shared_mlp) + check_errors(result.independent_mlp);
    }
    if (lmm_cmd->parsed()) {
      if (lmm_demo) {
        const auto rows = met::lmm::shrinkage_curve({}, {0, 1, 4, 16, 64, 256});
        met::atomic_write_file(g.out / "shrinkage.csv", met::lmm::shrinkage_csv(rows));
        for (const auto& r : rows) {
          std::printf("n %-4lld w %.4f mixed %+.4f no_pool %+.4f pooled %+.4f\n",
                      static_cast<long long>(r.n), r.weight, r.mixed, r.no_pool, r.pooled);
        }
        return 0;
      }
      if (lmm_csv.empty()) throw std::runtime_error("lmm needs --csv or --demo");
      const met::lmm::GroupedDataset data = met::lmm::GroupedDataset::from_csv(lmm_csv);
      met::lmm::MixedOptions opts;
      opts.mode = lmm_mode == "estimated" ? met::lmm::MixedOptions::Mode::estimated
                                          : met::lmm::MixedOptions::Mode::known;
      opts.sigma = lmm_sigma;
      opts.eps_noise = lmm_eps;
      const met::lmm::GroupCoefficients fit = met::lmm::fit_mixed(data, opts);
      const met::lmm::OlsFit pooled = met::lmm::fit_complete_pool(data);
      json out{{"mixed", fit.to_json()}, {"complete_pool", {{"beta", pooled.beta}}}};
      json no_pool = json::object();
      for (const auto& [group, f] : met::lmm::fit_no_pool(data)) {
        no_pool[group] = f ? json{{"beta", f->beta}} : json{{"underdetermined", true}};
      }
      out["no_pool"] = no_pool;
      met::atomic_write_file(g.out / "lmm.json", out.dump(2) + "\n");
      std::cout << out.dump(2) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cout << json{{"error", {{"type", "fatal"}, {"message", e.what()}}}}.dump() << "\n";
    return 2;
  }
  return 0;
}
