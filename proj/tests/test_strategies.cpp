#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <numeric>

#include "met/corpus.hpp"
#include "met/strategies.hpp"

using namespace met;

namespace {

struct Fixture {
  SynthResult synth;
  LoadedCheckpoint backbone;
  StrategyConfig cfg;

  explicit Fixture(uint64_t seed = 1) {
    SyntheticSpec spec;
    spec.vocab_words = 12;
    spec.sigma_base = 1.0;
    spec.features = {{"domain", 3, 1.0, 0}};
    spec.sentences_per_context = 40;
    spec.mean_len = 5.0;
    spec.max_len = 10;
    synth = synth_generate(spec, seed);

    LmConfig lm;
    lm.vocab_size = synth.corpus.tokenizer.size();
    lm.d_model = 32;
    lm.n_layers = 1;
    lm.n_heads = 2;
    lm.max_seq = 32;
    RngStream rng(seed, "fixture/backbone");
    LmModel model = LmModel::init(lm, rng);
    const auto dir = std::filesystem::temp_directory_path() / "met_strat_test";
    std::filesystem::create_directories(dir);
    model.save(dir / "backbone.ckpt");
    backbone = load_checkpoint(dir / "backbone.ckpt");

    cfg.prefix.embed_dim = 16;
    cfg.prefix.mlp_hidden = 16;
    cfg.optim.batch_size = 8;
  }

  Strategy make(StrategyKind kind, uint64_t seed = 7) {
    RngStream init(seed, "init/" + strategy_name(kind));
    return Strategy::make(kind, backbone, synth.corpus.schema, synth.corpus.tokenizer, cfg,
                          init);
  }

  std::vector<const Example*> batch_of(int64_t n, int64_t start = 0) {
    std::vector<const Example*> out;
    for (int64_t i = 0; i < n; ++i) {
      out.push_back(&synth.corpus.examples[static_cast<size_t>(start + i)]);
    }
    return out;
  }
};

uint64_t total_checksum(const LmModel& m) {
  uint64_t h = 0;
  for (const auto& [name, c] : m.checksums()) h ^= c;
  return h;
}

}  // namespace

TEST_CASE("strategy names round-trip and unknown names fail") {
  for (const auto kind :
       {StrategyKind::met, StrategyKind::prefix_no_pool, StrategyKind::prefix_complete_pool,
        StrategyKind::finetune_no_pool, StrategyKind::finetune_complete_pool,
        StrategyKind::conditional_finetune}) {
    CHECK(strategy_from_name(strategy_name(kind)) == kind);
  }
  CHECK_THROWS_AS(strategy_from_name("lora"), std::invalid_argument);
}

TEST_CASE("trainable partitions per kind") {
  Fixture f;
  Strategy met_s = f.make(StrategyKind::met);
  CHECK(met_s.backbone.frozen);
  const auto met_train = met_s.trainable();
  int64_t met_count = 0;
  for (const auto& p : met_train) met_count += p.tensor->numel();
  CHECK(met_count == met_s.prefix->param_count());

  Strategy ft = f.make(StrategyKind::finetune_complete_pool);
  CHECK_FALSE(ft.backbone.frozen);
  int64_t ft_count = 0;
  for (const auto& p : ft.trainable()) ft_count += p.tensor->numel();
  CHECK(ft_count == ft.backbone.param_count());
  CHECK_FALSE(ft.uses_prefix());

  Strategy np = f.make(StrategyKind::finetune_no_pool);
  CHECK(np.per_value.size() == 3);
  CHECK_THROWS_AS(np.trainable(""), std::invalid_argument);
  CHECK_THROWS_AS(np.trainable("v99"), std::invalid_argument);
  int64_t np_count = 0;
  for (const auto& p : np.trainable("v01")) np_count += p.tensor->numel();
  CHECK(np_count == np.backbone.param_count());
}

TEST_CASE("conditional rendering lengthens input by two tokens per feature") {
  Fixture f;
  Strategy cond = f.make(StrategyKind::conditional_finetune);
  const std::vector<int64_t> words{5, 6, 7};
  const FeatureMap ctx{{"corpus", "synthetic"}, {"domain", "v01"}};
  const auto input = cond.rendered_input(ctx, words);
  // 2 features in the schema -> 4 context tokens, then bos + words.
  CHECK(input.size() == words.size() + 1 + 4);
  CHECK(cond.context_token_count() == 4);

  // Unseen values render as the reserved unknown-value token.
  const FeatureMap unseen{{"corpus", "synthetic"}, {"domain", "brand-new"}};
  const auto input2 = cond.rendered_input(unseen, words);
  CHECK(input2[3] == f.synth.corpus.tokenizer.unkval);

  Strategy met_s = f.make(StrategyKind::met);
  CHECK(met_s.rendered_input(ctx, words).size() == words.size() + 1);
  CHECK(met_s.context_token_count() == 0);
}

TEST_CASE("complete pooling maps every context to the same inputs") {
  Fixture f;
  Strategy pool = f.make(StrategyKind::prefix_complete_pool);
  const ContextKey k1 = pool.eval_key({{"corpus", "synthetic"}, {"domain", "v00"}});
  const ContextKey k2 = pool.eval_key({{"corpus", "synthetic"}, {"domain", "v02"}});
  CHECK(k1.ids == k2.ids);
  CHECK(k1.all_star(pool.schema));

  // Loss is invariant to permuting the feature values across the batch.
  StrategyTrainer trainer(pool, f.cfg.optim);
  Example a = f.synth.corpus.examples[0];
  Example b = f.synth.corpus.examples[1];
  Example a_swapped = a;
  a_swapped.features["domain"] = "v02";
  Example b_swapped = b;
  b_swapped.features["domain"] = "v00";
  RngStream r1(1, "drop"), r2(1, "drop");
  Strategy pool2 = f.make(StrategyKind::prefix_complete_pool);
  StrategyTrainer trainer2(pool2, f.cfg.optim);
  const std::vector<const Example*> batch1{&a, &b};
  const std::vector<const Example*> batch2{&a_swapped, &b_swapped};
  const double l1 = trainer.step(batch1, r1);
  const double l2 = trainer2.step(batch2, r2);
  CHECK(l1 == l2);
}

TEST_CASE("an empty batch changes nothing and costs nothing") {
  Fixture f;
  Strategy s = f.make(StrategyKind::met);
  StrategyTrainer trainer(s, f.cfg.optim);
  const uint64_t before = s.prefix->w_e.bit_checksum();
  RngStream rng(2, "drop");
  CHECK(trainer.step({}, rng) == 0.0);
  CHECK(s.prefix->w_e.bit_checksum() == before);
  CHECK(trainer.steps() == 0);
}

TEST_CASE("MET training steps leave every backbone tensor bit-identical") {
  Fixture f;
  Strategy s = f.make(StrategyKind::met);
  const auto before = s.backbone.checksums();
  StrategyTrainer trainer(s, f.cfg.optim);
  RngStream rng(3, "drop");
  for (int step = 0; step < 25; ++step) {
    trainer.step(f.batch_of(8, step * 4), rng);
  }
  const auto after = s.backbone.checksums();
  REQUIRE(before.size() == after.size());
  for (size_t i = 0; i < before.size(); ++i) CHECK(before[i].second == after[i].second);
  // And the prefix parameters did change.
  Strategy fresh = f.make(StrategyKind::met);
  CHECK(s.prefix->w_e.bit_checksum() != fresh.prefix->w_e.bit_checksum());
}

TEST_CASE("MET with dropout and regularizer off reproduces no-pool exactly") {
  Fixture f;
  StrategyConfig cfg = f.cfg;
  cfg.met.epsilon = 0.0;
  cfg.met.beta = 0.0;
  RngStream i1(7, "init/met");  // same init stream label contents for both
  Strategy met_s = Strategy::make(StrategyKind::met, f.backbone, f.synth.corpus.schema,
                                  f.synth.corpus.tokenizer, cfg, i1);
  RngStream i2(7, "init/met");
  Strategy np_s = Strategy::make(StrategyKind::prefix_no_pool, f.backbone,
                                 f.synth.corpus.schema, f.synth.corpus.tokenizer, cfg, i2);
  StrategyTrainer t1(met_s, cfg.optim);
  StrategyTrainer t2(np_s, cfg.optim);
  RngStream d1(9, "drop"), d2(9, "drop");
  for (int step = 0; step < 5; ++step) {
    const double l1 = t1.step(f.batch_of(8, step * 8), d1);
    const double l2 = t2.step(f.batch_of(8, step * 8), d2);
    CHECK(l1 == l2);  // bit-exact functional reduction
  }
}

TEST_CASE("no-pool fine-tuning trains each copy only on its own value") {
  Fixture f;
  Strategy s = f.make(StrategyKind::finetune_no_pool);
  const uint64_t backbone_before = total_checksum(s.backbone);
  std::map<std::string, uint64_t> before;
  for (const auto& [v, m] : s.per_value) before[v] = total_checksum(m);

  StrategyTrainer trainer(s, f.cfg.optim, "v00");
  // All fixture examples 0..39 belong to v00 by construction.
  RngStream rng(4, "drop");
  trainer.step(f.batch_of(6), rng);

  for (const auto& [v, m] : s.per_value) {
    if (v == "v00") {
      CHECK(total_checksum(m) != before[v]);
    } else {
      CHECK(total_checksum(m) == before[v]);
    }
  }
  CHECK(total_checksum(s.backbone) == backbone_before);

  // Unseen primary values fall back to the pristine backbone.
  const LmModel& fallback = s.model_for({{"corpus", "synthetic"}, {"domain", "brand-new"}});
  CHECK(&fallback == &s.backbone);
  const LmModel& routed = s.model_for({{"corpus", "synthetic"}, {"domain", "v00"}});
  CHECK(&routed == &s.per_value[0].second);
}

TEST_CASE("loss decreases over 200 steps for every strategy kind") {
  for (const uint64_t seed : {11ULL, 12ULL, 13ULL}) {
    Fixture f(seed);
    for (const auto kind :
         {StrategyKind::met, StrategyKind::prefix_no_pool, StrategyKind::prefix_complete_pool,
          StrategyKind::finetune_no_pool, StrategyKind::finetune_complete_pool,
          StrategyKind::conditional_finetune}) {
      Strategy s = f.make(kind, seed);
      const bool per_value = kind == StrategyKind::finetune_no_pool;
      StrategyTrainer trainer(s, f.cfg.optim, per_value ? "v00" : "");
      RngStream rng(seed, "drop/" + strategy_name(kind));
      RngStream pick(seed, "order/" + strategy_name(kind));
      // finetune_no_pool trains the v00 copy, so feed it v00 data only.
      const int64_t pool = per_value ? 40 : static_cast<int64_t>(f.synth.corpus.examples.size());
      std::vector<double> losses;
      for (int step = 0; step < 200; ++step) {
        std::vector<const Example*> batch;
        for (int64_t b = 0; b < 8; ++b) {
          batch.push_back(&f.synth.corpus.examples[static_cast<size_t>(pick.uniform_int(pool))]);
        }
        losses.push_back(trainer.step(batch, rng));
      }
      const double first = std::accumulate(losses.begin(), losses.begin() + 20, 0.0) / 20.0;
      const double last = std::accumulate(losses.end() - 20, losses.end(), 0.0) / 20.0;
      INFO(strategy_name(kind) << " seed " << seed << ": " << first << " -> " << last);
      CHECK(last < first);
    }
  }
}

TEST_CASE("trainer snapshot/restore round-trips parameters") {
  Fixture f;
  Strategy s = f.make(StrategyKind::met);
  StrategyTrainer trainer(s, f.cfg.optim);
  trainer.snapshot();
  const uint64_t before = s.prefix->w_e.bit_checksum();
  RngStream rng(5, "drop");
  trainer.step(f.batch_of(8), rng);
  CHECK(s.prefix->w_e.bit_checksum() != before);
  trainer.restore();
  CHECK(s.prefix->w_e.bit_checksum() == before);
}
