#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "met/corpus.hpp"

using namespace met;
namespace fs = std::filesystem;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec spec;
  spec.vocab_words = 16;
  spec.sigma_base = 1.0;
  spec.features = {{"domain", 4, 1.0, 1}};
  spec.sentences_per_context = 50;
  spec.mean_len = 8.0;
  spec.max_len = 24;
  return spec;
}

fs::path tmpdir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("zero feature sigma collapses every context onto the base chain") {
  SyntheticSpec spec = small_spec();
  spec.features[0].sigma = 0.0;
  const SynthResult r = synth_generate(spec, 3);
  REQUIRE(r.oracle.size() == 4);
  for (const auto& row : r.oracle) {
    CHECK(row.entropy == doctest::Approx(r.oracle[0].entropy).epsilon(1e-12));
    CHECK(row.base_ce == doctest::Approx(row.entropy).epsilon(1e-12));
  }
}

TEST_CASE("seed-fixed generation is reproducible, different seeds differ") {
  const SynthResult a = synth_generate(small_spec(), 5);
  const SynthResult b = synth_generate(small_spec(), 5);
  REQUIRE(a.corpus.examples.size() == b.corpus.examples.size());
  for (size_t i = 0; i < a.corpus.examples.size(); ++i) {
    CHECK(a.corpus.examples[i].tokens == b.corpus.examples[i].tokens);
    CHECK(a.corpus.examples[i].features == b.corpus.examples[i].features);
  }
  const SynthResult c = synth_generate(small_spec(), 6);
  bool any_diff = false;
  for (size_t i = 0; i < std::min(a.corpus.examples.size(), c.corpus.examples.size()); ++i) {
    any_diff |= a.corpus.examples[i].tokens != c.corpus.examples[i].tokens;
  }
  CHECK(any_diff);
}

TEST_CASE("empirical unigram frequencies match the visit distribution within 3 SE") {
  SyntheticSpec spec = small_spec();
  spec.features = {{"domain", 2, 0.8, 0}};
  spec.sentences_per_context = 6000;  // ~ 100k tokens over both contexts
  const SynthResult r = synth_generate(spec, 11);
  const BigramGenerator& gen = *r.generator;

  for (const auto& ctx : gen.contexts()) {
    std::vector<double> visits = gen.visit_distribution(ctx);
    double expected_len = 0.0;
    for (const double v : visits) expected_len += v;
    std::vector<int64_t> counts(static_cast<size_t>(gen.vocab_words()), 0);
    int64_t total = 0, sentences = 0;
    for (const auto& ex : r.corpus.examples) {
      if (ex.features != ctx) continue;
      ++sentences;
      for (const int64_t t : ex.tokens) {
        ++counts[static_cast<size_t>(t - gen.word_id_base())];
        ++total;
      }
    }
    REQUIRE(total > 40000);
    for (int64_t w = 0; w < gen.vocab_words(); ++w) {
      // Expected count per sentence is visits[w]; sentence count scales it.
      const double expected = visits[static_cast<size_t>(w)] * static_cast<double>(sentences);
      const double p = visits[static_cast<size_t>(w)] / expected_len;
      const double se = std::sqrt(static_cast<double>(total) * p * (1.0 - p));
      CHECK(std::fabs(static_cast<double>(counts[static_cast<size_t>(w)]) - expected) <=
            3.0 * se + 1.0);
    }
  }
}

TEST_CASE("Gibbs: true entropy strictly below the base cross-entropy when sigma > 0") {
  const SynthResult r = synth_generate(small_spec(), 13);
  for (const auto& row : r.oracle) {
    CHECK(row.entropy < row.base_ce);
  }
}

TEST_CASE("a corpus scored by its own generator matches the analytic entropy") {
  SyntheticSpec spec = small_spec();
  spec.features = {{"domain", 2, 1.0, 0}};
  spec.sentences_per_context = 1500;  // >= 10k tokens per context
  const SynthResult r = synth_generate(spec, 17);
  const BigramGenerator& gen = *r.generator;
  for (const auto& ctx : gen.contexts()) {
    double nll_total = 0.0;
    int64_t tokens = 0;
    std::vector<std::pair<double, int64_t>> per_sentence;
    for (const auto& ex : r.corpus.examples) {
      if (ex.features != ctx) continue;
      const auto [nll, count] = gen.true_nll(ex.tokens, ctx);
      nll_total += nll;
      tokens += count;
      per_sentence.emplace_back(nll, count);
    }
    REQUIRE(tokens >= 10000);
    const double mean = nll_total / static_cast<double>(tokens);
    // Ratio-estimator standard error over sentences.
    double ss = 0.0;
    for (const auto& [d, t] : per_sentence) {
      const double dev = d - mean * static_cast<double>(t);
      ss += dev * dev;
    }
    const double se = std::sqrt(ss) / static_cast<double>(tokens);
    const double expected = gen.entropy_rate(ctx);
    INFO("ctx entropy " << expected << " empirical " << mean << " se " << se);
    CHECK(std::fabs(mean - expected) <= 3.0 * se);
  }
}

TEST_CASE("degenerate sources fail after bounded retries") {
  SyntheticSpec spec = small_spec();
  spec.vocab_words = 4;
  spec.sigma_base = 200.0;  // softmax rows collapse to near-one-hot
  CHECK_THROWS_WITH_AS(synth_generate(spec, 1), doctest::Contains("degenerate"),
                       std::runtime_error);
}

TEST_CASE("nested structure assigns each secondary value to one parent") {
  SyntheticSpec spec = small_spec();
  spec.features = {{"genre", 2, 0.8, 0}, {"title", 6, 0.5, 0}};
  spec.structure = "nested";
  spec.sentences_per_context = 5;
  const SynthResult r = synth_generate(spec, 19);
  CHECK(r.generator->contexts().size() == 6);  // one context per title
  std::map<std::string, std::set<std::string>> parents;
  for (const auto& ctx : r.generator->contexts()) {
    parents[ctx.at("title")].insert(ctx.at("genre"));
  }
  for (const auto& [title, gs] : parents) CHECK(gs.size() == 1);

  SyntheticSpec cross = spec;
  cross.structure = "crosscut";
  const SynthResult rc = synth_generate(cross, 19);
  CHECK(rc.generator->contexts().size() == 12);  // full product
}

TEST_CASE("ingest: tokens, contexts, empties and malformed lines") {
  const fs::path dir = tmpdir("met_corpus_ingest");
  {
    std::ofstream out(dir / "data.jsonl");
    out << R"({"text": "great game", "features": {"category": "video games"}})" << "\n";
    out << R"({"text": "great coffee beans", "features": {"category": "grocery"}})" << "\n";
    out << R"({"text": "great game great", "features": {"category": "video games"}})" << "\n";
  }
  IngestOptions opts;
  opts.feature_names = {"category"};
  const Corpus c = ingest_jsonl(dir / "data.jsonl", opts);
  REQUIRE(c.examples.size() == 3);
  CHECK(c.examples[0].tokens.size() == 2);
  CHECK(c.examples[0].features.at("category") == "video games");
  CHECK(c.examples[0].features.at("corpus") == "ingested");
  CHECK(c.schema.slots() == 2);
  CHECK(c.schema.value_id(1, "video games").has_value());
  CHECK(c.tokenizer.detokenize(c.examples[0].tokens) == "great game");

  {
    std::ofstream out(dir / "empty.jsonl");
  }
  const Corpus empty = ingest_jsonl(dir / "empty.jsonl", opts);
  CHECK(empty.examples.empty());
  CHECK(empty.provenance.at("warning") == "empty corpus");

  {
    std::ofstream out(dir / "bad.jsonl");
    out << R"({"text": "fine", "features": {}})" << "\n";
    out << "{not json\n";
  }
  CHECK_THROWS_WITH_AS(ingest_jsonl(dir / "bad.jsonl", opts), doctest::Contains("line 2"),
                       std::runtime_error);

  {
    std::ofstream out(dir / "missing.jsonl");
    out << R"({"text": "no features here"})" << "\n";
  }
  IngestOptions strict = opts;
  strict.missing = IngestOptions::MissingFeature::error;
  CHECK_THROWS_WITH_AS(ingest_jsonl(dir / "missing.jsonl", strict),
                       doctest::Contains("missing feature"), std::runtime_error);
  const Corpus lax = ingest_jsonl(dir / "missing.jsonl", opts);
  CHECK(lax.examples[0].features.count("category") == 0);
}

TEST_CASE("vocab build: order, cutoff, specials, round trips") {
  Tokenizer t = Tokenizer::build({"great game great"}, 64, 1);
  CHECK(t.size() == 6);  // 4 specials + {great, game}
  CHECK(t.lookup("great") == 4);  // most frequent first
  CHECK(t.lookup("game") == 5);
  CHECK(t.lookup("absent") == t.specials.unk);

  Tokenizer cut = Tokenizer::build({"a a a b"}, 64, 2);
  CHECK(cut.lookup("a") != cut.specials.unk);
  CHECK(cut.lookup("b") == cut.specials.unk);

  const std::string text = "great game great";
  CHECK(t.detokenize(t.tokenize(text)) == text);

  const nlohmann::json j = t;
  const Tokenizer back = j.get<Tokenizer>();
  CHECK(nlohmann::json(back).dump() == j.dump());  // bit-exact serialization
}

TEST_CASE("split: protocol, rounding, determinism, held-out routing") {
  SyntheticSpec spec = small_spec();  // 3 seen + 1 held-out domain values
  spec.sentences_per_context = 37;
  spec.heldout_sentences = 9;
  const SynthResult r = synth_generate(spec, 23);
  const SplitSpec ss = split_spec_for(r.corpus);
  REQUIRE(ss.held_out.count("domain") == 1);
  CHECK(ss.held_out.at("domain") == std::set<std::string>{"v03"});

  const Splits s = split(r.corpus, ss, 1);
  const int64_t n = static_cast<int64_t>(r.corpus.examples.size());
  CHECK(static_cast<int64_t>(s.train.size() + s.val.size() + s.test_seen.size() +
                             s.test_unseen.size()) == n);
  // Disjointness.
  std::set<int64_t> all;
  for (const auto* part : {&s.train, &s.val, &s.test_seen, &s.test_unseen}) {
    for (const int64_t i : *part) CHECK(all.insert(i).second);
  }
  // Held-out value examples appear only in test_unseen.
  CHECK(s.test_unseen.size() == 9);
  for (const int64_t i : s.test_unseen) {
    CHECK(r.corpus.examples[static_cast<size_t>(i)].features.at("domain") == "v03");
  }
  // Largest-remainder apportionment stays within one of the exact ratios.
  const double eligible = static_cast<double>(n - 9);
  CHECK(std::fabs(static_cast<double>(s.train.size()) - 0.8 * eligible) <= 1.0);
  CHECK(std::fabs(static_cast<double>(s.val.size()) - 0.1 * eligible) <= 1.0);
  CHECK(std::fabs(static_cast<double>(s.test_seen.size()) - 0.1 * eligible) <= 1.0);

  const Splits again = split(r.corpus, ss, 1);
  CHECK(again.train == s.train);
  const Splits other = split(r.corpus, ss, 2);
  CHECK(other.train != s.train);

  // Degenerate ratios: everything trains.
  SplitSpec all_train;
  all_train.train = 1.0;
  all_train.val = 0.0;
  all_train.test = 0.0;
  SyntheticSpec no_held = spec;
  no_held.features[0].held_out = 0;
  const SynthResult r2 = synth_generate(no_held, 29);
  const Splits s2 = split(r2.corpus, all_train, 1);
  CHECK(s2.train.size() == r2.corpus.examples.size());
  CHECK(s2.test_unseen.empty());

  SplitSpec bad;
  bad.train = 0.9;
  bad.val = 0.2;
  bad.test = 0.1;
  CHECK_THROWS_AS(split(r.corpus, bad, 1), std::invalid_argument);

  SplitSpec ghost = ss;
  ghost.held_out["domain"].insert("v77");
  CHECK_THROWS_WITH_AS(split(r.corpus, ghost, 1), doctest::Contains("v77"),
                       std::runtime_error);
}

TEST_CASE("out-of-schema feature values route to the unseen partition") {
  const fs::path dir = tmpdir("met_corpus_unseen");
  {
    std::ofstream out(dir / "data.jsonl");
    for (int i = 0; i < 20; ++i) {
      out << R"({"text": "alpha beta", "features": {"cat": "known"}})" << "\n";
    }
    out << R"({"text": "alpha gamma", "features": {"cat": "mystery"}})" << "\n";
  }
  IngestOptions opts;
  opts.feature_names = {"cat"};
  opts.held_out["cat"] = {"mystery"};
  const Corpus c = ingest_jsonl(dir / "data.jsonl", opts);
  CHECK_FALSE(c.schema.value_id(1, "mystery").has_value());
  const Splits s = split(c, split_spec_for(c), 4);
  REQUIRE(s.test_unseen.size() == 1);
  CHECK(c.examples[static_cast<size_t>(s.test_unseen[0])].features.at("cat") == "mystery");
}

TEST_CASE("corpus save/load round-trips identically") {
  SyntheticSpec spec = small_spec();
  spec.sentences_per_context = 12;
  const SynthResult r = synth_generate(spec, 31);
  const fs::path dir = tmpdir("met_corpus_io");
  r.corpus.save(dir);
  CHECK(fs::exists(dir / "corpus.jsonl"));
  const Corpus back = Corpus::load(dir);
  REQUIRE(back.examples.size() == r.corpus.examples.size());
  for (size_t i = 0; i < back.examples.size(); ++i) {
    CHECK(back.examples[i].tokens == r.corpus.examples[i].tokens);
    CHECK(back.examples[i].features == r.corpus.examples[i].features);
  }
  CHECK(nlohmann::json(back.tokenizer).dump() == nlohmann::json(r.corpus.tokenizer).dump());
  CHECK(nlohmann::json(back.schema).dump() == nlohmann::json(r.corpus.schema).dump());

  const std::string csv = oracle_csv(r.oracle);
  CHECK(csv.find("context,entropy_nats_per_token") == 0);
  CHECK(csv.find("domain=v00") != std::string::npos);
}
