#include <algorithm>
#include <cmath>
#include <thread>

#include "met/harness.hpp"
#include "met/linalg.hpp"

namespace met {

std::string feature_map_key(const FeatureMap& m) {
  std::string key;
  for (const auto& [k, v] : m) {
    if (!key.empty()) key += ';';
    key += k + "=" + v;
  }
  return key;
}

namespace {

FeatureMap mask_features(const FeatureMap& features, const std::set<std::string>* observed) {
  if (!observed) return features;
  FeatureMap out;
  for (const auto& [k, v] : features) {
    if (observed->count(k)) out[k] = v;
  }
  return out;
}

}  // namespace

double eval_mean_nll(const Strategy& strategy, const Corpus& corpus,
                     std::span<const int64_t> indices) {
  std::map<std::string, PrefixActivations> cache;
  double total = 0.0;
  int64_t tokens = 0;
  for (const int64_t idx : indices) {
    const Example& ex = corpus.examples[static_cast<size_t>(idx)];
    const PrefixActivations* pa = nullptr;
    if (strategy.uses_prefix()) {
      const std::string key = feature_map_key(ex.features);
      auto it = cache.find(key);
      if (it == cache.end()) {
        it = cache.emplace(key, strategy.activations_for(strategy.eval_key(ex.features))).first;
      }
      pa = &it->second;
    }
    const SentenceScore s = strategy.score(ex.features, ex.tokens, pa);
    total += s.nll_sum;
    tokens += s.tokens;
  }
  if (tokens == 0) throw std::invalid_argument("eval_mean_nll: no tokens to score");
  return total / static_cast<double>(tokens);
}

PartitionReport evaluate_partition(const Strategy& strategy, const Corpus& corpus,
                                   std::span<const int64_t> indices, int64_t workers,
                                   const std::vector<OracleRow>* oracle,
                                   const std::set<std::string>* observed) {
  PartitionReport report;
  if (indices.empty()) return report;

  // Per-context state is computed up front so scoring threads only read.
  std::map<std::string, FeatureMap> masked_by_key;
  std::map<std::string, PrefixActivations> prefix_cache;
  for (const int64_t idx : indices) {
    const Example& ex = corpus.examples[static_cast<size_t>(idx)];
    const std::string key = feature_map_key(ex.features);
    if (masked_by_key.count(key)) continue;
    const FeatureMap masked = mask_features(ex.features, observed);
    masked_by_key.emplace(key, masked);
    if (strategy.uses_prefix()) {
      prefix_cache.emplace(key, strategy.activations_for(strategy.eval_key(masked)));
    }
  }

  struct Score {
    double nll = 0.0;
    int64_t tokens = 0;
  };
  std::vector<Score> scores(indices.size());
  const int64_t n_workers = std::max<int64_t>(1, workers);
  auto worker = [&](int64_t w) {
    for (size_t i = static_cast<size_t>(w); i < indices.size(); i += static_cast<size_t>(n_workers)) {
      const Example& ex = corpus.examples[static_cast<size_t>(indices[i])];
      const std::string key = feature_map_key(ex.features);
      const FeatureMap& masked = masked_by_key.at(key);
      const PrefixActivations* pa =
          strategy.uses_prefix() ? &prefix_cache.at(key) : nullptr;
      const SentenceScore s = strategy.score(masked, ex.tokens, pa);
      scores[i] = {s.nll_sum, s.tokens};
    }
  };
  if (n_workers == 1) {
    worker(0);
  } else {
    std::vector<std::thread> threads;
    for (int64_t w = 0; w < n_workers; ++w) threads.emplace_back(worker, w);
    for (auto& t : threads) t.join();
  }

  // Aggregates in index order (worker count cannot change any of this).
  double total = 0.0;
  std::vector<double> sent_nll(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) {
    total += scores[i].nll;
    report.tokens += scores[i].tokens;
    sent_nll[i] = scores[i].nll / static_cast<double>(scores[i].tokens);
  }
  report.sentences = static_cast<int64_t>(indices.size());
  report.logppl = total / static_cast<double>(report.tokens);
  double mean = 0.0;
  for (const double v : sent_nll) mean += v;
  mean /= static_cast<double>(sent_nll.size());
  report.sentence_mean = mean;
  if (sent_nll.size() > 1) {
    double ss = 0.0;
    for (const double v : sent_nll) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(sent_nll.size() - 1));
    report.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(sent_nll.size()));
  }

  struct Acc {
    FeatureMap context;
    double nll = 0.0;
    int64_t tokens = 0, sentences = 0;
  };
  std::map<std::string, Acc> by_context;
  for (size_t i = 0; i < indices.size(); ++i) {
    const Example& ex = corpus.examples[static_cast<size_t>(indices[i])];
    Acc& acc = by_context[feature_map_key(ex.features)];
    acc.context = ex.features;
    acc.nll += scores[i].nll;
    acc.tokens += scores[i].tokens;
    acc.sentences += 1;
  }
  for (const auto& [key, acc] : by_context) {
    ContextReport cr;
    cr.context = acc.context;
    cr.logppl = acc.nll / static_cast<double>(acc.tokens);
    cr.tokens = acc.tokens;
    cr.sentences = acc.sentences;
    if (oracle) {
      for (const auto& row : *oracle) {
        if (row.context == acc.context) {
          cr.oracle_entropy = row.entropy;
          cr.oracle_base_ce = row.base_ce;
          break;
        }
      }
    }
    report.contexts.push_back(std::move(cr));
  }
  return report;
}

std::vector<std::array<double, 2>> pca2(const std::vector<std::vector<double>>& rows) {
  std::vector<std::array<double, 2>> coords(rows.size(), {0.0, 0.0});
  if (rows.size() < 2) return coords;
  const int64_t n = static_cast<int64_t>(rows.size());
  const int64_t d = static_cast<int64_t>(rows.front().size());
  std::vector<double> mean(static_cast<size_t>(d), 0.0);
  for (const auto& r : rows) {
    for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += r[static_cast<size_t>(j)];
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  std::vector<double> cov(static_cast<size_t>(d * d), 0.0);
  for (const auto& r : rows) {
    for (int64_t a = 0; a < d; ++a) {
      const double ra = r[static_cast<size_t>(a)] - mean[static_cast<size_t>(a)];
      for (int64_t b = 0; b < d; ++b) {
        cov[static_cast<size_t>(a * d + b)] +=
            ra * (r[static_cast<size_t>(b)] - mean[static_cast<size_t>(b)]);
      }
    }
  }
  for (auto& c : cov) c /= static_cast<double>(n - 1);
  const linalg::EigenResult eig = linalg::jacobi_eigen(std::move(cov), d);
  for (size_t i = 0; i < rows.size(); ++i) {
    for (int k = 0; k < 2 && k < static_cast<int>(eig.values.size()); ++k) {
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        dot += (rows[i][static_cast<size_t>(j)] - mean[static_cast<size_t>(j)]) *
               eig.vectors[static_cast<size_t>(k * d + j)];
      }
      coords[i][static_cast<size_t>(k)] = dot;
    }
  }
  return coords;
}

double silhouette(const std::vector<std::vector<double>>& points,
                  const std::vector<int64_t>& labels) {
  const size_t n = points.size();
  if (n != labels.size() || n == 0) throw std::invalid_argument("silhouette: bad input");
  auto dist = [&](size_t a, size_t b) {
    double s = 0.0;
    for (size_t j = 0; j < points[a].size(); ++j) {
      const double d = points[a][j] - points[b][j];
      s += d * d;
    }
    return std::sqrt(s);
  };
  std::set<int64_t> label_set(labels.begin(), labels.end());
  double total = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double a_sum = 0.0;
    int64_t a_count = 0;
    std::map<int64_t, std::pair<double, int64_t>> other;
    for (size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      if (labels[j] == labels[i]) {
        a_sum += dist(i, j);
        ++a_count;
      } else {
        auto& o = other[labels[j]];
        o.first += dist(i, j);
        ++o.second;
      }
    }
    if (a_count == 0 || other.empty()) continue;  // singleton contributes 0
    const double a = a_sum / static_cast<double>(a_count);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [lab, o] : other) b = std::min(b, o.first / static_cast<double>(o.second));
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(n);
}

}  // namespace met
