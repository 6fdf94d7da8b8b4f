#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace met::lmm {

// Gaussian grouped regression with random intercepts (and, in estimated
// mode, an optional random slope). This is the exactly-solvable miniature of
// the pooling spectrum: complete pooling, no pooling, and the mixed fit that
// interpolates between them as a function of group size.

struct Observation {
  std::vector<double> x;  // covariates; the intercept column is implicit
  double y = 0.0;
  std::string group;
};

struct GroupedDataset {
  std::vector<Observation> obs;

  std::vector<std::string> groups() const;  // sorted unique
  int64_t n_features() const;
  static GroupedDataset from_csv(const std::filesystem::path& path);
};

struct OlsFit {
  std::vector<double> beta;  // [intercept, slopes...]
  double predict(const std::vector<double>& x) const;
};

// Ordinary least squares on the pooled data. Throws on rank deficiency.
OlsFit fit_complete_pool(const GroupedDataset& data);

// Independent per-group least squares; underdetermined groups are flagged
// with std::nullopt.
std::map<std::string, std::optional<OlsFit>> fit_no_pool(const GroupedDataset& data);

struct GroupCoefficients {
  std::vector<double> mu;  // fixed effects [intercept, slopes...]
  double sigma = 0.0;      // random-intercept sd
  double sigma_slope = 0.0;
  double eps_noise = 1.0;
  std::map<std::string, double> b_intercept;  // posterior-mean offsets
  std::map<std::string, double> b_slope;
  double loglik = 0.0;
  int64_t iterations = 0;

  double predict(const std::string& group, const std::vector<double>& x) const;
  nlohmann::json to_json() const;
};

struct MixedOptions {
  enum class Mode { known, estimated };
  Mode mode = Mode::known;
  // Known-variance mode (intercept-only designs): exact posterior means
  //   b_j = n_j sigma^2 / (n_j sigma^2 + eps^2) * (ybar_j - mu).
  double sigma = 1.0;
  double eps_noise = 1.0;
  std::optional<double> fixed_mu;  // otherwise the GLS estimate
  // Estimated mode: marginal-likelihood maximization by gradient ascent.
  bool random_slope = false;
  double tol = 1e-8;
  int64_t max_iter = 20000;
};

GroupCoefficients fit_mixed(const GroupedDataset& data, const MixedOptions& opts);

// Shrinkage weight w(n) = n sigma^2 / (n sigma^2 + eps^2).
double shrinkage_weight(int64_t n, double sigma, double eps_noise);

struct ShrinkageTemplate {
  double mu = 0.0;
  double sigma = 1.0;
  double eps_noise = 1.0;
  double group_effect = 2.0;  // true offset of the probed group
  uint64_t seed = 1;
};

struct ShrinkageRow {
  int64_t n = 0;
  double weight = 0.0;
  double mixed = 0.0;     // mixed prediction of the group mean
  double no_pool = 0.0;   // group sample mean (mu for n = 0)
  double pooled = 0.0;    // mu
  double dist_to_no_pool = 0.0;
  double dist_to_pooled = 0.0;
};

// One simulated group per requested size, fit with known variances.
std::vector<ShrinkageRow> shrinkage_curve(const ShrinkageTemplate& tmpl,
                                          const std::vector<int64_t>& sizes);

std::string shrinkage_csv(const std::vector<ShrinkageRow>& rows);

}  // namespace met::lmm
