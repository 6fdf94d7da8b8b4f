#include "met/lmm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "met/linalg.hpp"
#include "met/rng.hpp"

namespace met::lmm {

std::vector<std::string> GroupedDataset::groups() const {
  std::set<std::string> s;
  for (const auto& o : obs) s.insert(o.group);
  return {s.begin(), s.end()};
}

int64_t GroupedDataset::n_features() const {
  return obs.empty() ? 0 : static_cast<int64_t>(obs.front().x.size());
}

GroupedDataset GroupedDataset::from_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty CSV " + path.string());
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  const std::vector<std::string> header = split(line);
  int64_t y_col = -1, group_col = -1;
  std::vector<int64_t> x_cols;
  for (size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "y") {
      y_col = static_cast<int64_t>(i);
    } else if (header[i] == "group") {
      group_col = static_cast<int64_t>(i);
    } else {
      x_cols.push_back(static_cast<int64_t>(i));
    }
  }
  if (y_col < 0 || group_col < 0) {
    throw std::runtime_error("CSV needs 'y' and 'group' columns: " + path.string());
  }
  GroupedDataset data;
  int64_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string> cells = split(line);
    if (cells.size() != header.size()) {
      throw std::runtime_error("CSV row " + std::to_string(line_no) + " has " +
                               std::to_string(cells.size()) + " cells, expected " +
                               std::to_string(header.size()));
    }
    Observation o;
    for (const int64_t c : x_cols) o.x.push_back(std::stod(cells[static_cast<size_t>(c)]));
    o.y = std::stod(cells[static_cast<size_t>(y_col)]);
    o.group = cells[static_cast<size_t>(group_col)];
    data.obs.push_back(std::move(o));
  }
  return data;
}

double OlsFit::predict(const std::vector<double>& x) const {
  double y = beta[0];
  for (size_t i = 0; i < x.size(); ++i) y += beta[i + 1] * x[i];
  return y;
}

namespace {

OlsFit ols(const std::vector<const Observation*>& obs) {
  if (obs.empty()) throw std::invalid_argument("least squares needs >= 1 observation");
  const int64_t p = 1 + static_cast<int64_t>(obs.front()->x.size());
  std::vector<double> xtx(static_cast<size_t>(p * p), 0.0);
  std::vector<double> xty(static_cast<size_t>(p), 0.0);
  std::vector<double> row(static_cast<size_t>(p));
  for (const Observation* o : obs) {
    row[0] = 1.0;
    for (size_t i = 0; i < o->x.size(); ++i) row[i + 1] = o->x[i];
    for (int64_t a = 0; a < p; ++a) {
      for (int64_t b = 0; b < p; ++b) {
        xtx[static_cast<size_t>(a * p + b)] += row[static_cast<size_t>(a)] * row[static_cast<size_t>(b)];
      }
      xty[static_cast<size_t>(a)] += row[static_cast<size_t>(a)] * o->y;
    }
  }
  OlsFit fit;
  try {
    fit.beta = linalg::solve(std::move(xtx), std::move(xty), p);
  } catch (const std::runtime_error&) {
    throw std::runtime_error("rank-deficient design");
  }
  return fit;
}

std::map<std::string, std::vector<const Observation*>> by_group(const GroupedDataset& d) {
  std::map<std::string, std::vector<const Observation*>> g;
  for (const auto& o : d.obs) g[o.group].push_back(&o);
  return g;
}

}  // namespace

OlsFit fit_complete_pool(const GroupedDataset& data) {
  std::vector<const Observation*> all;
  for (const auto& o : data.obs) all.push_back(&o);
  return ols(all);
}

std::map<std::string, std::optional<OlsFit>> fit_no_pool(const GroupedDataset& data) {
  std::map<std::string, std::optional<OlsFit>> out;
  for (auto& [g, obs] : by_group(data)) {
    const int64_t p = 1 + static_cast<int64_t>(obs.front()->x.size());
    if (static_cast<int64_t>(obs.size()) < p) {
      out[g] = std::nullopt;  // underdetermined group, flagged
      continue;
    }
    try {
      out[g] = ols(obs);
    } catch (const std::runtime_error&) {
      out[g] = std::nullopt;
    }
  }
  return out;
}

double GroupCoefficients::predict(const std::string& group, const std::vector<double>& x) const {
  double y = mu[0];
  for (size_t i = 0; i < x.size(); ++i) y += mu[i + 1] * x[i];
  const auto bi = b_intercept.find(group);
  if (bi != b_intercept.end()) y += bi->second;
  const auto bs = b_slope.find(group);
  if (bs != b_slope.end() && !x.empty()) y += bs->second * x[0];
  return y;
}

nlohmann::json GroupCoefficients::to_json() const {
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& [g, b] : b_intercept) {
    groups[g] = {{"intercept_offset", b}};
    const auto bs = b_slope.find(g);
    if (bs != b_slope.end()) groups[g]["slope_offset"] = bs->second;
  }
  return {{"mu", mu},
          {"sigma", sigma},
          {"sigma_slope", sigma_slope},
          {"eps_noise", eps_noise},
          {"loglik", loglik},
          {"iterations", iterations},
          {"groups", groups}};
}

double shrinkage_weight(int64_t n, double sigma, double eps_noise) {
  const double ns2 = static_cast<double>(n) * sigma * sigma;
  return ns2 / (ns2 + eps_noise * eps_noise);
}

namespace {

GroupCoefficients fit_known(const GroupedDataset& data, const MixedOptions& opts) {
  if (data.n_features() != 0) {
    throw std::invalid_argument("known-variance mode supports intercept-only designs");
  }
  GroupCoefficients out;
  out.sigma = opts.sigma;
  out.eps_noise = opts.eps_noise;
  if (opts.sigma == 0.0) {
    // Exact reduction to complete pooling.
    out.mu = fit_complete_pool(data).beta;
    for (const auto& [g, obs] : by_group(data)) {
      (void)obs;
      out.b_intercept[g] = 0.0;
    }
    return out;
  }
  const auto groups = by_group(data);
  double mu;
  if (opts.fixed_mu) {
    mu = *opts.fixed_mu;
  } else {
    // GLS: weight each group mean by the precision of its marginal mean.
    double num = 0.0, den = 0.0;
    for (const auto& [g, obs] : groups) {
      const double n = static_cast<double>(obs.size());
      double ybar = 0.0;
      for (const Observation* o : obs) ybar += o->y;
      ybar /= n;
      const double w = n / (opts.eps_noise * opts.eps_noise + n * opts.sigma * opts.sigma);
      num += w * ybar;
      den += w;
    }
    mu = num / den;
  }
  out.mu = {mu};
  for (const auto& [g, obs] : groups) {
    const int64_t n = static_cast<int64_t>(obs.size());
    double ybar = 0.0;
    for (const Observation* o : obs) ybar += o->y;
    ybar /= static_cast<double>(n);
    out.b_intercept[g] = shrinkage_weight(n, opts.sigma, opts.eps_noise) * (ybar - mu);
  }
  return out;
}

struct MarginalModel {
  const GroupedDataset& data;
  bool random_slope;
  std::map<std::string, std::vector<const Observation*>> groups;
  int64_t p;  // fixed-effect count (1 + covariates)

  // theta = [beta (p), log sigma_b, (log sigma_s), log eps]
  int64_t dim() const { return p + 2 + (random_slope ? 1 : 0); }

  double loglik_grad(const std::vector<double>& theta, std::vector<double>* grad) const {
    const double sb = std::exp(theta[static_cast<size_t>(p)]);
    const double ss = random_slope ? std::exp(theta[static_cast<size_t>(p + 1)]) : 0.0;
    const double eps = std::exp(theta[static_cast<size_t>(dim() - 1)]);
    if (grad) grad->assign(static_cast<size_t>(dim()), 0.0);
    double ll = 0.0;
    for (const auto& [g, obs] : groups) {
      const int64_t n = static_cast<int64_t>(obs.size());
      std::vector<double> r(static_cast<size_t>(n));
      std::vector<double> xs(static_cast<size_t>(n), 0.0);
      for (int64_t i = 0; i < n; ++i) {
        const Observation* o = obs[static_cast<size_t>(i)];
        double mean = theta[0];
        for (size_t k = 0; k < o->x.size(); ++k) mean += theta[k + 1] * o->x[k];
        r[static_cast<size_t>(i)] = o->y - mean;
        if (!o->x.empty()) xs[static_cast<size_t>(i)] = o->x[0];
      }
      std::vector<double> cov(static_cast<size_t>(n * n), 0.0);
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
          double c = sb * sb + ss * ss * xs[static_cast<size_t>(i)] * xs[static_cast<size_t>(j)];
          if (i == j) c += eps * eps;
          cov[static_cast<size_t>(i * n + j)] = c;
        }
      }
      const std::vector<double> l = linalg::cholesky(std::move(cov), n);
      std::vector<double> sinv_r = r;
      linalg::cholesky_solve(l, sinv_r, n);
      double quad = 0.0;
      for (int64_t i = 0; i < n; ++i) quad += r[static_cast<size_t>(i)] * sinv_r[static_cast<size_t>(i)];
      ll += -0.5 * (static_cast<double>(n) * std::log(2.0 * std::numbers::pi) +
                    linalg::cholesky_logdet(l, n) + quad);
      if (!grad) continue;

      // Fixed effects: X^T Sigma^-1 r.
      for (int64_t i = 0; i < n; ++i) {
        (*grad)[0] += sinv_r[static_cast<size_t>(i)];
        const Observation* o = obs[static_cast<size_t>(i)];
        for (size_t k = 0; k < o->x.size(); ++k) {
          (*grad)[k + 1] += o->x[k] * sinv_r[static_cast<size_t>(i)];
        }
      }
      // Variance parameters via dl/dv = (r' S^-1 (dS/dv) S^-1 r - tr(S^-1 dS/dv)) / 2.
      // Each dS has low rank, so traces come from solves against 1, x and I.
      std::vector<double> sinv_1(static_cast<size_t>(n), 1.0);
      linalg::cholesky_solve(l, sinv_1, n);
      double one_sinv_1 = 0.0, one_sinv_r = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        one_sinv_1 += sinv_1[static_cast<size_t>(i)];
        one_sinv_r += sinv_r[static_cast<size_t>(i)];
      }
      {  // log sigma_b: dS = 2 sb^2 11'
        const double quad_term = one_sinv_r * one_sinv_r;
        const double tr_term = one_sinv_1;
        (*grad)[static_cast<size_t>(p)] += sb * sb * (quad_term - tr_term);
      }
      if (random_slope) {  // log sigma_s: dS = 2 ss^2 xx'
        std::vector<double> sinv_x = xs;
        linalg::cholesky_solve(l, sinv_x, n);
        double x_sinv_x = 0.0, x_sinv_r = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          x_sinv_x += xs[static_cast<size_t>(i)] * sinv_x[static_cast<size_t>(i)];
          x_sinv_r += xs[static_cast<size_t>(i)] * sinv_r[static_cast<size_t>(i)];
        }
        (*grad)[static_cast<size_t>(p + 1)] += ss * ss * (x_sinv_r * x_sinv_r - x_sinv_x);
      }
      {  // log eps: dS = 2 eps^2 I
        double tr_sinv = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          std::vector<double> e(static_cast<size_t>(n), 0.0);
          e[static_cast<size_t>(i)] = 1.0;
          linalg::cholesky_solve(l, e, n);
          tr_sinv += e[static_cast<size_t>(i)];
        }
        double r_s2 = 0.0;
        for (int64_t i = 0; i < n; ++i) r_s2 += sinv_r[static_cast<size_t>(i)] * sinv_r[static_cast<size_t>(i)];
        (*grad)[static_cast<size_t>(dim() - 1)] += eps * eps * (r_s2 - tr_sinv);
      }
    }
    return ll;
  }
};

GroupCoefficients fit_estimated(const GroupedDataset& data, const MixedOptions& opts) {
  if (data.n_features() > 1) {
    throw std::invalid_argument("estimated mode supports intercept or intercept+slope designs");
  }
  MarginalModel model{data, opts.random_slope, by_group(data),
                      1 + data.n_features()};
  // Initialize from the pooled fit and residual scale.
  const OlsFit pooled = fit_complete_pool(data);
  std::vector<double> theta(static_cast<size_t>(model.dim()), 0.0);
  for (int64_t i = 0; i < model.p; ++i) theta[static_cast<size_t>(i)] = pooled.beta[static_cast<size_t>(i)];
  double ss_res = 0.0;
  for (const auto& o : data.obs) {
    const double r = o.y - pooled.predict(o.x);
    ss_res += r * r;
  }
  const double sd = std::sqrt(std::max(1e-6, ss_res / static_cast<double>(data.obs.size())));
  theta[static_cast<size_t>(model.p)] = std::log(sd);
  if (opts.random_slope) theta[static_cast<size_t>(model.p + 1)] = std::log(sd);
  theta[static_cast<size_t>(model.dim() - 1)] = std::log(sd);

  std::vector<double> grad;
  double obj = model.loglik_grad(theta, &grad);
  double step = 0.05;
  int64_t iter = 0;
  std::vector<double> trace{obj};
  bool converged = false;
  while (iter < opts.max_iter) {
    ++iter;
    std::vector<double> cand(theta);
    for (size_t i = 0; i < cand.size(); ++i) cand[i] += step * grad[i];
    std::vector<double> cand_grad;
    double cand_obj;
    try {
      cand_obj = model.loglik_grad(cand, &cand_grad);
    } catch (const std::runtime_error&) {
      cand_obj = -std::numeric_limits<double>::infinity();
    }
    if (cand_obj > obj) {
      const double gain = cand_obj - obj;
      theta.swap(cand);
      grad.swap(cand_grad);
      obj = cand_obj;
      trace.push_back(obj);
      step *= 1.25;
      if (gain < opts.tol) {
        converged = true;
        break;
      }
    } else {
      step *= 0.5;
      if (step < 1e-14) {
        converged = true;  // no ascent direction at resolvable scale
        break;
      }
    }
  }
  if (!converged) {
    std::string msg = "fit_mixed did not converge after " + std::to_string(iter) +
                      " iterations; objective trace tail:";
    for (size_t i = trace.size() > 5 ? trace.size() - 5 : 0; i < trace.size(); ++i) {
      msg += " " + std::to_string(trace[i]);
    }
    throw std::runtime_error(msg);
  }

  GroupCoefficients out;
  out.mu.assign(theta.begin(), theta.begin() + model.p);
  out.sigma = std::exp(theta[static_cast<size_t>(model.p)]);
  out.sigma_slope = opts.random_slope ? std::exp(theta[static_cast<size_t>(model.p + 1)]) : 0.0;
  out.eps_noise = std::exp(theta[static_cast<size_t>(model.dim() - 1)]);
  out.loglik = obj;
  out.iterations = iter;
  // Posterior means b_j = G Z' Sigma^-1 r.
  for (const auto& [g, obs] : model.groups) {
    const int64_t n = static_cast<int64_t>(obs.size());
    std::vector<double> r(static_cast<size_t>(n));
    std::vector<double> xs(static_cast<size_t>(n), 0.0);
    for (int64_t i = 0; i < n; ++i) {
      const Observation* o = obs[static_cast<size_t>(i)];
      double mean = out.mu[0];
      for (size_t k = 0; k < o->x.size(); ++k) mean += out.mu[k + 1] * o->x[k];
      r[static_cast<size_t>(i)] = o->y - mean;
      if (!o->x.empty()) xs[static_cast<size_t>(i)] = o->x[0];
    }
    std::vector<double> cov(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < n; ++j) {
        double c = out.sigma * out.sigma +
                   out.sigma_slope * out.sigma_slope * xs[static_cast<size_t>(i)] * xs[static_cast<size_t>(j)];
        if (i == j) c += out.eps_noise * out.eps_noise;
        cov[static_cast<size_t>(i * n + j)] = c;
      }
    }
    const std::vector<double> l = linalg::cholesky(std::move(cov), n);
    std::vector<double> sinv_r = r;
    linalg::cholesky_solve(l, sinv_r, n);
    double one_sinv_r = 0.0, x_sinv_r = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      one_sinv_r += sinv_r[static_cast<size_t>(i)];
      x_sinv_r += xs[static_cast<size_t>(i)] * sinv_r[static_cast<size_t>(i)];
    }
    out.b_intercept[g] = out.sigma * out.sigma * one_sinv_r;
    if (opts.random_slope) out.b_slope[g] = out.sigma_slope * out.sigma_slope * x_sinv_r;
  }
  return out;
}

}  // namespace

GroupCoefficients fit_mixed(const GroupedDataset& data, const MixedOptions& opts) {
  if (data.obs.empty()) throw std::invalid_argument("fit_mixed: empty dataset");
  return opts.mode == MixedOptions::Mode::known ? fit_known(data, opts)
                                                : fit_estimated(data, opts);
}

std::vector<ShrinkageRow> shrinkage_curve(const ShrinkageTemplate& tmpl,
                                          const std::vector<int64_t>& sizes) {
  RngStream rng(tmpl.seed, "lmm/shrinkage");
  std::vector<ShrinkageRow> rows;
  for (const int64_t n : sizes) {
    ShrinkageRow row;
    row.n = n;
    row.weight = shrinkage_weight(n, tmpl.sigma, tmpl.eps_noise);
    row.pooled = tmpl.mu;
    if (n == 0) {
      row.no_pool = tmpl.mu;  // undefined; pure pooling by convention
      row.mixed = tmpl.mu;
      rows.push_back(row);
      continue;
    }
    GroupedDataset data;
    for (int64_t i = 0; i < n; ++i) {
      Observation o;
      o.y = tmpl.mu + tmpl.group_effect + tmpl.eps_noise * rng.normal();
      o.group = "g";
      data.obs.push_back(std::move(o));
    }
    MixedOptions opts;
    opts.mode = MixedOptions::Mode::known;
    opts.sigma = tmpl.sigma;
    opts.eps_noise = tmpl.eps_noise;
    opts.fixed_mu = tmpl.mu;
    const GroupCoefficients fit = fit_mixed(data, opts);
    double ybar = 0.0;
    for (const auto& o : data.obs) ybar += o.y;
    ybar /= static_cast<double>(n);
    row.no_pool = ybar;
    row.mixed = fit.predict("g", {});
    row.dist_to_no_pool = std::fabs(row.mixed - row.no_pool);
    row.dist_to_pooled = std::fabs(row.mixed - row.pooled);
    rows.push_back(row);
  }
  return rows;
}

std::string shrinkage_csv(const std::vector<ShrinkageRow>& rows) {
  std::string csv = "n,weight,mixed,no_pool,pooled,dist_to_no_pool,dist_to_pooled\n";
  for (const auto& r : rows) {
    csv += std::to_string(r.n) + "," + nlohmann::json(r.weight).dump() + "," +
           nlohmann::json(r.mixed).dump() + "," + nlohmann::json(r.no_pool).dump() + "," +
           nlohmann::json(r.pooled).dump() + "," + nlohmann::json(r.dist_to_no_pool).dump() +
           "," + nlohmann::json(r.dist_to_pooled).dump() + "\n";
  }
  return csv;
}

}  // namespace met::lmm
