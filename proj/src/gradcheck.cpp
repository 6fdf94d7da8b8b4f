#include "met/gradcheck.hpp"

#include <cmath>

namespace met {

CheckReport gradient_check(const GraphBuilder& build, ParamMap params,
                           double step, double tol) {
  CheckReport report;
  report.tol = tol;
  for (auto& [name, t] : params) t.requires_grad = true;

  // Analytic pass. The builder registers parameter leaves itself; leaf slots
  // alias the tensors in `params`, so gradients are recovered by address. A
  // tensor registered more than once accumulates over all of its slots.
  std::map<std::string, Tensor> analytic;
  {
    Tape tape;
    Handle loss = build(tape, params);
    tape.backward(loss);
    for (auto& [name, t] : params) {
      Tensor g(t.shape());
      for (size_t i = 0; i < tape.num_values(); ++i) {
        Handle h{static_cast<int32_t>(i)};
        if (&tape.value(h) == &t && tape.has_grad(h)) {
          const Tensor& gi = tape.grad(h);
          for (int64_t j = 0; j < g.numel(); ++j) g[j] += gi[j];
        }
      }
      analytic[name] = std::move(g);
    }
  }

  auto eval_loss = [&]() -> double {
    Tape tape;
    Handle loss = build(tape, params);
    return tape.value(loss).item();
  };

  report.pass = true;
  for (auto& [name, t] : params) {
    CheckEntry entry;
    entry.param = name;
    const Tensor& a = analytic[name];
    for (int64_t i = 0; i < t.numel(); ++i) {
      if (std::isnan(a[i])) {
        report.failure = "NaN analytic gradient at " + name + "[" + std::to_string(i) + "]";
        report.pass = false;
        report.entries.push_back(entry);
        return report;
      }
      const double saved = t[i];
      t[i] = saved + step;
      const double plus = eval_loss();
      t[i] = saved - step;
      const double minus = eval_loss();
      t[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      if (std::isnan(numeric)) {
        report.failure = "NaN numeric gradient at " + name + "[" + std::to_string(i) + "]";
        report.pass = false;
        report.entries.push_back(entry);
        return report;
      }
      const double denom = std::max({std::fabs(a[i]), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(a[i] - numeric) / denom;
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = i;
        entry.analytic_at_worst = a[i];
        entry.numeric_at_worst = numeric;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    if (entry.max_rel_err > tol) report.pass = false;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace met
