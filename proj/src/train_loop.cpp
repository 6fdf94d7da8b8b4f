#include "met/train_loop.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace met {

void to_json(nlohmann::json& j, const TrainBudget& b) {
  j = nlohmann::json{{"max_steps", b.max_steps},   {"max_epochs", b.max_epochs},
                     {"eval_every", b.eval_every}, {"patience", b.patience},
                     {"min_delta", b.min_delta}};
}

void from_json(const nlohmann::json& j, TrainBudget& b) {
  b.max_steps = j.value("max_steps", b.max_steps);
  b.max_epochs = j.value("max_epochs", b.max_epochs);
  b.eval_every = j.value("eval_every", b.eval_every);
  b.patience = j.value("patience", b.patience);
  b.min_delta = j.value("min_delta", b.min_delta);
}

TrainResult run_train_loop(int64_t n_train, int64_t batch_size, const TrainBudget& budget,
                           RngStream& order_rng,
                           const std::function<double(std::span<const int64_t>)>& step_fn,
                           const std::function<double()>& val_fn,
                           const std::function<void()>& snapshot_fn,
                           const std::function<void()>& restore_fn) {
  TrainResult res;
  res.best_val = std::numeric_limits<double>::infinity();
  if (n_train == 0) return res;

  std::vector<int64_t> order(static_cast<size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);

  int bad_evals = 0;
  bool have_snapshot = false;
  bool stop = false;

  auto maybe_eval = [&](int64_t step) {
    const double val = val_fn();
    res.val_curve.emplace_back(step, val);
    if (val < res.best_val - budget.min_delta) {
      res.best_val = val;
      bad_evals = 0;
      snapshot_fn();
      have_snapshot = true;
    } else {
      if (++bad_evals >= budget.patience) {
        res.early_stopped = true;
        stop = true;
      }
    }
  };

  for (int64_t epoch = 0; epoch < budget.max_epochs && !stop; ++epoch) {
    order_rng.shuffle(order);
    for (int64_t start = 0; start < n_train && !stop; start += batch_size) {
      const int64_t end = std::min<int64_t>(n_train, start + batch_size);
      const double loss = step_fn(std::span<const int64_t>(order.data() + start,
                                                           static_cast<size_t>(end - start)));
      if (!std::isfinite(loss)) {
        throw TrainingDiverged("non-finite loss at step " + std::to_string(res.steps + 1));
      }
      ++res.steps;
      res.train_curve.emplace_back(res.steps, loss);
      if (budget.eval_every > 0 && res.steps % budget.eval_every == 0) maybe_eval(res.steps);
      if (res.steps >= budget.max_steps) stop = true;
    }
  }
  if (res.val_curve.empty() || res.val_curve.back().first != res.steps) maybe_eval(res.steps);
  if (have_snapshot) restore_fn();
  return res;
}

}  // namespace met
