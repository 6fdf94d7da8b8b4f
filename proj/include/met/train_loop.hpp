#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <json.hpp>

#include "met/rng.hpp"

namespace met {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainBudget {
  int64_t max_steps = 5000;
  int64_t max_epochs = 3;
  int64_t eval_every = 250;
  int patience = 2;          // consecutive non-improving evals before stopping
  double min_delta = 1e-3;
};

void to_json(nlohmann::json& j, const TrainBudget& b);
void from_json(const nlohmann::json& j, TrainBudget& b);

struct TrainResult {
  std::vector<std::pair<int64_t, double>> train_curve;  // (step, batch loss)
  std::vector<std::pair<int64_t, double>> val_curve;    // (step, val nll)
  int64_t steps = 0;
  double best_val = 0.0;
  bool early_stopped = false;
};

// Generic epoch/step loop with plateau early-stopping. The caller supplies
// the actual work: step_fn consumes a batch of example indices and returns
// the loss (throwing TrainingDiverged on NaN), val_fn scores the validation
// set, snapshot/restore capture the best parameters seen.
TrainResult run_train_loop(int64_t n_train, int64_t batch_size, const TrainBudget& budget,
                           RngStream& order_rng,
                           const std::function<double(std::span<const int64_t>)>& step_fn,
                           const std::function<double()>& val_fn,
                           const std::function<void()>& snapshot_fn,
                           const std::function<void()>& restore_fn);

}  // namespace met
