#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "met/tensor.hpp"

namespace met {

// Reference training configuration at full scale; desk-scale defaults differ
// (see OptimConfig) because the tiny model trains best with a larger rate.
inline constexpr double kReferenceLearningRate = 1e-5;
inline constexpr int64_t kReferenceBatchSize = 4;

struct OptimConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t batch_size = 16;
};

void to_json(nlohmann::json& j, const OptimConfig& c);
void from_json(const nlohmann::json& j, OptimConfig& c);

// Adam with decoupled weight decay. Decay is applied only to parameters
// registered with decay=true (2-D projection weights; embeddings, biases and
// norm gains are exempt so that rows with zero gradient stay bit-identical).
class AdamW {
 public:
  explicit AdamW(const OptimConfig& cfg) : cfg_(cfg) {}

  void register_param(std::string name, Tensor* p, bool decay);
  // grads[i] pairs with registration order; null entries are skipped.
  void step(const std::vector<const Tensor*>& grads);
  int64_t steps_taken() const { return t_; }
  size_t num_params() const { return params_.size(); }
  const std::string& param_name(size_t i) const { return params_[i].name; }

 private:
  struct Entry {
    std::string name;
    Tensor* p;
    bool decay;
    std::vector<double> m, v;
  };
  OptimConfig cfg_;
  std::vector<Entry> params_;
  int64_t t_ = 0;
};

}  // namespace met
