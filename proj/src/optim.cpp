#include "met/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace met {

void to_json(nlohmann::json& j, const OptimConfig& c) {
  j = nlohmann::json{{"lr", c.lr},         {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},   {"beta2", c.beta2},
                     {"eps", c.eps},       {"batch_size", c.batch_size}};
}

void from_json(const nlohmann::json& j, OptimConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.batch_size = j.value("batch_size", c.batch_size);
}

void AdamW::register_param(std::string name, Tensor* p, bool decay) {
  Entry e;
  e.name = std::move(name);
  e.p = p;
  e.decay = decay;
  e.m.assign(static_cast<size_t>(p->numel()), 0.0);
  e.v.assign(static_cast<size_t>(p->numel()), 0.0);
  params_.push_back(std::move(e));
}

void AdamW::step(const std::vector<const Tensor*>& grads) {
  if (grads.size() != params_.size()) {
    throw std::invalid_argument("AdamW::step: got " + std::to_string(grads.size()) +
                                " gradients for " + std::to_string(params_.size()) +
                                " parameters");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Entry& e = params_[i];
    const Tensor* g = grads[i];
    if (g == nullptr) continue;
    if (!g->same_shape(*e.p)) {
      throw ShapeError("AdamW::step: gradient shape mismatch for " + e.name);
    }
    Tensor& p = *e.p;
    const int64_t n = p.numel();
    for (int64_t j = 0; j < n; ++j) {
      const double gj = (*g)[j];
      e.m[static_cast<size_t>(j)] = cfg_.beta1 * e.m[static_cast<size_t>(j)] + (1.0 - cfg_.beta1) * gj;
      e.v[static_cast<size_t>(j)] = cfg_.beta2 * e.v[static_cast<size_t>(j)] + (1.0 - cfg_.beta2) * gj * gj;
      const double mhat = e.m[static_cast<size_t>(j)] / bc1;
      const double vhat = e.v[static_cast<size_t>(j)] / bc2;
      double update = mhat / (std::sqrt(vhat) + cfg_.eps);
      if (e.decay) update += cfg_.weight_decay * p[j];
      p[j] -= cfg_.lr * update;
    }
  }
}

}  // namespace met
