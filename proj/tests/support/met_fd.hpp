#pragma once

// Central finite differences against the full MET training loss, shared by
// the unit tests and the acceptance suite. Batch keys are pre-realized so the
// loss is a deterministic function of the prefix parameters.

#include <cmath>
#include <string>

#include "met/prefix.hpp"

namespace met::testsupport {

struct MetFdResult {
  double max_rel_err = 0.0;
  std::string worst;
  bool backbone_grad_free = true;
};

inline MetFdResult met_loss_fd(const LmModel& model, PrefixParams& params,
                               const MetHyperparams& hyper, const FeatureSchema& schema,
                               std::span<const MetExample> batch, const SpecialTokens& specials,
                               double step = 1e-4) {
  MetFdResult out;
  std::map<std::string, Tensor> analytic;
  {
    Tape tape;
    const MetLossParts parts = met_loss(tape, model, params, hyper, schema, batch, specials);
    tape.backward(parts.loss);
    for (auto& [name, t] : params.named_params()) {
      const auto h = tape.find_leaf(*t);
      analytic[name] = h && tape.has_grad(*h) ? tape.grad(*h) : Tensor(t->shape());
    }
    for (const auto& [name, t] : model.named_params()) {
      (void)name;
      const auto h = tape.find_leaf(*t);
      if (h && tape.has_grad(*h)) out.backbone_grad_free = false;
    }
  }
  auto loss_value = [&]() {
    Tape tape;
    return tape.value(met_loss(tape, model, params, hyper, schema, batch, specials).loss).item();
  };
  for (auto& [name, t] : params.named_params()) {
    const Tensor& a = analytic[name];
    for (int64_t i = 0; i < t->numel(); ++i) {
      const double saved = (*t)[i];
      (*t)[i] = saved + step;
      const double plus = loss_value();
      (*t)[i] = saved - step;
      const double minus = loss_value();
      (*t)[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double denom = std::max({std::fabs(a[i]), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(a[i] - numeric) / denom;
      if (rel > out.max_rel_err) {
        out.max_rel_err = rel;
        out.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

}  // namespace met::testsupport
