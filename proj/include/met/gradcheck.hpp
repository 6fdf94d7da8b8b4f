#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "met/autodiff.hpp"

namespace met {

using ParamMap = std::map<std::string, Tensor>;

// Builds the loss on the given tape from named parameters. Must be
// deterministic: any internal randomness has to come from RngStreams
// reconstructed identically on every invocation.
using GraphBuilder = std::function<Handle(Tape&, ParamMap&)>;

struct CheckEntry {
  std::string param;
  double max_rel_err = 0.0;
  int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

struct CheckReport {
  bool pass = false;
  double tol = 0.0;
  double max_rel_err = 0.0;
  std::vector<CheckEntry> entries;
  std::string failure;  // non-empty on NaN or structural failure
};

// Central finite differences against the tape gradient.
// rel_err = |a - n| / max(|a|, |n|, 1e-8).
CheckReport gradient_check(const GraphBuilder& build, ParamMap params,
                           double step = 1e-4, double tol = 1e-4);

}  // namespace met
