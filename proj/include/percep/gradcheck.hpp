// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient verification. Runs in double precision: float
// only has ~7 digits, which is not enough headroom between the O(h^2)
// truncation error and round-off for a trustworthy comparison.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "percep/tensor.hpp"

namespace percep {

struct GradCheckReport {
  double max_rel_err = 0.0;
  size_t worst_input = 0;   // index into the checked tensor list
  int64_t worst_flat = 0;   // flat element index within that tensor
  double analytic = 0.0;
  double numeric = 0.0;
  int64_t checked = 0;

  bool ok(double tol) const { return checked > 0 && max_rel_err <= tol; }

  std::string str() const {
    return "max_rel_err=" + std::to_string(max_rel_err) + " at input " + std::to_string(worst_input) +
           " elem " + std::to_string(worst_flat) + " (analytic=" + std::to_string(analytic) +
           ", numeric=" + std::to_string(numeric) + ", checked=" + std::to_string(checked) + ")";
  }
};

// `f` maps the inputs to a scalar loss tensor. Analytic gradients come from
// one taped run; each element is then wiggled by +/-h with the tape off.
// Relative error: |analytic - numeric| / max(1, |analytic|).
inline GradCheckReport grad_check(const std::function<Tensor64(std::vector<Tensor64>&)>& f,
                                  std::vector<Tensor64> inputs, double h = 1e-5) {
  GradCheckReport rep;
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  {
    Tape64 tape;
    Tape64::Scope scope(tape);
    Tensor64 loss = f(inputs);
    tape.backward(loss);
  }
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor64& t = inputs[ti];
    std::span<const double> g = t.grad();
    for (int64_t i = 0; i < t.numel(); ++i) {
      const double keep = t.data()[i];
      t.data()[i] = keep + h;
      const double up = f(inputs).value();
      t.data()[i] = keep - h;
      const double dn = f(inputs).value();
      t.data()[i] = keep;
      const double numeric = (up - dn) / (2.0 * h);
      const double analytic = g[static_cast<size_t>(i)];
      const double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_input = ti;
        rep.worst_flat = i;
        rep.analytic = analytic;
        rep.numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace percep
