// SPDX-License-Identifier: Apache-2.0
// Central finite-difference gradient checking, independent of the tape's
// analytic backward rules.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mmfuse/numcore.hpp"

namespace gradcheck {

namespace nc = mmfuse::numcore;

struct Result {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::string where;
  bool ok(double tol) const { return max_rel_err < tol; }
};

// Builds the scalar loss on a fresh tape via `build`, runs backward, then
// compares each param's analytic grad to central differences of the same
// `build` closure evaluated without an active tape.
inline Result check_loss(const std::function<nc::Tensor()>& build,
                         std::vector<nc::Tensor> params, double eps = 1e-5) {
  for (auto& p : params) p.zero_grad();
  nc::GradTape tape;
  {
    nc::TapeScope scope(tape);
    nc::Tensor loss = build();
    nc::backward(loss);
  }
  auto eval = [&] { return build().value(); };
  Result res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    const auto* g = p.grad();
    for (int i = 0; i < p.numel(); ++i) {
      double saved = p.data()[i];
      p.data()[i] = saved + eps;
      double up = eval();
      p.data()[i] = saved - eps;
      double down = eval();
      p.data()[i] = saved;
      double fd = (up - down) / (2.0 * eps);
      double an = g ? (*g)[i] : 0.0;
      double abs_err = std::fabs(fd - an);
      double denom = std::max(std::fabs(fd), std::fabs(an));
      // below the floor the FD truncation noise dominates any relative
      // measure; require absolute agreement instead
      double rel = denom > 1e-6 ? abs_err / denom : (abs_err > 1e-7 ? 1.0 : 0.0);
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.where = "param " + std::to_string(pi) + " elem " + std::to_string(i);
      }
      res.max_abs_err = std::max(res.max_abs_err, abs_err);
    }
  }
  return res;
}

}  // namespace gradcheck
