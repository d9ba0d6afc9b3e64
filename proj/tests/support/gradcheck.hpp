#pragma once

// Central finite-difference oracle. Independent of the reverse-mode path:
// it only re-evaluates the forward function with perturbed parameters.
// The graph of each perturbed pass is inspected solely to notice when a
// perturbation moves a ReLU, |x| or max-pool across its kink; such
// coordinates have no two-sided derivative and are skipped, not compared.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "esrs/numcore/tensor.hpp"

namespace esrs::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<param>[<index>]: analytic vs numeric"
  std::size_t checked = 0;
  std::size_t skipped = 0;  // perturbation crossed a kink
};

/// rel = |a - n| / max(|a|, |n|, floor)
inline double relative_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Which branch every piecewise-linear op took in the graph under `loss`.
inline std::vector<std::size_t> branch_signature(const Tensor<double>& loss) {
  std::vector<std::size_t> sig;
  const auto tape = Tape<double>::record(loss);
  for (const auto* n : tape.nodes()) {
    if (!std::strcmp(n->op, "relu") || !std::strcmp(n->op, "abs")) {
      for (double x : n->inputs[0]->value) sig.push_back(x > 0.0 ? 1 : x < 0.0 ? 2 : 3);
    } else if (!std::strcmp(n->op, "max_pool")) {
      const auto& in = n->inputs[0]->value;
      const std::size_t d = n->shape.back(), batch = n->value.size() / d, steps = in.size() / (batch * d);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < d; ++j) {
          std::size_t t = 0;
          while (t + 1 < steps && in[(b * steps + t) * d + j] != n->value[b * d + j]) ++t;
          sig.push_back(t);
        }
    }
  }
  return sig;
}

/// `loss` must rebuild the graph from `params` on every call.
inline GradCheckResult grad_check(std::vector<std::pair<std::string, Tensor<double>>> params,
                                  const std::function<Tensor<double>()>& loss,
                                  double step = 1e-5) {
  for (auto& [name, p] : params) {
    p.set_requires_grad(true);
    p.clear_grad();
  }
  const auto base = loss();
  const auto base_sig = branch_signature(base);
  backward(base);
  GradCheckResult r;
  for (auto& [name, p] : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    if (analytic.empty()) analytic.assign(p.size(), 0.0);
    auto vals = p.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + step;
      const auto plus = loss();
      vals[i] = saved - step;
      const auto minus = loss();
      vals[i] = saved;
      if (branch_signature(plus) != base_sig || branch_signature(minus) != base_sig) {
        ++r.skipped;
        continue;
      }
      const double numeric = (plus.item() - minus.item()) / (2 * step);
      const double e = relative_error(analytic[i], numeric);
      ++r.checked;
      if (e > r.max_rel_error) {
        r.max_rel_error = e;
        r.worst = name + "[" + std::to_string(i) + "]: " + std::to_string(analytic[i]) + " vs " +
                  std::to_string(numeric);
      }
    }
  }
  return r;
}

}  // namespace esrs::testing
