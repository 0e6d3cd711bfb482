#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "fclab/rng.hpp"
#include "fclab/tensor.hpp"

namespace fclab::testing {

// Builds a scalar-loss graph over the given input tensors and returns the
// loss node. Called repeatedly with perturbed copies for finite differences.
using LossBuilder = std::function<NodeId(Graph&, const std::vector<NodeId>&)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  int checked = 0;
};

// Central finite differences against reverse-mode gradients for every
// element of every input. Relative error is |a-n| / max(1, |a|, |n|) so
// near-zero gradients compare absolutely.
inline GradCheckResult gradcheck(const LossBuilder& build, std::vector<Tensor> inputs,
                                 double h = 1e-5) {
  Graph g;
  std::vector<NodeId> ids;
  ids.reserve(inputs.size());
  for (const auto& t : inputs) ids.push_back(g.input(t));
  const NodeId loss = build(g, ids);
  const auto grads = g.backward(loss);

  auto eval = [&](const std::vector<Tensor>& xs) {
    Graph g2;
    std::vector<NodeId> ids2;
    for (const auto& t : xs) ids2.push_back(g2.constant(t));
    return g2.value(build(g2, ids2))[0];
  };

  GradCheckResult res;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const Tensor& analytic = grads.at(ids[t]);
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double orig = inputs[t][i];
      inputs[t][i] = orig + h;
      const double fp = eval(inputs);
      inputs[t][i] = orig - h;
      const double fm = eval(inputs);
      inputs[t][i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i];
      const double rel =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.checked;
    }
  }
  return res;
}

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace fclab::testing
