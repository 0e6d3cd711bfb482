#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fclab/model.hpp"
#include "fclab/tensor.hpp"

namespace fclab {

struct PoisonConfig {
  double beta0 = 0.25;
  std::optional<double> beta_override;
  double lambda = 0.01;  // forward step size
  int max_iters = 1000;
  enum class Metric { L2, Linf };
  Metric metric = Metric::L2;
  double eps_inf = 2.0;  // pixel units
  std::optional<double> stop_threshold;  // feature-space L2 distance
  std::optional<double> decay = 0.5;     // lambda decay factor on stall
  int decay_patience = 50;               // iterations without improvement
};

struct PoisonResult {
  Tensor image;
  int iterations = 0;
  double feature_distance = 0.0;  // ||f(p) - f(t)|| at the returned iterate
  double input_l2 = 0.0;          // ||p - b||
  double input_linf = 0.0;        // max |p - b|
  enum class StopReason { Threshold, MaxIters };
  StopReason stop_reason = StopReason::MaxIters;
  double final_lambda = 0.0;
  bool failed = false;
  std::string error;
};

// Input-space weight for the feature-collision objective, scaled by how the
// base dimensionality compares to the feature dimensionality:
// beta = beta0 * n_d^2 / dim_b^2.
double compute_beta(double beta0, int feature_dim, int base_input_dim);

// Minimum L2 distance over all distinct pairs of feature rows (N x n_d).
double min_pairwise_feature_distance(const Tensor& features);

// Convenience: feature rows come from the model over the training set batch.
double compute_stop_threshold(const Model& model, const Tensor& train_batch);

// Convex pixel blend: gamma * target + (1 - gamma) * base.
Tensor watermark_blend(const Tensor& base, const Tensor& target, double gamma);

// Iterates forward gradient steps on ||f(x) - f(t)||^2 from x0 = b,
// alternated with a proximal pull toward b (L2 metric) or a per-pixel clip
// to [b - eps_inf, b + eps_inf] (Linf metric). Pixels stay in [0, 255].
// Returns the best iterate seen.
PoisonResult craft_poison(const Model& model, const Tensor& target, const Tensor& base,
                          const PoisonConfig& cfg);

// Same loop with cfg.metric forced to Linf.
PoisonResult craft_poison_linf(const Model& model, const Tensor& target, const Tensor& base,
                               const PoisonConfig& cfg);

// Watermarks every base with the target at opacity gamma, then crafts each
// poison independently on a bounded worker pool. Results keep the order of
// bases and do not depend on the parallelism degree. Per-poison failures
// are flagged in the result slot without aborting siblings.
std::vector<PoisonResult> craft_poison_set(const Model& model, const Tensor& target,
                                           const std::vector<Tensor>& bases,
                                           const PoisonConfig& cfg, double gamma,
                                           int parallelism);

}  // namespace fclab
