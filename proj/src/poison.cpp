#include "fclab/poison.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <thread>

namespace fclab {

double compute_beta(double beta0, int feature_dim, int base_input_dim) {
  const double r = static_cast<double>(feature_dim) / static_cast<double>(base_input_dim);
  return beta0 * r * r;
}

double min_pairwise_feature_distance(const Tensor& features) {
  if (features.ndim() != 2 || features.dim(0) < 2)
    throw std::invalid_argument("min_pairwise_feature_distance: need an NxD matrix with N >= 2");
  const int N = features.dim(0), D = features.dim(1);
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < N; ++i)
    for (int j = i + 1; j < N; ++j) {
      double s = 0.0;
      const double* a = features.data() + static_cast<std::size_t>(i) * D;
      const double* b = features.data() + static_cast<std::size_t>(j) * D;
      for (int d = 0; d < D; ++d) {
        const double diff = a[d] - b[d];
        s += diff * diff;
      }
      best = std::min(best, s);
    }
  return std::sqrt(best);
}

double compute_stop_threshold(const Model& model, const Tensor& train_batch) {
  return min_pairwise_feature_distance(model.features(train_batch));
}

Tensor watermark_blend(const Tensor& base, const Tensor& target, double gamma) {
  if (!base.same_shape(target))
    throw std::invalid_argument("watermark_blend: shape mismatch " + base.shape_str() + " vs " +
                                target.shape_str());
  if (gamma < 0.0 || gamma > 1.0)
    throw std::invalid_argument("watermark_blend: gamma must be in [0, 1]");
  Tensor out = base;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = gamma * target[i] + (1.0 - gamma) * base[i];
  return out;
}

namespace {

Tensor as_batch1(const Tensor& img) {
  std::vector<int> shape = {1};
  shape.insert(shape.end(), img.shape().begin(), img.shape().end());
  return Tensor(shape, std::vector<double>(img.data(), img.data() + img.size()));
}

Tensor unbatch(const Tensor& b1, const std::vector<int>& shape) {
  return Tensor(shape, std::vector<double>(b1.data(), b1.data() + b1.size()));
}

struct Distances {
  double l2, linf;
};

Distances input_distances(const Tensor& p, const Tensor& b) {
  double l2 = 0.0, linf = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - b[i];
    l2 += d * d;
    linf = std::max(linf, std::abs(d));
  }
  return {std::sqrt(l2), linf};
}

}  // namespace

PoisonResult craft_poison(const Model& model, const Tensor& target, const Tensor& base,
                          const PoisonConfig& cfg) {
  if (cfg.lambda <= 0.0) throw std::invalid_argument("craft_poison: lambda must be positive");
  if (cfg.max_iters < 1) throw std::invalid_argument("craft_poison: max_iters must be >= 1");
  if (cfg.eps_inf < 0.0) throw std::invalid_argument("craft_poison: eps_inf must be >= 0");
  if (!target.same_shape(base))
    throw std::invalid_argument("craft_poison: target/base shape mismatch");

  const double beta =
      cfg.beta_override ? *cfg.beta_override
                        : compute_beta(cfg.beta0, model.feature_dim(),
                                       static_cast<int>(base.size()));

  const Tensor f_target = model.features(as_batch1(target));

  PoisonResult res;
  double lambda = cfg.lambda;
  Tensor x = as_batch1(base);
  const Tensor b = x;

  Tensor best_x = x;
  double best_lp = std::numeric_limits<double>::infinity();
  int best_iter = 0;
  int stall = 0;

  const double thr = cfg.stop_threshold ? *cfg.stop_threshold : -1.0;

  auto fail = [&](int iter, const std::string& what) {
    res.failed = true;
    res.error = what + " at iteration " + std::to_string(iter);
    res.image = unbatch(best_x, base.shape());
    res.iterations = iter;
    return res;
  };

  int iter = 0;
  bool hit_threshold = false;
  for (iter = 1; iter <= cfg.max_iters; ++iter) {
    Graph g;
    const NodeId xin = g.input(x);
    ForwardPass fp = model.forward(g, xin, /*params_as_roots=*/false);
    const NodeId ft = g.constant(f_target);
    const NodeId lp_node = g.l2sq_distance(fp.features, ft);
    const double lp = g.value(lp_node)[0];
    if (!std::isfinite(lp)) return fail(iter, "non-finite loss");

    if (lp < best_lp) {
      best_lp = lp;
      best_x = x;
      best_iter = iter - 1;
      stall = 0;
    } else if (cfg.decay && ++stall >= cfg.decay_patience) {
      lambda *= *cfg.decay;
      stall = 0;
    }

    if (thr >= 0.0 && std::sqrt(lp) < thr) {
      hit_threshold = true;
      best_x = x;  // the iterate that satisfied the threshold
      best_lp = lp;
      break;
    }

    auto grads = g.backward(lp_node);
    const Tensor& gx = grads.at(xin);
    if (!gx.all_finite()) return fail(iter, "non-finite gradient");

    // Forward step on the feature loss, then the metric's backward step.
    if (cfg.metric == PoisonConfig::Metric::L2) {
      const double denom = 1.0 + lambda * beta;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double xhat = x[i] - lambda * gx[i];
        x[i] = std::clamp((xhat + lambda * beta * b[i]) / denom, 0.0, 255.0);
      }
    } else {
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double xhat = x[i] - lambda * gx[i];
        const double lo = std::max(0.0, b[i] - cfg.eps_inf);
        const double hi = std::min(255.0, b[i] + cfg.eps_inf);
        x[i] = std::clamp(xhat, lo, hi);
      }
    }
  }

  if (!hit_threshold) {
    // The loop scored iterates up to x_{maxIters-1}; score the last update too.
    Graph g;
    ForwardPass fp = model.forward(g, g.constant(x), /*params_as_roots=*/false);
    const double lp = g.value(g.l2sq_distance(fp.features, g.constant(f_target)))[0];
    if (std::isfinite(lp) && lp < best_lp) {
      best_lp = lp;
      best_x = x;
      best_iter = cfg.max_iters;
    }
  }
  (void)best_iter;

  res.image = unbatch(best_x, base.shape());
  res.iterations = hit_threshold ? iter : cfg.max_iters;
  res.feature_distance = std::sqrt(best_lp);
  const auto d = input_distances(res.image, base);
  res.input_l2 = d.l2;
  res.input_linf = d.linf;
  res.stop_reason =
      hit_threshold ? PoisonResult::StopReason::Threshold : PoisonResult::StopReason::MaxIters;
  res.final_lambda = lambda;
  return res;
}

PoisonResult craft_poison_linf(const Model& model, const Tensor& target, const Tensor& base,
                               const PoisonConfig& cfg) {
  PoisonConfig c = cfg;
  c.metric = PoisonConfig::Metric::Linf;
  return craft_poison(model, target, base, c);
}

std::vector<PoisonResult> craft_poison_set(const Model& model, const Tensor& target,
                                           const std::vector<Tensor>& bases,
                                           const PoisonConfig& cfg, double gamma,
                                           int parallelism) {
  if (bases.empty()) throw std::invalid_argument("craft_poison_set: no bases");
  std::vector<PoisonResult> results(bases.size());
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= bases.size()) return;
      try {
        const Tensor seed = watermark_blend(bases[i], target, gamma);
        results[i] = craft_poison(model, target, seed, cfg);
      } catch (const std::exception& e) {
        results[i].failed = true;
        results[i].error = e.what();
        results[i].image = bases[i];
      }
    }
  };

  const int width = std::max(1, std::min<int>(parallelism, static_cast<int>(bases.size())));
  if (width == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(width));
    for (int t = 0; t < width; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return results;
}

}  // namespace fclab
