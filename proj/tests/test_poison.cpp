#include <cmath>
#include <limits>

#include "doctest.h"
#include "fclab/model.hpp"
#include "fclab/poison.hpp"
#include "fclab/rng.hpp"

using namespace fclab;

namespace {

// Model whose feature map is the identity on a single scalar pixel: flatten,
// 1-wide linear feature layer pinned to weight 1 / bias 0, and a 2-class
// head. Crafting against it is a closed-form 1-D problem.
Model scalar_identity_model() {
  Model m = build({LayerSpec::flatten(), LayerSpec::dense(1), LayerSpec::dense(2)}, {1, 1, 1}, 1);
  m.param("layer1.weights").value[0] = 1.0;
  m.param("layer1.bias").value[0] = 0.0;
  return m;
}

PoisonConfig fixed_step_config(double lambda, double beta) {
  PoisonConfig pc;
  pc.lambda = lambda;
  pc.beta_override = beta;
  pc.max_iters = 200;
  pc.decay = std::optional<double>();  // keep the step size fixed
  return pc;
}

}  // namespace

TEST_CASE("crafting a scalar identity feature converges to the closed-form blend") {
  // Forward step on (x - t)^2 followed by the proximal pull toward b has the
  // unique fixed point (2t + beta*b) / (2 + beta).
  Model m = scalar_identity_model();
  const Tensor target({1, 1, 1}, {200.0});
  const Tensor base({1, 1, 1}, {40.0});
  for (double beta : {0.05, 0.1, 0.25, 1.0}) {
    for (double lambda : {0.05, 0.1, 0.25}) {
      PoisonResult r = craft_poison(m, target, base, fixed_step_config(lambda, beta));
      const double expect = (2.0 * 200.0 + beta * 40.0) / (2.0 + beta);
      CHECK(r.image[0] == doctest::Approx(expect).epsilon(1e-9));
      CHECK(!r.failed);
      CHECK(r.stop_reason == PoisonResult::StopReason::MaxIters);
    }
  }
}

TEST_CASE("stop threshold halts crafting early with the qualifying iterate") {
  Model m = scalar_identity_model();
  const Tensor target({1, 1, 1}, {200.0});
  const Tensor base({1, 1, 1}, {40.0});
  PoisonConfig pc = fixed_step_config(0.1, 1e-6);  // near-pure descent toward t
  pc.stop_threshold = 5.0;
  PoisonResult r = craft_poison(m, target, base, pc);
  CHECK(r.stop_reason == PoisonResult::StopReason::Threshold);
  CHECK(r.feature_distance < 5.0);
  CHECK(r.iterations < pc.max_iters);
  // The feature map is the identity, so the reported feature distance is the
  // pixel distance to the target.
  CHECK(r.feature_distance == doctest::Approx(std::abs(r.image[0] - 200.0)).epsilon(1e-12));
}

TEST_CASE("crafted pixels stay inside the valid range") {
  Model m = scalar_identity_model();
  // Target outside the pixel range; the iterate must clamp at 255.
  const Tensor target({1, 1, 1}, {400.0});
  const Tensor base({1, 1, 1}, {250.0});
  PoisonResult r = craft_poison(m, target, base, fixed_step_config(0.25, 1e-9));
  CHECK(r.image[0] <= 255.0);
  CHECK(r.image[0] == doctest::Approx(255.0).epsilon(1e-9));
}

TEST_CASE("linf crafting clips every pixel into the base box exactly") {
  Model m = scalar_identity_model();
  const Tensor target({1, 1, 1}, {200.0});
  const Tensor base({1, 1, 1}, {40.0});
  PoisonConfig pc = fixed_step_config(0.25, 0.0);
  pc.eps_inf = 2.0;
  PoisonResult r = craft_poison_linf(m, target, base, pc);
  CHECK(r.input_linf <= 2.0);        // bit-exact clamp, not approximate
  CHECK(r.image[0] == 42.0);         // descent saturates the box edge
  CHECK(r.feature_distance == doctest::Approx(158.0).epsilon(1e-12));

  // The L2-config entry point forces the metric.
  PoisonConfig l2 = pc;
  l2.metric = PoisonConfig::Metric::L2;
  PoisonResult r2 = craft_poison_linf(m, target, base, l2);
  CHECK(r2.input_linf <= 2.0);
}

TEST_CASE("beta scales with the feature-to-input dimension ratio squared") {
  CHECK(compute_beta(0.25, 64, 256) == 0.25 * (64.0 / 256.0) * (64.0 / 256.0));
  CHECK(compute_beta(1.0, 10, 10) == 1.0);
  CHECK(compute_beta(0.0, 5, 7) == 0.0);
}

TEST_CASE("min pairwise feature distance matches a brute-force oracle") {
  Rng rng(17);
  const int N = 9, D = 5;
  Tensor f({N, D});
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = rng.uniform(-3.0, 3.0);
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) {
      if (i == j) continue;
      double s = 0.0;
      for (int d = 0; d < D; ++d) {
        const double diff = f[static_cast<std::size_t>(i * D + d)] -
                            f[static_cast<std::size_t>(j * D + d)];
        s += diff * diff;
      }
      best = std::min(best, std::sqrt(s));
    }
  CHECK(min_pairwise_feature_distance(f) == doctest::Approx(best).epsilon(1e-12));
  CHECK_THROWS(min_pairwise_feature_distance(Tensor({1, 5})));
  CHECK_THROWS(min_pairwise_feature_distance(Tensor({5})));
}

TEST_CASE("watermark blend is the convex pixel combination") {
  const Tensor base({1, 1, 2}, {10.0, 100.0});
  const Tensor target({1, 1, 2}, {50.0, 0.0});
  Tensor w = watermark_blend(base, target, 0.3);
  CHECK(w[0] == doctest::Approx(0.3 * 50.0 + 0.7 * 10.0).epsilon(1e-15));
  CHECK(w[1] == doctest::Approx(0.7 * 100.0).epsilon(1e-15));
  Tensor zero = watermark_blend(base, target, 0.0);
  CHECK(zero[0] == base[0]);
  Tensor one = watermark_blend(base, target, 1.0);
  CHECK(one[1] == target[1]);
  CHECK_THROWS(watermark_blend(base, target, -0.1));
  CHECK_THROWS(watermark_blend(base, target, 1.1));
  CHECK_THROWS(watermark_blend(base, Tensor({1, 1, 3}), 0.5));
}

TEST_CASE("craft_poison_set keeps base order and ignores parallelism degree") {
  Model m = build(tiny_specs(2), {1, 8, 8}, 3);
  Rng rng(4);
  Tensor target({1, 8, 8});
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = rng.uniform(0.0, 255.0);
  std::vector<Tensor> bases;
  for (int b = 0; b < 5; ++b) {
    Tensor t({1, 8, 8});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(0.0, 255.0);
    bases.push_back(t);
  }
  PoisonConfig pc;
  pc.max_iters = 20;
  auto serial = craft_poison_set(m, target, bases, pc, 0.3, 1);
  auto wide = craft_poison_set(m, target, bases, pc, 0.3, 4);
  REQUIRE(serial.size() == bases.size());
  REQUIRE(wide.size() == bases.size());
  for (std::size_t i = 0; i < bases.size(); ++i) {
    CHECK(!serial[i].failed);
    CHECK(serial[i].feature_distance == wide[i].feature_distance);
    for (std::size_t p = 0; p < serial[i].image.size(); ++p)
      CHECK(serial[i].image[p] == wide[i].image[p]);
    // The watermarked seed, not the raw base, bounds the perturbation.
    Tensor seed = watermark_blend(bases[i], target, 0.3);
    double linf = 0.0;
    for (std::size_t p = 0; p < seed.size(); ++p)
      linf = std::max(linf, std::abs(serial[i].image[p] - seed[p]));
    CHECK(serial[i].input_linf == doctest::Approx(linf).epsilon(1e-12));
  }
  CHECK_THROWS(craft_poison_set(m, target, {}, pc, 0.3, 1));
}

TEST_CASE("craft_poison_set flags a bad base without aborting siblings") {
  Model m = build(tiny_specs(2), {1, 8, 8}, 5);
  Tensor target = Tensor::full({1, 8, 8}, 100.0);
  std::vector<Tensor> bases = {Tensor::full({1, 8, 8}, 50.0), Tensor::full({1, 4, 4}, 50.0),
                               Tensor::full({1, 8, 8}, 150.0)};
  PoisonConfig pc;
  pc.max_iters = 5;
  auto res = craft_poison_set(m, target, bases, pc, 0.0, 2);
  CHECK(!res[0].failed);
  CHECK(res[1].failed);
  CHECK(!res[1].error.empty());
  CHECK(!res[2].failed);
}

TEST_CASE("craft_poison validates its configuration") {
  Model m = scalar_identity_model();
  const Tensor target({1, 1, 1}, {100.0});
  const Tensor base({1, 1, 1}, {50.0});
  PoisonConfig pc;
  pc.lambda = 0.0;
  CHECK_THROWS(craft_poison(m, target, base, pc));
  pc = PoisonConfig{};
  pc.max_iters = 0;
  CHECK_THROWS(craft_poison(m, target, base, pc));
  pc = PoisonConfig{};
  pc.eps_inf = -1.0;
  CHECK_THROWS(craft_poison(m, target, base, pc));
  CHECK_THROWS(craft_poison(m, target, Tensor({1, 1, 2}), PoisonConfig{}));
}
