#include <cmath>

#include "doctest.h"
#include "fclab/data.hpp"
#include "fclab/model.hpp"
#include "fclab/optim.hpp"
#include "fclab/rng.hpp"

using namespace fclab;

namespace {

// Single trainable parameter wrapped in a model-shaped harness is overkill;
// Adam is exercised directly through a tiny dense-only model.
Model tiny_head_model(int in_dim, int classes, std::uint64_t seed) {
  return build({LayerSpec::flatten(), LayerSpec::dense(in_dim), LayerSpec::dense(classes)},
               {1, 1, in_dim}, seed);
}

// Two classes of 8x8 images separated by mean brightness; trivially
// learnable so training converges within a few dozen epochs.
Dataset bright_vs_dark(int per_class, std::uint64_t seed) {
  Dataset ds;
  ds.class_names = {"dark", "bright"};
  ds.split = "train";
  Rng rng(seed);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < per_class; ++i) {
      Tensor px({1, 8, 8});
      const double level = c == 0 ? 60.0 : 190.0;
      for (std::size_t k = 0; k < px.size(); ++k) px[k] = level + rng.uniform(-25.0, 25.0);
      ds.images.push_back({std::move(px), c, "test:" + std::to_string(c) + ":" + std::to_string(i)});
    }
  return ds;
}

}  // namespace

TEST_CASE("adam first step matches the closed form") {
  // With fresh state, the bias-corrected first step is
  // -lr * g / (|g| + eps) for every coordinate.
  Model m = tiny_head_model(3, 2, 1);
  const Tensor w_before = m.final_weights();
  AdamConfig cfg;
  cfg.lr = 0.05;
  Adam opt(m, cfg);

  std::vector<Tensor> grads;
  Rng rng(2);
  for (const auto& p : m.params()) {
    Tensor g(p.value.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = rng.uniform(-2.0, 2.0);
    grads.push_back(g);
  }
  opt.step(m, grads);
  CHECK(opt.steps_taken() == 1);

  const Tensor& g = grads[m.final_weight_param_index()];
  const Tensor& w_after = m.final_weights();
  for (std::size_t i = 0; i < w_after.size(); ++i) {
    const double expect = w_before[i] - cfg.lr * g[i] / (std::abs(g[i]) + cfg.eps);
    CHECK(w_after[i] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("adam skips frozen parameters entirely") {
  Model m = tiny_head_model(3, 2, 3);
  m.freeze_all_but_final();
  const Model before = m;
  Adam opt(m, {});
  std::vector<Tensor> grads(m.params().size());
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (m.params()[i].trainable) grads[i] = Tensor::full(m.params()[i].value.shape(), 1.0);
  opt.step(m, grads);  // frozen slots hold empty tensors; must not be touched
  for (std::size_t p = 0; p < m.params().size(); ++p) {
    if (m.params()[p].trainable) continue;
    for (std::size_t i = 0; i < m.params()[p].value.size(); ++i)
      CHECK(m.params()[p].value[i] == before.params()[p].value[i]);
  }
}

TEST_CASE("adam validates gradient shapes") {
  Model m = tiny_head_model(3, 2, 4);
  Adam opt(m, {});
  std::vector<Tensor> grads(m.params().size() - 1);
  CHECK_THROWS(opt.step(m, grads));
  std::vector<Tensor> bad(m.params().size());
  for (std::size_t i = 0; i < bad.size(); ++i) bad[i] = Tensor({1});
  CHECK_THROWS(opt.step(m, bad));
}

TEST_CASE("train drives a separable problem to high accuracy, deterministically") {
  Dataset ds = bright_vs_dark(12, 77);
  Model a = build(tiny_specs(2), {1, 8, 8}, 5);
  Model b = build(tiny_specs(2), {1, 8, 8}, 5);
  TrainConfig tc{40, 8, 0.01, 9};
  TrainResult ra = train(a, ds, tc);
  TrainResult rb = train(b, ds, tc);
  CHECK(ra.final_acc() == 1.0);
  CHECK(ra.final_loss() < 0.1);
  CHECK(ra.final_loss() == rb.final_loss());
  for (std::size_t p = 0; p < a.params().size(); ++p)
    for (std::size_t i = 0; i < a.params()[p].value.size(); ++i)
      CHECK(a.params()[p].value[i] == b.params()[p].value[i]);
  CHECK(ra.epoch_loss.size() == 40);
  CHECK(ra.epoch_acc.size() == 40);
}

TEST_CASE("train validates inputs") {
  Dataset empty;
  Model m = build(tiny_specs(2), {1, 8, 8}, 5);
  CHECK_THROWS(train(m, empty, {}));
  Dataset ds = synth_dataset(3, 2, 8, 1);  // labels 0..2 vs 2-class model
  CHECK_THROWS(train(m, ds, {}));
  Dataset two = synth_dataset(2, 2, 8, 1);
  TrainConfig bad;
  bad.epochs = 0;
  CHECK_THROWS(train(m, two, bad));
}

TEST_CASE("train_head follows the same trajectory as full train when frozen") {
  Dataset ds = synth_dataset(2, 10, 8, 31);
  Model full = build(tiny_specs(2), {1, 8, 8}, 6);
  Model head = full;
  full.freeze_all_but_final();
  head.freeze_all_but_final();
  TrainConfig tc{15, 8, 0.02, 13};

  TrainResult rf = train(full, ds, tc);
  const Tensor feats = head.features(ds.batch());
  TrainResult rh = train_head(head, feats, ds.labels(), tc);

  CHECK(rf.final_loss() == doctest::Approx(rh.final_loss()).epsilon(1e-12));
  for (std::size_t i = 0; i < full.final_weights().size(); ++i)
    CHECK(full.final_weights()[i] ==
          doctest::Approx(head.final_weights()[i]).epsilon(1e-12));
  for (std::size_t i = 0; i < full.final_bias().size(); ++i)
    CHECK(full.final_bias()[i] == doctest::Approx(head.final_bias()[i]).epsilon(1e-12));
}

TEST_CASE("train_head refuses an unfrozen extractor and bad shapes") {
  Model m = build(tiny_specs(2), {1, 8, 8}, 7);
  Tensor feats({4, 64});
  std::vector<int> labels{0, 1, 0, 1};
  CHECK_THROWS(train_head(m, feats, labels, {}));  // nothing frozen
  m.freeze_all_but_final();
  CHECK_THROWS(train_head(m, Tensor({4, 63}), labels, {}));
  CHECK_THROWS(train_head(m, feats, {0, 1}, {}));
  CHECK_THROWS(train_head(m, feats, {0, 2, 0, 1}, {}));  // label out of range
}

TEST_CASE("evaluate reports accuracy and confidence") {
  Dataset ds = bright_vs_dark(10, 21);
  Model m = build(tiny_specs(2), {1, 8, 8}, 8);
  TrainConfig tc{40, 8, 0.01, 3};
  train(m, ds, tc);
  EvalResult r = evaluate(m, ds);
  CHECK(r.accuracy == 1.0);
  CHECK(r.mean_confidence > 0.5);
  CHECK(r.mean_confidence <= 1.0);
  CHECK(r.predicted.size() == ds.size());
  CHECK(r.probabilities.size() == ds.size());
  for (const auto& p : r.probabilities) {
    double s = 0.0;
    for (double v : p) s += v;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK(evaluate(m, Dataset{}).accuracy == 0.0);
}
