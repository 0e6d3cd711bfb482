#include <cmath>

#include "doctest.h"
#include "fclab/rng.hpp"
#include "fclab/tensor.hpp"
#include "gradcheck.hpp"

using namespace fclab;
using fclab::testing::gradcheck;
using fclab::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-6;

// Nudges values away from zero so ReLU / maxpool kinks sit far from the
// finite-difference window.
Tensor away_from_kinks(Tensor t, double margin = 1e-2) {
  for (std::size_t i = 0; i < t.size(); ++i)
    if (std::abs(t[i]) < margin) t[i] = t[i] < 0.0 ? -margin : margin;
  return t;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.dim(0) == 2);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0);

  Tensor f = Tensor::full({2, 2}, 3.5);
  CHECK(f[3] == 3.5);
  CHECK(Tensor::scalar(2.0).size() == 1);
  CHECK(t.shape_str() == "[2x3]");

  Tensor n({2}, {1.0, std::nan("")});
  CHECK(!n.all_finite());
  CHECK(f.all_finite());

  Tensor x({2, 3, 4, 5});
  x.at4(1, 2, 3, 4) = 7.0;
  CHECK(x[x.size() - 1] == 7.0);
}

TEST_CASE("gradcheck dense") {
  Rng rng(42);
  for (int k = 0; k < 20; ++k) {
    const int n = 1 + static_cast<int>(rng.uniform_int(3));
    const int in = 2 + static_cast<int>(rng.uniform_int(5));
    const int out = 1 + static_cast<int>(rng.uniform_int(4));
    Tensor tgt = random_tensor({n, out}, rng);
    auto res = gradcheck(
        [&](Graph& g, const std::vector<NodeId>& in_ids) {
          return g.l2sq_distance(g.dense(in_ids[0], in_ids[1], in_ids[2]), g.constant(tgt));
        },
        {random_tensor({n, in}, rng), random_tensor({in, out}, rng),
         random_tensor({out}, rng)});
    CHECK(res.max_rel_err < kGradTol);
  }
}

TEST_CASE("gradcheck conv2d stride and padding") {
  Rng rng(43);
  for (int k = 0; k < 20; ++k) {
    const int ci = 1 + static_cast<int>(rng.uniform_int(2));
    const int co = 1 + static_cast<int>(rng.uniform_int(2));
    const int hw = 4 + static_cast<int>(rng.uniform_int(3));
    const int ksz = 1 + static_cast<int>(rng.uniform_int(3));
    const int stride = 1 + static_cast<int>(rng.uniform_int(2));
    const int pad = static_cast<int>(rng.uniform_int(2));
    const int ohw = (hw + 2 * pad - ksz) / stride + 1;
    if (ohw < 1) continue;
    Tensor tgt = random_tensor({1, co, ohw, ohw}, rng);
    auto res = gradcheck(
        [&](Graph& g, const std::vector<NodeId>& in_ids) {
          return g.l2sq_distance(g.conv2d(in_ids[0], in_ids[1], stride, pad), g.constant(tgt));
        },
        {random_tensor({1, ci, hw, hw}, rng), random_tensor({co, ci, ksz, ksz}, rng)});
    CHECK(res.max_rel_err < kGradTol);
  }
}

TEST_CASE("gradcheck channel_bias") {
  Rng rng(44);
  for (int k = 0; k < 20; ++k) {
    const int c = 1 + static_cast<int>(rng.uniform_int(4));
    Tensor tgt = random_tensor({2, c, 3, 3}, rng);
    auto res = gradcheck(
        [&](Graph& g, const std::vector<NodeId>& in_ids) {
          return g.l2sq_distance(g.channel_bias(in_ids[0], in_ids[1]), g.constant(tgt));
        },
        {random_tensor({2, c, 3, 3}, rng), random_tensor({c}, rng)});
    CHECK(res.max_rel_err < kGradTol);
  }
}

TEST_CASE("gradcheck maxpool2d") {
  Rng rng(45);
  for (int k = 0; k < 20; ++k) {
    const int hw = 4 + static_cast<int>(rng.uniform_int(3));
    const int win = 2 + static_cast<int>(rng.uniform_int(2));
    const int stride = 1 + static_cast<int>(rng.uniform_int(2));
    if (win > hw) continue;
    Graph probe;
    Tensor in = random_tensor({1, 2, hw, hw}, rng, 0.0, 10.0);
    const Tensor& out = probe.value(probe.maxpool2d(probe.constant(in), win, stride));
    Tensor tgt = random_tensor(out.shape(), rng);
    auto res = gradcheck(
        [&](Graph& g, const std::vector<NodeId>& in_ids) {
          return g.l2sq_distance(g.maxpool2d(in_ids[0], win, stride), g.constant(tgt));
        },
        {in});
    CHECK(res.max_rel_err < kGradTol);
  }
}

TEST_CASE("gradcheck relu") {
  Rng rng(46);
  for (int k = 0; k < 20; ++k) {
    Tensor in = away_from_kinks(random_tensor({3, 7}, rng));
    Tensor tgt = random_tensor({3, 7}, rng);
    auto res = gradcheck(
        [&](Graph& g, const std::vector<NodeId>& in_ids) {
          return g.l2sq_distance(g.relu(in_ids[0]), g.constant(tgt));
        },
        {in});
    CHECK(res.max_rel_err < kGradTol);
  }
}

TEST_CASE("gradcheck lrn") {
  Rng rng(47);
  for (int k = 0; k < 20; ++k) {
    const int c = 3 + static_cast<int>(rng.uniform_int(4));
    Tensor tgt = random_tensor({1, c, 2, 2}, rng);
    auto res = gradcheck(
        [&](Graph& g, const std::vector<NodeId>& in_ids) {
          return g.l2sq_distance(g.lrn(in_ids[0], 2, 2.0, 1e-2, 0.75), g.constant(tgt));
        },
        {random_tensor({1, c, 2, 2}, rng)});
    CHECK(res.max_rel_err < kGradTol);
  }
}

TEST_CASE("gradcheck flatten scale add") {
  Rng rng(48);
  for (int k = 0; k < 20; ++k) {
    Tensor tgt = random_tensor({2, 12}, rng);
    auto res = gradcheck(
        [&](Graph& g, const std::vector<NodeId>& in_ids) {
          const NodeId f = g.flatten(g.scale(in_ids[0], 0.37));
          return g.l2sq_distance(g.add(f, in_ids[1]), g.constant(tgt));
        },
        {random_tensor({2, 3, 2, 2}, rng), random_tensor({2, 12}, rng)});
    CHECK(res.max_rel_err < kGradTol);
  }
}

TEST_CASE("gradcheck softmax cross entropy") {
  Rng rng(49);
  for (int k = 0; k < 20; ++k) {
    const int n = 1 + static_cast<int>(rng.uniform_int(4));
    const int c = 2 + static_cast<int>(rng.uniform_int(4));
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(c)));
    auto res = gradcheck(
        [&](Graph& g, const std::vector<NodeId>& in_ids) {
          return g.softmax_cross_entropy(in_ids[0], labels);
        },
        {random_tensor({n, c}, rng, -3.0, 3.0)});
    CHECK(res.max_rel_err < kGradTol);
  }
}

TEST_CASE("gradcheck l2sq distance both sides") {
  Rng rng(50);
  for (int k = 0; k < 20; ++k) {
    auto res = gradcheck(
        [&](Graph& g, const std::vector<NodeId>& in_ids) {
          return g.l2sq_distance(in_ids[0], in_ids[1]);
        },
        {random_tensor({4, 5}, rng), random_tensor({4, 5}, rng)});
    CHECK(res.max_rel_err < kGradTol);
  }
}

TEST_CASE("backward zero for unreachable roots and constant handling") {
  Graph g;
  const NodeId a = g.input(Tensor({2}, {1.0, 2.0}));
  const NodeId b = g.input(Tensor({2}, {3.0, 4.0}));  // not connected to loss
  const NodeId loss = g.l2sq_distance(a, g.constant(Tensor({2}, {0.0, 0.0})));
  auto grads = g.backward(loss);
  CHECK(grads.at(a)[0] == doctest::Approx(2.0));
  CHECK(grads.at(a)[1] == doctest::Approx(4.0));
  CHECK(grads.at(b)[0] == 0.0);
  CHECK(grads.at(b)[1] == 0.0);
}

TEST_CASE("shape mismatch raises") {
  Graph g;
  const NodeId a = g.constant(Tensor({2, 3}));
  const NodeId b = g.constant(Tensor({3, 2}));
  CHECK_THROWS(g.l2sq_distance(a, b));
  CHECK_THROWS(g.dense(a, g.constant(Tensor({4, 2})), g.constant(Tensor({2}))));
}
