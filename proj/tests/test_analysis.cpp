#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "fclab/analysis.hpp"
#include "fclab/model.hpp"
#include "fclab/rng.hpp"

using namespace fclab;

namespace {

AttackReport sample_report() {
  AttackReport r;
  r.experiment_id = "oneshot:0";
  r.scenario = "transfer";
  r.target_class = 0;
  r.base_class = 1;
  r.target_id = "synth:1:0:7";
  r.base_ids = {"synth:1:1:3", "synth:1:1:9"};
  r.n_poisons = 2;
  r.gamma = 0.3;
  r.success = true;
  r.predicted_class = 1;
  r.confidence = 0.123456789012345678;  // exercises full double round-trip
  r.angular_deviation_deg = 23.0000000001;
  r.clean_test_accuracy = 0.991;
  r.poisoned_test_accuracy = 0.983;
  r.feature_distances = {0.1, 1.0 / 3.0};
  r.stop_reasons = {"threshold", "max_iters"};
  r.retrain_final_loss = 1e-9;
  r.retrain_final_accuracy = 1.0;
  r.seed = 0xdeadbeefcafef00dULL;
  r.config_hash = "abc123";
  r.warnings = {"shortfall"};
  r.wall_seconds = 1.25;
  return r;
}

}  // namespace

TEST_CASE("angular deviation covers the whole range and is scale invariant") {
  CHECK(angular_deviation({1.0, 0.0}, {1.0, 0.0}) == doctest::Approx(0.0));
  CHECK(angular_deviation({1.0, 0.0}, {0.0, 2.0}) == doctest::Approx(90.0));
  CHECK(angular_deviation({1.0, 0.0}, {-3.0, 0.0}) == doctest::Approx(180.0));
  CHECK(angular_deviation({1.0, 1.0}, {0.0, 5.0}) == doctest::Approx(45.0));
  CHECK(angular_deviation({2.0, 2.0}, {200.0, 200.0}) == doctest::Approx(0.0));
  CHECK_THROWS(angular_deviation({1.0}, {1.0, 0.0}));
  CHECK_THROWS(angular_deviation({0.0, 0.0}, {1.0, 0.0}));
}

TEST_CASE("attack success requires the base class specifically") {
  // Dense head over a 1-pixel identity feature: class scores are just the
  // weight columns times the pixel.
  Model m = build({LayerSpec::flatten(), LayerSpec::dense(1), LayerSpec::dense(3)}, {1, 1, 1}, 1);
  m.param("layer1.weights").value[0] = 1.0;
  m.param("layer1.bias").value[0] = 0.0;
  Tensor& w = m.param("layer2.weights").value;  // 1 x 3
  Tensor& b = m.param("layer2.bias").value;
  w[0] = 0.0;
  w[1] = 0.0;
  w[2] = 0.0;
  b[0] = 0.0;
  b[1] = 2.0;
  b[2] = 1.0;

  const Tensor x({1, 1, 1}, {1.0});
  SuccessCheck hit = attack_success(m, x, 1);
  CHECK(hit.success);
  CHECK(hit.predicted_class == 1);
  const double e0 = std::exp(0.0), e1 = std::exp(2.0), e2 = std::exp(1.0);
  CHECK(hit.confidence == doctest::Approx(e1 / (e0 + e1 + e2)).epsilon(1e-12));

  // Same prediction judged against a different desired class: flipping to a
  // third class is a failure, not a success.
  SuccessCheck miss = attack_success(m, x, 2);
  CHECK(!miss.success);
  CHECK(miss.predicted_class == 1);
}

TEST_CASE("decision normal is the column difference of the head") {
  Model m = build(tiny_specs(2), {1, 8, 8}, 2);
  const auto n = decision_normal(m, 0, 1);
  const Tensor& w = m.final_weights();
  REQUIRE(static_cast<int>(n.size()) == w.dim(0));
  for (int d = 0; d < w.dim(0); ++d)
    CHECK(n[static_cast<std::size_t>(d)] ==
          w[static_cast<std::size_t>(d) * 2 + 1] - w[static_cast<std::size_t>(d) * 2]);
  CHECK_THROWS(decision_normal(m, 0, 2));
  CHECK_THROWS(decision_normal(m, -1, 1));
}

TEST_CASE("projection basis is orthonormal with e1 along the centroid axis") {
  Model m = build(tiny_specs(2), {1, 8, 8}, 3);
  Rng rng(7);
  const int N = 10, D = m.feature_dim();
  Tensor feats({N, D});
  for (std::size_t i = 0; i < feats.size(); ++i) feats[i] = rng.uniform(-1.0, 1.0);
  std::vector<int> labels;
  for (int i = 0; i < N; ++i) labels.push_back(i % 2);

  ProjectionBasis pb = projection_basis(m, feats, labels, 0, 1);
  double n1 = 0.0, n2 = 0.0, d12 = 0.0, along = 0.0;
  for (int d = 0; d < D; ++d) {
    n1 += pb.e1[static_cast<std::size_t>(d)] * pb.e1[static_cast<std::size_t>(d)];
    n2 += pb.e2[static_cast<std::size_t>(d)] * pb.e2[static_cast<std::size_t>(d)];
    d12 += pb.e1[static_cast<std::size_t>(d)] * pb.e2[static_cast<std::size_t>(d)];
    along += (pb.mu_base[static_cast<std::size_t>(d)] - pb.mu_target[static_cast<std::size_t>(d)]) *
             pb.e1[static_cast<std::size_t>(d)];
  }
  CHECK(n1 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(n2 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(d12 == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(along > 0.0);  // e1 points from target centroid to base centroid

  CHECK_THROWS(projection_basis(m, feats, {0, 1}, 0, 1));               // label count mismatch
  std::vector<int> onesided(N, 1);
  CHECK_THROWS(projection_basis(m, feats, onesided, 0, 1));             // no target class rows
}

TEST_CASE("scene projection tags every row and scene_csv lists them") {
  Model m = build(tiny_specs(2), {1, 8, 8}, 4);
  Rng rng(9);
  const int D = m.feature_dim();
  auto rand_rows = [&](int n) {
    Tensor t({n, D});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
  };
  Scene s;
  s.train_features = rand_rows(6);
  s.train_labels = {0, 1, 0, 1, 0, 1};
  s.target_features = rand_rows(1);
  s.base_features = rand_rows(1);
  s.poison_features = rand_rows(2);
  s.poison_labels = {1, 1};
  s.target_class = 0;
  s.base_class = 1;

  ProjectionBasis pb = projection_basis(m, s.train_features, s.train_labels, 0, 1);
  const auto rows = project_scene(pb, s);
  REQUIRE(rows.size() == 6 + 1 + 1 + 2);
  CHECK(rows[6].tag == "target");
  CHECK(rows[7].tag == "base");
  CHECK(rows[8].tag == "poison");
  CHECK(rows[8].class_id == 1);

  const std::string csv = scene_csv(rows);
  CHECK(csv.rfind("tag,class,x,y\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(rows.size()) + 1);
}

TEST_CASE("report json round-trip is lossless") {
  const AttackReport r = sample_report();
  const AttackReport back = report_from_json(report_to_json(r));
  CHECK(back == r);  // field-by-field bit equality via defaulted comparison
}

TEST_CASE("report serialization rejects non-finite values naming the field") {
  AttackReport r = sample_report();
  r.confidence = std::nan("");
  CHECK_THROWS_WITH_AS(report_to_json(r), doctest::Contains("confidence"), std::runtime_error);
  r = sample_report();
  r.feature_distances[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_WITH_AS(report_to_json(r), doctest::Contains("feature_distances"),
                       std::runtime_error);
}

TEST_CASE("report jsonl files round-trip and csv carries one line per report") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "fclab_test_reports";
  fs::create_directories(dir);
  const std::string jsonl = (dir / "r.jsonl").string();
  const std::string csv = (dir / "r.csv").string();

  std::vector<AttackReport> reports = {sample_report(), sample_report()};
  reports[1].experiment_id = "oneshot:1";
  reports[1].success = false;
  reports[1].confidence = 1.0 / 7.0;
  write_reports_jsonl(reports, jsonl);
  const auto back = read_reports_jsonl(jsonl);
  REQUIRE(back.size() == 2);
  CHECK(back[0] == reports[0]);
  CHECK(back[1] == reports[1]);

  write_reports_csv(reports, csv);
  std::ifstream f(csv);
  std::string line;
  int lines = 0;
  while (std::getline(f, line)) ++lines;
  CHECK(lines == 3);  // header + 2 rows

  fs::remove_all(dir);
  CHECK_THROWS(read_reports_jsonl((dir / "missing.jsonl").string()));
}
