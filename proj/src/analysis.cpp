#include "fclab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "fclab/mathutil.hpp"
#include "json.hpp"

namespace fclab {

namespace {

Tensor as_batch1(const Tensor& img) {
  std::vector<int> shape = {1};
  shape.insert(shape.end(), img.shape().begin(), img.shape().end());
  return Tensor(shape, std::vector<double>(img.data(), img.data() + img.size()));
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

}  // namespace

SuccessCheck attack_success(const Model& model, const Tensor& target, int base_class) {
  const Tensor logits = model.logits(as_batch1(target));
  SuccessCheck r;
  r.predicted_class = argmax_row(logits, 0);
  r.confidence = softmax_row(logits, 0)[static_cast<std::size_t>(r.predicted_class)];
  r.success = (r.predicted_class == base_class);
  return r;
}

double angular_deviation(const std::vector<double>& w_clean,
                         const std::vector<double>& w_poisoned) {
  if (w_clean.size() != w_poisoned.size())
    throw std::invalid_argument("angular_deviation: dimension mismatch");
  const double na = norm(w_clean), nb = norm(w_poisoned);
  if (na == 0.0 || nb == 0.0)
    throw std::invalid_argument("angular_deviation: zero vector");
  const double c = std::clamp(dot(w_clean, w_poisoned) / (na * nb), -1.0, 1.0);
  return std::acos(c) * 180.0 / 3.14159265358979323846;
}

std::vector<double> decision_normal(const Model& model, int target_class, int base_class) {
  const Tensor& w = model.final_weights();  // n_d x C
  const int D = w.dim(0), C = w.dim(1);
  if (target_class < 0 || target_class >= C || base_class < 0 || base_class >= C)
    throw std::invalid_argument("decision_normal: class index out of range");
  std::vector<double> out(static_cast<std::size_t>(D));
  for (int d = 0; d < D; ++d)
    out[static_cast<std::size_t>(d)] = w[static_cast<std::size_t>(d) * C + base_class] -
                                       w[static_cast<std::size_t>(d) * C + target_class];
  return out;
}

ProjectionBasis projection_basis(const Model& model, const Tensor& train_features,
                                 const std::vector<int>& train_labels, int target_class,
                                 int base_class) {
  const int N = train_features.dim(0), D = train_features.dim(1);
  if (static_cast<std::size_t>(N) != train_labels.size())
    throw std::invalid_argument("projection_basis: labels do not match feature rows");

  ProjectionBasis pb;
  pb.mu_base.assign(static_cast<std::size_t>(D), 0.0);
  pb.mu_target.assign(static_cast<std::size_t>(D), 0.0);
  int nb = 0, nt = 0;
  for (int i = 0; i < N; ++i) {
    const double* row = train_features.data() + static_cast<std::size_t>(i) * D;
    if (train_labels[static_cast<std::size_t>(i)] == base_class) {
      for (int d = 0; d < D; ++d) pb.mu_base[static_cast<std::size_t>(d)] += row[d];
      ++nb;
    } else if (train_labels[static_cast<std::size_t>(i)] == target_class) {
      for (int d = 0; d < D; ++d) pb.mu_target[static_cast<std::size_t>(d)] += row[d];
      ++nt;
    }
  }
  if (nb == 0 || nt == 0)
    throw std::invalid_argument("projection_basis: each class needs at least one feature vector");
  for (int d = 0; d < D; ++d) {
    pb.mu_base[static_cast<std::size_t>(d)] /= nb;
    pb.mu_target[static_cast<std::size_t>(d)] /= nt;
  }

  std::vector<double> u(static_cast<std::size_t>(D));
  for (int d = 0; d < D; ++d)
    u[static_cast<std::size_t>(d)] =
        pb.mu_base[static_cast<std::size_t>(d)] - pb.mu_target[static_cast<std::size_t>(d)];
  const double un = norm(u);
  if (un == 0.0) throw std::invalid_argument("projection_basis: coincident class centroids");
  pb.e1.resize(static_cast<std::size_t>(D));
  for (int d = 0; d < D; ++d) pb.e1[static_cast<std::size_t>(d)] = u[static_cast<std::size_t>(d)] / un;

  pb.theta = decision_normal(model, target_class, base_class);
  std::vector<double> e2 = pb.theta;
  const double proj = dot(e2, pb.e1);
  for (int d = 0; d < D; ++d) e2[static_cast<std::size_t>(d)] -= proj * pb.e1[static_cast<std::size_t>(d)];
  const double e2n = norm(e2);
  if (e2n < 1e-12)
    throw std::invalid_argument("projection_basis: boundary normal parallel to centroid axis");
  for (auto& v : e2) v /= e2n;
  pb.e2 = std::move(e2);
  return pb;
}

std::vector<SceneRow> project_scene(const ProjectionBasis& basis, const Scene& scene) {
  const int D = static_cast<int>(basis.e1.size());
  auto coords = [&](const double* row) {
    double x = 0.0, y = 0.0;
    for (int d = 0; d < D; ++d) {
      x += row[d] * basis.e1[static_cast<std::size_t>(d)];
      y += row[d] * basis.e2[static_cast<std::size_t>(d)];
    }
    return std::pair<double, double>{x, y};
  };

  std::vector<SceneRow> rows;
  for (int i = 0; i < scene.train_features.dim(0); ++i) {
    const auto [x, y] = coords(scene.train_features.data() + static_cast<std::size_t>(i) * D);
    rows.push_back({"train", scene.train_labels[static_cast<std::size_t>(i)], x, y});
  }
  {
    const auto [x, y] = coords(scene.target_features.data());
    rows.push_back({"target", scene.target_class, x, y});
  }
  {
    const auto [x, y] = coords(scene.base_features.data());
    rows.push_back({"base", scene.base_class, x, y});
  }
  if (scene.poison_features.size() > 0) {
    for (int i = 0; i < scene.poison_features.dim(0); ++i) {
      const auto [x, y] = coords(scene.poison_features.data() + static_cast<std::size_t>(i) * D);
      const int cls = i < static_cast<int>(scene.poison_labels.size())
                          ? scene.poison_labels[static_cast<std::size_t>(i)]
                          : scene.base_class;
      rows.push_back({"poison", cls, x, y});
    }
  }
  return rows;
}

std::string scene_csv(const std::vector<SceneRow>& rows) {
  std::ostringstream os;
  os << "tag,class,x,y\n";
  os.precision(17);
  for (const auto& r : rows) os << r.tag << "," << r.class_id << "," << r.x << "," << r.y << "\n";
  return os.str();
}

namespace {

void check_finite(double v, const std::string& field) {
  if (!std::isfinite(v))
    throw std::runtime_error("report: non-finite value in field '" + field + "'");
}

}  // namespace

std::string report_to_json(const AttackReport& r) {
  check_finite(r.gamma, "gamma");
  check_finite(r.confidence, "confidence");
  check_finite(r.angular_deviation_deg, "angular_deviation_deg");
  check_finite(r.clean_test_accuracy, "clean_test_accuracy");
  check_finite(r.poisoned_test_accuracy, "poisoned_test_accuracy");
  check_finite(r.retrain_final_loss, "retrain_final_loss");
  check_finite(r.retrain_final_accuracy, "retrain_final_accuracy");
  check_finite(r.wall_seconds, "wall_seconds");
  for (double d : r.feature_distances) check_finite(d, "feature_distances");

  nlohmann::json j;
  j["schema_version"] = 1;
  j["experiment_id"] = r.experiment_id;
  j["scenario"] = r.scenario;
  j["target_class"] = r.target_class;
  j["base_class"] = r.base_class;
  j["target_id"] = r.target_id;
  j["base_ids"] = r.base_ids;
  j["n_poisons"] = r.n_poisons;
  j["gamma"] = r.gamma;
  j["success"] = r.success;
  j["predicted_class"] = r.predicted_class;
  j["confidence"] = r.confidence;
  j["angular_deviation_deg"] = r.angular_deviation_deg;
  j["clean_test_accuracy"] = r.clean_test_accuracy;
  j["poisoned_test_accuracy"] = r.poisoned_test_accuracy;
  j["feature_distances"] = r.feature_distances;
  j["stop_reasons"] = r.stop_reasons;
  j["retrain_final_loss"] = r.retrain_final_loss;
  j["retrain_final_accuracy"] = r.retrain_final_accuracy;
  j["seed"] = r.seed;
  j["config_hash"] = r.config_hash;
  j["warnings"] = r.warnings;
  j["wall_seconds"] = r.wall_seconds;
  return j.dump();
}

AttackReport report_from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  if (j.at("schema_version").get<int>() != 1)
    throw std::runtime_error("report: unsupported schema_version");
  AttackReport r;
  r.experiment_id = j.at("experiment_id").get<std::string>();
  r.scenario = j.at("scenario").get<std::string>();
  r.target_class = j.at("target_class").get<int>();
  r.base_class = j.at("base_class").get<int>();
  r.target_id = j.at("target_id").get<std::string>();
  r.base_ids = j.at("base_ids").get<std::vector<std::string>>();
  r.n_poisons = j.at("n_poisons").get<int>();
  r.gamma = j.at("gamma").get<double>();
  r.success = j.at("success").get<bool>();
  r.predicted_class = j.at("predicted_class").get<int>();
  r.confidence = j.at("confidence").get<double>();
  r.angular_deviation_deg = j.at("angular_deviation_deg").get<double>();
  r.clean_test_accuracy = j.at("clean_test_accuracy").get<double>();
  r.poisoned_test_accuracy = j.at("poisoned_test_accuracy").get<double>();
  r.feature_distances = j.at("feature_distances").get<std::vector<double>>();
  r.stop_reasons = j.at("stop_reasons").get<std::vector<std::string>>();
  r.retrain_final_loss = j.at("retrain_final_loss").get<double>();
  r.retrain_final_accuracy = j.at("retrain_final_accuracy").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

void write_reports_jsonl(const std::vector<AttackReport>& reports, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("report: cannot open " + path + " for writing");
  for (const auto& r : reports) f << report_to_json(r) << "\n";
  if (!f) throw std::runtime_error("report: write failed for " + path);
}

std::vector<AttackReport> read_reports_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("report: cannot open " + path);
  std::vector<AttackReport> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(report_from_json(line));
  }
  return out;
}

void write_reports_csv(const std::vector<AttackReport>& reports, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("report: cannot open " + path + " for writing");
  f << "experiment_id,scenario,target_class,base_class,target_id,n_poisons,gamma,success,"
       "predicted_class,confidence,angular_deviation_deg,clean_test_accuracy,"
       "poisoned_test_accuracy,mean_feature_distance,seed,wall_seconds\n";
  f.precision(17);
  for (const auto& r : reports) {
    double mfd = 0.0;
    if (!r.feature_distances.empty())
      mfd = std::accumulate(r.feature_distances.begin(), r.feature_distances.end(), 0.0) /
            static_cast<double>(r.feature_distances.size());
    f << r.experiment_id << "," << r.scenario << "," << r.target_class << "," << r.base_class
      << "," << r.target_id << "," << r.n_poisons << "," << r.gamma << "," << (r.success ? 1 : 0)
      << "," << r.predicted_class << "," << r.confidence << "," << r.angular_deviation_deg << ","
      << r.clean_test_accuracy << "," << r.poisoned_test_accuracy << "," << mfd << "," << r.seed
      << "," << r.wall_seconds << "\n";
  }
  if (!f) throw std::runtime_error("report: write failed for " + path);
}

}  // namespace fclab
