#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fclab/model.hpp"
#include "fclab/tensor.hpp"

namespace fclab {

struct SuccessCheck {
  bool success = false;      // predicted class == base class, nothing else counts
  int predicted_class = -1;
  double confidence = 0.0;   // softmax probability of the predicted class
};

// Adjudicates one target against a (retrained) model. Misclassification to
// a third class is a failure.
SuccessCheck attack_success(const Model& model, const Tensor& target, int base_class);

// Angle between two decision-boundary normals, in degrees in [0, 180].
double angular_deviation(const std::vector<double>& w_clean,
                         const std::vector<double>& w_poisoned);

// Binary restriction of the final-layer boundary between two classes:
// column(base) - column(target) of the final dense weights.
std::vector<double> decision_normal(const Model& model, int target_class, int base_class);

struct ProjectionBasis {
  std::vector<double> e1, e2;            // orthonormal
  std::vector<double> mu_base, mu_target;
  std::vector<double> theta;             // decision-boundary normal
};

// e1 along the centroid difference u = mu_base - mu_target; e2 along the
// component of theta orthogonal to u.
ProjectionBasis projection_basis(const Model& model, const Tensor& train_features,
                                 const std::vector<int>& train_labels, int target_class,
                                 int base_class);

struct SceneRow {
  std::string tag;  // "train" | "target" | "base" | "poison"
  int class_id = -1;
  double x = 0.0, y = 0.0;
};

struct Scene {
  Tensor train_features;  // N x n_d
  std::vector<int> train_labels;
  Tensor target_features;   // 1 x n_d
  Tensor base_features;     // 1 x n_d
  Tensor poison_features;   // P x n_d (P may be 0 rows -> pass 0x? via empty)
  std::vector<int> poison_labels;
  int target_class = 0, base_class = 0;
};

std::vector<SceneRow> project_scene(const ProjectionBasis& basis, const Scene& scene);
std::string scene_csv(const std::vector<SceneRow>& rows);

struct AttackReport {
  std::string experiment_id;
  std::string scenario;  // "transfer" | "end2end"
  int target_class = 0;
  int base_class = 0;
  std::string target_id;
  std::vector<std::string> base_ids;
  int n_poisons = 0;
  double gamma = 0.0;
  bool success = false;
  int predicted_class = -1;
  double confidence = 0.0;
  double angular_deviation_deg = 0.0;
  double clean_test_accuracy = 0.0;
  double poisoned_test_accuracy = 0.0;
  std::vector<double> feature_distances;  // per poison, clean model
  std::vector<std::string> stop_reasons;
  double retrain_final_loss = 0.0;      // poisoned retrain, last epoch
  double retrain_final_accuracy = 0.0;  // poisoned retrain, last epoch
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<std::string> warnings;
  double wall_seconds = 0.0;

  bool operator==(const AttackReport&) const = default;
};

// JSON-lines, one schema_version=1 object per report. NaN/Inf in any field
// is a serialization error naming the field.
void write_reports_jsonl(const std::vector<AttackReport>& reports, const std::string& path);
std::vector<AttackReport> read_reports_jsonl(const std::string& path);
std::string report_to_json(const AttackReport& r);
AttackReport report_from_json(const std::string& line);

// Flat CSV mirror for plotting (vector fields summarized as mean).
void write_reports_csv(const std::vector<AttackReport>& reports, const std::string& path);

}  // namespace fclab
