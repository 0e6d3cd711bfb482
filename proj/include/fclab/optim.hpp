#pragma once

#include <cstdint>
#include <vector>

#include "fclab/data.hpp"
#include "fclab/model.hpp"
#include "fclab/tensor.hpp"

namespace fclab {

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over a model's parameter list. Frozen parameters are
// never touched, so they stay bit-identical to their initial values.
class Adam {
 public:
  Adam(const Model& model, AdamConfig cfg);

  // grads aligned with model.params(); one step for all trainable params.
  void step(Model& model, const std::vector<Tensor>& grads);

  int steps_taken() const { return step_; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  int step_ = 0;
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 32;
  double lr = 0.01;
  std::uint64_t shuffle_seed = 0;
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean cross-entropy per epoch
  std::vector<double> epoch_acc;   // train accuracy per epoch
  double final_loss() const { return epoch_loss.back(); }
  double final_acc() const { return epoch_acc.back(); }
};

// Minibatch training with a seeded per-epoch permutation. The last partial
// batch is kept. Deterministic for a given seed/config/data.
TrainResult train(Model& model, const Dataset& ds, const TrainConfig& cfg);

// Final-layer training against precomputed feature rows (N x n_d). Requires
// every non-final parameter to be frozen; produces the same trajectory as
// train() on the underlying images while skipping the repeated extractor
// forward passes.
TrainResult train_head(Model& model, const Tensor& features, const std::vector<int>& labels,
                       const TrainConfig& cfg);

struct EvalResult {
  double accuracy = 0.0;
  double mean_confidence = 0.0;  // of the predicted class
  std::vector<int> predicted;
  std::vector<std::vector<double>> probabilities;
};

EvalResult evaluate(const Model& model, const Dataset& ds);

}  // namespace fclab
