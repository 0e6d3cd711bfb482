#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fclab/tensor.hpp"

namespace fclab {

struct LayerSpec {
  enum class Kind { Conv, MaxPool, Lrn, Dense, Relu, Flatten, Scale };
  Kind kind;

  // conv
  int kernel = 0;
  int out_channels = 0;
  int stride = 1;
  int padding = 0;
  // maxpool
  int window = 0;
  // lrn (AlexNet constants; identity=true bypasses the layer for ablation)
  int radius = 2;
  double lrn_bias = 2.0;
  double lrn_alpha = 1e-4;
  double lrn_beta = 0.75;
  bool lrn_identity = false;
  // dense
  int out_dim = 0;
  // scale
  double factor = 1.0;

  static LayerSpec conv(int kernel, int out_channels, int stride = 1, int padding = 0);
  static LayerSpec maxpool(int window, int stride);
  static LayerSpec lrn();
  static LayerSpec dense(int out_dim);
  static LayerSpec relu();
  static LayerSpec flatten();
  static LayerSpec scale(double factor);
};

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

// Handles into a forward graph, so callers can attach losses and read
// gradients for parameters or the input.
struct ForwardPass {
  NodeId input = -1;
  NodeId features = -1;
  NodeId logits = -1;
  std::vector<NodeId> params;  // aligned with Model::params()
};

class Model {
 public:
  Model() = default;

  const std::vector<int>& input_shape() const { return input_shape_; }  // C,H,W
  const std::vector<LayerSpec>& specs() const { return specs_; }
  int feature_layer_index() const { return feature_layer_index_; }
  int feature_dim() const { return feature_dim_; }
  int num_classes() const { return num_classes_; }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  Parameter& param(const std::string& name);
  const Parameter& param(const std::string& name) const;

  // Builds the whole network inside g starting from an existing input node.
  // Parameters enter the graph as roots when as_roots is set, constants otherwise.
  ForwardPass forward(Graph& g, NodeId input, bool params_as_roots = true) const;

  // Convenience single-shot evaluation (batch NCHW in raw pixel units).
  Tensor logits(const Tensor& batch) const;
  Tensor features(const Tensor& batch) const;

  // Final dense layer weight matrix (n_d x C) and bias.
  const Tensor& final_weights() const;
  const Tensor& final_bias() const;
  std::size_t final_weight_param_index() const { return final_weight_param_; }
  std::size_t final_bias_param_index() const { return final_bias_param_; }

  void freeze_all_but_final();
  void unfreeze_all();

  // Re-draws the final dense layer from the seeded initializer (cold start
  // of the classification head on top of frozen features).
  void reinit_final_layer(std::uint64_t seed);

  friend Model build(const std::vector<LayerSpec>& specs, const std::vector<int>& input_shape,
                     std::uint64_t seed);

 private:
  std::vector<int> input_shape_;
  std::vector<LayerSpec> specs_;
  std::vector<Parameter> params_;
  // spec index -> [first_param, last_param) into params_
  std::vector<std::pair<int, int>> layer_params_;
  int feature_layer_index_ = -1;
  int feature_dim_ = 0;
  int num_classes_ = 0;
  std::size_t final_weight_param_ = 0;
  std::size_t final_bias_param_ = 0;
};

Model build(const std::vector<LayerSpec>& specs, const std::vector<int>& input_shape,
            std::uint64_t seed);

// Same architecture and weights with a freshly initialized final dense layer
// of the given width: a pretrained extractor grafted onto a new class head.
Model with_new_head(const Model& src, int classes, std::uint64_t seed);

// Spheres the feature layer: absorbs the inverse square root of the pooled
// within-class covariance of `features` (rows aligned with `labels`) into
// the feature dense layer, and its inverse into the final layer so the
// model's outputs are unchanged. Afterwards within-class feature variation
// is isotropic, so no feature direction dominates a nearest-neighbour or
// margin computation just because the extractor happens to amplify it.
// Eigenvalues below rel_floor * lambda_max are clamped to the floor.
void whiten_feature_layer(Model& model, const Tensor& features, const std::vector<int>& labels,
                          double rel_floor = 1e-6);

// Reference architecture for 3x32x32 inputs: two conv/pool/lrn stages and
// three fully connected layers (384, 192, C); features are the post-ReLU
// activations of the 192-wide layer.
std::vector<LayerSpec> table1_specs(int classes = 10, bool lrn_identity = false);

// Reduced profile for 1x16x16 inputs: one conv stage, a 64-wide feature
// layer, and the class head. Keeps CI runs fast.
std::vector<LayerSpec> tiny_specs(int classes = 2);

// Checkpoint format: magic "PFCK", u32 LE version (=1), u32 tensor count;
// per tensor: u16 name length + UTF-8 name, u32 ndim, u32 dims..., f64 LE data.
std::vector<std::uint8_t> save_checkpoint(const Model& model);
void load_checkpoint(Model& model, const std::vector<std::uint8_t>& bytes);
void save_checkpoint_file(const Model& model, const std::string& path);
void load_checkpoint_file(Model& model, const std::string& path);

}  // namespace fclab
