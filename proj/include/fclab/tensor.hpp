#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

namespace fclab {

// Dense row-major tensor of 64-bit floats.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);  // zero-filled
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor full(std::vector<int> shape, double v);

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 4-D accessors for NCHW / OIHW layouts
  double& at4(int a, int b, int c, int d) {
    return data_[idx4(a, b, c, d)];
  }
  double at4(int a, int b, int c, int d) const {
    return data_[idx4(a, b, c, d)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;
  std::string shape_str() const;

 private:
  std::size_t idx4(int a, int b, int c, int d) const {
    return ((static_cast<std::size_t>(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d;
  }

  std::vector<int> shape_;
  std::vector<double> data_;
};

using NodeId = int;

// Define-by-run computation graph. Nodes are appended during the forward
// pass; backward() replays them in reverse. A Graph lives on one thread.
class Graph {
 public:
  // Roots are the tensors backward() reports gradients for.
  NodeId input(Tensor value);
  NodeId constant(Tensor value);

  NodeId conv2d(NodeId in, NodeId kernel, int stride, int padding);
  NodeId channel_bias(NodeId in, NodeId bias);  // adds bias[c] across NCHW
  NodeId maxpool2d(NodeId in, int window, int stride);
  NodeId lrn(NodeId in, int radius, double bias, double alpha, double beta);
  NodeId dense(NodeId in, NodeId weights, NodeId biasv);
  NodeId relu(NodeId in);
  NodeId flatten(NodeId in);  // keeps dim 0, collapses the rest
  NodeId scale(NodeId in, double factor);
  NodeId add(NodeId a, NodeId b);
  NodeId softmax_cross_entropy(NodeId logits, const std::vector<int>& labels);
  NodeId l2sq_distance(NodeId a, NodeId b);

  const Tensor& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  // Reverse-mode gradients for every root. Roots unreachable from the loss
  // get zero gradients. The loss must be scalar.
  std::unordered_map<NodeId, Tensor> backward(NodeId loss) const;

  std::size_t node_count() const { return nodes_.size(); }

 private:
  enum class Op {
    Input,
    Constant,
    Conv2d,
    ChannelBias,
    MaxPool2d,
    Lrn,
    Dense,
    Relu,
    Flatten,
    Scale,
    Add,
    SoftmaxCrossEntropy,
    L2SqDistance,
  };

  struct Node {
    Op op;
    int in0 = -1, in1 = -1, in2 = -1;
    Tensor value;
    int i0 = 0, i1 = 0;              // stride/padding, window/stride, radius
    double s0 = 0.0, s1 = 0.0, s2 = 0.0;  // lrn bias/alpha/beta, scale factor
    std::vector<int> iaux;           // maxpool argmax routes, labels
    std::vector<double> daux;        // softmax probabilities, lrn denominators
    bool is_root = false;
    bool needs_grad = false;  // reaches a root; backward skips the rest
  };

  NodeId push(Node n);
  const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }

  void backward_node(const Node& n, const Tensor& g, std::vector<Tensor>& grads) const;
  static void accumulate(Tensor& dst, const Tensor& src);

  std::vector<Node> nodes_;
};

}  // namespace fclab
