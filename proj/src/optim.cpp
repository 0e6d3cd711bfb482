#include "fclab/optim.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "fclab/mathutil.hpp"
#include "fclab/rng.hpp"

namespace fclab {

Adam::Adam(const Model& model, AdamConfig cfg) : cfg_(cfg) {
  m_.reserve(model.params().size());
  v_.reserve(model.params().size());
  for (const auto& p : model.params()) {
    m_.emplace_back(p.value.shape());
    v_.emplace_back(p.value.shape());
  }
}

void Adam::step(Model& model, const std::vector<Tensor>& grads) {
  auto& params = model.params();
  if (grads.size() != params.size())
    throw std::invalid_argument("adam: gradient list does not match parameter list");
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    Tensor& p = params[i].value;
    const Tensor& g = grads[i];
    if (!g.same_shape(p))
      throw std::invalid_argument("adam: gradient shape " + g.shape_str() +
                                  " does not match parameter " + params[i].name);
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

TrainResult train(Model& model, const Dataset& ds, const TrainConfig& cfg) {
  if (ds.images.empty()) throw std::invalid_argument("train: empty dataset");
  if (cfg.epochs < 1 || cfg.batch_size < 1)
    throw std::invalid_argument("train: epochs and batch size must be >= 1");
  const int C = model.num_classes();
  for (const auto& im : ds.images)
    if (im.label < 0 || im.label >= C)
      throw std::invalid_argument("train: label " + std::to_string(im.label) +
                                  " out of range for " + std::to_string(C) + " classes");

  AdamConfig acfg;
  acfg.lr = cfg.lr;
  Adam opt(model, acfg);
  Rng shuffle_rng(cfg.shuffle_seed);

  TrainResult result;
  std::vector<int> order(ds.images.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    int correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<int> batch_idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<int> labels;
      labels.reserve(batch_idx.size());
      for (int bi : batch_idx) labels.push_back(ds.images[static_cast<std::size_t>(bi)].label);

      Graph g;
      const NodeId in = g.constant(ds.batch(batch_idx));
      ForwardPass fp = model.forward(g, in, /*params_as_roots=*/true);
      const NodeId loss = g.softmax_cross_entropy(fp.logits, labels);

      const Tensor& logit_vals = g.value(fp.logits);
      for (std::size_t b = 0; b < batch_idx.size(); ++b)
        if (argmax_row(logit_vals, static_cast<int>(b)) == labels[b]) ++correct;
      loss_sum += g.value(loss)[0] * static_cast<double>(batch_idx.size());

      auto grad_map = g.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(fp.params.size());
      for (NodeId pid : fp.params) grads.push_back(std::move(grad_map.at(pid)));
      opt.step(model, grads);
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
    result.epoch_acc.push_back(static_cast<double>(correct) / static_cast<double>(order.size()));
  }
  return result;
}

TrainResult train_head(Model& model, const Tensor& features, const std::vector<int>& labels,
                       const TrainConfig& cfg) {
  if (features.ndim() != 2) throw std::invalid_argument("train_head: features must be N x n_d");
  const int N = features.dim(0), D = features.dim(1);
  if (static_cast<std::size_t>(N) != labels.size())
    throw std::invalid_argument("train_head: labels do not match feature rows");
  if (N == 0) throw std::invalid_argument("train_head: empty dataset");
  if (cfg.epochs < 1 || cfg.batch_size < 1)
    throw std::invalid_argument("train_head: epochs and batch size must be >= 1");
  if (D != model.feature_dim())
    throw std::invalid_argument("train_head: feature width does not match the model");
  const int C = model.num_classes();
  for (int l : labels)
    if (l < 0 || l >= C)
      throw std::invalid_argument("train_head: label " + std::to_string(l) + " out of range");
  const std::size_t wi = model.final_weight_param_index();
  const std::size_t bi = model.final_bias_param_index();
  for (std::size_t i = 0; i < model.params().size(); ++i)
    if (i != wi && i != bi && model.params()[i].trainable)
      throw std::invalid_argument("train_head: non-final parameter '" + model.params()[i].name +
                                  "' is trainable; freeze the extractor first");

  AdamConfig acfg;
  acfg.lr = cfg.lr;
  Adam opt(model, acfg);
  Rng shuffle_rng(cfg.shuffle_seed);

  TrainResult result;
  std::vector<int> order(static_cast<std::size_t>(N));
  std::iota(order.begin(), order.end(), 0);
  std::vector<Tensor> grads(model.params().size());  // frozen slots stay empty

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    int correct = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const int B = static_cast<int>(end - start);
      Tensor x({B, D});
      std::vector<int> batch_labels(static_cast<std::size_t>(B));
      for (int b = 0; b < B; ++b) {
        const int src = order[start + static_cast<std::size_t>(b)];
        std::copy(features.data() + static_cast<std::size_t>(src) * D,
                  features.data() + static_cast<std::size_t>(src + 1) * D,
                  x.data() + static_cast<std::size_t>(b) * D);
        batch_labels[static_cast<std::size_t>(b)] = labels[static_cast<std::size_t>(src)];
      }

      Graph g;
      const NodeId xin = g.constant(std::move(x));
      const NodeId w = g.input(model.params()[wi].value);
      const NodeId bv = g.input(model.params()[bi].value);
      const NodeId logits = g.dense(xin, w, bv);
      const NodeId loss = g.softmax_cross_entropy(logits, batch_labels);

      const Tensor& logit_vals = g.value(logits);
      for (int b = 0; b < B; ++b)
        if (argmax_row(logit_vals, b) == batch_labels[static_cast<std::size_t>(b)]) ++correct;
      loss_sum += g.value(loss)[0] * static_cast<double>(B);

      auto grad_map = g.backward(loss);
      grads[wi] = std::move(grad_map.at(w));
      grads[bi] = std::move(grad_map.at(bv));
      opt.step(model, grads);
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(N));
    result.epoch_acc.push_back(static_cast<double>(correct) / static_cast<double>(N));
  }
  return result;
}

EvalResult evaluate(const Model& model, const Dataset& ds) {
  EvalResult r;
  if (ds.images.empty()) return r;
  const Tensor logits = model.logits(ds.batch());
  int correct = 0;
  double conf_sum = 0.0;
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const int pred = argmax_row(logits, static_cast<int>(i));
    auto probs = softmax_row(logits, static_cast<int>(i));
    conf_sum += probs[static_cast<std::size_t>(pred)];
    if (pred == ds.images[i].label) ++correct;
    r.predicted.push_back(pred);
    r.probabilities.push_back(std::move(probs));
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(ds.images.size());
  r.mean_confidence = conf_sum / static_cast<double>(ds.images.size());
  return r;
}

}  // namespace fclab
