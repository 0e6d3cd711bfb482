#include "fclab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "fclab/mathutil.hpp"
#include "fclab/rng.hpp"

namespace fclab {

LayerSpec LayerSpec::conv(int kernel, int out_channels, int stride, int padding) {
  LayerSpec s;
  s.kind = Kind::Conv;
  s.kernel = kernel;
  s.out_channels = out_channels;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::maxpool(int window, int stride) {
  LayerSpec s;
  s.kind = Kind::MaxPool;
  s.window = window;
  s.stride = stride;
  return s;
}

LayerSpec LayerSpec::lrn() {
  LayerSpec s;
  s.kind = Kind::Lrn;
  return s;
}

LayerSpec LayerSpec::dense(int out_dim) {
  LayerSpec s;
  s.kind = Kind::Dense;
  s.out_dim = out_dim;
  return s;
}

LayerSpec LayerSpec::relu() {
  LayerSpec s;
  s.kind = Kind::Relu;
  return s;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec s;
  s.kind = Kind::Flatten;
  return s;
}

LayerSpec LayerSpec::scale(double factor) {
  LayerSpec s;
  s.kind = Kind::Scale;
  s.factor = factor;
  return s;
}

namespace {

// He-uniform: U(-l, l) with l = sqrt(6 / fan_in)
Tensor he_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-limit, limit);
  return t;
}

struct Shape3 {
  int c = 0, h = 0, w = 0;  // h=w=0 means flattened to width c
  bool flat() const { return h == 0; }
};

}  // namespace

Parameter& Model::param(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw std::invalid_argument("model: no parameter named " + name);
}

const Parameter& Model::param(const std::string& name) const {
  return const_cast<Model*>(this)->param(name);
}

Model build(const std::vector<LayerSpec>& specs, const std::vector<int>& input_shape,
            std::uint64_t seed) {
  if (input_shape.size() != 3)
    throw std::invalid_argument("build: input_shape must be C,H,W");
  Model m;
  m.input_shape_ = input_shape;
  m.specs_ = specs;
  Rng rng(seed);

  Shape3 cur{input_shape[0], input_shape[1], input_shape[2]};
  int last_dense = -1;
  for (std::size_t i = 0; i < specs.size(); ++i)
    if (specs[i].kind == LayerSpec::Kind::Dense) last_dense = static_cast<int>(i);
  if (last_dense < 0) throw std::invalid_argument("build: network needs a final dense layer");

  auto reject = [&](std::size_t i, const std::string& why) {
    throw std::invalid_argument("build: layer " + std::to_string(i) + " incompatible: " + why);
  };

  for (std::size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& s = specs[i];
    m.layer_params_.emplace_back(static_cast<int>(m.params_.size()),
                                 static_cast<int>(m.params_.size()));
    switch (s.kind) {
      case LayerSpec::Kind::Conv: {
        if (cur.flat()) reject(i, "conv after flatten");
        const int oh = (cur.h + 2 * s.padding - s.kernel) / s.stride + 1;
        const int ow = (cur.w + 2 * s.padding - s.kernel) / s.stride + 1;
        if (oh < 1 || ow < 1) reject(i, "conv kernel larger than padded input");
        const int fan_in = cur.c * s.kernel * s.kernel;
        m.params_.push_back({"layer" + std::to_string(i) + ".kernel",
                             he_uniform({s.out_channels, cur.c, s.kernel, s.kernel}, fan_in, rng),
                             true});
        m.params_.push_back(
            {"layer" + std::to_string(i) + ".bias", Tensor({s.out_channels}), true});
        cur = {s.out_channels, oh, ow};
        break;
      }
      case LayerSpec::Kind::MaxPool: {
        if (cur.flat()) reject(i, "maxpool after flatten");
        if (s.window > cur.h || s.window > cur.w) reject(i, "pool window exceeds input");
        cur.h = (cur.h - s.window + s.stride - 1) / s.stride + 1;
        cur.w = (cur.w - s.window + s.stride - 1) / s.stride + 1;
        break;
      }
      case LayerSpec::Kind::Lrn:
        if (cur.flat()) reject(i, "lrn after flatten");
        break;
      case LayerSpec::Kind::Flatten:
        if (!cur.flat()) cur = {cur.c * cur.h * cur.w, 0, 0};
        break;
      case LayerSpec::Kind::Dense: {
        if (!cur.flat()) reject(i, "dense needs a flatten first");
        m.params_.push_back({"layer" + std::to_string(i) + ".weights",
                             he_uniform({cur.c, s.out_dim}, cur.c, rng), true});
        m.params_.push_back({"layer" + std::to_string(i) + ".bias", Tensor({s.out_dim}), true});
        if (static_cast<int>(i) == last_dense) {
          m.final_weight_param_ = m.params_.size() - 2;
          m.final_bias_param_ = m.params_.size() - 1;
          m.num_classes_ = s.out_dim;
        }
        cur = {s.out_dim, 0, 0};
        break;
      }
      case LayerSpec::Kind::Relu:
      case LayerSpec::Kind::Scale:
        break;
    }
    m.layer_params_.back().second = static_cast<int>(m.params_.size());
  }

  // Feature layer: last layer before the final dense (post-ReLU when the
  // architecture puts a ReLU there, matching the penultimate activations).
  m.feature_layer_index_ = last_dense - 1;
  if (m.feature_layer_index_ < 0) reject(0, "final dense has no preceding feature layer");
  // Width of the input to the final dense layer
  m.feature_dim_ = m.params_[m.final_weight_param_].value.dim(0);
  return m;
}

ForwardPass Model::forward(Graph& g, NodeId input, bool params_as_roots) const {
  ForwardPass fp;
  fp.input = input;
  fp.params.reserve(params_.size());
  for (const auto& p : params_)
    fp.params.push_back(params_as_roots ? g.input(p.value) : g.constant(p.value));

  NodeId cur = input;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    const LayerSpec& s = specs_[i];
    const auto [p0, p1] = layer_params_[i];
    switch (s.kind) {
      case LayerSpec::Kind::Conv:
        cur = g.conv2d(cur, fp.params[static_cast<std::size_t>(p0)], s.stride, s.padding);
        cur = g.channel_bias(cur, fp.params[static_cast<std::size_t>(p0) + 1]);
        break;
      case LayerSpec::Kind::MaxPool:
        cur = g.maxpool2d(cur, s.window, s.stride);
        break;
      case LayerSpec::Kind::Lrn:
        if (!s.lrn_identity) cur = g.lrn(cur, s.radius, s.lrn_bias, s.lrn_alpha, s.lrn_beta);
        break;
      case LayerSpec::Kind::Dense:
        cur = g.dense(cur, fp.params[static_cast<std::size_t>(p0)],
                      fp.params[static_cast<std::size_t>(p0) + 1]);
        break;
      case LayerSpec::Kind::Relu:
        cur = g.relu(cur);
        break;
      case LayerSpec::Kind::Flatten:
        cur = g.flatten(cur);
        break;
      case LayerSpec::Kind::Scale:
        cur = g.scale(cur, s.factor);
        break;
    }
    (void)p1;
    if (static_cast<int>(i) == feature_layer_index_) fp.features = cur;
  }
  fp.logits = cur;
  return fp;
}

Tensor Model::logits(const Tensor& batch) const {
  Graph g;
  ForwardPass fp = forward(g, g.constant(batch), /*params_as_roots=*/false);
  return g.value(fp.logits);
}

Tensor Model::features(const Tensor& batch) const {
  Graph g;
  ForwardPass fp = forward(g, g.constant(batch), /*params_as_roots=*/false);
  return g.value(fp.features);
}

const Tensor& Model::final_weights() const { return params_[final_weight_param_].value; }
const Tensor& Model::final_bias() const { return params_[final_bias_param_].value; }

void Model::freeze_all_but_final() {
  if (num_classes_ == 0) throw std::invalid_argument("freeze_all_but_final: no dense layer");
  for (std::size_t i = 0; i < params_.size(); ++i)
    params_[i].trainable = (i == final_weight_param_ || i == final_bias_param_);
}

void Model::unfreeze_all() {
  for (auto& p : params_) p.trainable = true;
}

void Model::reinit_final_layer(std::uint64_t seed) {
  Rng rng(seed);
  Tensor& w = params_[final_weight_param_].value;
  const double limit = std::sqrt(6.0 / static_cast<double>(w.dim(0)));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-limit, limit);
  Tensor& b = params_[final_bias_param_].value;
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = 0.0;
}

Model with_new_head(const Model& src, int classes, std::uint64_t seed) {
  if (classes < 1) throw std::invalid_argument("with_new_head: classes must be >= 1");
  std::vector<LayerSpec> specs = src.specs();
  int last_dense = -1;
  for (std::size_t i = 0; i < specs.size(); ++i)
    if (specs[i].kind == LayerSpec::Kind::Dense) last_dense = static_cast<int>(i);
  if (last_dense < 0) throw std::invalid_argument("with_new_head: no dense layer");
  specs[static_cast<std::size_t>(last_dense)].out_dim = classes;

  Model m = build(specs, src.input_shape(), seed);
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    if (i == m.final_weight_param_index() || i == m.final_bias_param_index()) continue;
    m.params()[i].value = src.params()[i].value;
  }
  m.reinit_final_layer(seed);
  return m;
}

void whiten_feature_layer(Model& model, const Tensor& features, const std::vector<int>& labels,
                          double rel_floor) {
  const auto& specs = model.specs();
  int last_dense = -1, feat_dense = -1;
  for (std::size_t i = 0; i < specs.size(); ++i)
    if (specs[i].kind == LayerSpec::Kind::Dense) {
      feat_dense = last_dense;
      last_dense = static_cast<int>(i);
    }
  if (feat_dense < 0)
    throw std::invalid_argument("whiten_feature_layer: model needs two dense layers");
  if (model.feature_layer_index() != feat_dense)
    throw std::invalid_argument(
        "whiten_feature_layer: feature layer must be the linear dense feeding the head");

  const int d = model.feature_dim();
  if (features.ndim() != 2 || features.dim(1) != d)
    throw std::invalid_argument("whiten_feature_layer: features must be N x feature_dim");
  const int n = features.dim(0);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("whiten_feature_layer: labels do not match feature rows");
  if (n < 2) throw std::invalid_argument("whiten_feature_layer: need at least two samples");

  // Per-class means, global mean, and the pooled within-class covariance.
  int max_label = 0;
  for (int y : labels) {
    if (y < 0) throw std::invalid_argument("whiten_feature_layer: negative label");
    max_label = std::max(max_label, y);
  }
  std::vector<double> class_mean(static_cast<std::size_t>(max_label + 1) * d, 0.0);
  std::vector<int> class_count(static_cast<std::size_t>(max_label + 1), 0);
  std::vector<double> mu(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    ++class_count[static_cast<std::size_t>(y)];
    for (int j = 0; j < d; ++j) {
      const double f = features[static_cast<std::size_t>(i) * d + j];
      class_mean[static_cast<std::size_t>(y) * d + j] += f;
      mu[static_cast<std::size_t>(j)] += f / n;
    }
  }
  for (int y = 0; y <= max_label; ++y)
    if (class_count[static_cast<std::size_t>(y)] > 0)
      for (int j = 0; j < d; ++j)
        class_mean[static_cast<std::size_t>(y) * d + j] /= class_count[static_cast<std::size_t>(y)];

  Tensor cov({d, d});
  for (int i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    for (int j = 0; j < d; ++j) {
      const double fj = features[static_cast<std::size_t>(i) * d + j] -
                        class_mean[static_cast<std::size_t>(y) * d + j];
      for (int k = j; k < d; ++k) {
        const double fk = features[static_cast<std::size_t>(i) * d + k] -
                          class_mean[static_cast<std::size_t>(y) * d + k];
        cov[static_cast<std::size_t>(j) * d + k] += fj * fk / n;
      }
    }
  }
  for (int j = 0; j < d; ++j)
    for (int k = 0; k < j; ++k)
      cov[static_cast<std::size_t>(j) * d + k] = cov[static_cast<std::size_t>(k) * d + j];

  std::vector<double> evals, evecs;
  symmetric_eigen(cov, evals, evecs);
  if (evals[0] <= 0.0)
    throw std::invalid_argument("whiten_feature_layer: covariance has no positive variance");
  // Global rescale so the whitened features keep the original total
  // within-class variance: directions are equalized relative to each other
  // without shrinking or inflating the feature space as a whole, which keeps
  // distance thresholds and step sizes tuned on raw features meaningful.
  const double floor = rel_floor * evals[0];
  double total_var = 0.0, whitened_var = 0.0;
  for (double l : evals) {
    total_var += l;
    whitened_var += l / std::max(l, floor);  // 1 above the floor, l/floor below
  }
  const double rescale = std::sqrt(total_var / whitened_var);
  for (auto& l : evals) l = std::max(l, floor);

  // A = rescale * V diag(1/sqrt(l)) V^T and its inverse; both symmetric.
  auto outer_sum = [&](bool inverse) {
    std::vector<double> m(static_cast<std::size_t>(d) * d, 0.0);
    for (int r = 0; r < d; ++r) {
      const double s = inverse ? std::sqrt(evals[static_cast<std::size_t>(r)]) / rescale
                               : rescale / std::sqrt(evals[static_cast<std::size_t>(r)]);
      for (int j = 0; j < d; ++j) {
        const double vj = evecs[static_cast<std::size_t>(r) * d + j] * s;
        for (int k = 0; k < d; ++k)
          m[static_cast<std::size_t>(j) * d + k] += vj * evecs[static_cast<std::size_t>(r) * d + k];
      }
    }
    return m;
  };
  const std::vector<double> a = outer_sum(false);
  const std::vector<double> a_inv = outer_sum(true);

  // Feature layer f = xW + b becomes f' = (f - mu) A, folded into W and b.
  Tensor& w = model.param("layer" + std::to_string(feat_dense) + ".weights").value;
  Tensor& b = model.param("layer" + std::to_string(feat_dense) + ".bias").value;
  const int in_dim = w.dim(0);
  Tensor w2({in_dim, d});
  for (int i = 0; i < in_dim; ++i)
    for (int k = 0; k < d; ++k) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j)
        acc += w[static_cast<std::size_t>(i) * d + j] * a[static_cast<std::size_t>(j) * d + k];
      w2[static_cast<std::size_t>(i) * d + k] = acc;
    }
  Tensor b2({d});
  for (int k = 0; k < d; ++k) {
    double acc = 0.0;
    for (int j = 0; j < d; ++j)
      acc += (b[static_cast<std::size_t>(j)] - mu[static_cast<std::size_t>(j)]) *
             a[static_cast<std::size_t>(j) * d + k];
    b2[static_cast<std::size_t>(k)] = acc;
  }
  w = std::move(w2);
  b = std::move(b2);

  // Compensate the head so logits are unchanged: U' = A^{-1} U, c' = mu U + c.
  Tensor& u = model.params()[model.final_weight_param_index()].value;
  Tensor& c = model.params()[model.final_bias_param_index()].value;
  const int classes = u.dim(1);
  Tensor u2({d, classes});
  for (int j = 0; j < d; ++j)
    for (int k = 0; k < classes; ++k) {
      double acc = 0.0;
      for (int m = 0; m < d; ++m)
        acc += a_inv[static_cast<std::size_t>(j) * d + m] *
               u[static_cast<std::size_t>(m) * classes + k];
      u2[static_cast<std::size_t>(j) * classes + k] = acc;
    }
  for (int k = 0; k < classes; ++k) {
    double acc = 0.0;
    for (int j = 0; j < d; ++j)
      acc += mu[static_cast<std::size_t>(j)] * u[static_cast<std::size_t>(j) * classes + k];
    c[static_cast<std::size_t>(k)] += acc;
  }
  u = std::move(u2);
}

std::vector<LayerSpec> table1_specs(int classes, bool lrn_identity) {
  auto lrn = LayerSpec::lrn();
  lrn.lrn_identity = lrn_identity;
  return {
      LayerSpec::scale(1.0 / 255.0),
      LayerSpec::conv(5, 64, 1, 2), LayerSpec::relu(),
      LayerSpec::maxpool(3, 2),     lrn,
      LayerSpec::conv(5, 64, 1, 2), LayerSpec::relu(),
      LayerSpec::maxpool(3, 2),     lrn,
      LayerSpec::flatten(),
      LayerSpec::dense(384),        LayerSpec::relu(),
      LayerSpec::dense(192),        LayerSpec::relu(),
      LayerSpec::dense(classes),
  };
}

std::vector<LayerSpec> tiny_specs(int classes) {
  // The feature layer stays linear on purpose. After training, a rectified
  // feature layer leaves only a couple of units active within any small
  // neighborhood of input space, which crushes the local feature geometry to
  // a few dimensions; the linear layer keeps all 64 units informative while
  // the conv stage still provides the nonlinearity.
  return {
      LayerSpec::scale(1.0 / 255.0),
      LayerSpec::conv(3, 8, 1, 1), LayerSpec::relu(),
      LayerSpec::maxpool(2, 2),
      LayerSpec::flatten(),
      LayerSpec::dense(64),
      LayerSpec::dense(classes),
  };
}

namespace {

constexpr char kMagic[4] = {'P', 'F', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xff));
}

struct Reader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size())
      throw std::runtime_error("checkpoint: truncated stream at byte " + std::to_string(pos));
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(buf[pos] | (buf[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
    pos += 8;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace

std::vector<std::uint8_t> save_checkpoint(const Model& model) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    put_u16(out, static_cast<std::uint16_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put_u32(out, static_cast<std::uint32_t>(p.value.ndim()));
    for (int d : p.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < p.value.size(); ++i) put_f64(out, p.value[i]);
  }
  return out;
}

void load_checkpoint(Model& model, const std::vector<std::uint8_t>& bytes) {
  Reader r{bytes};
  r.need(4);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic (not a PFCK stream)");
  r.pos = 4;
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  if (count != model.params().size())
    throw std::runtime_error("checkpoint: tensor count " + std::to_string(count) +
                             " does not match model (" + std::to_string(model.params().size()) +
                             ")");
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name = r.str(r.u16());
    Parameter& p = model.param(name);
    const std::uint32_t ndim = r.u32();
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = static_cast<int>(r.u32());
    if (shape != p.value.shape())
      throw std::runtime_error("checkpoint: shape mismatch for tensor " + name);
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = r.f64();
  }
  if (r.pos != bytes.size())
    throw std::runtime_error("checkpoint: trailing bytes after last tensor");
}

void save_checkpoint_file(const Model& model, const std::string& path) {
  const auto bytes = save_checkpoint(model);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

void load_checkpoint_file(Model& model, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  load_checkpoint(model, bytes);
}

}  // namespace fclab
