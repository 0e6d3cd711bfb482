#include "fclab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace fclab {

namespace {

std::size_t shape_product(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive extent in shape");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

}  // namespace

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size())
    throw std::invalid_argument("tensor: shape/data length mismatch");
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), v);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
  os << "]";
  return os.str();
}

NodeId Graph::push(Node n) {
  if (n.is_root) n.needs_grad = true;
  for (int in : {n.in0, n.in1, n.in2})
    if (in >= 0 && nodes_[static_cast<std::size_t>(in)].needs_grad) n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::input(Tensor value) {
  Node n;
  n.op = Op::Input;
  n.value = std::move(value);
  n.is_root = true;
  return push(std::move(n));
}

NodeId Graph::constant(Tensor value) {
  Node n;
  n.op = Op::Constant;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Graph::conv2d(NodeId in, NodeId kernel, int stride, int padding) {
  const Tensor& x = value(in);
  const Tensor& k = value(kernel);
  if (x.ndim() != 4 || k.ndim() != 4)
    shape_error("conv2d", "input must be NCHW and kernel OIHW, got " + x.shape_str() +
                              " and " + k.shape_str());
  if (x.dim(1) != k.dim(1))
    shape_error("conv2d", "channel mismatch: input has " + std::to_string(x.dim(1)) +
                              ", kernel expects " + std::to_string(k.dim(1)));
  if (stride < 1 || padding < 0) shape_error("conv2d", "stride must be >= 1 and padding >= 0");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = k.dim(0), KH = k.dim(2), KW = k.dim(3);
  const int OH = (H + 2 * padding - KH) / stride + 1;
  const int OW = (W + 2 * padding - KW) / stride + 1;
  if (OH < 1 || OW < 1)
    shape_error("conv2d", "kernel " + k.shape_str() + " larger than padded input " + x.shape_str());

  Tensor out({N, O, OH, OW});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < KH; ++ky) {
              const int iy = oy * stride + ky - padding;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < KW; ++kx) {
                const int ix = ox * stride + kx - padding;
                if (ix < 0 || ix >= W) continue;
                acc += x.at4(n, c, iy, ix) * k.at4(o, c, ky, kx);
              }
            }
          out.at4(n, o, oy, ox) = acc;
        }

  Node nd;
  nd.op = Op::Conv2d;
  nd.in0 = in;
  nd.in1 = kernel;
  nd.i0 = stride;
  nd.i1 = padding;
  nd.value = std::move(out);
  return push(std::move(nd));
}

NodeId Graph::channel_bias(NodeId in, NodeId bias) {
  const Tensor& x = value(in);
  const Tensor& b = value(bias);
  if (x.ndim() != 4 || b.ndim() != 1 || b.dim(0) != x.dim(1))
    shape_error("channel_bias", "bias " + b.shape_str() + " does not match channels of " +
                                    x.shape_str());
  Tensor out = x;
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  double* p = out.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double bv = b[static_cast<std::size_t>(c)];
      for (int i = 0; i < HW; ++i) *p++ += bv;
    }

  Node nd;
  nd.op = Op::ChannelBias;
  nd.in0 = in;
  nd.in1 = bias;
  nd.value = std::move(out);
  return push(std::move(nd));
}

NodeId Graph::maxpool2d(NodeId in, int window, int stride) {
  const Tensor& x = value(in);
  if (x.ndim() != 4) shape_error("maxpool2d", "input must be NCHW, got " + x.shape_str());
  if (window < 1 || stride < 1) shape_error("maxpool2d", "window and stride must be positive");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (window > H || window > W)
    shape_error("maxpool2d", "window exceeds spatial extent of " + x.shape_str());
  // SAME-style zero padding on the trailing edge when the window does not
  // tile exactly. Pads count as value 0 but never win over a real element
  // that attains the max; ties among real elements go to the first flat index.
  const int OH = (H - window + stride - 1) / stride + 1;
  const int OW = (W - window + stride - 1) / stride + 1;

  Tensor out({N, C, OH, OW});
  std::vector<int> routes(out.size(), -1);
  std::size_t oi = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox, ++oi) {
          double best = 0.0;  // zero pad participates when the window overhangs
          bool padded = (oy * stride + window > H) || (ox * stride + window > W);
          bool have = padded;
          int best_idx = -1;
          for (int ky = 0; ky < window; ++ky) {
            const int iy = oy * stride + ky;
            if (iy >= H) break;
            for (int kx = 0; kx < window; ++kx) {
              const int ix = ox * stride + kx;
              if (ix >= W) break;
              const double v = x.at4(n, c, iy, ix);
              if (!have || v > best) {
                best = v;
                best_idx = static_cast<int>(((static_cast<std::size_t>(n) * C + c) * H + iy) * W + ix);
                have = true;
              } else if (best_idx < 0 && v == best) {
                best_idx = static_cast<int>(((static_cast<std::size_t>(n) * C + c) * H + iy) * W + ix);
              }
            }
          }
          out[oi] = best;
          routes[oi] = best_idx;
        }

  Node nd;
  nd.op = Op::MaxPool2d;
  nd.in0 = in;
  nd.i0 = window;
  nd.i1 = stride;
  nd.value = std::move(out);
  nd.iaux = std::move(routes);
  return push(std::move(nd));
}

NodeId Graph::lrn(NodeId in, int radius, double bias, double alpha, double beta) {
  const Tensor& x = value(in);
  if (x.ndim() != 4) shape_error("lrn", "input must be NCHW, got " + x.shape_str());
  if (radius < 0) shape_error("lrn", "radius must be >= 0");
  if (bias <= 0.0) throw std::invalid_argument("lrn: bias must be positive");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int win = 2 * radius + 1;
  const double k = alpha / static_cast<double>(win);

  Tensor out({N, C, H, W});
  std::vector<double> denom(x.size());  // bias + k * window sum of squares
  for (int n = 0; n < N; ++n)
    for (int y = 0; y < H; ++y)
      for (int xw = 0; xw < W; ++xw)
        for (int c = 0; c < C; ++c) {
          double s = 0.0;
          const int lo = std::max(0, c - radius), hi = std::min(C - 1, c + radius);
          for (int cc = lo; cc <= hi; ++cc) {
            const double v = x.at4(n, cc, y, xw);
            s += v * v;
          }
          const double d = bias + k * s;
          const std::size_t i = (((static_cast<std::size_t>(n) * C + c) * H + y) * W + xw);
          denom[i] = d;
          out[i] = x[i] * std::pow(d, -beta);
        }

  Node nd;
  nd.op = Op::Lrn;
  nd.in0 = in;
  nd.i0 = radius;
  nd.s0 = bias;
  nd.s1 = alpha;
  nd.s2 = beta;
  nd.value = std::move(out);
  nd.daux = std::move(denom);
  return push(std::move(nd));
}

NodeId Graph::dense(NodeId in, NodeId weights, NodeId biasv) {
  const Tensor& x = value(in);
  const Tensor& w = value(weights);
  const Tensor& b = value(biasv);
  if (x.ndim() != 2 || w.ndim() != 2 || b.ndim() != 1)
    shape_error("dense", "expected input NxK, weights KxM, bias M; got " + x.shape_str() + ", " +
                             w.shape_str() + ", " + b.shape_str());
  if (x.dim(1) != w.dim(0) || w.dim(1) != b.dim(0))
    shape_error("dense", "inner dimensions disagree: " + x.shape_str() + " * " + w.shape_str() +
                             " + " + b.shape_str());
  const int N = x.dim(0), K = x.dim(1), M = w.dim(1);
  Tensor out({N, M});
  for (int n = 0; n < N; ++n)
    for (int m = 0; m < M; ++m) {
      double acc = b[static_cast<std::size_t>(m)];
      for (int j = 0; j < K; ++j)
        acc += x[static_cast<std::size_t>(n) * K + j] * w[static_cast<std::size_t>(j) * M + m];
      out[static_cast<std::size_t>(n) * M + m] = acc;
    }

  Node nd;
  nd.op = Op::Dense;
  nd.in0 = in;
  nd.in1 = weights;
  nd.in2 = biasv;
  nd.value = std::move(out);
  return push(std::move(nd));
}

NodeId Graph::relu(NodeId in) {
  const Tensor& x = value(in);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i] < 0.0) out[i] = 0.0;
  Node nd;
  nd.op = Op::Relu;
  nd.in0 = in;
  nd.value = std::move(out);
  return push(std::move(nd));
}

NodeId Graph::flatten(NodeId in) {
  const Tensor& x = value(in);
  if (x.ndim() < 1) shape_error("flatten", "empty shape");
  int rest = 1;
  for (int i = 1; i < x.ndim(); ++i) rest *= x.dim(i);
  Tensor out({x.dim(0), rest}, std::vector<double>(x.data(), x.data() + x.size()));
  Node nd;
  nd.op = Op::Flatten;
  nd.in0 = in;
  nd.value = std::move(out);
  return push(std::move(nd));
}

NodeId Graph::scale(NodeId in, double factor) {
  const Tensor& x = value(in);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factor;
  Node nd;
  nd.op = Op::Scale;
  nd.in0 = in;
  nd.s0 = factor;
  nd.value = std::move(out);
  return push(std::move(nd));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& xa = value(a);
  const Tensor& xb = value(b);
  if (!xa.same_shape(xb))
    shape_error("add", "shape mismatch: " + xa.shape_str() + " vs " + xb.shape_str());
  Tensor out = xa;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += xb[i];
  Node nd;
  nd.op = Op::Add;
  nd.in0 = a;
  nd.in1 = b;
  nd.value = std::move(out);
  return push(std::move(nd));
}

NodeId Graph::softmax_cross_entropy(NodeId logits, const std::vector<int>& labels) {
  const Tensor& z = value(logits);
  if (z.ndim() != 2) shape_error("softmax_cross_entropy", "logits must be NxC, got " + z.shape_str());
  const int N = z.dim(0), C = z.dim(1);
  if (static_cast<int>(labels.size()) != N)
    shape_error("softmax_cross_entropy", "batch size " + std::to_string(N) + " but " +
                                             std::to_string(labels.size()) + " labels");
  for (int n = 0; n < N; ++n)
    if (labels[static_cast<std::size_t>(n)] < 0 || labels[static_cast<std::size_t>(n)] >= C)
      throw std::invalid_argument("softmax_cross_entropy: label out of range at example " +
                                  std::to_string(n));

  std::vector<double> probs(z.size());
  double loss = 0.0;
  for (int n = 0; n < N; ++n) {
    const double* row = z.data() + static_cast<std::size_t>(n) * C;
    double mx = row[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
      const double e = std::exp(row[c] - mx);
      probs[static_cast<std::size_t>(n) * C + c] = e;
      sum += e;
    }
    for (int c = 0; c < C; ++c) probs[static_cast<std::size_t>(n) * C + c] /= sum;
    loss -= std::log(probs[static_cast<std::size_t>(n) * C + labels[static_cast<std::size_t>(n)]]);
  }
  loss /= static_cast<double>(N);

  Node nd;
  nd.op = Op::SoftmaxCrossEntropy;
  nd.in0 = logits;
  nd.value = Tensor::scalar(loss);
  nd.iaux = labels;
  nd.daux = std::move(probs);
  return push(std::move(nd));
}

NodeId Graph::l2sq_distance(NodeId a, NodeId b) {
  const Tensor& xa = value(a);
  const Tensor& xb = value(b);
  if (!xa.same_shape(xb))
    shape_error("l2sq_distance", "shape mismatch: " + xa.shape_str() + " vs " + xb.shape_str());
  double s = 0.0;
  for (std::size_t i = 0; i < xa.size(); ++i) {
    const double d = xa[i] - xb[i];
    s += d * d;
  }
  Node nd;
  nd.op = Op::L2SqDistance;
  nd.in0 = a;
  nd.in1 = b;
  nd.value = Tensor::scalar(s);
  return push(std::move(nd));
}

void Graph::accumulate(Tensor& dst, const Tensor& src) {
  if (dst.size() == 0) {
    dst = src;
    return;
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

std::unordered_map<NodeId, Tensor> Graph::backward(NodeId loss) const {
  const Node& ln = node(loss);
  if (ln.value.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + ln.value.shape_str());

  std::vector<Tensor> grads(nodes_.size());
  grads[static_cast<std::size_t>(loss)] = Tensor::scalar(1.0);

  for (NodeId id = loss; id >= 0; --id) {
    const Tensor& g = grads[static_cast<std::size_t>(id)];
    if (g.size() == 0) continue;
    backward_node(node(id), g, grads);
  }

  std::unordered_map<NodeId, Tensor> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].is_root) continue;
    if (grads[i].size() == 0) grads[i] = Tensor(nodes_[i].value.shape());
    out.emplace(static_cast<NodeId>(i), std::move(grads[i]));
  }
  return out;
}

void Graph::backward_node(const Node& n, const Tensor& g, std::vector<Tensor>& grads) const {
  auto needs = [&](int id) { return id >= 0 && node(id).needs_grad; };
  auto ensure = [&](int id) -> Tensor& {
    Tensor& t = grads[static_cast<std::size_t>(id)];
    if (t.size() == 0) t = Tensor(node(id).value.shape());
    return t;
  };

  switch (n.op) {
    case Op::Input:
    case Op::Constant:
      break;

    case Op::Conv2d: {
      const Tensor& x = node(n.in0).value;
      const Tensor& k = node(n.in1).value;
      const bool want_dx = needs(n.in0), want_dk = needs(n.in1);
      if (!want_dx && !want_dk) break;
      Tensor dummy;
      Tensor& dx = want_dx ? ensure(n.in0) : dummy;
      Tensor& dk = want_dk ? ensure(n.in1) : dummy;
      const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const int O = k.dim(0), KH = k.dim(2), KW = k.dim(3);
      const int OH = n.value.dim(2), OW = n.value.dim(3);
      const int stride = n.i0, padding = n.i1;
      for (int b = 0; b < N; ++b)
        for (int o = 0; o < O; ++o)
          for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
              const double gv = g.at4(b, o, oy, ox);
              if (gv == 0.0) continue;
              for (int c = 0; c < C; ++c)
                for (int ky = 0; ky < KH; ++ky) {
                  const int iy = oy * stride + ky - padding;
                  if (iy < 0 || iy >= H) continue;
                  for (int kx = 0; kx < KW; ++kx) {
                    const int ix = ox * stride + kx - padding;
                    if (ix < 0 || ix >= W) continue;
                    if (want_dx) dx.at4(b, c, iy, ix) += gv * k.at4(o, c, ky, kx);
                    if (want_dk) dk.at4(o, c, ky, kx) += gv * x.at4(b, c, iy, ix);
                  }
                }
            }
      break;
    }

    case Op::ChannelBias: {
      if (needs(n.in0)) {
        Tensor& dx = ensure(n.in0);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
      }
      if (needs(n.in1)) {
        Tensor& db = ensure(n.in1);
        const int N = n.value.dim(0), C = n.value.dim(1), HW = n.value.dim(2) * n.value.dim(3);
        const double* gp = g.data();
        for (int b = 0; b < N; ++b)
          for (int c = 0; c < C; ++c)
            for (int i = 0; i < HW; ++i) db[static_cast<std::size_t>(c)] += *gp++;
      }
      break;
    }

    case Op::MaxPool2d: {
      if (!needs(n.in0)) break;
      Tensor& dx = ensure(n.in0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const int route = n.iaux[i];
        if (route >= 0) dx[static_cast<std::size_t>(route)] += g[i];
      }
      break;
    }

    case Op::Lrn: {
      if (!needs(n.in0)) break;
      const Tensor& x = node(n.in0).value;
      Tensor& dx = ensure(n.in0);
      const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const int radius = n.i0;
      const double beta = n.s2;
      const double k = n.s1 / static_cast<double>(2 * radius + 1);
      for (int b = 0; b < N; ++b)
        for (int y = 0; y < H; ++y)
          for (int xw = 0; xw < W; ++xw) {
            // d out_c / d x_j = delta * D_c^-beta - 2*k*beta*x_c*x_j*D_c^-(beta+1), j in window of c
            for (int j = 0; j < C; ++j) {
              const std::size_t ij = (((static_cast<std::size_t>(b) * C + j) * H + y) * W + xw);
              double acc = 0.0;
              const int lo = std::max(0, j - radius), hi = std::min(C - 1, j + radius);
              for (int c = lo; c <= hi; ++c) {
                const std::size_t ic = (((static_cast<std::size_t>(b) * C + c) * H + y) * W + xw);
                const double D = n.daux[ic];
                double term = 0.0;
                if (c == j) term += std::pow(D, -beta);
                term -= 2.0 * k * beta * x[ic] * x[ij] * std::pow(D, -beta - 1.0);
                acc += g[ic] * term;
              }
              dx[ij] += acc;
            }
          }
      break;
    }

    case Op::Dense: {
      const Tensor& x = node(n.in0).value;
      const Tensor& w = node(n.in1).value;
      const bool want_dx = needs(n.in0), want_dw = needs(n.in1), want_db = needs(n.in2);
      if (!want_dx && !want_dw && !want_db) break;
      Tensor dummy;
      Tensor& dx = want_dx ? ensure(n.in0) : dummy;
      Tensor& dw = want_dw ? ensure(n.in1) : dummy;
      Tensor& db = want_db ? ensure(n.in2) : dummy;
      const int N = x.dim(0), K = x.dim(1), M = w.dim(1);
      for (int b = 0; b < N; ++b)
        for (int m = 0; m < M; ++m) {
          const double gv = g[static_cast<std::size_t>(b) * M + m];
          if (gv == 0.0) continue;
          if (want_db) db[static_cast<std::size_t>(m)] += gv;
          for (int j = 0; j < K; ++j) {
            if (want_dx)
              dx[static_cast<std::size_t>(b) * K + j] += gv * w[static_cast<std::size_t>(j) * M + m];
            if (want_dw)
              dw[static_cast<std::size_t>(j) * M + m] += gv * x[static_cast<std::size_t>(b) * K + j];
          }
        }
      break;
    }

    case Op::Relu: {
      if (!needs(n.in0)) break;
      const Tensor& x = node(n.in0).value;
      Tensor& dx = ensure(n.in0);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > 0.0) dx[i] += g[i];  // subgradient 0 at exactly 0
      break;
    }

    case Op::Flatten: {
      if (!needs(n.in0)) break;
      Tensor& dx = ensure(n.in0);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
      break;
    }

    case Op::Scale: {
      if (!needs(n.in0)) break;
      Tensor& dx = ensure(n.in0);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * n.s0;
      break;
    }

    case Op::Add: {
      if (needs(n.in0)) {
        Tensor& da = ensure(n.in0);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (needs(n.in1)) {
        Tensor& db = ensure(n.in1);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
      }
      break;
    }

    case Op::SoftmaxCrossEntropy: {
      if (!needs(n.in0)) break;
      Tensor& dz = ensure(n.in0);
      const int N = dz.dim(0), C = dz.dim(1);
      const double gv = g[0] / static_cast<double>(N);
      for (int b = 0; b < N; ++b)
        for (int c = 0; c < C; ++c) {
          double d = n.daux[static_cast<std::size_t>(b) * C + c];
          if (c == n.iaux[static_cast<std::size_t>(b)]) d -= 1.0;
          dz[static_cast<std::size_t>(b) * C + c] += gv * d;
        }
      break;
    }

    case Op::L2SqDistance: {
      const Tensor& xa = node(n.in0).value;
      const Tensor& xb = node(n.in1).value;
      if (needs(n.in0)) {
        Tensor& da = ensure(n.in0);
        for (std::size_t i = 0; i < xa.size(); ++i) da[i] += 2.0 * (xa[i] - xb[i]) * g[0];
      }
      if (needs(n.in1)) {
        Tensor& db = ensure(n.in1);
        for (std::size_t i = 0; i < xa.size(); ++i) db[i] -= 2.0 * (xa[i] - xb[i]) * g[0];
      }
      break;
    }
  }
}

}  // namespace fclab
