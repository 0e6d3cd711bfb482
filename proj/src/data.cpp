#include "fclab/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "fclab/mathutil.hpp"
#include "fclab/rng.hpp"
#include "json.hpp"

namespace fclab {

namespace {

const std::vector<std::string> kCifarClasses = {"airplane", "automobile", "bird",  "cat",  "deer",
                                                "dog",      "frog",       "horse", "ship", "truck"};
constexpr std::size_t kCifarRecord = 3073;

}  // namespace

std::vector<double> softmax_row(const Tensor& logits, int row) {
  const int C = logits.dim(1);
  const double* z = logits.data() + static_cast<std::size_t>(row) * C;
  double mx = z[0];
  for (int c = 1; c < C; ++c) mx = std::max(mx, z[c]);
  std::vector<double> p(static_cast<std::size_t>(C));
  double sum = 0.0;
  for (int c = 0; c < C; ++c) {
    p[static_cast<std::size_t>(c)] = std::exp(z[c] - mx);
    sum += p[static_cast<std::size_t>(c)];
  }
  for (auto& v : p) v /= sum;
  return p;
}

int argmax_row(const Tensor& logits, int row) {
  const int C = logits.dim(1);
  const double* z = logits.data() + static_cast<std::size_t>(row) * C;
  int best = 0;
  for (int c = 1; c < C; ++c)
    if (z[c] > z[best]) best = c;
  return best;
}

Tensor Dataset::batch() const {
  std::vector<int> all(images.size());
  std::iota(all.begin(), all.end(), 0);
  return batch(all);
}

Tensor Dataset::batch(const std::vector<int>& indices) const {
  if (indices.empty()) throw std::invalid_argument("dataset: empty batch");
  const Tensor& first = images[static_cast<std::size_t>(indices[0])].pixels;
  std::vector<int> shape = {static_cast<int>(indices.size())};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensor out(shape);
  const std::size_t per = first.size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Tensor& img = images[static_cast<std::size_t>(indices[i])].pixels;
    if (img.size() != per) throw std::invalid_argument("dataset: ragged image shapes in batch");
    std::memcpy(out.data() + i * per, img.data(), per * sizeof(double));
  }
  return out;
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(images.size());
  for (const auto& im : images) out.push_back(im.label);
  return out;
}

std::vector<int> Dataset::indices_of_class(int class_id) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < images.size(); ++i)
    if (images[i].label == class_id) out.push_back(static_cast<int>(i));
  return out;
}

Dataset parse_cifar10(const std::vector<std::uint8_t>& bytes, const std::string& split,
                      const std::string& source_name) {
  if (bytes.size() % kCifarRecord != 0)
    throw std::runtime_error("cifar10: file length " + std::to_string(bytes.size()) +
                             " is not a multiple of 3073 (truncated or not a CIFAR batch)");
  Dataset ds;
  ds.class_names = kCifarClasses;
  ds.split = split;
  const std::size_t n = bytes.size() / kCifarRecord;
  ds.images.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecord;
    const int label = rec[0];
    if (label > 9)
      throw std::runtime_error("cifar10: corrupt label " + std::to_string(label) + " at record " +
                               std::to_string(r));
    Tensor px({3, 32, 32});
    for (std::size_t i = 0; i < 3072; ++i) px[i] = static_cast<double>(rec[1 + i]);
    ds.images.push_back({std::move(px), label, source_name + "@" + std::to_string(r)});
  }
  return ds;
}

Dataset read_cifar10(const std::string& path, const std::string& split) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cifar10: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return parse_cifar10(bytes, split, path);
}

std::vector<std::uint8_t> serialize_cifar10(const Dataset& ds) {
  std::vector<std::uint8_t> out;
  out.reserve(ds.images.size() * kCifarRecord);
  for (const auto& im : ds.images) {
    if (im.pixels.size() != 3072)
      throw std::invalid_argument("cifar10: image is not 3x32x32");
    out.push_back(static_cast<std::uint8_t>(im.label));
    for (std::size_t i = 0; i < 3072; ++i)
      out.push_back(static_cast<std::uint8_t>(im.pixels[i]));
  }
  return out;
}

Dataset synth_dataset(int classes, int per_class, int hw, std::uint64_t seed) {
  if (classes < 1 || per_class < 1 || hw < 1)
    throw std::invalid_argument("synth_dataset: all arguments must be >= 1");
  Dataset ds;
  ds.split = "train";
  for (int c = 0; c < classes; ++c) ds.class_names.push_back("synth" + std::to_string(c));

  Rng master(seed);
  // Texture layout: a class-shared sinusoid carries the visual structure,
  // and a small class-specific sinusoid on top carries the label. Keeping
  // the class delta and the pixel noise small relative to the shared
  // texture leaves the classes close together in pixel space (a few pixel
  // units), while a linear probe on raw pixels still separates them easily
  // because the delta is consistent across the whole image.
  constexpr double kSharedAmp = 90.0;
  constexpr double kClassAmp = 1.0;
  // Classes 2 and up are "context" classes: they only exist so that wider
  // pretraining has more than one discriminant to learn, so they can carry a
  // much louder signature. Only the 0/1 pair needs to stay close in pixel
  // space (that is the pair attacks are run against).
  constexpr double kLoudAmp = 24.0;
  constexpr double kNoiseAmp = 0.0;
  constexpr double kTau = 6.283185307179586;

  std::vector<double> shared(static_cast<std::size_t>(hw) * hw);
  {
    Rng srng = master.fork(0xc0557ULL);
    const double fx = 1.0 + static_cast<double>(srng.uniform_int(3));
    const double fy = 1.0 + static_cast<double>(srng.uniform_int(3));
    const double phase = srng.uniform(0.0, kTau);
    for (int y = 0; y < hw; ++y)
      for (int x = 0; x < hw; ++x)
        shared[static_cast<std::size_t>(y) * hw + x] =
            127.5 + kSharedAmp * std::sin(kTau * (fx * x + fy * y) / hw + phase);
  }

  // Each class owns a bank of waves; every image mixes its own bank with
  // random positive weights (that carries the label) and the other classes'
  // banks with small signed weights (that carries a per-image identity).
  // Putting the identity into wave directions that other classes make loud
  // matters: a trained extractor transmits exactly those directions, so each
  // image keeps an individual, many-dimensional feature signature instead of
  // collapsing onto its class manifold the way plain white noise does.
  constexpr int kWavesPerClass = 8;
  constexpr int kBankCount = 8;  // fixed so images do not depend on `classes`
  constexpr double kIdentityAmp = 0.75;
  struct Wave {
    double fx, fy, phase;
  };
  std::vector<std::vector<Wave>> banks(static_cast<std::size_t>(kBankCount));
  for (int c = 0; c < kBankCount; ++c) {
    Rng prng = master.fork(static_cast<std::uint64_t>(c));
    auto& bank = banks[static_cast<std::size_t>(c)];
    for (int m = 0; m < kWavesPerClass; ++m)
      bank.push_back({1.0 + static_cast<double>(prng.uniform_int(8)),
                      1.0 + static_cast<double>(prng.uniform_int(8)), prng.uniform(0.0, kTau)});
  }

  const double kMixNorm = 1.0 / std::sqrt(static_cast<double>(kWavesPerClass));
  const double kIdNorm = 1.0 / std::sqrt(static_cast<double>((kBankCount - 1) * kWavesPerClass));
  Rng noise = master.fork(0xda7aULL);
  for (int c = 0; c < classes; ++c)
    for (int i = 0; i < per_class; ++i) {
      const double flip = (c % 2 == 0) ? 1.0 : -1.0;
      const double amp = (c < 2) ? kClassAmp : kLoudAmp;
      // own-bank weights first, then identity weights bank by bank, so the
      // draw order (and therefore the image) is independent of `classes`.
      std::vector<double> mix(static_cast<std::size_t>(kWavesPerClass));
      for (auto& wgt : mix) wgt = noise.uniform(0.5, 1.5);
      std::vector<std::vector<double>> ident(static_cast<std::size_t>(kBankCount));
      for (int b = 0; b < kBankCount; ++b) {
        if (b == c % kBankCount) continue;
        auto& iw = ident[static_cast<std::size_t>(b)];
        iw.resize(static_cast<std::size_t>(kWavesPerClass));
        for (auto& wgt : iw) wgt = noise.uniform(-1.0, 1.0);
      }
      Tensor px({1, hw, hw});
      for (int y = 0; y < hw; ++y)
        for (int x = 0; x < hw; ++x) {
          double label_delta = 0.0;
          const auto& bank = banks[static_cast<std::size_t>(c % kBankCount)];
          for (int m = 0; m < kWavesPerClass; ++m) {
            const Wave& w = bank[static_cast<std::size_t>(m)];
            label_delta += mix[static_cast<std::size_t>(m)] *
                           std::sin(kTau * (w.fx * x + w.fy * y) / static_cast<double>(hw) +
                                    w.phase);
          }
          double id_delta = 0.0;
          for (int b = 0; b < kBankCount; ++b) {
            if (ident[static_cast<std::size_t>(b)].empty()) continue;
            const auto& obank = banks[static_cast<std::size_t>(b)];
            for (int m = 0; m < kWavesPerClass; ++m) {
              const Wave& w = obank[static_cast<std::size_t>(m)];
              id_delta += ident[static_cast<std::size_t>(b)][static_cast<std::size_t>(m)] *
                          std::sin(kTau * (w.fx * x + w.fy * y) / static_cast<double>(hw) +
                                   w.phase);
            }
          }
          double v = shared[static_cast<std::size_t>(y) * hw + x] +
                     flip * amp * kMixNorm * label_delta + kIdentityAmp * kIdNorm * id_delta +
                     noise.uniform(-kNoiseAmp, kNoiseAmp);
          px[static_cast<std::size_t>(y) * hw + x] = std::clamp(v, 0.0, 255.0);
        }
      std::ostringstream id;
      id << "synth:" << seed << ":" << c << ":" << i;
      ds.images.push_back({std::move(px), c, id.str()});
    }
  return ds;
}

Dataset dedup(const Dataset& train, const Dataset& test) {
  Dataset out;
  out.class_names = test.class_names;
  out.split = test.split;
  for (const auto& im : test.images) {
    bool dup = false;
    for (const auto& tr : train.images) {
      if (tr.pixels.size() != im.pixels.size()) continue;
      if (std::memcmp(tr.pixels.data(), im.pixels.data(), im.pixels.size() * sizeof(double)) == 0) {
        dup = true;
        break;
      }
    }
    if (!dup) out.images.push_back(im);
  }
  return out;
}

OutlierSelection select_outlier_targets(const Model& model, const Dataset& test, int class_id,
                                        int k) {
  if (k < 1) throw std::invalid_argument("select_outlier_targets: k must be >= 1");
  const auto idx = test.indices_of_class(class_id);
  OutlierSelection sel;
  if (idx.empty()) {
    sel.shortfall = true;
    return sel;
  }
  const Tensor logits = model.logits(test.batch(idx));
  std::vector<std::pair<double, int>> ranked;  // (true-class confidence, dataset index)
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (argmax_row(logits, static_cast<int>(i)) != class_id) continue;  // must be correct
    const auto p = softmax_row(logits, static_cast<int>(i));
    ranked.emplace_back(p[static_cast<std::size_t>(class_id)], idx[i]);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  sel.shortfall = static_cast<int>(ranked.size()) < k;
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), ranked.size());
  for (std::size_t i = 0; i < take; ++i) {
    sel.targets.push_back(test.images[static_cast<std::size_t>(ranked[i].second)]);
    sel.confidences.push_back(ranked[i].first);
  }
  return sel;
}

std::vector<LabeledImage> sample_bases(const Dataset& ds, int class_id, int n,
                                       std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_bases: n must be >= 1");
  auto idx = ds.indices_of_class(class_id);
  if (static_cast<int>(idx.size()) < n)
    throw std::invalid_argument("sample_bases: class " + std::to_string(class_id) + " has only " +
                                std::to_string(idx.size()) + " members, need " + std::to_string(n));
  Rng rng(seed);
  rng.shuffle(idx);
  std::vector<LabeledImage> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(ds.images[static_cast<std::size_t>(idx[i])]);
  return out;
}

std::string dataset_manifest_json(const Dataset& ds) {
  nlohmann::json j;
  j["split"] = ds.split;
  j["class_names"] = ds.class_names;
  std::vector<int> counts(ds.class_names.size(), 0);
  std::vector<std::string> ids;
  for (const auto& im : ds.images) {
    counts[static_cast<std::size_t>(im.label)]++;
    ids.push_back(im.source_id);
  }
  j["class_counts"] = counts;
  j["source_ids"] = ids;
  return j.dump(2);
}

}  // namespace fclab
