#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fclab/model.hpp"
#include "fclab/tensor.hpp"

namespace fclab {

struct LabeledImage {
  Tensor pixels;  // C x H x W, values in [0, 255]
  int label = 0;
  std::string source_id;
};

struct Dataset {
  std::vector<LabeledImage> images;
  std::vector<std::string> class_names;
  std::string split;  // "train" | "test"

  std::size_t size() const { return images.size(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }

  // Stacks all images into one N x C x H x W batch.
  Tensor batch() const;
  Tensor batch(const std::vector<int>& indices) const;
  std::vector<int> labels() const;
  std::vector<int> indices_of_class(int class_id) const;
};

// CIFAR-10 binary batches: records of 3073 bytes (label, then 1024 R,
// 1024 G, 1024 B row-major 32x32).
Dataset read_cifar10(const std::string& path, const std::string& split);
Dataset parse_cifar10(const std::vector<std::uint8_t>& bytes, const std::string& split,
                      const std::string& source_name);
std::vector<std::uint8_t> serialize_cifar10(const Dataset& ds);

// Class-conditional textured images: per-class sinusoidal base pattern plus
// seeded pixel noise, clipped to [0,255]. Linearly separable in raw pixel
// space by construction for hw >= 8. Deterministic per seed.
Dataset synth_dataset(int classes, int per_class, int hw, std::uint64_t seed);

// Removes test images whose pixels exactly equal any training image.
Dataset dedup(const Dataset& train, const Dataset& test);

struct OutlierSelection {
  std::vector<LabeledImage> targets;
  std::vector<double> confidences;  // true-class softmax, ascending
  bool shortfall = false;           // fewer than k qualifying images existed
};

// The k correctly-classified test images of class_id with the lowest
// true-class confidence, ascending.
OutlierSelection select_outlier_targets(const Model& model, const Dataset& test, int class_id,
                                        int k);

// Seeded uniform sample without replacement from class_id.
std::vector<LabeledImage> sample_bases(const Dataset& ds, int class_id, int n, std::uint64_t seed);

// JSON manifest (class names, counts, source ids) for report provenance.
std::string dataset_manifest_json(const Dataset& ds);

}  // namespace fclab
