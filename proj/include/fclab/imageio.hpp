#pragma once

#include <string>

#include "fclab/tensor.hpp"

namespace fclab {

// 8-bit PNG (grayscale for 1 channel, RGB for 3); values rounded and
// clamped to [0, 255]. For human inspection only; the f64 blob is the
// authoritative artifact.
void write_png(const Tensor& image_chw, const std::string& path);

// Lossless single-tensor blob in the checkpoint tensor encoding.
void save_tensor_blob(const Tensor& t, const std::string& name, const std::string& path);
Tensor load_tensor_blob(const std::string& path, std::string* name = nullptr);

}  // namespace fclab
