#pragma once

#include <string>

#include "catair/tensor.hpp"

namespace catair {

// 8-bit PNG I/O. Tensors are [H, W, 3] (RGB) or [H, W, 1] (grayscale) with
// values in [0,1]; writing quantizes once via round(v * 255) after clamping.
Tensor read_png(const std::string& path);
void write_png(const std::string& path, const Tensor& image);

}  // namespace catair
