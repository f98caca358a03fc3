#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fundus/tensor.hpp"

namespace fundus {

// 8-bit RGB, packed HWC
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  std::uint8_t* pixel(int y, int x) {
    return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
  const std::uint8_t* pixel(int y, int x) const {
    return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
};

// PNG or JPEG, decided by file magic. Grayscale is replicated to RGB,
// alpha is dropped. Throws std::runtime_error on undecodable input.
ImageU8 decode_image(const std::string& path);

void write_png(const std::string& path, const ImageU8& img);

// [3,H,W] float tensor with values in [0,255]
Tensor image_to_chw(const ImageU8& img);

// inverse of the unit-range convention: clamps to [0,1], rounds to 8-bit
ImageU8 unit_tensor_to_image(const Tensor& chw);

}  // namespace fundus
