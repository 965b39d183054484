#pragma once

#include <cstddef>

#include "ppg/tensor.hpp"

namespace ppg {

// N objects x K shots. All N masks of shot k annotate the same image.
struct SupportSet {
  Tensor images;  // [K, 3, H0, W0]
  Tensor masks;   // [N, K, H0, W0], values in {0, 1}

  std::size_t objects() const { return masks.dim(0); }
  std::size_t shots() const { return images.dim(0); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  // Shapes agree, sides divisible by `patch`, masks binary.
  void validate(std::size_t patch = 16) const;
};

// Throws UsageError naming the first non-binary value.
void require_binary_mask(const Tensor& mask, const char* what);

}  // namespace ppg
