#pragma once

#include "ppg/model.hpp"
#include "ppg/support.hpp"
#include "test_util.hpp"

namespace ppg::test {

// A reduced model that keeps every stage but runs in milliseconds:
// 32x32 images, 8x8 patches (4x4 grid, 16 tokens, 1 prompt token).
inline ModelConfig small_config() {
  ModelConfig c;
  c.height = 32;
  c.width = 32;
  c.patch = 8;
  c.channels = 16;
  c.vim_embed = 12;
  c.vim_state = 3;
  c.vim_depth = 1;
  c.heads = 2;
  c.ccm_blocks = 4;
  c.cbam_ratio = 4;
  c.hires_channels = 4;
  c.backbone_layers = 1;
  c.lora_rank = 2;
  c.lora_alpha = 2.0;
  return c;
}

inline Tensor random_mask(const Shape& shape, Rng& rng, double p = 0.4) {
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.mutable_data()) v = rng.uniform() < p ? 1.0 : 0.0;
  return t;
}

inline Tensor random_image(const Shape& shape, Rng& rng) {
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.mutable_data()) v = rng.uniform();
  return t;
}

inline SupportSet random_support(std::size_t n, std::size_t k, std::size_t h, std::size_t w, Rng& rng) {
  return {random_image({k, 3, h, w}, rng), random_mask({n, k, h, w}, rng)};
}

}  // namespace ppg::test
