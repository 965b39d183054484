#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ppg/nn.hpp"

// Small frozen stand-in for a promptable segmentation backbone. Base weights
// come from a seeded random init and never train; every linear map carries a
// trainable LoRA adapter.
namespace ppg {

struct BackboneConfig {
  std::size_t channels = 64;        // C of F_x / F_sup / prompt
  std::size_t patch = 16;
  std::size_t hires_channels = 16;  // full-resolution skip features
  std::size_t heads = 4;
  std::size_t mixing_layers = 2;
  // Mask logits are logit_scale * correlation(hyper, pixel) + logit_bias with
  // pixel embeddings centred over the image, so logits stay bounded and the
  // mean logit of every mask is logit_bias.
  double logit_scale = 8.0;
  double logit_bias = -3.0;
  LoRAConfig lora;
  std::uint64_t seed = 7;
};

struct MixingLayer {
  CrossAttentionBlock attn;  // used as self-attention
  LayerNorm norm;
  FeedForward ffn;
};

struct StubEncoder {
  std::size_t patch = 16;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  LinearLayer patch_proj;  // 3*P*P -> C
  Tensor pos;              // [T, C]
  std::vector<MixingLayer> layers;
  Tensor stem_w;  // [c_hr, 3, 3, 3]
  Tensor stem_b;  // [c_hr]
};

struct EncodedImages {
  Tensor features;  // [B, C, H, W]
  Tensor hires;     // [B, c_hr, H0, W0]
};

struct StubDecoder {
  std::size_t height = 0;  // H0
  std::size_t width = 0;   // W0
  Tensor pos;              // [T, C] image positional table
  CrossAttentionBlock tok_to_img;
  LayerNorm norm_tok;
  CrossAttentionBlock img_to_tok;
  LayerNorm norm_img;
  LinearLayer hyper1;  // C -> C
  LinearLayer hyper2;  // C -> c_hr
  LinearLayer lowres;  // C -> c_hr
  Tensor out_bias;     // [1]
  double logit_scale = 8.0;
};

struct Backbone {
  BackboneConfig config;
  StubEncoder encoder;
  StubDecoder decoder;
};

// Registers every backbone tensor under "backbone." in `store`.
Backbone make_backbone(ParamStore& store, const BackboneConfig& config, std::size_t height, std::size_t width);

// images: [B, 3, H0, W0].
EncodedImages encode_images(const StubEncoder& enc, const Tensor& images);
// img: [3, H0, W0] -> [C, H, W].
Tensor encode_image(const StubEncoder& enc, const Tensor& img);

// F_x: [C, H, W], hires: [c_hr, H0, W0], prompt: [N, Tp, C] -> logits [N, H0, W0].
Tensor decode_logits(const StubDecoder& dec, const Tensor& f_x, const Tensor& hires, const Tensor& prompt);
// sigmoid of decode_logits.
Tensor decode(const StubDecoder& dec, const Tensor& f_x, const Tensor& hires, const Tensor& prompt);

// Contents of the backbone.info file written next to checkpoints.
std::string backbone_info(const BackboneConfig& config, std::size_t height, std::size_t width);

}  // namespace ppg
