#pragma once

#include <cstddef>
#include <optional>

#include "ppg/params.hpp"
#include "ppg/tensor.hpp"

namespace ppg {

struct LoRAConfig {
  std::size_t rank = 4;
  double alpha = 4.0;
};

// Low-rank delta scale * up * down on top of a frozen linear map.
struct LoRAAdapter {
  Tensor down;  // [r, in]
  Tensor up;    // [out, r], zero at init
  std::size_t rank = 0;
  double scale = 1.0;
};

struct LinearLayer {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out] or undefined
  std::optional<LoRAAdapter> lora;

  std::size_t in() const { return weight.dim(1); }
  std::size_t out() const { return weight.dim(0); }
  bool trainable() const { return weight.requires_grad(); }
};

enum class Init {
  kaiming,    // U(+-1/sqrt(fan_in)), zero bias
  attention,  // N(0, 0.02), zero bias
};

LinearLayer make_linear(const ParamBuilder& b, std::size_t in, std::size_t out, bool bias = true,
                        Init init = Init::kaiming, std::optional<LoRAConfig> lora = std::nullopt);

// Throws ConfigError unless 0 < rank < min(in, out).
LoRAAdapter make_lora(const ParamBuilder& b, std::size_t in, std::size_t out, const LoRAConfig& config);

// x W^T + b, plus the adapter delta when one is attached.
Tensor linear_forward(const LinearLayer& layer, const Tensor& x);

// Explicit adapter application: requires a frozen base layer.
Tensor lora_forward(const LinearLayer& layer, const LoRAAdapter& adapter, const Tensor& x);

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;
};

LayerNorm make_layer_norm(const ParamBuilder& b, std::size_t channels);
Tensor layer_norm_forward(const LayerNorm& ln, const Tensor& x);

// Two-layer SiLU MLP (C -> expansion*C -> C) wrapped in Add&Norm.
struct FeedForward {
  LinearLayer fc1;
  LinearLayer fc2;
  LayerNorm norm;
};

FeedForward make_feed_forward(const ParamBuilder& b, std::size_t channels, std::size_t expansion = 4,
                              std::optional<LoRAConfig> lora = std::nullopt);
Tensor ffn_inner(const FeedForward& ff, const Tensor& x);
// LN(x + FFN(x))
Tensor ffn_forward(const FeedForward& ff, const Tensor& x);

struct CrossAttentionBlock {
  LinearLayer q, k, v, o;
  std::size_t heads = 4;

  std::size_t channels() const { return q.in(); }
};

CrossAttentionBlock make_cross_attention(const ParamBuilder& b, std::size_t channels, std::size_t heads = 4,
                                         std::optional<LoRAConfig> lora = std::nullopt);

struct AttentionResult {
  Tensor out;      // [N, Tq, C]
  Tensor weights;  // [N*heads, Tq, Tk]
};

// queries: [N, Tq, C], context: [N, Tk, C].
AttentionResult cross_attention_with_weights(const CrossAttentionBlock& block, const Tensor& queries,
                                             const Tensor& context);
Tensor cross_attention(const CrossAttentionBlock& block, const Tensor& queries, const Tensor& context);

struct CBAMBlock {
  LinearLayer fc1;  // C -> C/ratio
  LinearLayer fc2;  // C/ratio -> C
  Tensor spatial_weight;  // [1, 2, k, k]
  Tensor spatial_bias;    // [1]
};

CBAMBlock make_cbam(const ParamBuilder& b, std::size_t channels, std::size_t ratio = 16, std::size_t kernel = 7);
Tensor channel_attention(const CBAMBlock& block, const Tensor& x);  // [B, C] gate in (0,1)
Tensor spatial_attention(const CBAMBlock& block, const Tensor& x);  // [B, 1, H, W] gate in (0,1)
Tensor cbam_forward(const CBAMBlock& block, const Tensor& x);

struct ResBlock {
  Tensor conv1_w, conv1_b;
  Tensor norm_gamma, norm_beta;
  std::size_t groups = 1;
  Tensor conv2_w, conv2_b;
  Tensor skip_w, skip_b;  // 1x1 projection, only when channel counts differ
};

// Largest divisor of `channels` that is at most 8.
std::size_t group_count(std::size_t channels);

ResBlock make_resblock(const ParamBuilder& b, std::size_t in_channels, std::size_t out_channels);
Tensor resblock_forward(const ResBlock& block, const Tensor& x);

// [B, C, H, W] -> [B, (H/P)*(W/P), C*P*P], tokens in row-major grid order and
// each token laid out channel-major.
Tensor patchify(const Tensor& x, std::size_t patch);

}  // namespace ppg
