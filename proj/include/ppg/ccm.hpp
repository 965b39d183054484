#pragma once

#include <cstddef>
#include <vector>

#include "ppg/nn.hpp"

// Contextual colorization module: target and context token streams refine
// each other through alternating cross-attention, halving the token count at
// every block. The final context stream is the prompt.
namespace ppg {

// Learned linear map along the token axis, T -> T/2, no bias.
struct TokenProjection {
  Tensor weight;  // [T/2, T]
};

TokenProjection make_token_projection(const ParamBuilder& b, std::size_t tokens);

// x: [N, C, T] -> [N, C, T/2].
Tensor project_tokens(const TokenProjection& proj, const Tensor& x);

struct CCMBlock {
  TokenProjection proj_x;
  TokenProjection proj_ctx;
  CrossAttentionBlock attn_fwd;  // queries from the target stream
  LayerNorm norm_fwd;
  FeedForward ffn_x;
  CrossAttentionBlock attn_rev;  // queries from the context stream
  LayerNorm norm_rev;
  FeedForward ffn_ctx;
};

CCMBlock make_ccm_block(const ParamBuilder& b, std::size_t tokens, std::size_t channels, std::size_t heads);

struct CCMStreams {
  Tensor x;    // [N, T, C]
  Tensor ctx;  // [N, T, C]
};

// Both inputs [N, T, C]; both outputs [N, T/2, C].
CCMStreams ccm_block_forward(const CCMBlock& block, const Tensor& f_x, const Tensor& e_ctx);

struct ContextualColorizationModule {
  Tensor pos;  // [T, C], added to both streams before the first block
  std::vector<CCMBlock> blocks;
};

// Throws ConfigError unless tokens is divisible by 2^blocks.
ContextualColorizationModule make_ccm(const ParamBuilder& b, std::size_t tokens, std::size_t channels,
                                      std::size_t heads = 4, std::size_t blocks = 4);

CCMStreams ccm_streams(const ContextualColorizationModule& ccm, const Tensor& f_x, const Tensor& e_ctx);

// f_x: [N, T, C] (target features repeated per object), e_ctx: [N, T, C]
// -> prompt [N, T / 2^blocks, C].
Tensor ccm_forward(const ContextualColorizationModule& ccm, const Tensor& f_x, const Tensor& e_ctx);

}  // namespace ppg
