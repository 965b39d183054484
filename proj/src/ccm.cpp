#include "ppg/ccm.hpp"

#include "ppg/errors.hpp"
#include "ppg/ops.hpp"

namespace ppg {

TokenProjection make_token_projection(const ParamBuilder& b, std::size_t tokens) {
  if (tokens < 2 || tokens % 2 != 0)
    throw ShapeError("token projection needs an even token count, got " + std::to_string(tokens));
  return {b.kaiming_uniform("weight", {tokens / 2, tokens}, tokens)};
}

Tensor project_tokens(const TokenProjection& proj, const Tensor& x) {
  if (x.rank() != 3 || x.dim(2) != proj.weight.dim(1))
    throw ShapeError("project_tokens: input " + shape_str(x.shape()) + " needs " +
                     std::to_string(proj.weight.dim(1)) + " tokens on the last axis");
  return linear(x, proj.weight, Tensor());
}

CCMBlock make_ccm_block(const ParamBuilder& b, std::size_t tokens, std::size_t channels, std::size_t heads) {
  CCMBlock blk;
  blk.proj_x = make_token_projection(b.scope("proj_x"), tokens);
  blk.proj_ctx = make_token_projection(b.scope("proj_ctx"), tokens);
  blk.attn_fwd = make_cross_attention(b.scope("attn_fwd"), channels, heads);
  blk.norm_fwd = make_layer_norm(b.scope("norm_fwd"), channels);
  blk.ffn_x = make_feed_forward(b.scope("ffn_x"), channels);
  blk.attn_rev = make_cross_attention(b.scope("attn_rev"), channels, heads);
  blk.norm_rev = make_layer_norm(b.scope("norm_rev"), channels);
  blk.ffn_ctx = make_feed_forward(b.scope("ffn_ctx"), channels);
  return blk;
}

namespace {

// Token projection on an [N, T, C] stream.
Tensor halve(const TokenProjection& proj, const Tensor& s) {
  return swap_axes(project_tokens(proj, swap_axes(s, 1, 2)), 1, 2);
}

}  // namespace

CCMStreams ccm_block_forward(const CCMBlock& block, const Tensor& f_x, const Tensor& e_ctx) {
  if (f_x.rank() != 3 || e_ctx.rank() != 3 || f_x.dim(0) != e_ctx.dim(0))
    throw ShapeError("ccm_block_forward: streams " + shape_str(f_x.shape()) + " and " + shape_str(e_ctx.shape()) +
                     " disagree");
  const Tensor x = halve(block.proj_x, f_x);
  const Tensor e = halve(block.proj_ctx, e_ctx);
  const Tensor x1 = layer_norm_forward(block.norm_fwd, x + cross_attention(block.attn_fwd, x, e));
  const Tensor x_next = ffn_forward(block.ffn_x, x1);
  const Tensor e1 = layer_norm_forward(block.norm_rev, e + cross_attention(block.attn_rev, e, x_next));
  return {x_next, ffn_forward(block.ffn_ctx, e1)};
}

ContextualColorizationModule make_ccm(const ParamBuilder& b, std::size_t tokens, std::size_t channels,
                                      std::size_t heads, std::size_t blocks) {
  const std::size_t factor = std::size_t{1} << blocks;
  if (tokens % factor != 0)
    throw ConfigError("CCM with " + std::to_string(blocks) + " blocks needs a token count divisible by " +
                      std::to_string(factor) + ", got " + std::to_string(tokens));
  ContextualColorizationModule ccm;
  ccm.pos = b.normal("pos", {tokens, channels}, 0.02);
  for (std::size_t i = 0; i < blocks; ++i)
    ccm.blocks.push_back(make_ccm_block(b.scope("block" + std::to_string(i)), tokens >> i, channels, heads));
  return ccm;
}

CCMStreams ccm_streams(const ContextualColorizationModule& ccm, const Tensor& f_x, const Tensor& e_ctx) {
  if (f_x.shape() != e_ctx.shape())
    throw ShapeError("ccm_forward: target stream " + shape_str(f_x.shape()) + " and context stream " +
                     shape_str(e_ctx.shape()) + " differ");
  if (f_x.rank() != 3 || f_x.dim(1) != ccm.pos.dim(0) || f_x.dim(2) != ccm.pos.dim(1))
    throw ShapeError("ccm_forward: streams " + shape_str(f_x.shape()) + " do not match the module's " +
                     shape_str(ccm.pos.shape()) + " token grid");
  CCMStreams s{f_x + ccm.pos, e_ctx + ccm.pos};
  for (const auto& blk : ccm.blocks) s = ccm_block_forward(blk, s.x, s.ctx);
  return s;
}

Tensor ccm_forward(const ContextualColorizationModule& ccm, const Tensor& f_x, const Tensor& e_ctx) {
  return ccm_streams(ccm, f_x, e_ctx).ctx;
}

}  // namespace ppg
