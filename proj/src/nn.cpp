#include "ppg/nn.hpp"

#include <algorithm>
#include <cmath>

#include "ppg/errors.hpp"
#include "ppg/ops.hpp"

namespace ppg {

LoRAAdapter make_lora(const ParamBuilder& b, std::size_t in, std::size_t out, const LoRAConfig& config) {
  if (config.rank == 0 || config.rank >= std::min(in, out))
    throw ConfigError("LoRA rank " + std::to_string(config.rank) + " must be in [1, min(" + std::to_string(in) +
                      ", " + std::to_string(out) + "))");
  ParamBuilder t = b.trainable();
  LoRAAdapter a;
  a.rank = config.rank;
  a.scale = config.alpha / static_cast<double>(config.rank);
  a.down = t.kaiming_uniform("lora_down", {config.rank, in}, in);
  a.up = t.zeros("lora_up", {out, config.rank});
  return a;
}

LinearLayer make_linear(const ParamBuilder& b, std::size_t in, std::size_t out, bool bias, Init init,
                        std::optional<LoRAConfig> lora) {
  ParamBuilder base = lora ? b.frozen() : b;
  LinearLayer l;
  if (init == Init::attention)
    l.weight = base.normal("weight", {out, in}, 0.02);
  else
    l.weight = base.kaiming_uniform("weight", {out, in}, in);
  if (bias) l.bias = base.zeros("bias", {out});
  if (lora) l.lora = make_lora(b, in, out, *lora);
  return l;
}

namespace {

Tensor lora_delta(const LoRAAdapter& a, const Tensor& x) {
  return scale(linear(linear(x, a.down, Tensor()), a.up, Tensor()), a.scale);
}

}  // namespace

Tensor linear_forward(const LinearLayer& layer, const Tensor& x) {
  Tensor y = linear(x, layer.weight, layer.bias);
  if (layer.lora) y = y + lora_delta(*layer.lora, x);
  return y;
}

Tensor lora_forward(const LinearLayer& layer, const LoRAAdapter& adapter, const Tensor& x) {
  if (adapter.rank == 0 || adapter.rank >= std::min(layer.in(), layer.out()))
    throw ConfigError("LoRA rank out of range for layer");
  if (adapter.down.shape() != Shape{adapter.rank, layer.in()} || adapter.up.shape() != Shape{layer.out(), adapter.rank})
    throw ShapeError("LoRA adapter shape does not match layer");
  if (layer.trainable() || (layer.bias.defined() && layer.bias.requires_grad()))
    throw ContractError("lora_forward: base layer must be frozen");
  return linear(x, layer.weight, layer.bias) + lora_delta(adapter, x);
}

LayerNorm make_layer_norm(const ParamBuilder& b, std::size_t channels) {
  return {b.ones("gamma", {channels}), b.zeros("beta", {channels})};
}

Tensor layer_norm_forward(const LayerNorm& ln, const Tensor& x) { return layer_norm(x, ln.gamma, ln.beta, ln.eps); }

FeedForward make_feed_forward(const ParamBuilder& b, std::size_t channels, std::size_t expansion,
                              std::optional<LoRAConfig> lora) {
  FeedForward ff;
  ff.fc1 = make_linear(b.scope("fc1"), channels, expansion * channels, true, Init::kaiming, lora);
  ff.fc2 = make_linear(b.scope("fc2"), expansion * channels, channels, true, Init::kaiming, lora);
  ff.norm = make_layer_norm(lora ? b.scope("norm").frozen() : b.scope("norm"), channels);
  return ff;
}

Tensor ffn_inner(const FeedForward& ff, const Tensor& x) {
  return linear_forward(ff.fc2, silu(linear_forward(ff.fc1, x)));
}

Tensor ffn_forward(const FeedForward& ff, const Tensor& x) { return layer_norm_forward(ff.norm, x + ffn_inner(ff, x)); }

CrossAttentionBlock make_cross_attention(const ParamBuilder& b, std::size_t channels, std::size_t heads,
                                         std::optional<LoRAConfig> lora) {
  if (heads == 0 || channels % heads != 0)
    throw ConfigError("attention heads (" + std::to_string(heads) + ") must divide channels (" +
                      std::to_string(channels) + ")");
  CrossAttentionBlock blk;
  blk.heads = heads;
  blk.q = make_linear(b.scope("q"), channels, channels, true, Init::attention, lora);
  blk.k = make_linear(b.scope("k"), channels, channels, true, Init::attention, lora);
  blk.v = make_linear(b.scope("v"), channels, channels, true, Init::attention, lora);
  blk.o = make_linear(b.scope("o"), channels, channels, true, Init::attention, lora);
  return blk;
}

namespace {

// [N, T, C] -> [N*h, T, C/h]
Tensor split_heads(const Tensor& x, std::size_t h) {
  const std::size_t n = x.dim(0), t = x.dim(1), c = x.dim(2);
  return reshape(transpose(reshape(x, {n, t, h, c / h}), {0, 2, 1, 3}), {n * h, t, c / h});
}

Tensor merge_heads(const Tensor& x, std::size_t n, std::size_t h) {
  const std::size_t t = x.dim(1), d = x.dim(2);
  return reshape(transpose(reshape(x, {n, h, t, d}), {0, 2, 1, 3}), {n, t, h * d});
}

}  // namespace

AttentionResult cross_attention_with_weights(const CrossAttentionBlock& block, const Tensor& queries,
                                             const Tensor& context) {
  if (queries.rank() != 3 || context.rank() != 3)
    throw ShapeError("cross_attention: expected [N,T,C] inputs, got " + shape_str(queries.shape()) + " and " +
                     shape_str(context.shape()));
  const std::size_t c = block.channels();
  if (queries.dim(2) != c || context.dim(2) != c || queries.dim(0) != context.dim(0))
    throw ShapeError("cross_attention: inputs " + shape_str(queries.shape()) + " and " + shape_str(context.shape()) +
                     " do not match block width " + std::to_string(c));
  const std::size_t n = queries.dim(0), h = block.heads;
  const Tensor q = split_heads(linear_forward(block.q, queries), h);
  const Tensor k = split_heads(linear_forward(block.k, context), h);
  const Tensor v = split_heads(linear_forward(block.v, context), h);
  const double inv = 1.0 / std::sqrt(static_cast<double>(c / h));
  const Tensor w = softmax(scale(matmul(q, swap_axes(k, 1, 2)), inv), 2);
  const Tensor out = linear_forward(block.o, merge_heads(matmul(w, v), n, h));
  return {out, w};
}

Tensor cross_attention(const CrossAttentionBlock& block, const Tensor& queries, const Tensor& context) {
  return cross_attention_with_weights(block, queries, context).out;
}

CBAMBlock make_cbam(const ParamBuilder& b, std::size_t channels, std::size_t ratio, std::size_t kernel) {
  if (ratio == 0 || channels < ratio)
    throw ConfigError("CBAM needs channels (" + std::to_string(channels) + ") >= reduction ratio (" +
                      std::to_string(ratio) + ")");
  if (kernel % 2 == 0) throw ConfigError("CBAM spatial kernel must be odd");
  const std::size_t hidden = std::max<std::size_t>(1, channels / ratio);
  CBAMBlock blk;
  blk.fc1 = make_linear(b.scope("fc1"), channels, hidden);
  blk.fc2 = make_linear(b.scope("fc2"), hidden, channels);
  blk.spatial_weight = b.kaiming_uniform("spatial.weight", {1, 2, kernel, kernel}, 2 * kernel * kernel);
  blk.spatial_bias = b.zeros("spatial.bias", {1});
  return blk;
}

Tensor channel_attention(const CBAMBlock& block, const Tensor& x) {
  const std::size_t bsz = x.dim(0), c = x.dim(1);
  const Tensor flat = reshape(x, {bsz, c, x.dim(2) * x.dim(3)});
  auto mlp = [&](const Tensor& z) { return linear_forward(block.fc2, relu(linear_forward(block.fc1, z))); };
  return sigmoid(mlp(mean(flat, 2)) + mlp(max(flat, 2)));
}

Tensor spatial_attention(const CBAMBlock& block, const Tensor& x) {
  const std::size_t pad = block.spatial_weight.dim(2) / 2;
  const Tensor pooled = concat({mean(x, 1, true), max(x, 1, true)}, 1);
  return sigmoid(conv2d(pooled, block.spatial_weight, block.spatial_bias, 1, pad));
}

Tensor cbam_forward(const CBAMBlock& block, const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("cbam_forward: expected [B,C,H,W], got " + shape_str(x.shape()));
  if (x.dim(1) != block.fc1.in())
    throw ShapeError("cbam_forward: input has " + std::to_string(x.dim(1)) + " channels, block expects " +
                     std::to_string(block.fc1.in()));
  const Tensor ca = channel_attention(block, x);
  const Tensor x1 = x * reshape(ca, {x.dim(0), x.dim(1), 1, 1});
  return x1 * spatial_attention(block, x1);
}

std::size_t group_count(std::size_t channels) {
  for (std::size_t g = std::min<std::size_t>(8, channels); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

ResBlock make_resblock(const ParamBuilder& b, std::size_t in_channels, std::size_t out_channels) {
  ResBlock r;
  r.conv1_w = b.kaiming_uniform("conv1.weight", {out_channels, in_channels, 3, 3}, in_channels * 9);
  r.conv1_b = b.zeros("conv1.bias", {out_channels});
  r.groups = group_count(out_channels);
  r.norm_gamma = b.ones("norm.gamma", {out_channels});
  r.norm_beta = b.zeros("norm.beta", {out_channels});
  r.conv2_w = b.kaiming_uniform("conv2.weight", {out_channels, out_channels, 3, 3}, out_channels * 9);
  r.conv2_b = b.zeros("conv2.bias", {out_channels});
  if (in_channels != out_channels) {
    r.skip_w = b.kaiming_uniform("skip.weight", {out_channels, in_channels, 1, 1}, in_channels);
    r.skip_b = b.zeros("skip.bias", {out_channels});
  }
  return r;
}

Tensor resblock_forward(const ResBlock& block, const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != block.conv1_w.dim(1))
    throw ShapeError("resblock_forward: input " + shape_str(x.shape()) + " does not match " +
                     std::to_string(block.conv1_w.dim(1)) + " input channels");
  Tensor h = conv2d(x, block.conv1_w, block.conv1_b, 1, 1);
  h = silu(group_norm(h, block.groups, block.norm_gamma, block.norm_beta));
  h = conv2d(h, block.conv2_w, block.conv2_b, 1, 1);
  const Tensor skip = block.skip_w.defined() ? conv2d(x, block.skip_w, block.skip_b, 1, 0) : x;
  return h + skip;
}

Tensor patchify(const Tensor& x, std::size_t patch) {
  if (x.rank() != 4) throw ShapeError("patchify: expected [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (patch == 0 || h % patch != 0 || w % patch != 0)
    throw ShapeError("patchify: " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by patch " +
                     std::to_string(patch));
  const std::size_t gh = h / patch, gw = w / patch, t = gh * gw, pp = patch * patch;
  Tensor y = transpose(reshape(x, {b * c, gh, patch, gw, patch}), {0, 1, 3, 2, 4});
  y = transpose(reshape(y, {b, c, t, pp}), {0, 2, 1, 3});
  return reshape(y, {b, t, c * pp});
}

}  // namespace ppg
