#include "ppg/vim.hpp"

#include <cmath>

#include "ppg/errors.hpp"
#include "ppg/ops.hpp"
#include "ppg/support.hpp"

namespace ppg {

Tensor SSMLayerParams::A() const { return neg(exp(a_log)); }

SSMLayerParams make_ssm_layer(const ParamBuilder& b, std::size_t channels, std::size_t state) {
  if (state == 0) throw ConfigError("SSM state size must be at least 1");
  SSMLayerParams p;
  // A[d, s] = -(s + 1)
  Tensor a_log = Tensor::zeros({channels, state});
  for (std::size_t d = 0; d < channels; ++d)
    for (std::size_t s = 0; s < state; ++s) a_log.mutable_data()[d * state + s] = std::log(static_cast<double>(s + 1));
  p.a_log = b.adopt("a_log", a_log);

  p.delta_proj.weight = b.kaiming_uniform("delta.weight", {channels, channels}, channels);
  // softplus(bias) = dt with log dt ~ U(log 1e-3, log 1e-1)
  Tensor bias = Tensor::zeros({channels});
  for (double& v : bias.mutable_data()) {
    const double dt = std::exp(b.rng().uniform(std::log(1e-3), std::log(1e-1)));
    v = dt + std::log(-std::expm1(-dt));
  }
  p.delta_proj.bias = b.adopt("delta.bias", bias);
  p.b_proj = make_linear(b.scope("B"), channels, state, false);
  p.c_proj = make_linear(b.scope("C"), channels, state, false);
  return p;
}

Discretized discretize(const Tensor& A, const Tensor& B_t, const Tensor& delta_t) {
  if (A.rank() != 2 || B_t.shape() != Shape{A.dim(1)} || delta_t.shape() != Shape{A.dim(0)})
    throw ShapeError("discretize: A " + shape_str(A.shape()) + ", B " + shape_str(B_t.shape()) + ", delta " +
                     shape_str(delta_t.shape()));
  for (const Tensor* t : {&A, &B_t, &delta_t})
    for (double v : t->data())
      if (!std::isfinite(v)) throw NumericError("discretize: non-finite input");
  const std::size_t d = A.dim(0), s = A.dim(1);
  const Tensor dcol = reshape(delta_t, {d, 1});
  return {exp(dcol * A), dcol * reshape(B_t, {1, s})};
}

ScanInputs scan_inputs(const SSMLayerParams& p, const Tensor& x) {
  return {softplus(linear_forward(p.delta_proj, x)), linear_forward(p.b_proj, x), linear_forward(p.c_proj, x)};
}

Tensor selective_scan(const SSMLayerParams& p, const Tensor& x) {
  if (x.rank() == 2) return reshape(selective_scan(p, reshape(x, {1, x.dim(0), x.dim(1)})), x.shape());
  if (x.rank() != 3 || x.dim(2) != p.channels())
    throw ShapeError("selective_scan: input " + shape_str(x.shape()) + " does not match " +
                     std::to_string(p.channels()) + " channels");
  const ScanInputs in = scan_inputs(p, x);
  return selective_scan(x, in.delta, p.A(), in.B, in.C);
}

VimBlock make_vim_block(const ParamBuilder& b, std::size_t channels, std::size_t state) {
  VimBlock blk;
  blk.norm = make_layer_norm(b.scope("norm"), channels);
  blk.in_proj = make_linear(b.scope("in_proj"), channels, 2 * channels);
  blk.fwd = make_ssm_layer(b.scope("fwd"), channels, state);
  blk.bwd = make_ssm_layer(b.scope("bwd"), channels, state);
  blk.out_proj = make_linear(b.scope("out_proj"), channels, channels);
  return blk;
}

Tensor vim_block_forward(const VimBlock& block, const Tensor& x) {
  const std::size_t d = x.dim(2);
  const Tensor xz = linear_forward(block.in_proj, layer_norm_forward(block.norm, x));
  const Tensor u = silu(slice(xz, 2, 0, d));
  const Tensor gate = silu(slice(xz, 2, d, 2 * d));
  const Tensor yf = selective_scan(block.fwd, u);
  const Tensor yb = flip(selective_scan(block.bwd, flip(u, 1)), 1);
  return x + linear_forward(block.out_proj, (yf + yb) * gate);
}

VimEncoder make_vim_encoder(const ParamBuilder& b, const VimConfig& config, std::size_t height, std::size_t width) {
  if (config.patch == 0 || height % config.patch != 0 || width % config.patch != 0)
    throw ConfigError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by the patch size " + std::to_string(config.patch));
  VimEncoder enc;
  enc.config = config;
  enc.grid_h = height / config.patch;
  enc.grid_w = width / config.patch;
  const std::size_t tokens = enc.grid_h * enc.grid_w;
  enc.embed.patch = config.patch;
  enc.embed.proj =
      make_linear(b.scope("embed.proj"), config.in_channels * config.patch * config.patch, config.embed);
  enc.embed.pos = b.normal("embed.pos", {tokens, config.embed}, 0.02);
  for (std::size_t i = 0; i < config.depth; ++i)
    enc.blocks.push_back(make_vim_block(b.scope("block" + std::to_string(i)), config.embed, config.state));
  enc.final_norm = make_layer_norm(b.scope("final_norm"), config.embed);
  return enc;
}

Tensor vim_encode_batch(const VimEncoder& enc, const Tensor& images, const Tensor& masks) {
  if (images.rank() != 4 || masks.rank() != 3 || images.dim(0) != masks.dim(0) || images.dim(2) != masks.dim(1) ||
      images.dim(3) != masks.dim(2))
    throw ShapeError("vim_encode: images " + shape_str(images.shape()) + " and masks " + shape_str(masks.shape()) +
                     " do not pair up");
  if (images.dim(1) + 1 != enc.config.in_channels)
    throw ShapeError("vim_encode: expected " + std::to_string(enc.config.in_channels - 1) + " image channels");
  if (images.dim(2) != enc.grid_h * enc.config.patch || images.dim(3) != enc.grid_w * enc.config.patch)
    throw ShapeError("vim_encode: image size does not match the encoder grid");
  require_binary_mask(masks, "vim_encode");
  const std::size_t bsz = images.dim(0);
  const Tensor pair = concat({images, reshape(masks, {bsz, 1, masks.dim(1), masks.dim(2)})}, 1);
  Tensor x = linear_forward(enc.embed.proj, patchify(pair, enc.config.patch)) + enc.embed.pos;
  for (const auto& blk : enc.blocks) x = vim_block_forward(blk, x);
  x = layer_norm_forward(enc.final_norm, x);
  return reshape(swap_axes(x, 1, 2), {bsz, enc.config.embed, enc.grid_h, enc.grid_w});
}

Tensor vim_encode(const VimEncoder& enc, const Tensor& image, const Tensor& mask) {
  const Tensor v = vim_encode_batch(enc, reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}),
                                    reshape(mask, {1, mask.dim(0), mask.dim(1)}));
  return reshape(v, {v.dim(1), v.dim(2), v.dim(3)});
}

}  // namespace ppg
