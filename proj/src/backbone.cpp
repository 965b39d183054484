#include "ppg/backbone.hpp"

#include <sstream>

#include "ppg/errors.hpp"
#include "ppg/ops.hpp"

namespace ppg {

Backbone make_backbone(ParamStore& store, const BackboneConfig& config, std::size_t height, std::size_t width) {
  if (config.patch == 0 || height % config.patch != 0 || width % config.patch != 0)
    throw ConfigError("backbone input " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by the patch size " + std::to_string(config.patch));
  Rng rng(config.seed);
  const ParamBuilder root = ParamBuilder(store, rng, "backbone").frozen();
  const std::size_t c = config.channels, chr = config.hires_channels;
  const std::size_t gh = height / config.patch, gw = width / config.patch, tokens = gh * gw;
  const auto lora = std::optional<LoRAConfig>(config.lora);

  Backbone bb;
  bb.config = config;
  StubEncoder& enc = bb.encoder;
  const ParamBuilder eb = root.scope("encoder");
  enc.patch = config.patch;
  enc.grid_h = gh;
  enc.grid_w = gw;
  enc.patch_proj = make_linear(eb.scope("patch_proj"), 3 * config.patch * config.patch, c, true, Init::kaiming, lora);
  enc.pos = eb.normal("pos", {tokens, c}, 0.5);
  for (std::size_t i = 0; i < config.mixing_layers; ++i) {
    const ParamBuilder lb = eb.scope("layer" + std::to_string(i));
    MixingLayer layer;
    layer.attn = make_cross_attention(lb.scope("attn"), c, config.heads, lora);
    layer.norm = make_layer_norm(lb.scope("norm"), c);
    layer.ffn = make_feed_forward(lb.scope("ffn"), c, 4, lora);
    enc.layers.push_back(layer);
  }
  enc.stem_w = eb.kaiming_uniform("stem.weight", {chr, 3, 3, 3}, 27);
  enc.stem_b = eb.uniform("stem.bias", {chr}, -0.5, 0.5);

  StubDecoder& dec = bb.decoder;
  const ParamBuilder db = root.scope("decoder");
  dec.height = height;
  dec.width = width;
  dec.pos = db.normal("pos", {tokens, c}, 0.5);
  dec.tok_to_img = make_cross_attention(db.scope("tok_to_img"), c, config.heads, lora);
  dec.norm_tok = make_layer_norm(db.scope("norm_tok"), c);
  dec.img_to_tok = make_cross_attention(db.scope("img_to_tok"), c, config.heads, lora);
  dec.norm_img = make_layer_norm(db.scope("norm_img"), c);
  dec.hyper1 = make_linear(db.scope("hyper1"), c, c, true, Init::kaiming, lora);
  dec.hyper2 = make_linear(db.scope("hyper2"), c, chr, true, Init::kaiming, lora);
  dec.lowres = make_linear(db.scope("lowres"), c, chr, true, Init::kaiming, lora);
  dec.out_bias = db.constant("out_bias", {1}, config.logit_bias);
  dec.logit_scale = config.logit_scale;
  return bb;
}

EncodedImages encode_images(const StubEncoder& enc, const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != 3)
    throw ShapeError("encode_image: expected [B,3,H0,W0] input, got " + shape_str(images.shape()));
  if (images.dim(2) != enc.grid_h * enc.patch || images.dim(3) != enc.grid_w * enc.patch)
    throw ShapeError("encode_image: input " + shape_str(images.shape()) + " does not match the backbone size");
  const std::size_t b = images.dim(0), c = enc.pos.dim(1);
  Tensor x = linear_forward(enc.patch_proj, patchify(images, enc.patch)) + enc.pos;
  for (const auto& layer : enc.layers) {
    x = layer_norm_forward(layer.norm, x + cross_attention(layer.attn, x, x));
    x = ffn_forward(layer.ffn, x);
  }
  EncodedImages out;
  out.features = reshape(swap_axes(x, 1, 2), {b, c, enc.grid_h, enc.grid_w});
  out.hires = conv2d(images, enc.stem_w, enc.stem_b, 1, 1);
  return out;
}

Tensor encode_image(const StubEncoder& enc, const Tensor& img) {
  if (img.rank() != 3) throw ShapeError("encode_image: expected [3,H0,W0], got " + shape_str(img.shape()));
  const Tensor f = encode_images(enc, reshape(img, {1, img.dim(0), img.dim(1), img.dim(2)})).features;
  return reshape(f, {f.dim(1), f.dim(2), f.dim(3)});
}

Tensor decode_logits(const StubDecoder& dec, const Tensor& f_x, const Tensor& hires, const Tensor& prompt) {
  const std::size_t c = dec.pos.dim(1), tokens = dec.pos.dim(0);
  if (prompt.rank() != 3 || prompt.dim(0) == 0) throw UsageError("decode: empty prompt");
  if (prompt.dim(2) != c)
    throw ShapeError("decode: prompt " + shape_str(prompt.shape()) + " needs channel width " + std::to_string(c));
  if (f_x.rank() != 3 || f_x.dim(0) != c || f_x.dim(1) * f_x.dim(2) != tokens)
    throw ShapeError("decode: features " + shape_str(f_x.shape()) + " do not match the decoder");
  const std::size_t chr = dec.lowres.out();
  if (hires.shape() != Shape{chr, dec.height, dec.width})
    throw ShapeError("decode: high-resolution features " + shape_str(hires.shape()) + " do not match the decoder");
  const std::size_t n = prompt.dim(0), gh = f_x.dim(1), gw = f_x.dim(2);

  const Tensor img0 = broadcast_to(reshape(swap_axes(reshape(f_x, {c, tokens}), 0, 1), {1, tokens, c}), {n, tokens, c});
  const Tensor tok = layer_norm_forward(dec.norm_tok, prompt + cross_attention(dec.tok_to_img, prompt, img0 + dec.pos));
  const Tensor img = layer_norm_forward(dec.norm_img, img0 + cross_attention(dec.img_to_tok, img0 + dec.pos, tok));

  // Per-object dynamic 1x1 conv over full-resolution pixel features.
  const Tensor hyper = linear_forward(dec.hyper2, silu(linear_forward(dec.hyper1, mean(tok, 1))));
  Tensor low = reshape(swap_axes(linear_forward(dec.lowres, img), 1, 2), {n, chr, gh, gw});
  low = upsample_bilinear(low, dec.height, dec.width);
  const Tensor pix = swap_axes(reshape(silu(low + hires), {n, chr, dec.height * dec.width}), 1, 2);
  const Tensor ones = Tensor::full({chr}, 1.0), zeros = Tensor::zeros({chr});
  Tensor z = layer_norm(pix, ones, zeros);
  z = z - mean(z, 1, true);
  const Tensor corr = matmul(z, reshape(layer_norm(hyper, ones, zeros), {n, chr, 1}));
  const Tensor logits = scale(corr, dec.logit_scale / static_cast<double>(chr)) + dec.out_bias;
  return reshape(logits, {n, dec.height, dec.width});
}

Tensor decode(const StubDecoder& dec, const Tensor& f_x, const Tensor& hires, const Tensor& prompt) {
  return sigmoid(decode_logits(dec, f_x, hires, prompt));
}

std::string backbone_info(const BackboneConfig& config, std::size_t height, std::size_t width) {
  std::ostringstream os;
  os << "seed = " << config.seed << '\n'
     << "channels = " << config.channels << '\n'
     << "patch = " << config.patch << '\n'
     << "hires_channels = " << config.hires_channels << '\n'
     << "heads = " << config.heads << '\n'
     << "mixing_layers = " << config.mixing_layers << '\n'
     << "logit_scale = " << config.logit_scale << '\n'
     << "logit_bias = " << config.logit_bias << '\n'
     << "lora_rank = " << config.lora.rank << '\n'
     << "lora_alpha = " << config.lora.alpha << '\n'
     << "input = " << height << "x" << width << '\n'
     << "input_constraint = height and width divisible by " << config.patch << '\n';
  return os.str();
}

}  // namespace ppg
