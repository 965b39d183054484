#include "ppg/model.hpp"

#include <sstream>

#include "ppg/errors.hpp"
#include "ppg/io.hpp"
#include "ppg/ops.hpp"

namespace ppg {

void ModelConfig::validate() const {
  if (patch == 0 || height == 0 || width == 0 || height % patch != 0 || width % patch != 0)
    throw ConfigError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be a positive multiple of the patch size " + std::to_string(patch));
  if (ccm_blocks >= 8 || tokens() % (std::size_t{1} << ccm_blocks) != 0 || prompt_tokens() == 0)
    throw ConfigError("H*W = " + std::to_string(tokens()) + " tokens is not divisible by 2^" +
                      std::to_string(ccm_blocks));
  if (heads == 0 || channels % heads != 0) throw ConfigError("heads must divide the channel width");
  if (channels == 0 || vim_embed == 0 || vim_state == 0 || hires_channels == 0)
    throw ConfigError("model widths must be positive");
}

namespace {

template <class T>
T parse_num(const std::map<std::string, std::string>& m, const std::string& key, T fallback) {
  const auto it = m.find(key);
  if (it == m.end()) return fallback;
  std::istringstream is(it->second);
  T v{};
  is >> v;
  if (!is || !(is >> std::ws).eof()) throw ParseError("bad value for '" + key + "': " + it->second);
  return v;
}

bool parse_bool(const std::map<std::string, std::string>& m, const std::string& key, bool fallback) {
  const auto it = m.find(key);
  if (it == m.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ParseError("bad boolean for '" + key + "': " + it->second);
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::map<std::string, std::string> ModelConfig::to_map() const {
  return {{"height", std::to_string(height)},
          {"width", std::to_string(width)},
          {"channels", std::to_string(channels)},
          {"patch", std::to_string(patch)},
          {"vim_embed", std::to_string(vim_embed)},
          {"vim_state", std::to_string(vim_state)},
          {"vim_depth", std::to_string(vim_depth)},
          {"heads", std::to_string(heads)},
          {"ccm_blocks", std::to_string(ccm_blocks)},
          {"cbam_ratio", std::to_string(cbam_ratio)},
          {"hires_channels", std::to_string(hires_channels)},
          {"backbone_layers", std::to_string(backbone_layers)},
          {"lora_rank", std::to_string(lora_rank)},
          {"lora_alpha", num(lora_alpha)},
          {"backbone_seed", std::to_string(backbone_seed)},
          {"seed", std::to_string(seed)},
          {"use_selection", use_selection ? "true" : "false"},
          {"use_ccm", use_ccm ? "true" : "false"},
          {"train_lora", train_lora ? "true" : "false"}};
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& m) {
  ModelConfig c;
  c.height = parse_num(m, "height", c.height);
  c.width = parse_num(m, "width", c.width);
  c.channels = parse_num(m, "channels", c.channels);
  c.patch = parse_num(m, "patch", c.patch);
  c.vim_embed = parse_num(m, "vim_embed", c.vim_embed);
  c.vim_state = parse_num(m, "vim_state", c.vim_state);
  c.vim_depth = parse_num(m, "vim_depth", c.vim_depth);
  c.heads = parse_num(m, "heads", c.heads);
  c.ccm_blocks = parse_num(m, "ccm_blocks", c.ccm_blocks);
  c.cbam_ratio = parse_num(m, "cbam_ratio", c.cbam_ratio);
  c.hires_channels = parse_num(m, "hires_channels", c.hires_channels);
  c.backbone_layers = parse_num(m, "backbone_layers", c.backbone_layers);
  c.lora_rank = parse_num(m, "lora_rank", c.lora_rank);
  c.lora_alpha = parse_num(m, "lora_alpha", c.lora_alpha);
  c.backbone_seed = parse_num(m, "backbone_seed", c.backbone_seed);
  c.seed = parse_num(m, "seed", c.seed);
  c.use_selection = parse_bool(m, "use_selection", c.use_selection);
  c.use_ccm = parse_bool(m, "use_ccm", c.use_ccm);
  c.train_lora = parse_bool(m, "train_lora", c.train_lora);
  return c;
}

ProxyPromptModel::ProxyPromptModel(const ModelConfig& config)
    : config_(config), store_(std::make_unique<ParamStore>()) {
  config_.validate();
  BackboneConfig bc;
  bc.channels = config_.channels;
  bc.patch = config_.patch;
  bc.hires_channels = config_.hires_channels;
  bc.heads = config_.heads;
  bc.mixing_layers = config_.backbone_layers;
  bc.lora = {config_.lora_rank, config_.lora_alpha};
  bc.seed = config_.backbone_seed;
  backbone_ = make_backbone(*store_, bc, config_.height, config_.width);

  Rng rng(config_.seed);
  const ParamBuilder root(*store_, rng);
  VimConfig vc;
  vc.patch = config_.patch;
  vc.embed = config_.vim_embed;
  vc.state = config_.vim_state;
  vc.depth = config_.vim_depth;
  csm_.vim = make_vim_encoder(root.scope("vim"), vc, config_.height, config_.width);
  csm_.bridge = make_bridge_unit(root.scope("csm.bridge"), config_.channels, config_.vim_embed, config_.cbam_ratio);
  csm_.use_selection = config_.use_selection;
  if (config_.use_ccm)
    ccm_ = make_ccm(root.scope("ccm"), config_.tokens(), config_.channels, config_.heads, config_.ccm_blocks);
  if (!config_.train_lora)
    store_->set_trainable([](const std::string& name) { return name.find(".lora_") != std::string::npos; }, false);
}

Tensor pooled_prompt(const Tensor& e_ctx, std::size_t prompt_tokens) {
  const std::size_t n = e_ctx.dim(0), c = e_ctx.dim(1), t = e_ctx.dim(2);
  if (prompt_tokens == 0 || t % prompt_tokens != 0)
    throw ShapeError("pooled_prompt: " + std::to_string(t) + " tokens cannot pool to " + std::to_string(prompt_tokens));
  const Tensor tokens = swap_axes(e_ctx, 1, 2);  // [N, T, C]
  return mean(reshape(tokens, {n, prompt_tokens, t / prompt_tokens, c}), 2);
}

Prediction ProxyPromptModel::forward(const Tensor& target, const SupportSet& support) const {
  if (target.rank() != 3 || target.dim(0) != 3 || target.dim(1) != config_.height || target.dim(2) != config_.width)
    throw ShapeError("target image " + shape_str(target.shape()) + " does not match the model input [3," +
                     std::to_string(config_.height) + "," + std::to_string(config_.width) + "]");
  support.validate(config_.patch);
  if (support.height() != config_.height || support.width() != config_.width)
    throw ShapeError("support images do not match the model input size");
  const std::size_t k = support.shots(), n = support.objects(), c = config_.channels;

  const Tensor all = concat({reshape(target, {1, 3, config_.height, config_.width}), support.images}, 0);
  const EncodedImages enc = encode_images(backbone_.encoder, all);
  const std::size_t h = config_.grid_h(), w = config_.grid_w();
  Prediction out;
  out.f_x = reshape(slice(enc.features, 0, 0, 1), {c, h, w});
  const Tensor f_sup = slice(enc.features, 0, 1, k + 1);
  const Tensor hires = reshape(slice(enc.hires, 0, 0, 1), {config_.hires_channels, config_.height, config_.width});

  out.csm = csm_forward(csm_, support, out.f_x, f_sup);
  if (config_.use_ccm) {
    const Tensor fx_tokens = swap_axes(reshape(out.f_x, {1, c, h * w}), 1, 2);
    const Tensor fx_dup = broadcast_to(fx_tokens, {n, h * w, c});
    out.prompt = ccm_forward(ccm_, fx_dup, swap_axes(out.csm.e_ctx, 1, 2));
  } else {
    out.prompt = pooled_prompt(out.csm.e_ctx, config_.prompt_tokens());
  }
  out.logits = decode_logits(backbone_.decoder, out.f_x, hires, out.prompt);
  out.probs = sigmoid(out.logits);
  return out;
}

void ProxyPromptModel::save(const std::filesystem::path& dir) const {
  auto meta = config_.to_map();
  save_tensor_dir(dir, store_->named_tensors(), meta);
  write_text_file(dir / "backbone.info", backbone_info(backbone_.config, config_.height, config_.width));
}

ProxyPromptModel ProxyPromptModel::load(const std::filesystem::path& dir) {
  const Manifest m = read_manifest(dir / "manifest.txt");
  ProxyPromptModel model(ModelConfig::from_map(m.meta));
  model.load_weights(dir);
  return model;
}

void ProxyPromptModel::load_weights(const std::filesystem::path& dir) {
  const TensorDir td = load_tensor_dir(dir);
  if (td.tensors.size() != store_->size())
    throw ParseError((dir / "manifest.txt").string() + ": checkpoint has " + std::to_string(td.tensors.size()) +
                     " tensors, model has " + std::to_string(store_->size()));
  for (const auto& p : store_->all()) {
    const Tensor* t = td.find(p.name);
    if (!t) throw ParseError((dir / "manifest.txt").string() + ": missing parameter '" + p.name + "'");
    if (t->shape() != p.tensor.shape())
      throw ParseError((dir / "manifest.txt").string() + ": parameter '" + p.name + "' has shape " +
                       shape_str(t->shape()) + ", model expects " + shape_str(p.tensor.shape()));
    Tensor dst = p.tensor;
    std::copy(t->data().begin(), t->data().end(), dst.mutable_data().begin());
  }
}

}  // namespace ppg
