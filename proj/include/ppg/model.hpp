#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>

#include "ppg/backbone.hpp"
#include "ppg/ccm.hpp"
#include "ppg/csm.hpp"
#include "ppg/params.hpp"
#include "ppg/support.hpp"

namespace ppg {

struct ModelConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t channels = 64;  // backbone feature width C
  std::size_t patch = 16;
  std::size_t vim_embed = 192;
  std::size_t vim_state = 8;
  std::size_t vim_depth = 2;
  std::size_t heads = 4;
  std::size_t ccm_blocks = 4;
  std::size_t cbam_ratio = 16;
  std::size_t hires_channels = 16;
  std::size_t backbone_layers = 2;
  std::size_t lora_rank = 4;
  double lora_alpha = 4.0;
  std::uint64_t backbone_seed = 7;
  std::uint64_t seed = 1;  // initialization of the trainable modules
  bool use_selection = true;  // selective map; off = uniform mixing
  bool use_ccm = true;        // off = prompt by average-pooling E_ctx tokens
  bool train_lora = true;

  std::size_t grid_h() const { return height / patch; }
  std::size_t grid_w() const { return width / patch; }
  std::size_t tokens() const { return grid_h() * grid_w(); }
  std::size_t prompt_tokens() const { return tokens() >> ccm_blocks; }

  // Throws ConfigError on inconsistent sizes.
  void validate() const;

  std::map<std::string, std::string> to_map() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& m);
};

struct Prediction {
  Tensor probs;   // [N, H0, W0]
  Tensor logits;  // [N, H0, W0]
  Tensor prompt;  // [N, Tp, C]
  Tensor f_x;     // [C, H, W]
  CSMOutput csm;
};

// The full pipeline: frozen backbone features for target and supports, the
// selective module, the colorization module, and the backbone decoder.
class ProxyPromptModel {
 public:
  explicit ProxyPromptModel(const ModelConfig& config);

  ProxyPromptModel(const ProxyPromptModel&) = delete;
  ProxyPromptModel& operator=(const ProxyPromptModel&) = delete;
  ProxyPromptModel(ProxyPromptModel&&) = default;
  ProxyPromptModel& operator=(ProxyPromptModel&&) = default;

  // target: [3, H0, W0].
  Prediction forward(const Tensor& target, const SupportSet& support) const;

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return *store_; }
  const ParamStore& params() const { return *store_; }
  const Backbone& backbone() const { return backbone_; }
  const ContextualSelectiveModule& csm() const { return csm_; }
  const ContextualColorizationModule& ccm() const { return ccm_; }

  // Checkpoint directory: manifest.txt + one PPGT per parameter + backbone.info.
  void save(const std::filesystem::path& dir) const;
  static ProxyPromptModel load(const std::filesystem::path& dir);
  // Overwrites parameter values from a checkpoint of identical layout.
  void load_weights(const std::filesystem::path& dir);

 private:
  ModelConfig config_;
  std::unique_ptr<ParamStore> store_;
  Backbone backbone_;
  ContextualSelectiveModule csm_;
  ContextualColorizationModule ccm_;
};

// Prompt used when the colorization module is disabled: E_ctx tokens
// average-pooled in consecutive groups down to the prompt length.
Tensor pooled_prompt(const Tensor& e_ctx, std::size_t prompt_tokens);

}  // namespace ppg
