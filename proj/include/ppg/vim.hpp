#pragma once

#include <cstddef>
#include <vector>

#include "ppg/nn.hpp"

// Simplified bidirectional Vision Mamba used as the contextual encoder of
// support image/mask pairs.
namespace ppg {

struct VimConfig {
  std::size_t patch = 16;
  std::size_t in_channels = 4;  // RGB + mask
  std::size_t embed = 192;
  std::size_t state = 8;
  std::size_t depth = 2;
};

// One direction of the selective SSM. Delta, B and C are produced per token
// from the input; A = -exp(a_log) is diagonal per channel.
struct SSMLayerParams {
  Tensor a_log;            // [D, S]
  LinearLayer delta_proj;  // D -> D, softplus applied
  LinearLayer b_proj;      // D -> S
  LinearLayer c_proj;      // D -> S

  Tensor A() const;
  std::size_t channels() const { return a_log.dim(0); }
  std::size_t state() const { return a_log.dim(1); }
};

SSMLayerParams make_ssm_layer(const ParamBuilder& b, std::size_t channels, std::size_t state);

struct Discretized {
  Tensor a_bar;  // exp(delta * A), [D, S]
  Tensor b_bar;  // delta * B,      [D, S]
};

// A: [D, S], B_t: [S], delta_t: [D].
Discretized discretize(const Tensor& A, const Tensor& B_t, const Tensor& delta_t);

struct ScanInputs {
  Tensor delta;  // [Bt, T, D]
  Tensor B;      // [Bt, T, S]
  Tensor C;      // [Bt, T, S]
};

ScanInputs scan_inputs(const SSMLayerParams& p, const Tensor& x);

// x: [T, D] or [Bt, T, D]; output has the same shape.
Tensor selective_scan(const SSMLayerParams& p, const Tensor& x);

struct VimBlock {
  LayerNorm norm;
  LinearLayer in_proj;   // D -> 2D (branch, gate)
  SSMLayerParams fwd;
  SSMLayerParams bwd;
  LinearLayer out_proj;  // D -> D
};

VimBlock make_vim_block(const ParamBuilder& b, std::size_t channels, std::size_t state);
// x: [B, T, D] -> x + out_proj((scan_f(u) + rev(scan_b(rev(u)))) * silu(gate)).
Tensor vim_block_forward(const VimBlock& block, const Tensor& x);

struct PatchEmbedding {
  std::size_t patch = 16;
  LinearLayer proj;  // in_channels*P*P -> D
  Tensor pos;        // [T, D]
};

struct VimEncoder {
  VimConfig config;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  PatchEmbedding embed;
  std::vector<VimBlock> blocks;
  LayerNorm final_norm;
};

VimEncoder make_vim_encoder(const ParamBuilder& b, const VimConfig& config, std::size_t height, std::size_t width);

// images: [B, 3, H0, W0], masks: [B, H0, W0] -> [B, D, H0/P, W0/P].
Tensor vim_encode_batch(const VimEncoder& enc, const Tensor& images, const Tensor& masks);
// image: [3, H0, W0], mask: [H0, W0] -> [D, H, W].
Tensor vim_encode(const VimEncoder& enc, const Tensor& image, const Tensor& mask);

}  // namespace ppg
