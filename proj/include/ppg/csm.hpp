#pragma once

#include <cstddef>

#include "ppg/nn.hpp"
#include "ppg/support.hpp"
#include "ppg/vim.hpp"

// Contextual selective module: encode support pairs, aggregate them with the
// support features, then mix them into target positions through a softmax
// over support patches.
namespace ppg {

struct BridgeUnit {
  ResBlock res1;  // (C + C_v) -> C
  CBAMBlock cbam;
  ResBlock res2;  // C -> C
};

BridgeUnit make_bridge_unit(const ParamBuilder& b, std::size_t feature_channels, std::size_t context_channels,
                            std::size_t cbam_ratio = 16);

// F_sup: [K, C, H, W], V: [N, K, C_v, H, W] -> A_agg: [N, C, K*H*W] with the
// token axis ordered (k, h, w).
Tensor bridge_aggregate(const BridgeUnit& bridge, const Tensor& f_sup, const Tensor& v);

// F_sup_flat: [C, P], F_x_flat: [C, Q] -> [P, Q] with
//   raw[p, q] = (2 <f_sup_p, f_x_q> - |f_sup_p|^2) / sqrt(C).
Tensor compute_selective_map(const Tensor& f_sup_flat, const Tensor& f_x_flat);

struct SelectedContext {
  Tensor normalized;  // softmax of raw over the support-patch axis, [P, Q]
  Tensor e_ctx;       // [N, C, Q]
};

SelectedContext select_context(const Tensor& a_agg, const Tensor& raw);

struct ContextualSelectiveModule {
  VimEncoder vim;
  BridgeUnit bridge;
  bool use_selection = true;
};

struct CSMOutput {
  Tensor v;           // [N, K, C_v, H, W]
  Tensor a_agg;       // [N, C, K*H*W]
  Tensor raw;         // [K*H*W, H*W]
  Tensor normalized;  // [K*H*W, H*W]
  Tensor e_ctx;       // [N, C, H*W]
};

// F_x: [C, H, W], F_sup: [K, C, H, W]. With use_selection off the raw map is
// zero, so every target patch receives the plain mean over support patches.
CSMOutput csm_forward(const ContextualSelectiveModule& csm, const SupportSet& support, const Tensor& f_x,
                      const Tensor& f_sup);

}  // namespace ppg
