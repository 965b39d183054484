#include "ppg/csm.hpp"

#include <cmath>

#include "ppg/errors.hpp"
#include "ppg/ops.hpp"

namespace ppg {

BridgeUnit make_bridge_unit(const ParamBuilder& b, std::size_t feature_channels, std::size_t context_channels,
                            std::size_t cbam_ratio) {
  BridgeUnit u;
  u.res1 = make_resblock(b.scope("res1"), feature_channels + context_channels, feature_channels);
  u.cbam = make_cbam(b.scope("cbam"), feature_channels, cbam_ratio);
  u.res2 = make_resblock(b.scope("res2"), feature_channels, feature_channels);
  return u;
}

Tensor bridge_aggregate(const BridgeUnit& bridge, const Tensor& f_sup, const Tensor& v) {
  if (f_sup.rank() != 4 || v.rank() != 5 || v.dim(1) != f_sup.dim(0) || v.dim(3) != f_sup.dim(2) ||
      v.dim(4) != f_sup.dim(3))
    throw ShapeError("bridge_aggregate: F_sup " + shape_str(f_sup.shape()) + " and V " + shape_str(v.shape()) +
                     " disagree");
  const std::size_t n = v.dim(0), k = v.dim(1), cv = v.dim(2), c = f_sup.dim(1), h = v.dim(3), w = v.dim(4);
  if (c + cv != bridge.res1.conv1_w.dim(1))
    throw ShapeError("bridge_aggregate: " + std::to_string(c) + "+" + std::to_string(cv) +
                     " channels do not match the bridge input width " + std::to_string(bridge.res1.conv1_w.dim(1)));
  const Tensor dup = broadcast_to(reshape(f_sup, {1, k, c, h, w}), {n, k, c, h, w});
  Tensor x = reshape(concat({dup, v}, 2), {n * k, c + cv, h, w});
  x = resblock_forward(bridge.res2, cbam_forward(bridge.cbam, resblock_forward(bridge.res1, x)));
  x = transpose(reshape(x, {n, k, c, h, w}), {0, 2, 1, 3, 4});
  return reshape(x, {n, c, k * h * w});
}

Tensor compute_selective_map(const Tensor& f_sup_flat, const Tensor& f_x_flat) {
  if (f_sup_flat.rank() != 2 || f_x_flat.rank() != 2 || f_sup_flat.dim(0) != f_x_flat.dim(0))
    throw ShapeError("compute_selective_map: channel mismatch between " + shape_str(f_sup_flat.shape()) + " and " +
                     shape_str(f_x_flat.shape()));
  const std::size_t c = f_sup_flat.dim(0), p = f_sup_flat.dim(1);
  const Tensor inner = matmul(swap_axes(f_sup_flat, 0, 1), f_x_flat);
  const Tensor norms = reshape(sum(square(f_sup_flat), 0), {p, 1});
  return scale(scale(inner, 2.0) - norms, 1.0 / std::sqrt(static_cast<double>(c)));
}

SelectedContext select_context(const Tensor& a_agg, const Tensor& raw) {
  if (a_agg.rank() != 3 || raw.rank() != 2 || a_agg.dim(2) != raw.dim(0))
    throw ShapeError("select_context: A_agg " + shape_str(a_agg.shape()) + " does not match map " +
                     shape_str(raw.shape()));
  const Tensor normalized = softmax(raw, 0);
  return {normalized, matmul(a_agg, normalized)};
}

CSMOutput csm_forward(const ContextualSelectiveModule& csm, const SupportSet& support, const Tensor& f_x,
                      const Tensor& f_sup) {
  support.validate(csm.vim.config.patch);
  const std::size_t n = support.objects(), k = support.shots();
  if (f_x.rank() != 3 || f_sup.rank() != 4 || f_sup.dim(0) != k || f_sup.dim(1) != f_x.dim(0) ||
      f_sup.dim(2) != f_x.dim(1) || f_sup.dim(3) != f_x.dim(2))
    throw ShapeError("csm_forward: F_x " + shape_str(f_x.shape()) + " and F_sup " + shape_str(f_sup.shape()) +
                     " disagree with K=" + std::to_string(k));
  const std::size_t c = f_x.dim(0), h = f_x.dim(1), w = f_x.dim(2);
  const std::size_t h0 = support.height(), w0 = support.width();

  // Pair (n, k) shares image k.
  std::vector<std::size_t> image_index;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) image_index.push_back(j);
  const Tensor images = index_select(support.images, 0, image_index);
  const Tensor masks = reshape(support.masks, {n * k, h0, w0});
  const Tensor v_flat = vim_encode_batch(csm.vim, images, masks);
  if (v_flat.dim(2) != h || v_flat.dim(3) != w)
    throw ShapeError("csm_forward: context grid " + shape_str(v_flat.shape()) + " does not match feature grid");

  CSMOutput out;
  out.v = reshape(v_flat, {n, k, v_flat.dim(1), h, w});
  out.a_agg = bridge_aggregate(csm.bridge, f_sup, out.v);
  if (csm.use_selection) {
    const Tensor sup_flat = reshape(transpose(f_sup, {1, 0, 2, 3}), {c, k * h * w});
    out.raw = compute_selective_map(sup_flat, reshape(f_x, {c, h * w}));
  } else {
    out.raw = Tensor::zeros({k * h * w, h * w});
  }
  const SelectedContext sel = select_context(out.a_agg, out.raw);
  out.normalized = sel.normalized;
  out.e_ctx = sel.e_ctx;
  return out;
}

}  // namespace ppg
