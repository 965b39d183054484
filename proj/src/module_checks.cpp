#include "ppg/module_checks.hpp"

#include <functional>

#include "ppg/backbone.hpp"
#include "ppg/ccm.hpp"
#include "ppg/csm.hpp"
#include "ppg/errors.hpp"
#include "ppg/nn.hpp"
#include "ppg/ops.hpp"
#include "ppg/params.hpp"
#include "ppg/rng.hpp"
#include "ppg/train.hpp"
#include "ppg/vim.hpp"

namespace ppg {

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v));
}

Tensor flat(const Tensor& t) { return reshape(t, {t.numel()}); }

Tensor binary_mask(const Shape& shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform() < 0.4 ? 1.0 : 0.0;
  return Tensor(shape, std::move(v));
}

// Scalar probe: contracts every output coordinate with a fixed random weight.
class Probe {
 public:
  explicit Probe(std::uint64_t seed) : rng_(seed) {}
  Tensor operator()(const Tensor& y) {
    if (!weights_.defined() || weights_.shape() != y.shape()) weights_ = random_tensor(y.shape(), rng_);
    return sum(y * weights_);
  }

 private:
  Rng rng_;
  Tensor weights_;
};

std::vector<NamedTensor> params_of(const ParamStore& store, bool only_trainable) {
  std::vector<NamedTensor> out;
  for (const auto& p : store.all())
    if (!only_trainable || p.trainable) out.push_back({p.name, p.tensor});
  return out;
}

void randomize(ParamStore& store, const std::string& fragment, Rng& rng, double scale) {
  for (const auto& p : store.all()) {
    if (p.name.find(fragment) == std::string::npos) continue;
    Tensor t = p.tensor;
    for (auto& x : t.mutable_data()) x = rng.uniform(-scale, scale);
  }
}

using CheckFn = std::function<GradCheckReport(const GradCheckOptions&)>;

struct NamedCheck {
  std::string name;
  CheckFn run;
};

GradCheckReport check_op(const std::function<Tensor(const std::vector<Tensor>&)>& f, const std::vector<Tensor>& in,
                         const GradCheckOptions& o) {
  auto probe = std::make_shared<Probe>(o.seed + 17);
  std::vector<NamedTensor> wrt;
  for (std::size_t i = 0; i < in.size(); ++i) wrt.push_back({"in" + std::to_string(i), in[i]});
  return finite_difference_check([&, probe] { return (*probe)(f(in)); }, wrt, o);
}

std::vector<NamedCheck> autodiff_checks() {
  std::vector<NamedCheck> c;
  c.push_back({"elementwise", [](const GradCheckOptions& o) {
                 Rng r(o.seed);
                 const Tensor a = random_tensor({3, 4}, r), b = random_tensor({4}, r), p = random_tensor({3, 4}, r, 0.5, 2);
                 return check_op(
                     [](const std::vector<Tensor>& x) {
                       const Tensor t = (x[0] * x[1] - x[1]) / x[2] + x[0];
                       return concat({exp(t), sigmoid(t), silu(t), softplus(t), log(x[2]), relu(t), square(t)}, 0);
                     },
                     {a, b, p}, o);
               }});
  c.push_back({"matmul", [](const GradCheckOptions& o) {
                 Rng r(o.seed + 1);
                 return check_op([](const std::vector<Tensor>& x) { return matmul(matmul(x[0], x[1]), x[2]); },
                                 {random_tensor({2, 3, 4}, r), random_tensor({2, 4, 5}, r), random_tensor({5, 2}, r)}, o);
               }});
  c.push_back({"reductions-softmax", [](const GradCheckOptions& o) {
                 Rng r(o.seed + 2);
                 return check_op(
                     [](const std::vector<Tensor>& x) {
                       const Tensor s = softmax(x[0], 1);
                       return concat({sum(s, 0), mean(x[0], 0), max(x[0], 0)}, 0) + mean(x[0]) + sum(square(x[0]));
                     },
                     {random_tensor({3, 5}, r)}, o);
               }});
  c.push_back({"layout", [](const GradCheckOptions& o) {
                 Rng r(o.seed + 3);
                 return check_op(
                     [](const std::vector<Tensor>& x) {
                       const Tensor t = transpose(x[0], {2, 0, 1});
                       const Tensor s = slice(flip(t, 1), 2, 1, 3);
                       const Tensor g = index_select(s, 0, {3, 0, 0});
                       return concat({flat(g), flat(broadcast_to(x[1], {2, 3}))}, 0);
                     },
                     {random_tensor({2, 3, 4}, r), random_tensor({3}, r)}, o);
               }});
  c.push_back({"conv-pool-upsample", [](const GradCheckOptions& o) {
                 Rng r(o.seed + 4);
                 return check_op(
                     [](const std::vector<Tensor>& x) {
                       const Tensor y = conv2d(x[0], x[1], x[2], 1, 1);
                       const Tensor s = conv2d(x[0], x[1], x[2], 2, 0);
                       return concat({flat(upsample_bilinear(y, 7, 9)), flat(max_pool2d(y, 2, 2, 2, 2)),
                                      flat(avg_pool2d(y, 3, 2, 1, 2)), flat(s)},
                                     0);
                     },
                     {random_tensor({1, 2, 5, 4}, r), random_tensor({3, 2, 3, 3}, r), random_tensor({3}, r)}, o);
               }});
  c.push_back({"normalization", [](const GradCheckOptions& o) {
                 Rng r(o.seed + 5);
                 return check_op(
                     [](const std::vector<Tensor>& x) {
                       return concat({flat(layer_norm(x[0], x[1], x[2])),
                                      flat(group_norm(reshape(x[0], {1, 4, 3, 2}), 2, x[3], x[4]))},
                                     0);
                     },
                     {random_tensor({4, 6}, r), random_tensor({6}, r), random_tensor({6}, r), random_tensor({4}, r),
                      random_tensor({4}, r)},
                     o);
               }});
  c.push_back({"selective-scan-op", [](const GradCheckOptions& o) {
                 Rng r(o.seed + 6);
                 return check_op(
                     [](const std::vector<Tensor>& x) { return selective_scan(x[0], x[1], x[2], x[3], x[4]); },
                     {random_tensor({2, 5, 3}, r), random_tensor({2, 5, 3}, r, 0.05, 0.8), random_tensor({3, 2}, r, -2, -0.2),
                      random_tensor({2, 5, 2}, r), random_tensor({2, 5, 2}, r)},
                     o);
               }});
  return c;
}

std::vector<NamedCheck> nn_checks() {
  std::vector<NamedCheck> c;
  c.push_back({"linear-lora", [](const GradCheckOptions& o) {
                 ParamStore store;
                 Rng r(o.seed + 10);
                 const LinearLayer l = make_linear(ParamBuilder(store, r).frozen().scope("lin"), 5, 4, true,
                                                   Init::kaiming, LoRAConfig{2, 3.0});
                 randomize(store, "lora_up", r, 0.5);
                 const Tensor x = random_tensor({3, 5}, r);
                 auto wrt = params_of(store, true);
                 wrt.push_back({"x", x});
                 Probe p(o.seed);
                 return finite_difference_check([&] { return p(linear_forward(l, x)); }, wrt, o);
               }});
  c.push_back({"feed-forward", [](const GradCheckOptions& o) {
                 ParamStore store;
                 Rng r(o.seed + 11);
                 const FeedForward ff = make_feed_forward(ParamBuilder(store, r).scope("ffn"), 4, 2);
                 const Tensor x = random_tensor({2, 3, 4}, r);
                 auto wrt = params_of(store, true);
                 wrt.push_back({"x", x});
                 Probe p(o.seed);
                 return finite_difference_check([&] { return p(ffn_forward(ff, x)); }, wrt, o);
               }});
  c.push_back({"cross-attention", [](const GradCheckOptions& o) {
                 ParamStore store;
                 Rng r(o.seed + 12);
                 const CrossAttentionBlock a = make_cross_attention(ParamBuilder(store, r).scope("attn"), 4, 2);
                 randomize(store, "attn.", r, 0.6);
                 const Tensor q = random_tensor({2, 3, 4}, r), kv = random_tensor({2, 5, 4}, r);
                 auto wrt = params_of(store, true);
                 wrt.push_back({"queries", q});
                 wrt.push_back({"context", kv});
                 Probe p(o.seed);
                 return finite_difference_check([&] { return p(cross_attention(a, q, kv)); }, wrt, o);
               }});
  c.push_back({"cbam", [](const GradCheckOptions& o) {
                 ParamStore store;
                 Rng r(o.seed + 13);
                 const CBAMBlock b = make_cbam(ParamBuilder(store, r).scope("cbam"), 4, 2, 3);
                 randomize(store, "bias", r, 0.3);
                 const Tensor x = random_tensor({2, 4, 3, 4}, r);
                 auto wrt = params_of(store, true);
                 wrt.push_back({"x", x});
                 Probe p(o.seed);
                 return finite_difference_check([&] { return p(cbam_forward(b, x)); }, wrt, o);
               }});
  c.push_back({"resblock", [](const GradCheckOptions& o) {
                 ParamStore store;
                 Rng r(o.seed + 14);
                 const ResBlock b = make_resblock(ParamBuilder(store, r).scope("res"), 3, 4);
                 randomize(store, "_b", r, 0.3);
                 const Tensor x = random_tensor({1, 3, 4, 4}, r);
                 auto wrt = params_of(store, true);
                 wrt.push_back({"x", x});
                 Probe p(o.seed);
                 return finite_difference_check([&] { return p(resblock_forward(b, x)); }, wrt, o);
               }});
  return c;
}

std::vector<NamedCheck> vim_checks() {
  std::vector<NamedCheck> c;
  c.push_back({"selective-scan", [](const GradCheckOptions& o) {
                 ParamStore store;
                 Rng r(o.seed + 20);
                 const SSMLayerParams s = make_ssm_layer(ParamBuilder(store, r).scope("ssm"), 4, 3);
                 const Tensor x = random_tensor({6, 4}, r);
                 auto wrt = params_of(store, true);
                 wrt.push_back({"x", x});
                 Probe p(o.seed);
                 return finite_difference_check([&] { return p(selective_scan(s, x)); }, wrt, o);
               }});
  c.push_back({"vim-block", [](const GradCheckOptions& o) {
                 ParamStore store;
                 Rng r(o.seed + 21);
                 const VimBlock b = make_vim_block(ParamBuilder(store, r).scope("block"), 4, 2);
                 const Tensor x = random_tensor({2, 5, 4}, r);
                 auto wrt = params_of(store, true);
                 wrt.push_back({"x", x});
                 Probe p(o.seed);
                 return finite_difference_check([&] { return p(vim_block_forward(b, x)); }, wrt, o);
               }});
  c.push_back({"vim-encode", [](const GradCheckOptions& o) {
                 ParamStore store;
                 Rng r(o.seed + 22);
                 VimConfig vc;
                 vc.patch = 4;
                 vc.embed = 6;
                 vc.state = 2;
                 vc.depth = 2;
                 const VimEncoder enc = make_vim_encoder(ParamBuilder(store, r).scope("vim"), vc, 8, 8);
                 const Tensor img = random_tensor({2, 3, 8, 8}, r, 0, 1), mask = binary_mask({2, 8, 8}, r);
                 auto wrt = params_of(store, true);
                 wrt.push_back({"image", img});
                 Probe p(o.seed);
                 return finite_difference_check([&] { return p(vim_encode_batch(enc, img, mask)); }, wrt, o);
               }});
  return c;
}

// A tiny end-to-end configuration on 8x8 images with 4x4 patches.
struct TinyPipeline {
  ParamStore store;
  Rng rng{0};
  Backbone backbone;
  ContextualSelectiveModule csm;
  ContextualColorizationModule ccm;
  SupportSet support;
  Tensor target;
  Tensor gt;

  explicit TinyPipeline(std::uint64_t seed, std::size_t n = 2, std::size_t k = 2) : rng(seed) {
    BackboneConfig bc;
    bc.channels = 8;
    bc.patch = 4;
    bc.hires_channels = 4;
    bc.heads = 2;
    bc.mixing_layers = 1;
    bc.lora = {2, 2.0};
    bc.seed = seed + 1;
    backbone = make_backbone(store, bc, 8, 8);
    const ParamBuilder root(store, rng);
    VimConfig vc;
    vc.patch = 4;
    vc.embed = 6;
    vc.state = 2;
    vc.depth = 1;
    csm.vim = make_vim_encoder(root.scope("vim"), vc, 8, 8);
    csm.bridge = make_bridge_unit(root.scope("csm.bridge"), 8, 6, 4);
    ccm = make_ccm(root.scope("ccm"), 4, 8, 2, 2);
    randomize(store, "lora_up", rng, 0.3);
    support.images = random_tensor({k, 3, 8, 8}, rng, 0, 1);
    support.masks = binary_mask({n, k, 8, 8}, rng);
    target = random_tensor({3, 8, 8}, rng, 0, 1);
    gt = binary_mask({n, 8, 8}, rng);
  }

  Tensor prompt(const EncodedImages& feats) const {
    const std::size_t k = support.shots(), n = support.objects();
    const Tensor f_x = reshape(slice(feats.features, 0, 0, 1), {8, 2, 2});
    const Tensor f_sup = slice(feats.features, 0, 1, k + 1);
    const CSMOutput out = csm_forward(csm, support, f_x, f_sup);
    const Tensor fx_tokens = broadcast_to(reshape(swap_axes(reshape(f_x, {8, 4}), 0, 1), {1, 4, 8}), {n, 4, 8});
    return ccm_forward(ccm, fx_tokens, swap_axes(out.e_ctx, 1, 2));
  }

  EncodedImages encode() const {
    return encode_images(backbone.encoder, concat({reshape(target, {1, 3, 8, 8}), support.images}, 0));
  }
};

std::vector<NamedCheck> csm_checks() {
  std::vector<NamedCheck> c;
  c.push_back({"bridge-unit", [](const GradCheckOptions& o) {
                 ParamStore store;
                 Rng r(o.seed + 30);
                 const BridgeUnit b = make_bridge_unit(ParamBuilder(store, r).scope("bridge"), 8, 4, 4);
                 const Tensor f_sup = random_tensor({2, 8, 2, 3}, r), v = random_tensor({2, 2, 4, 2, 3}, r);
                 auto wrt = params_of(store, true);
                 wrt.push_back({"f_sup", f_sup});
                 wrt.push_back({"v", v});
                 Probe p(o.seed);
                 return finite_difference_check([&] { return p(bridge_aggregate(b, f_sup, v)); }, wrt, o);
               }});
  c.push_back({"selective-map", [](const GradCheckOptions& o) {
                 Rng r(o.seed + 31);
                 return check_op(
                     [](const std::vector<Tensor>& x) {
                       return select_context(x[2], compute_selective_map(x[0], x[1])).e_ctx;
                     },
                     {random_tensor({3, 6}, r), random_tensor({3, 4}, r), random_tensor({2, 3, 6}, r)}, o);
               }});
  c.push_back({"csm-ccm-8x8", [](const GradCheckOptions& o) {
                 auto t = std::make_shared<TinyPipeline>(o.seed + 32);
                 const EncodedImages feats = [&] {
                   NoGradScope ng;
                   return t->encode();
                 }();
                 std::vector<NamedTensor> wrt;
                 for (const auto& p : t->store.trainable())
                   if (p.name.rfind("backbone.", 0) != 0) wrt.push_back({p.name, p.tensor});
                 wrt.push_back({"support.images", t->support.images});
                 Probe p(o.seed);
                 return finite_difference_check([&] { return p(t->prompt(feats)); }, wrt, o);
               }});
  return c;
}

std::vector<NamedCheck> ccm_checks() {
  std::vector<NamedCheck> c;
  c.push_back({"ccm-block", [](const GradCheckOptions& o) {
                 ParamStore store;
                 Rng r(o.seed + 40);
                 const CCMBlock b = make_ccm_block(ParamBuilder(store, r).scope("block"), 4, 4, 2);
                 randomize(store, "attn", r, 0.5);
                 const Tensor x = random_tensor({2, 4, 4}, r), e = random_tensor({2, 4, 4}, r);
                 auto wrt = params_of(store, true);
                 wrt.push_back({"f_x", x});
                 wrt.push_back({"e_ctx", e});
                 Probe p(o.seed), q(o.seed + 1);
                 return finite_difference_check(
                     [&] {
                       const CCMStreams s = ccm_block_forward(b, x, e);
                       return p(s.x) + q(s.ctx);
                     },
                     wrt, o);
               }});
  c.push_back({"ccm-forward", [](const GradCheckOptions& o) {
                 ParamStore store;
                 Rng r(o.seed + 41);
                 const ContextualColorizationModule m = make_ccm(ParamBuilder(store, r).scope("ccm"), 16, 8, 2, 4);
                 randomize(store, "attn", r, 0.4);
                 const Tensor x = random_tensor({1, 16, 8}, r), e = random_tensor({1, 16, 8}, r);
                 auto wrt = params_of(store, true);
                 wrt.push_back({"f_x", x});
                 wrt.push_back({"e_ctx", e});
                 Probe p(o.seed);
                 return finite_difference_check([&] { return p(ccm_forward(m, x, e)); }, wrt, o);
               }});
  return c;
}

std::vector<NamedCheck> backbone_checks() {
  std::vector<NamedCheck> c;
  c.push_back({"encoder", [](const GradCheckOptions& o) {
                 auto t = std::make_shared<TinyPipeline>(o.seed + 50);
                 std::vector<NamedTensor> wrt;
                 for (const auto& p : t->store.trainable())
                   if (p.name.rfind("backbone.encoder.", 0) == 0) wrt.push_back({p.name, p.tensor});
                 wrt.push_back({"target", t->target});
                 Probe p(o.seed), q(o.seed + 1);
                 return finite_difference_check(
                     [&] {
                       const EncodedImages e = encode_images(t->backbone.encoder, reshape(t->target, {1, 3, 8, 8}));
                       return p(e.features) + q(e.hires);
                     },
                     wrt, o);
               }});
  c.push_back({"decoder-dice", [](const GradCheckOptions& o) {
                 auto t = std::make_shared<TinyPipeline>(o.seed + 51);
                 const EncodedImages e = [&] {
                   NoGradScope ng;
                   return encode_images(t->backbone.encoder, reshape(t->target, {1, 3, 8, 8}));
                 }();
                 const Tensor f_x = reshape(e.features, {8, 2, 2});
                 const Tensor hires = reshape(e.hires, {4, 8, 8});
                 const Tensor prompt = random_tensor({2, 1, 8}, t->rng);
                 std::vector<NamedTensor> wrt;
                 for (const auto& p : t->store.trainable())
                   if (p.name.rfind("backbone.decoder.", 0) == 0) wrt.push_back({p.name, p.tensor});
                 wrt.push_back({"prompt", prompt});
                 return finite_difference_check(
                     [&] { return dice_loss(decode(t->backbone.decoder, f_x, hires, prompt), t->gt); }, wrt, o);
               }});
  return c;
}

Tensor corrupted_square(const Tensor& t) {
  std::vector<double> out(t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.data()[i] * t.data()[i];
  auto pt = t.impl_ptr();
  return detail::make_result(
      t.shape(), std::move(out), "corrupted_square", {pt},
      [pt](std::span<const double> g) {
        // d(x^2)/dx is 2x; the missing factor is the corruption.
        std::vector<double> gx(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * pt->data[i];
        detail::accumulate_grad(*pt, gx);
      },
      detail::should_record({&t}));
}

std::vector<NamedCheck> fixture_checks() {
  return {{"corrupted-square", [](const GradCheckOptions& o) {
             Rng r(o.seed + 60);
             return check_op([](const std::vector<Tensor>& x) { return corrupted_square(x[0]); },
                             {random_tensor({3, 3}, r)}, o);
           }}};
}

}  // namespace

const std::vector<std::string>& checkable_modules() {
  static const std::vector<std::string> names{"tensor-autodiff", "nn-blocks", "ssm-vim", "csm", "ccm", "sam-stub"};
  return names;
}

std::vector<ModuleCheck> run_module_checks(const std::string& module, const GradCheckOptions& options) {
  std::vector<NamedCheck> checks;
  if (module == "tensor-autodiff")
    checks = autodiff_checks();
  else if (module == "nn-blocks")
    checks = nn_checks();
  else if (module == "ssm-vim")
    checks = vim_checks();
  else if (module == "csm")
    checks = csm_checks();
  else if (module == "ccm")
    checks = ccm_checks();
  else if (module == "sam-stub")
    checks = backbone_checks();
  else if (module == kCorruptedFixture)
    checks = fixture_checks();
  else
    throw UsageError("unknown module '" + module + "'");
  std::vector<ModuleCheck> out;
  for (const auto& c : checks) out.push_back({module, c.name, c.run(options)});
  return out;
}

}  // namespace ppg
