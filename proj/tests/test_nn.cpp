#include <doctest.h>

#include <cmath>
#include <numeric>

#include "ppg/errors.hpp"
#include "ppg/nn.hpp"
#include "ppg/ops.hpp"
#include "test_util.hpp"

using namespace ppg;
using ppg::test::max_abs_diff;
using ppg::test::random_tensor;

TEST_SUITE_BEGIN("nn");

namespace {

void fill(Tensor t, const std::vector<double>& v) {
  REQUIRE(v.size() == t.numel());
  std::copy(v.begin(), v.end(), t.mutable_data().begin());
}

void fill(Tensor t, double v) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), v); }

// Direct 3x3 (or 1x1) convolution, zero padding, stride 1, one image.
std::vector<double> naive_conv(const std::vector<double>& x, std::size_t cin, std::size_t h, std::size_t w,
                               const Tensor& weight, const Tensor& bias) {
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  const long pad = static_cast<long>(k / 2);
  std::vector<double> y(cout * h * w, 0.0);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        double s = bias.defined() ? bias.data()[o] : 0.0;
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = 0; b < k; ++b) {
              const long ii = static_cast<long>(i + a) - pad, jj = static_cast<long>(j + b) - pad;
              if (ii < 0 || jj < 0 || ii >= static_cast<long>(h) || jj >= static_cast<long>(w)) continue;
              s += weight.at({o, c, a, b}) * x[(c * h + ii) * w + jj];
            }
        y[(o * h + i) * w + j] = s;
      }
  return y;
}

double silu_scalar(double v) { return v / (1.0 + std::exp(-v)); }
double sigmoid_scalar(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

TEST_CASE("lora_forward examples") {
  ParamStore store;
  Rng rng(3);
  const ParamBuilder b(store, rng);

  SUBCASE("fresh adapter equals the frozen base bit for bit") {
    const LinearLayer l = make_linear(b.scope("l"), 6, 5, true, Init::kaiming, LoRAConfig{2, 2.0});
    fill(l.bias, std::vector<double>{0.1, -0.2, 0.3, 0.0, 0.5});
    for (int trial = 0; trial < 5; ++trial) {
      const Tensor x = random_tensor({4, 6}, rng, 3.0);
      CHECK(bitwise_equal(lora_forward(l, *l.lora, x), linear(x, l.weight, l.bias)));
      CHECK(bitwise_equal(linear_forward(l, x), linear(x, l.weight, l.bias)));
    }
  }
  SUBCASE("identity slices truncate to r dims and re-embed") {
    const LinearLayer l = make_linear(b.scope("l"), 4, 3, true, Init::kaiming, LoRAConfig{2, 2.0});
    fill(l.weight, 0.0);
    fill(l.bias, 0.0);
    fill(l.lora->down, {1, 0, 0, 0, 0, 1, 0, 0});
    fill(l.lora->up, {1, 0, 0, 1, 0, 0});
    CHECK(l.lora->scale == 1.0);
    const Tensor y = lora_forward(l, *l.lora, Tensor::from({1, 4}, {7, -2, 5, 9}));
    CHECK(y.shape() == Shape{1, 3});
    CHECK(y.data()[0] == 7.0);
    CHECK(y.data()[1] == -2.0);
    CHECK(y.data()[2] == 0.0);
  }
  SUBCASE("gradients reach the adapter only") {
    const LinearLayer l = make_linear(b.scope("l"), 4, 3, true, Init::kaiming, LoRAConfig{2, 2.0});
    for (double& v : Tensor(l.lora->up).mutable_data()) v = rng.uniform(-1, 1);
    const Tensor x = random_tensor({5, 4}, rng);
    Tape tape;
    Tensor loss;
    {
      TapeScope s(tape);
      loss = sum(square(lora_forward(l, *l.lora, x)));
    }
    tape.backward(loss);
    CHECK_FALSE(l.weight.has_grad());
    CHECK_FALSE(l.bias.has_grad());
    REQUIRE(l.lora->down.has_grad());
    double g = 0;
    for (double v : l.lora->down.grad()) g += std::abs(v);
    CHECK(g > 0.0);
  }
  SUBCASE("rank must be below both widths") {
    CHECK_THROWS_AS(make_lora(b.scope("a"), 4, 3, LoRAConfig{3, 1.0}), ConfigError);
    CHECK_THROWS_AS(make_lora(b.scope("b"), 4, 3, LoRAConfig{0, 1.0}), ConfigError);
    CHECK_NOTHROW(make_lora(b.scope("c"), 4, 3, LoRAConfig{2, 1.0}));
  }
  SUBCASE("a trainable base is rejected") {
    const LinearLayer base = make_linear(b.scope("t"), 4, 4);
    const LoRAAdapter a = make_lora(b.scope("t"), 4, 4, LoRAConfig{2, 2.0});
    CHECK_THROWS_AS(lora_forward(base, a, Tensor::zeros({1, 4})), ContractError);
  }
}

TEST_CASE("cross_attention examples") {
  ParamStore store;
  Rng rng(5);
  const ParamBuilder b(store, rng);

  SUBCASE("a single key passes W_o W_v of that token to every query") {
    const CrossAttentionBlock a = make_cross_attention(b.scope("a"), 4, 2);
    for (const auto& p : store.all())
      for (double& v : Tensor(p.tensor).mutable_data()) v = rng.uniform(-0.5, 0.5);
    const Tensor q = random_tensor({1, 3, 4}, rng), kv = random_tensor({1, 1, 4}, rng);
    const Tensor out = cross_attention(a, q, kv);
    const Tensor expect = linear(linear(kv, a.v.weight, a.v.bias), a.o.weight, a.o.bias);
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t c = 0; c < 4; ++c) CHECK(out.at({0, t, c}) == doctest::Approx(expect.at({0, 0, c})).epsilon(1e-12));
  }
  SUBCASE("identical keys give uniform weights") {
    const CrossAttentionBlock a = make_cross_attention(b.scope("a"), 4, 2);
    const Tensor tok = random_tensor({1, 1, 4}, rng);
    const Tensor kv = broadcast_to(tok, {1, 5, 4});
    const auto r = cross_attention_with_weights(a, random_tensor({1, 3, 4}, rng), kv);
    for (double w : r.weights.data()) CHECK(w == doctest::Approx(0.2).epsilon(1e-12));
  }
  SUBCASE("hand worked single head") {
    const CrossAttentionBlock a = make_cross_attention(b.scope("a"), 1, 1);
    for (const LinearLayer* l : {&a.q, &a.k, &a.v, &a.o}) {
      fill(l->weight, 1.0);
      fill(l->bias, 0.0);
    }
    const Tensor out = cross_attention(a, Tensor::from({1, 1, 1}, {1.0}), Tensor::from({1, 2, 1}, {1.0, 2.0}));
    // scores [1, 2] -> weights [1, e] / (1 + e); values [1, 2]
    const double e = std::exp(1.0);
    CHECK(out.item() == doctest::Approx((1.0 + 2.0 * e) / (1.0 + e)).epsilon(1e-14));
  }
  SUBCASE("heads must divide the width") { CHECK_THROWS_AS(make_cross_attention(b.scope("x"), 6, 4), ConfigError); }
  SUBCASE("mismatched widths are shape errors") {
    const CrossAttentionBlock a = make_cross_attention(b.scope("a"), 4, 2);
    CHECK_THROWS_AS(cross_attention(a, Tensor::zeros({1, 2, 4}), Tensor::zeros({1, 2, 3})), ShapeError);
  }
}

TEST_CASE("attention rows sum to one and respect token permutations") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore store;
    const std::size_t heads = 1 + rng.below(3), c = heads * (1 + rng.below(3));
    const std::size_t n = 1 + rng.below(3), tq = 1 + rng.below(5), tk = 1 + rng.below(5);
    const CrossAttentionBlock a = make_cross_attention(ParamBuilder(store, rng), c, heads);
    for (const auto& p : store.all())
      for (double& v : Tensor(p.tensor).mutable_data()) v = rng.uniform(-1, 1);
    const Tensor q = random_tensor({n, tq, c}, rng, 2.0), kv = random_tensor({n, tk, c}, rng, 2.0);
    const auto r = cross_attention_with_weights(a, q, kv);
    for (std::size_t row = 0; row < r.weights.numel() / tk; ++row) {
      double s = 0;
      for (std::size_t j = 0; j < tk; ++j) s += r.weights.data()[row * tk + j];
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
    std::vector<std::size_t> pq(tq), pk(tk);
    std::iota(pq.begin(), pq.end(), 0);
    std::iota(pk.begin(), pk.end(), 0);
    rng.shuffle(pq);
    rng.shuffle(pk);
    const Tensor permuted_q = cross_attention(a, index_select(q, 1, pq), kv);
    CHECK(max_abs_diff(permuted_q, index_select(r.out, 1, pq)) == 0.0);
    const Tensor permuted_kv = cross_attention(a, q, index_select(kv, 1, pk));
    CHECK(max_abs_diff(permuted_kv, r.out) <= 1e-12);
  }
}

TEST_CASE("cbam examples") {
  ParamStore store;
  Rng rng(7);
  const ParamBuilder b(store, rng);

  SUBCASE("zero input stays zero") {
    const CBAMBlock blk = make_cbam(b.scope("c"), 4, 2, 7);
    const Tensor y = cbam_forward(blk, Tensor::zeros({2, 4, 3, 3}));
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("saturated gates pass the input through") {
    const CBAMBlock blk = make_cbam(b.scope("c"), 4, 2, 7);
    fill(blk.fc2.bias, 1e3);
    fill(blk.spatial_bias, 1e3);
    const Tensor x = random_tensor({1, 4, 3, 5}, rng);
    CHECK(max_abs_diff(cbam_forward(blk, x), x) == 0.0);
  }
  SUBCASE("hand trace of a 1x2x2x2 input") {
    const CBAMBlock blk = make_cbam(b.scope("c"), 2, 2, 3);
    fill(blk.fc1.weight, {0.5, -1.0});
    fill(blk.fc1.bias, {0.1});
    fill(blk.fc2.weight, {2.0, -0.5});
    fill(blk.fc2.bias, {0.0, 0.2});
    std::vector<double> k(18);
    for (std::size_t i = 0; i < k.size(); ++i) k[i] = 0.1 * static_cast<double>(i) - 0.8;
    fill(blk.spatial_weight, k);
    fill(blk.spatial_bias, {0.05});
    const std::vector<double> x = {1.0, -2.0, 0.5, 3.0, -1.0, 0.0, 2.0, 1.5};

    // channel pools over the 4 pixels of each channel
    const double avg[2] = {(1.0 - 2.0 + 0.5 + 3.0) / 4, (-1.0 + 0.0 + 2.0 + 1.5) / 4};
    const double mx[2] = {3.0, 2.0};
    auto hidden = [](const double* z) { return std::max(0.0, 0.5 * z[0] - 1.0 * z[1] + 0.1); };
    const double ha = hidden(avg), hm = hidden(mx);
    const double ca[2] = {sigmoid_scalar(2.0 * ha + 2.0 * hm), sigmoid_scalar(-0.5 * ha + 0.2 - 0.5 * hm + 0.2)};
    std::vector<double> x1(8);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t p = 0; p < 4; ++p) x1[c * 4 + p] = x[c * 4 + p] * ca[c];
    std::vector<double> pooled(8);
    for (std::size_t p = 0; p < 4; ++p) {
      pooled[p] = (x1[p] + x1[4 + p]) / 2;
      pooled[4 + p] = std::max(x1[p], x1[4 + p]);
    }
    const std::vector<double> s = naive_conv(pooled, 2, 2, 2, blk.spatial_weight, blk.spatial_bias);
    const Tensor y = cbam_forward(blk, Tensor({1, 2, 2, 2}, x));
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t p = 0; p < 4; ++p)
        CHECK(y.data()[c * 4 + p] == doctest::Approx(x1[c * 4 + p] * sigmoid_scalar(s[p])).epsilon(1e-13));
  }
  SUBCASE("gates lie in (0, 1)") {
    const CBAMBlock blk = make_cbam(b.scope("c"), 8, 4, 7);
    const Tensor x = random_tensor({2, 8, 4, 4}, rng, 3.0);
    for (double v : test::values(channel_attention(blk, x))) CHECK((v > 0.0 && v < 1.0));
    for (double v : test::values(spatial_attention(blk, x))) CHECK((v > 0.0 && v < 1.0));
  }
  SUBCASE("channels below the ratio are rejected") { CHECK_THROWS_AS(make_cbam(b.scope("c"), 8, 16), ConfigError); }
}

TEST_CASE("resblock examples") {
  ParamStore store;
  Rng rng(9);
  const ParamBuilder b(store, rng);

  SUBCASE("zero conv weights reduce to the identity skip") {
    const ResBlock r = make_resblock(b.scope("r"), 4, 4);
    CHECK_FALSE(r.skip_w.defined());
    fill(r.conv1_w, 0.0);
    fill(r.conv2_w, 0.0);
    const Tensor x = random_tensor({2, 4, 3, 5}, rng);
    CHECK(max_abs_diff(resblock_forward(r, x), x) == 0.0);
  }
  SUBCASE("zero input with zero biases gives zero") {
    const ResBlock r = make_resblock(b.scope("r"), 3, 8);
    const Tensor y = resblock_forward(r, Tensor::zeros({1, 3, 4, 4}));
    CHECK(y.shape() == Shape{1, 8, 4, 4});
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("1x1x3x3 input against a direct convolution") {
    const ResBlock r = make_resblock(b.scope("r"), 1, 1);
    fill(r.conv1_w, {0.1, -0.2, 0.3, 0.0, 1.0, -0.5, 0.25, 0.4, -0.1});
    fill(r.conv1_b, {0.05});
    fill(r.conv2_w, {-0.3, 0.2, 0.1, 0.6, -0.4, 0.0, 0.2, -0.1, 0.5});
    fill(r.conv2_b, {-0.02});
    const std::vector<double> x = {1, 2, -1, 0.5, 0, 3, -2, 1, 0.25};
    std::vector<double> h = naive_conv(x, 1, 3, 3, r.conv1_w, r.conv1_b);
    double mu = 0, var = 0;
    for (double v : h) mu += v / 9;
    for (double v : h) var += (v - mu) * (v - mu) / 9;
    for (double& v : h) v = silu_scalar((v - mu) / std::sqrt(var + 1e-5));
    const std::vector<double> out = naive_conv(h, 1, 3, 3, r.conv2_w, r.conv2_b);
    const Tensor y = resblock_forward(r, Tensor({1, 1, 3, 3}, x));
    for (std::size_t i = 0; i < 9; ++i) CHECK(y.data()[i] == doctest::Approx(out[i] + x[i]).epsilon(1e-12));
  }
  SUBCASE("spatial size is preserved") {
    const ResBlock r = make_resblock(b.scope("r"), 5, 6);
    CHECK(resblock_forward(r, random_tensor({2, 5, 7, 3}, rng)).shape() == Shape{2, 6, 7, 3});
  }
}

TEST_CASE("group count picks the largest divisor up to eight") {
  CHECK(group_count(64) == 8);
  CHECK(group_count(12) == 6);
  CHECK(group_count(7) == 7);
  CHECK(group_count(11) == 1);
}

TEST_CASE("feed-forward is Add&Norm around a SiLU MLP") {
  ParamStore store;
  Rng rng(13);
  const FeedForward ff = make_feed_forward(ParamBuilder(store, rng).scope("f"), 4, 4);
  CHECK(ff.fc1.out() == 16);
  const Tensor x = random_tensor({2, 3, 4}, rng);
  const Tensor y = ffn_forward(ff, x);
  const Tensor inner = linear(silu(linear(x, ff.fc1.weight, ff.fc1.bias)), ff.fc2.weight, ff.fc2.bias);
  CHECK(max_abs_diff(y, layer_norm(x + inner, ff.norm.gamma, ff.norm.beta)) == 0.0);
}

TEST_CASE("patchify lays tokens out in grid order, channel major") {
  std::vector<double> v(2 * 4 * 4);
  std::iota(v.begin(), v.end(), 0.0);
  const Tensor p = patchify(Tensor({1, 2, 4, 4}, v), 2);
  CHECK(p.shape() == Shape{1, 4, 8});
  // token 1 is the top-right 2x2 block of each channel
  const std::vector<double> expect = {2, 3, 6, 7, 18, 19, 22, 23};
  for (std::size_t i = 0; i < 8; ++i) CHECK(p.at({0, 1, i}) == expect[i]);
  CHECK_THROWS_AS(patchify(Tensor::zeros({1, 1, 5, 4}), 2), ShapeError);
}

TEST_SUITE_END();
