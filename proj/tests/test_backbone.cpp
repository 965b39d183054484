#include <doctest.h>

#include "fixtures.hpp"
#include "ppg/backbone.hpp"
#include "ppg/errors.hpp"
#include "ppg/ops.hpp"

using namespace ppg;
using ppg::test::max_abs_diff;
using ppg::test::random_tensor;

TEST_SUITE_BEGIN("backbone");

namespace {

struct Stub {
  ParamStore store;
  Backbone bb;
  explicit Stub(std::size_t h = 32, std::size_t w = 32) {
    BackboneConfig c;
    c.channels = 16;
    c.patch = 8;
    c.hires_channels = 4;
    c.heads = 2;
    c.mixing_layers = 1;
    c.lora = {2, 2.0};
    bb = make_backbone(store, c, h, w);
  }
};

}  // namespace

TEST_CASE("encoder and decoder shapes") {
  Stub s;
  Rng rng(1);
  const EncodedImages enc = encode_images(s.bb.encoder, test::random_image({3, 3, 32, 32}, rng));
  CHECK(enc.features.shape() == Shape{3, 16, 4, 4});
  CHECK(enc.hires.shape() == Shape{3, 4, 32, 32});
  const Tensor fx = reshape(slice(enc.features, 0, 0, 1), {16, 4, 4});
  const Tensor hr = reshape(slice(enc.hires, 0, 0, 1), {4, 32, 32});
  CHECK(decode(s.bb.decoder, fx, hr, random_tensor({5, 2, 16}, rng)).shape() == Shape{5, 32, 32});
  CHECK_THROWS_AS(decode(s.bb.decoder, fx, hr, random_tensor({2, 2, 8}, rng)), ShapeError);
  CHECK_THROWS_AS(Stub(30, 32), ConfigError);
}

TEST_CASE("encoding is a pure function of the image") {
  Stub s;
  Rng rng(2);
  const Tensor a = test::random_image({3, 32, 32}, rng), b = test::random_image({3, 32, 32}, rng);
  const Tensor fa = encode_image(s.bb.encoder, a);
  CHECK(max_abs_diff(fa, encode_image(s.bb.encoder, a)) == 0.0);
  // batching does not mix images
  const EncodedImages both = encode_images(s.bb.encoder, concat({reshape(a, {1, 3, 32, 32}), reshape(b, {1, 3, 32, 32})}, 0));
  CHECK(max_abs_diff(reshape(slice(both.features, 0, 0, 1), fa.shape()), fa) <= 1e-12);
  CHECK(max_abs_diff(encode_image(s.bb.encoder, b), fa) > 1e-6);

  Stub twin;
  CHECK(max_abs_diff(encode_image(twin.bb.encoder, a), fa) == 0.0);
}

TEST_CASE("zero-initialized adapters leave the base model unchanged") {
  Stub s;
  Rng rng(3);
  const Tensor img = test::random_image({3, 32, 32}, rng);
  const Tensor before = encode_image(s.bb.encoder, img);
  // every up projection starts at zero, so randomizing the downs is invisible
  std::size_t downs = 0;
  for (const auto& p : s.store.all())
    if (p.name.find(".lora_down") != std::string::npos) {
      for (double& v : Tensor(p.tensor).mutable_data()) v = rng.uniform(-1, 1);
      ++downs;
    }
  REQUIRE(downs > 0);
  CHECK(max_abs_diff(encode_image(s.bb.encoder, img), before) == 0.0);
  for (const auto& p : s.store.all())
    if (p.name.find(".lora_up") != std::string::npos) Tensor(p.tensor).mutable_data()[0] = 0.5;
  CHECK(max_abs_diff(encode_image(s.bb.encoder, img), before) > 1e-6);
}

TEST_CASE("decoder object handling") {
  Stub s;
  Rng rng(4);
  const EncodedImages enc = encode_images(s.bb.encoder, test::random_image({1, 3, 32, 32}, rng));
  const Tensor fx = reshape(enc.features, {16, 4, 4});
  const Tensor hr = reshape(enc.hires, {4, 32, 32});

  SUBCASE("equal prompts give equal masks") {
    const Tensor out = decode(s.bb.decoder, fx, hr, Tensor::zeros({3, 2, 16}));
    CHECK(max_abs_diff(slice(out, 0, 0, 1), slice(out, 0, 1, 2)) == 0.0);
    CHECK(max_abs_diff(slice(out, 0, 0, 1), slice(out, 0, 2, 3)) == 0.0);
  }
  SUBCASE("permuting prompts permutes masks") {
    const Tensor p = random_tensor({3, 2, 16}, rng);
    const Tensor out = decode(s.bb.decoder, fx, hr, p);
    const Tensor perm = decode(s.bb.decoder, fx, hr, index_select(p, 0, {2, 0, 1}));
    CHECK(max_abs_diff(perm, index_select(out, 0, {2, 0, 1})) <= 1e-12);
  }
  SUBCASE("probabilities stay strictly inside (0, 1) and logits are bounded") {
    const Tensor p = random_tensor({2, 2, 16}, rng, 50.0);
    const Tensor logits = decode_logits(s.bb.decoder, fx, hr, p);
    const double bias = s.bb.decoder.out_bias.data()[0];
    const double bound = 2.0 * s.bb.decoder.logit_scale + std::abs(bias) + 1e-9;
    for (double v : test::values(logits)) CHECK(std::abs(v) <= bound);
    // centred pixel embeddings: every mask's mean logit is the bias
    for (std::size_t i = 0; i < 2; ++i)
      CHECK(mean(slice(logits, 0, i, i + 1)).item() == doctest::Approx(bias).epsilon(1e-12));
    CHECK(bias == -3.0);
    for (double v : test::values(decode(s.bb.decoder, fx, hr, p))) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
}

TEST_CASE("freeze partition") {
  Stub s;
  std::size_t base = 0, adapters = 0;
  for (const auto& p : s.store.all()) {
    CHECK(p.name.rfind("backbone.", 0) == 0);
    const bool lora = p.name.find(".lora_") != std::string::npos;
    CHECK(p.trainable == lora);
    CHECK(p.tensor.requires_grad() == lora);
    (lora ? adapters : base) += p.tensor.numel();
  }
  CHECK(adapters > 0);
  CHECK(adapters < base);
  CHECK(s.store.numel(true) == adapters);
}

TEST_SUITE_END();
