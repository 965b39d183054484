#include <doctest.h>

#include <array>
#include <cmath>
#include <fstream>

#include "ppg/errors.hpp"
#include "ppg/io.hpp"
#include "ppg/ops.hpp"
#include "ppg/synth.hpp"
#include "test_util.hpp"

using namespace ppg;
using ppg::test::max_abs_diff;

TEST_SUITE_BEGIN("synth");

namespace {

EpisodeSpec spec(std::uint64_t seed, std::vector<ObjectClass> classes = {ObjectClass::blob, ObjectClass::ring}) {
  EpisodeSpec s;
  s.seed = seed;
  s.classes = std::move(classes);
  s.shots = 2;
  return s;
}

bool binary(const Tensor& t) {
  for (double v : t.data())
    if (v != 0.0 && v != 1.0) return false;
  return true;
}

double fraction(const Tensor& gt, std::size_t obj) {
  const std::size_t m = gt.numel() / gt.dim(0);
  double on = 0;
  for (std::size_t i = 0; i < m; ++i) on += gt.data()[obj * m + i];
  return on / static_cast<double>(m);
}

// Mean RGB of the target under object `obj`'s mask.
std::array<double, 3> mean_colour(const Episode& ep, std::size_t obj) {
  const std::size_t hw = ep.target.dim(1) * ep.target.dim(2);
  std::array<double, 3> c{};
  double n = 0;
  for (std::size_t i = 0; i < hw; ++i)
    if (ep.gt.data()[obj * hw + i] > 0.5) {
      for (int k = 0; k < 3; ++k) c[k] += ep.target.data()[k * hw + i];
      ++n;
    }
  for (double& v : c) v /= n;
  return c;
}

}  // namespace

TEST_CASE("episodes are deterministic in the seed") {
  const Episode a = generate_episode(spec(5)), b = generate_episode(spec(5)), c = generate_episode(spec(6));
  CHECK(bitwise_equal(a.target, b.target));
  CHECK(bitwise_equal(a.gt, b.gt));
  CHECK(bitwise_equal(a.support.images, b.support.images));
  CHECK(bitwise_equal(a.support.masks, b.support.masks));
  CHECK_FALSE(bitwise_equal(a.target, c.target));
}

TEST_CASE("shapes, ranges and binarity") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Episode ep = generate_episode(spec(seed, {ObjectClass::branch, ObjectClass::blob, ObjectClass::ring}));
    CHECK(ep.target.shape() == Shape{3, 64, 64});
    CHECK(ep.gt.shape() == Shape{3, 64, 64});
    CHECK(ep.support.images.shape() == Shape{2, 3, 64, 64});
    CHECK(ep.support.masks.shape() == Shape{3, 2, 64, 64});
    CHECK(binary(ep.gt));
    CHECK(binary(ep.support.masks));
    for (double v : ep.target.data()) CHECK((v >= 0.0 && v <= 1.0));
    for (std::size_t n = 0; n < 3; ++n) CHECK(fraction(ep.gt, n) > 0.0);
    // objects never overlap
    for (std::size_t i = 0; i < 64 * 64; ++i)
      CHECK(ep.gt.data()[i] + ep.gt.data()[4096 + i] + ep.gt.data()[8192 + i] <= 1.0);
  }
}

TEST_CASE("without noise or deformation every shot reproduces the target") {
  EpisodeSpec s = spec(9);
  s.noise = 0.0;
  s.deformation = 0.0;
  const Episode ep = generate_episode(s);
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(max_abs_diff(reshape(slice(ep.support.images, 0, k, k + 1), {3, 64, 64}), ep.target) == 0.0);
    for (std::size_t n = 0; n < 2; ++n)
      CHECK(max_abs_diff(reshape(slice(slice(ep.support.masks, 0, n, n + 1), 1, k, k + 1), {64, 64}),
                         reshape(slice(ep.gt, 0, n, n + 1), {64, 64})) == 0.0);
  }
}

TEST_CASE("branches are thin") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Episode ep = generate_episode(spec(1000 + seed, {ObjectClass::branch}));
    CHECK(fraction(ep.gt, 0) < 0.10);
  }
}

TEST_CASE("classes are separable by colour") {
  // centroids from the first 100 seeds, accuracy on the next 200
  const std::vector<ObjectClass> all{ObjectClass::blob, ObjectClass::ring, ObjectClass::branch};
  std::array<std::array<double, 3>, 3> centroid{};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Episode ep = generate_episode(spec(seed, all));
    for (std::size_t n = 0; n < 3; ++n) {
      const auto c = mean_colour(ep, n);
      for (int k = 0; k < 3; ++k) centroid[n][k] += c[k] / 100.0;
    }
  }
  int correct = 0, total = 0;
  for (std::uint64_t seed = 100; seed < 300; ++seed) {
    const Episode ep = generate_episode(spec(seed, all));
    for (std::size_t n = 0; n < 3; ++n) {
      const auto c = mean_colour(ep, n);
      std::size_t best = 0;
      double best_d = 1e9;
      for (std::size_t m = 0; m < 3; ++m) {
        double d = 0;
        for (int k = 0; k < 3; ++k) d += (c[k] - centroid[m][k]) * (c[k] - centroid[m][k]);
        if (d < best_d) {
          best_d = d;
          best = m;
        }
      }
      correct += best == n;
      ++total;
    }
  }
  CHECK(static_cast<double>(correct) / total >= 0.95);
}

TEST_CASE("blob and branch separate by mean mask intensity") {
  const auto intensity = [](const Episode& ep, std::size_t obj) {
    const auto c = mean_colour(ep, obj);
    return (c[0] + c[1] + c[2]) / 3.0;
  };
  double blob = 0, branch = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Episode ep = generate_episode(spec(500 + seed, {ObjectClass::blob, ObjectClass::branch}));
    blob += intensity(ep, 0) / 50.0;
    branch += intensity(ep, 1) / 50.0;
  }
  int correct = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const Episode ep = generate_episode(spec(600 + seed, {ObjectClass::blob, ObjectClass::branch}));
    for (std::size_t n = 0; n < 2; ++n) {
      const double v = intensity(ep, n);
      const std::size_t guess = std::abs(v - blob) <= std::abs(v - branch) ? 0 : 1;
      correct += guess == n;
    }
  }
  CHECK(correct >= 0.95 * 400);
}

TEST_CASE("empty object option") {
  EpisodeSpec s = spec(3);
  s.empty_object = true;
  const Episode ep = generate_episode(s);
  CHECK(fraction(ep.gt, 0) == 0.0);
  CHECK(fraction(ep.gt, 1) > 0.0);
  double sup = 0;
  for (double v : test::values(slice(ep.support.masks, 0, 0, 1))) sup += v;
  CHECK(sup > 0.0);
}

TEST_CASE("episode settings are validated") {
  EpisodeSpec s = spec(1);
  s.classes = {ObjectClass::blob, ObjectClass::blob};
  CHECK_THROWS_AS(generate_episode(s), ConfigError);
  s = spec(1);
  s.shots = 0;
  CHECK_THROWS_AS(generate_episode(s), ConfigError);
  s = spec(1);
  s.deformation = 1.5;
  CHECK_THROWS_AS(generate_episode(s), ConfigError);
  CHECK_THROWS_AS(parse_class("triangle"), ParseError);
  for (auto c : {ObjectClass::blob, ObjectClass::ring, ObjectClass::branch}) CHECK(parse_class(class_name(c)) == c);
}

TEST_CASE("suites and pooled supports") {
  const auto plain = generate_suite(spec(40), 6);
  const auto shuffled = generate_suite(spec(40), 6, true);
  bool any_swapped = false;
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(plain[i].classes.size() == 2);
    any_swapped = any_swapped || shuffled[i].classes != plain[i].classes;
  }
  CHECK(any_swapped);

  Rng rng(1);
  const SupportSet sup = support_from_pool(shuffled, {ObjectClass::ring, ObjectClass::blob}, 3, rng, 0);
  CHECK(sup.images.shape() == Shape{3, 3, 64, 64});
  CHECK(sup.masks.shape() == Shape{2, 3, 64, 64});
  // each shot is some pool episode (never the excluded one) with class-matched masks
  for (std::size_t k = 0; k < 3; ++k) {
    const Tensor img = reshape(slice(sup.images, 0, k, k + 1), {3, 64, 64});
    std::size_t src = 99;
    for (std::size_t i = 0; i < 6; ++i)
      if (bitwise_equal(img, shuffled[i].target)) src = i;
    REQUIRE(src < 6);
    CHECK(src != 0);
    for (std::size_t n = 0; n < 2; ++n) {
      const ObjectClass want = n == 0 ? ObjectClass::ring : ObjectClass::blob;
      std::size_t slot = 0;
      while (shuffled[src].classes[slot] != want) ++slot;
      CHECK(max_abs_diff(reshape(slice(slice(sup.masks, 0, n, n + 1), 1, k, k + 1), {64, 64}),
                         reshape(slice(shuffled[src].gt, 0, slot, slot + 1), {64, 64})) == 0.0);
    }
  }
  CHECK_THROWS_AS(support_from_pool(shuffled, {ObjectClass::blob}, 6, rng, 0), UsageError);
  CHECK_THROWS_AS(support_from_pool(shuffled, {ObjectClass::branch}, 1, rng), UsageError);
  CHECK(own_support(plain[0], 1).shots() == 1);
  CHECK_THROWS_AS(own_support(plain[0], 3), UsageError);
}

TEST_CASE("episode files round trip") {
  test::TempDir tmp("synth");
  const auto suite = generate_suite(spec(70), 2, true);
  std::ofstream index(tmp.path() / "index.txt");
  for (std::size_t i = 0; i < suite.size(); ++i) {
    save_episode(tmp.path() / ("ep" + std::to_string(i)), suite[i]);
    index << "ep" << i << "\n";
  }
  index.close();
  const auto loaded = load_suite(tmp.path());
  REQUIRE(loaded.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(loaded[i].classes == suite[i].classes);
    CHECK(bitwise_equal(loaded[i].target, suite[i].target));
    CHECK(bitwise_equal(loaded[i].gt, suite[i].gt));
    CHECK(bitwise_equal(loaded[i].support.images, suite[i].support.images));
    CHECK(bitwise_equal(loaded[i].support.masks, suite[i].support.masks));
  }

  SUBCASE("a truncated payload names the file") {
    const auto target = tmp.path() / "ep0" / "target.ppgt";
    REQUIRE(std::filesystem::exists(target));
    const auto size = std::filesystem::file_size(target);
    CHECK(size == ppgt_header_size(3) + 8 * 3 * 64 * 64);
    std::filesystem::resize_file(target, size - 8);
    try {
      load_episode(tmp.path() / "ep0");
      FAIL("expected a ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("target.ppgt") != std::string::npos);
    }
  }
}

TEST_SUITE_END();
