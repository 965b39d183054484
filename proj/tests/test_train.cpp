#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "ppg/errors.hpp"
#include "ppg/ops.hpp"
#include "ppg/train.hpp"

using namespace ppg;
using ppg::test::max_abs_diff;

TEST_SUITE_BEGIN("train");

namespace {

Tensor mask_from(std::size_t n, std::size_t len, const std::vector<std::size_t>& on) {
  Tensor t = Tensor::zeros({1, n, len / n});
  for (std::size_t i : on) t.mutable_data()[i] = 1.0;
  return t;
}

EpisodeSpec small_spec(std::uint64_t seed) {
  EpisodeSpec s;
  s.seed = seed;
  s.height = 32;
  s.width = 32;
  s.shots = 2;
  return s;
}

std::vector<std::vector<double>> snapshot(const std::vector<Param>& ps) {
  std::vector<std::vector<double>> out;
  for (const auto& p : ps) out.push_back(test::values(p.tensor));
  return out;
}

}  // namespace

TEST_CASE("dice and iou examples") {
  SUBCASE("disjoint masks of 8 pixels each") {
    std::vector<std::size_t> a, b;
    for (std::size_t i = 0; i < 8; ++i) {
      a.push_back(i);
      b.push_back(8 + i);
    }
    const Tensor p = mask_from(1, 16, a), g = mask_from(1, 16, b);
    CHECK(dice_loss(p, g).item() == doctest::Approx(1.0 - 2.0 / 18.0).epsilon(1e-15));
    CHECK(dice_score(p.data(), g.data()) == 0.0);
    CHECK(iou_score(p.data(), g.data()) == 0.0);
  }
  SUBCASE("|P| = |G| = 4 with overlap 2") {
    const Tensor p = mask_from(1, 16, {0, 1, 2, 3}), g = mask_from(1, 16, {2, 3, 4, 5});
    CHECK(dice_score(p.data(), g.data()) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(iou_score(p.data(), g.data()) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(dice_loss(p, g).item() == doctest::Approx(1.0 - 6.0 / 10.0).epsilon(1e-15));
  }
  SUBCASE("empty against empty is a perfect score") {
    const Tensor z = Tensor::zeros({1, 4, 4});
    CHECK(dice_score(z.data(), z.data()) == 1.0);
    CHECK(iou_score(z.data(), z.data()) == 1.0);
    CHECK(dice_loss(z, z).item() == doctest::Approx(0.0));
  }
  SUBCASE("the loss sums over objects") {
    Rng rng(5);
    const Tensor p = test::random_image({3, 4, 4}, rng), g = test::random_mask({3, 4, 4}, rng);
    double total = 0;
    for (std::size_t i = 0; i < 3; ++i) total += dice_loss(slice(p, 0, i, i + 1), slice(g, 0, i, i + 1)).item();
    CHECK(dice_loss(p, g).item() == doctest::Approx(total).epsilon(1e-14));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(dice_loss(Tensor::zeros({1, 4}), Tensor::zeros({1, 5})), ShapeError);
    CHECK_THROWS_AS(dice_loss(Tensor::zeros({1, 2}), Tensor::full({1, 2}, 0.5)), UsageError);
  }
}

TEST_CASE("metric properties on random masks") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(3), h = 1 + rng.below(6), w = 1 + rng.below(6);
    const Tensor p = test::random_mask({n, h, w}, rng, rng.uniform()), g = test::random_mask({n, h, w}, rng, rng.uniform());
    const ObjectScores s = score_objects(p, g);
    const double loss = dice_loss(p, g).item();
    double expected = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double inter = 0, a = 0, b = 0;
      for (std::size_t j = 0; j < h * w; ++j) {
        inter += p.data()[i * h * w + j] * g.data()[i * h * w + j];
        a += p.data()[i * h * w + j];
        b += g.data()[i * h * w + j];
      }
      CHECK(s.dice[i] == doctest::Approx(test::count_dice(inter, a, b)).epsilon(1e-14));
      CHECK(s.iou[i] == doctest::Approx(test::count_iou(inter, a, b)).epsilon(1e-14));
      CHECK(s.iou[i] <= s.dice[i] + 1e-15);
      expected += test::count_dice_loss(inter, a, b, kDiceSmooth);
    }
    CHECK(loss == doctest::Approx(expected).epsilon(1e-13));
  }
}

TEST_CASE("binary loss and score agree up to the smoothing slack") {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const Tensor p = test::random_mask({1, 64, 64}, rng, 0.05 + 0.5 * rng.uniform());
    const Tensor g = test::random_mask({1, 64, 64}, rng, 0.05 + 0.5 * rng.uniform());
    const double score = dice_score(p.data(), g.data()), iou = iou_score(p.data(), g.data());
    CHECK(std::abs(dice_loss(p, g).item() + score - 1.0) <= 2e-3);
    CHECK(iou < score);
  }
  const Tensor g = test::random_mask({1, 8, 8}, rng);
  Tensor inv = g.clone();
  for (double& v : inv.mutable_data()) v = 1.0 - v;
  CHECK(iou_score(g.data(), g.data()) == dice_score(g.data(), g.data()));
  CHECK(iou_score(inv.data(), g.data()) == dice_score(inv.data(), g.data()));
}

TEST_CASE("population std") {
  CHECK(population_std({1.0, 3.0}) == doctest::Approx(1.0));
  CHECK(population_std({2.0}) == 0.0);
  CHECK(population_std({2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0}) == doctest::Approx(2.0));
}

TEST_CASE("sgd with momentum") {
  SUBCASE("two steps with a constant gradient unroll by hand") {
    Tensor w({3}, {1.0, -2.0, 0.5}, true);
    const std::vector<double> g{0.3, -0.1, 2.0}, w0 = test::values(w);
    SgdOptimizer opt({{"w", w, true}}, {0.1, 0.9, 0.0});
    for (int s = 0; s < 2; ++s) {
      opt.zero_grad();
      auto gr = w.mutable_grad();
      std::copy(g.begin(), g.end(), gr.begin());
      opt.step();
    }
    for (std::size_t i = 0; i < 3; ++i) CHECK(w.data()[i] == doctest::Approx(w0[i] - 0.1 * (g[i] + 1.9 * g[i])).epsilon(1e-15));
  }
  SUBCASE("five steps on a quadratic with decay") {
    Tensor w({1}, {2.0}, true);
    SgdOptimizer opt({{"w", w, true}}, {0.05, 0.8, 0.01});
    double theta = 2.0, v = 0.0;
    for (int s = 0; s < 5; ++s) {
      opt.zero_grad();
      w.mutable_grad()[0] = 2.0 * w.data()[0];
      opt.step();
      v = 0.8 * v + 2.0 * theta + 0.01 * theta;
      theta -= 0.05 * v;
    }
    CHECK(w.data()[0] == doctest::Approx(theta).epsilon(1e-12));
  }
  SUBCASE("a non-finite gradient changes nothing") {
    Tensor a({2}, {1.0, 2.0}, true), b({1}, {3.0}, true);
    SgdOptimizer opt({{"a", a, true}, {"b", b, true}}, {0.1, 0.9, 0.0});
    a.mutable_grad()[0] = 1.0;
    b.mutable_grad()[0] = 1.0;
    opt.step();
    const auto before = snapshot(opt.params());
    const auto va = opt.velocity(0);
    a.mutable_grad()[1] = std::nan("");
    CHECK_THROWS_AS(opt.step(), NumericError);
    CHECK(snapshot(opt.params()) == before);
    CHECK(opt.velocity(0) == va);
  }
  SUBCASE("bad hyperparameters") {
    Tensor w({1}, {0.0}, true);
    CHECK_THROWS_AS(SgdOptimizer({{"w", w, true}}, {0.0, 0.9, 0.0}), ConfigError);
    CHECK_THROWS_AS(SgdOptimizer({{"w", w, true}}, {0.1, -1.0, 0.0}), ConfigError);
  }
}

TEST_CASE("episodic training") {
  const auto episodes = generate_suite(small_spec(11), 3);
  TrainConfig tc;
  tc.steps = 3;
  tc.shots = 2;

  SUBCASE("zero steps leave every parameter untouched") {
    ProxyPromptModel m(test::small_config());
    const auto before = snapshot(m.params().all());
    TrainConfig zero = tc;
    zero.steps = 0;
    const TrainResult r = train(m, episodes, zero);
    CHECK(r.losses.empty());
    CHECK_FALSE(r.diverged);
    CHECK(snapshot(m.params().all()) == before);
  }
  SUBCASE("training moves trainables only and is reproducible") {
    ProxyPromptModel a(test::small_config()), b(test::small_config());
    const auto frozen = snapshot(a.params().frozen());
    const auto trainable = snapshot(a.params().trainable());
    std::vector<double> seen;
    const TrainResult ra = train(a, episodes, tc, [&](std::size_t, double l) { seen.push_back(l); });
    const TrainResult rb = train(b, episodes, tc);
    CHECK(ra.losses.size() == 3);
    CHECK(seen == ra.losses);
    CHECK(ra.losses == rb.losses);
    for (double l : ra.losses) {
      CHECK(std::isfinite(l));
      CHECK(l >= 0.0);
      CHECK(l <= 2.0);  // N = 2 objects, each in [0, 1]
    }
    CHECK(snapshot(a.params().frozen()) == frozen);
    CHECK(snapshot(a.params().trainable()) != trainable);
    CHECK(snapshot(a.params().all()) == snapshot(b.params().all()));
  }
  SUBCASE("a single episode trains on its own support") {
    ProxyPromptModel m(test::small_config());
    const std::vector<Episode> one{episodes[0]};
    CHECK(train(m, one, tc).losses.size() == 3);
  }
  SUBCASE("loss curve csv") {
    CHECK(loss_curve_csv({0.5, 0.25}) == "step,loss\n0,0.5\n1,0.25\n");
  }
}

TEST_CASE("evaluation") {
  const auto episodes = generate_suite(small_spec(21), 3);
  const auto pool = generate_suite(small_spec(22), 5);
  EvalConfig ec;
  ec.shots = 2;
  ec.repeats = 3;

  SUBCASE("the oracle scores 1 with no spread") {
    const MetricsReport r = evaluate(oracle_predictor(), episodes, pool, ec);
    CHECK(r.mean_dice == 1.0);
    CHECK(r.std_dice == 0.0);
    CHECK(r.mean_iou == 1.0);
    CHECK(r.repeat_dice.size() == 3);
    CHECK(r.object_dice.size() == 2);
  }
  ProxyPromptModel m(test::small_config());
  SUBCASE("one repeat has zero std") {
    EvalConfig one = ec;
    one.repeats = 1;
    const MetricsReport r = evaluate(model_predictor(m), episodes, pool, one);
    CHECK(r.std_dice == 0.0);
    CHECK(r.mean_dice >= 0.0);
    CHECK(r.mean_dice <= 1.0);
  }
  SUBCASE("duplicating the episode list leaves the mean unchanged") {
    std::vector<Episode> twice = episodes;
    twice.insert(twice.end(), episodes.begin(), episodes.end());
    const MetricsReport a = evaluate(model_predictor(m), episodes, pool, ec);
    const MetricsReport b = evaluate(model_predictor(m), twice, pool, ec);
    CHECK(b.mean_dice == doctest::Approx(a.mean_dice).epsilon(1e-12));
    CHECK(b.std_dice == doctest::Approx(a.std_dice).epsilon(1e-9));
    CHECK(b.to_csv() == evaluate(model_predictor(m), twice, pool, ec).to_csv());
  }
  SUBCASE("a pool smaller than K is a usage error") {
    EvalConfig big = ec;
    big.shots = 9;
    CHECK_THROWS_AS(evaluate(oracle_predictor(), episodes, pool, big), UsageError);
  }
}

TEST_CASE("support sweep") {
  const auto episodes = generate_suite(small_spec(31), 2);
  const auto pool = generate_suite(small_spec(32), 4);
  const auto run = [&] {
    return support_sweep([](std::size_t) { return oracle_predictor(); }, episodes, pool, {1, 2, 4}, {1, 2}, 2, 5);
  };
  const auto rows = run();
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].m == 1);
  CHECK(rows[0].k == 1);
  CHECK(rows[5].m == 2);
  CHECK(rows[5].k == 4);
  for (const auto& r : rows) CHECK(r.mean_dice == 1.0);
  CHECK(sweep_csv(rows) == sweep_csv(run()));
}

TEST_SUITE_END();
