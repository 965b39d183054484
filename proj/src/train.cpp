#include "ppg/train.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "ppg/errors.hpp"
#include "ppg/ops.hpp"

namespace ppg {

Tensor dice_loss(const Tensor& pred, const Tensor& gt, double eps) {
  if (pred.shape() != gt.shape())
    throw ShapeError("dice_loss: prediction " + shape_str(pred.shape()) + " vs ground truth " +
                     shape_str(gt.shape()));
  require_binary_mask(gt, "dice_loss");
  const std::size_t n = pred.dim(0), m = pred.numel() / n;
  const Tensor p = reshape(pred, {n, m});
  const Tensor g = reshape(gt, {n, m});
  const Tensor inter = add_scalar(sum(p * g, 1), eps);
  const Tensor denom = add_scalar(sum(p, 1) + sum(g, 1), 2.0 * eps);
  return sum(add_scalar(scale(inter / denom, -2.0), 1.0));
}

namespace {

struct Counts {
  double inter = 0, p = 0, g = 0;
};

Counts count(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) throw ShapeError("mask sizes differ");
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] > 0.5, b = gt[i] > 0.5;
    c.inter += a && b;
    c.p += a;
    c.g += b;
  }
  return c;
}

}  // namespace

double dice_score(std::span<const double> pred_binary, std::span<const double> gt) {
  const Counts c = count(pred_binary, gt);
  return c.p + c.g == 0 ? 1.0 : 2.0 * c.inter / (c.p + c.g);
}

double iou_score(std::span<const double> pred_binary, std::span<const double> gt) {
  const Counts c = count(pred_binary, gt);
  const double uni = c.p + c.g - c.inter;
  return uni == 0 ? 1.0 : c.inter / uni;
}

ObjectScores score_objects(const Tensor& probs, const Tensor& gt) {
  if (probs.shape() != gt.shape())
    throw ShapeError("score_objects: " + shape_str(probs.shape()) + " vs " + shape_str(gt.shape()));
  const std::size_t n = probs.dim(0), m = probs.numel() / n;
  ObjectScores s;
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = probs.data().subspan(i * m, m), g = gt.data().subspan(i * m, m);
    s.dice.push_back(dice_score(p, g));
    s.iou.push_back(iou_score(p, g));
  }
  return s;
}

SgdOptimizer::SgdOptimizer(std::vector<Param> params, const SgdConfig& config)
    : params_(std::move(params)), config_(config) {
  if (!(config.learning_rate > 0) || config.momentum < 0 || config.weight_decay < 0)
    throw ConfigError("SGD needs a positive learning rate and non-negative momentum / weight decay");
  for (const auto& p : params_) velocity_.emplace_back(p.tensor.numel(), 0.0);
}

void SgdOptimizer::step() {
  std::vector<std::vector<double>> next_v(params_.size()), next_theta(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor& t = params_[i].tensor;
    const auto theta = t.data();
    const auto g = t.grad();
    auto& v = next_v[i];
    auto& th = next_theta[i];
    v.resize(theta.size());
    th.resize(theta.size());
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      if (!std::isfinite(gj)) throw NumericError("non-finite gradient in '" + params_[i].name + "'");
      v[j] = config_.momentum * velocity_[i][j] + gj + config_.weight_decay * theta[j];
      th[j] = theta[j] - config_.learning_rate * v[j];
      if (!std::isfinite(th[j])) throw NumericError("update would make '" + params_[i].name + "' non-finite");
    }
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    velocity_[i] = std::move(next_v[i]);
    Tensor t = params_[i].tensor;
    std::copy(next_theta[i].begin(), next_theta[i].end(), t.mutable_data().begin());
  }
}

void SgdOptimizer::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

TrainResult train(ProxyPromptModel& model, const std::vector<Episode>& episodes, const TrainConfig& config,
                  const std::function<void(std::size_t, double)>& on_step) {
  if (episodes.empty()) throw UsageError("train: no training episodes");
  if (config.shots == 0) throw UsageError("train: K must be at least 1");
  const std::size_t m = episodes.size();
  if (m == 1 && config.shots > episodes[0].support.shots())
    throw UsageError("train: the single training episode has only " + std::to_string(episodes[0].support.shots()) +
                     " support shots");
  SgdOptimizer opt(model.params().trainable(), config.sgd);
  Rng rng(config.seed);
  TrainResult result;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const std::size_t idx = m == 1 ? 0 : static_cast<std::size_t>(rng.below(m));
    const Episode& ep = episodes[idx];
    const SupportSet support = m == 1 ? own_support(ep, config.shots)
                                      : support_from_pool(episodes, ep.classes, std::min(config.shots, m - 1), rng, idx);
    opt.zero_grad();
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = dice_loss(model.forward(ep.target, support).probs, ep.gt);
    }
    const double value = loss.item();
    if (!std::isfinite(value)) {
      result.diverged = true;
      result.message = "non-finite loss at step " + std::to_string(step);
      break;
    }
    tape.backward(loss);
    try {
      opt.step();
    } catch (const NumericError& e) {
      result.diverged = true;
      result.message = "step " + std::to_string(step) + ": " + e.what();
      break;
    }
    result.losses.push_back(value);
    if (on_step) on_step(step, value);
  }
  opt.zero_grad();
  return result;
}

std::string loss_curve_csv(const std::vector<double>& losses) {
  std::ostringstream os;
  os.precision(10);
  os << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) os << i << ',' << losses[i] << '\n';
  return os.str();
}

Predictor model_predictor(const ProxyPromptModel& model) {
  return [&model](const Episode& ep, const SupportSet& s) {
    NoGradScope no_grad;
    return model.forward(ep.target, s).probs;
  };
}

Predictor oracle_predictor() {
  return [](const Episode& ep, const SupportSet&) { return ep.gt; };
}

double population_std(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double mu = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(v.size()));
}

namespace {
double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}
}  // namespace

MetricsReport evaluate(const Predictor& predict, const std::vector<Episode>& episodes,
                       const std::vector<Episode>& pool, const EvalConfig& config) {
  if (episodes.empty()) throw UsageError("evaluate: no evaluation episodes");
  if (config.repeats == 0) throw UsageError("evaluate: repeats must be at least 1");
  const std::size_t n = episodes[0].objects();
  MetricsReport r;
  r.object_dice.assign(n, 0.0);
  r.object_iou.assign(n, 0.0);
  std::vector<double> object_count(n, 0.0);
  for (std::size_t rep = 0; rep < config.repeats; ++rep) {
    Rng rng(mix_seed(config.seed, rep));
    // One support draw per repeat, shared by all targets. Support masks follow
    // each target's own class order.
    if (config.shots > pool.size())
      throw UsageError("evaluate: K=" + std::to_string(config.shots) + " exceeds the support pool of " +
                       std::to_string(pool.size()));
    const std::uint64_t draw_state = rng.next_u64();
    double dsum = 0, isum = 0, count = 0;
    for (const auto& ep : episodes) {
      Rng draw(draw_state);
      const SupportSet s = support_from_pool(pool, ep.classes, config.shots, draw);
      const ObjectScores sc = score_objects(predict(ep, s), ep.gt);
      for (std::size_t i = 0; i < sc.dice.size(); ++i) {
        dsum += sc.dice[i];
        isum += sc.iou[i];
        count += 1;
        if (i < n) {
          r.object_dice[i] += sc.dice[i];
          r.object_iou[i] += sc.iou[i];
          object_count[i] += 1;
        }
      }
    }
    r.repeat_dice.push_back(dsum / count);
    r.repeat_iou.push_back(isum / count);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (object_count[i] > 0) {
      r.object_dice[i] /= object_count[i];
      r.object_iou[i] /= object_count[i];
    }
  }
  r.mean_dice = mean_of(r.repeat_dice);
  r.std_dice = population_std(r.repeat_dice);
  r.mean_iou = mean_of(r.repeat_iou);
  r.std_iou = population_std(r.repeat_iou);
  return r;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "row,dice,iou\n";
  for (std::size_t i = 0; i < repeat_dice.size(); ++i)
    os << "repeat" << i << ',' << repeat_dice[i] << ',' << repeat_iou[i] << '\n';
  for (std::size_t i = 0; i < object_dice.size(); ++i)
    os << "object" << i << ',' << object_dice[i] << ',' << object_iou[i] << '\n';
  os << "mean," << mean_dice << ',' << mean_iou << '\n';
  os << "std," << std_dice << ',' << std_iou << '\n';
  return os.str();
}

std::vector<SweepRow> support_sweep(const std::function<Predictor(std::size_t m)>& predictor_for,
                                   const std::vector<Episode>& episodes, const std::vector<Episode>& pool,
                                   const std::vector<std::size_t>& k_values, const std::vector<std::size_t>& m_values,
                                   std::size_t repeats, std::uint64_t seed) {
  if (k_values.empty() || m_values.empty()) throw UsageError("support_sweep: empty K or M list");
  for (std::size_t k : k_values)
    if (k == 0 || k > pool.size())
      throw UsageError("support_sweep: K=" + std::to_string(k) + " exceeds the support pool of " +
                       std::to_string(pool.size()));
  std::vector<SweepRow> rows;
  for (std::size_t m : m_values) {
    const Predictor p = predictor_for(m);
    for (std::size_t k : k_values) {
      const MetricsReport r = evaluate(p, episodes, pool, {k, repeats, seed});
      rows.push_back({m, k, r.mean_dice, r.std_dice});
    }
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "M,K,mean_dice,std_dice\n";
  for (const auto& r : rows) os << r.m << ',' << r.k << ',' << r.mean_dice << ',' << r.std_dice << '\n';
  return os.str();
}

}  // namespace ppg
