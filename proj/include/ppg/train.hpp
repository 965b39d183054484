#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ppg/model.hpp"
#include "ppg/params.hpp"
#include "ppg/synth.hpp"

namespace ppg {

inline constexpr double kDiceSmooth = 1.0;

// Sum over objects of 1 - 2(sum p*g + eps) / (sum p + sum g + 2 eps).
// pred, gt: [N, H0, W0] (or any equal shapes with objects on axis 0).
Tensor dice_loss(const Tensor& pred, const Tensor& gt, double eps = kDiceSmooth);

// Set-overlap metrics on binary masks; empty vs empty scores 1.
double dice_score(std::span<const double> pred_binary, std::span<const double> gt);
double iou_score(std::span<const double> pred_binary, std::span<const double> gt);

// Per-object Dice / IoU of probabilities thresholded at 0.5.
struct ObjectScores {
  std::vector<double> dice;
  std::vector<double> iou;
};
ObjectScores score_objects(const Tensor& probs, const Tensor& gt);

struct SgdConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

// Classic momentum SGD with L2 decay folded into the gradient:
//   v <- mu v + g + lambda theta,  theta <- theta - eta v
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Param> params, const SgdConfig& config);

  // Throws NumericError, leaving parameters and momentum untouched, when any
  // gradient or updated value would be non-finite. Missing gradients count
  // as zero.
  void step();
  void zero_grad();

  const std::vector<Param>& params() const { return params_; }
  const std::vector<double>& velocity(std::size_t i) const { return velocity_[i]; }

 private:
  std::vector<Param> params_;
  SgdConfig config_;
  std::vector<std::vector<double>> velocity_;
};

struct TrainConfig {
  SgdConfig sgd;
  std::size_t steps = 500;
  std::size_t shots = 1;  // K
  std::uint64_t seed = 1;
};

struct TrainResult {
  std::vector<double> losses;  // one per completed step
  bool diverged = false;
  std::string message;
};

// Episodic training. Each step samples one of the M episodes as target. With
// M = 1 the episode's own support set is used; otherwise min(K, M-1) other
// training episodes provide the supports. On a non-finite loss or gradient
// the run stops with the parameters of the last good step.
TrainResult train(ProxyPromptModel& model, const std::vector<Episode>& episodes, const TrainConfig& config,
                  const std::function<void(std::size_t step, double loss)>& on_step = {});

std::string loss_curve_csv(const std::vector<double>& losses);

// Maps (target image, support set) to mask probabilities [N, H0, W0].
using Predictor = std::function<Tensor(const Episode& target, const SupportSet& support)>;

Predictor model_predictor(const ProxyPromptModel& model);
// Returns the ground truth; an upper bound used to check the plumbing.
Predictor oracle_predictor();

struct EvalConfig {
  std::size_t shots = 4;
  std::size_t repeats = 5;
  std::uint64_t seed = 1;
};

struct MetricsReport {
  std::vector<double> repeat_dice;  // mean Dice over episodes and objects, per support draw
  std::vector<double> repeat_iou;
  std::vector<double> object_dice;  // per object slot, averaged over draws and episodes
  std::vector<double> object_iou;
  double mean_dice = 0, std_dice = 0;
  double mean_iou = 0, std_iou = 0;

  std::string to_csv() const;
};

// For each of `repeats` draws one support set of K episodes from `pool` is
// shared by every evaluated episode. Std is the population std across draws.
MetricsReport evaluate(const Predictor& predict, const std::vector<Episode>& episodes,
                       const std::vector<Episode>& pool, const EvalConfig& config);

struct SweepRow {
  std::size_t m = 0;
  std::size_t k = 0;
  double mean_dice = 0;
  double std_dice = 0;
};

// Evaluates predictor(M) for every (M, K) pair; rows ordered by M then K.
std::vector<SweepRow> support_sweep(const std::function<Predictor(std::size_t m)>& predictor_for,
                                   const std::vector<Episode>& episodes, const std::vector<Episode>& pool,
                                   const std::vector<std::size_t>& k_values, const std::vector<std::size_t>& m_values,
                                   std::size_t repeats, std::uint64_t seed);

std::string sweep_csv(const std::vector<SweepRow>& rows);

double population_std(const std::vector<double>& v);

}  // namespace ppg
