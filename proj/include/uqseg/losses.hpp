#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>

#include "uqseg/rng.hpp"
#include "uqseg/tensor.hpp"

namespace uqseg {

/// Dual-head network output: per-class mean logits and log-variances.
struct HeteroscedasticOutput {
  Tensor mean_logits;
  Tensor log_variance;

  /// Throws unless both heads share a shape and the log-variances are finite.
  void validate() const;
};

/// Loss value plus its gradient w.r.t. the tensor it was evaluated on.
struct LossGrad {
  double loss = 0.0;
  Tensor grad;
};

struct NllResult {
  double loss = 0.0;
  Tensor grad_mean;
  Tensor grad_log_variance;
};

/// Monte Carlo heteroscedastic classification NLL. Draws t logit samples
/// y_t = mean + sigma * eps_t per pixel, averages the true-class softmax
/// likelihood over samples in log space and returns the mean negative value.
NllResult heteroscedastic_nll(const HeteroscedasticOutput& out, const LabelMap& labels, std::size_t t_samples,
                              Rng& rng, bool with_grad = true);

/// Same loss with caller-supplied standard-normal draws, laid out as
/// noise[t * mean_logits.size() + i]. Reusing one draw set across calls gives
/// common random numbers for finite-difference checks.
NllResult heteroscedastic_nll(const HeteroscedasticOutput& out, const LabelMap& labels,
                              std::span<const double> noise, std::size_t t_samples, bool with_grad = true);

/// Plain mean cross-entropy of logits (the sigma -> 0 limit of the above).
double cross_entropy(const Tensor& logits, const LabelMap& labels);

/// Lovasz extension of the Jaccard loss over softmax probabilities, averaged
/// over the classes present in each image and then over images.
LossGrad lovasz_jaccard_loss(const Tensor& probs, const LabelMap& labels);

double sigmoid_rampup(std::size_t epoch, std::size_t ramp_length);

enum class LossStrategy { baseline_sum, sigmoid_ramp, cov };

std::string to_string(LossStrategy s);
LossStrategy loss_strategy_from_string(const std::string& s);

/// Single-pass mean / population variance accumulator.
struct RunningStats {
  std::size_t count = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void push(double x);
  double variance() const { return count > 0 ? m2 / static_cast<double>(count) : 0.0; }
  double stddev() const;
};

struct LossWeightState {
  LossStrategy strategy = LossStrategy::baseline_sum;
  std::size_t epoch = 0;
  std::size_t ramp_length = 100;
  std::array<RunningStats, 3> ratio_stats{};
  std::array<RunningStats, 3> raw_stats{};
};

struct CombinedLoss {
  double total = 0.0;
  std::array<double, 3> weights{1.0, 1.0, 1.0};
};

inline constexpr double kCovFloor = 1e-8;

/// Weighted sum of (MLE, boundary, IoU) losses. For the CoV strategy the
/// running statistics advance by one step per call.
CombinedLoss combine_losses(LossWeightState& state, double l_mle, double l_abl, double l_iou);

}  // namespace uqseg
