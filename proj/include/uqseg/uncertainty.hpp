#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <vector>

#include "uqseg/losses.hpp"
#include "uqseg/models.hpp"
#include "uqseg/tensor.hpp"

namespace uqseg {

/// M stochastic passes over one batch; each sample holds [N, C, H, W] probabilities.
struct MCPredictionSet {
  std::vector<Tensor> samples;
  std::size_t m = 0;
  VariationalMode sampling_mode = VariationalMode::mcd;

  /// Throws unless every sample shares a shape and sums to 1 per pixel.
  void validate() const;
  Tensor mean_probs() const;
};

struct MCPrediction {
  MCPredictionSet set;
  /// Per-pass heads averaged over the M passes.
  HeteroscedasticOutput mean_output;
};

/// Pass i draws its noise from rng.substream(i), so results depend only on
/// the rng seed.
MCPrediction mc_predict_full(Model& model, const Tensor& batch, std::size_t m, const Rng& rng);
MCPredictionSet mc_predict(Model& model, const Tensor& batch, std::size_t m, const Rng& rng);

/// Population variance over the sample axis, per class per pixel.
Tensor epistemic_variance(const MCPredictionSet& set);
/// Entropy (nats) of the MC-mean distribution; shape [N, 1, H, W].
Tensor predictive_entropy(const MCPredictionSet& set);
/// sigma = exp(log_variance / 2).
Tensor aleatoric_map(const HeteroscedasticOutput& out);
double aleatoric_scalar(const HeteroscedasticOutput& out);

struct RegionScalars {
  bool present = false;
  std::size_t pixels = 0;
  double epistemic = 0.0;
  double entropy = 0.0;
  double aleatoric = 0.0;
};

struct UncertaintyDecomposition {
  Tensor epistemic;   // [N, C, H, W]
  Tensor entropy;     // [N, 1, H, W]
  Tensor aleatoric;   // [N, C, H, W]

  double epistemic_mean = 0.0;
  double entropy_mean = 0.0;
  double aleatoric_mean = 0.0;
  /// Means of the class-c channel over all pixels.
  std::vector<double> epistemic_per_class;
  std::vector<double> aleatoric_per_class;
  /// Filled when ground truth is supplied: class-c channel (entropy: the
  /// single map) averaged over the pixels whose label is c.
  std::vector<RegionScalars> gt_region;
};

UncertaintyDecomposition decompose(const MCPredictionSet& set, const HeteroscedasticOutput& out,
                                   const LabelMap* gt = nullptr);

/// Writes the three maps to an array container.
void write_uncertainty_arrays(const std::filesystem::path& path, const UncertaintyDecomposition& d);
/// Grayscale PNGs of image `n`: epistemic/aleatoric of channel `cls`, and entropy.
/// Epistemic spans [0, 0.25], entropy [0, ln C], aleatoric [0, max of that image].
void write_uncertainty_pngs(const std::filesystem::path& dir, const UncertaintyDecomposition& d, std::size_t n,
                            std::size_t cls);

}  // namespace uqseg
