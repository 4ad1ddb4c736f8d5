#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "uqseg/losses.hpp"
#include "uqseg/tensor.hpp"

namespace uqseg {

/// Row/column offset of one of the 8 neighbours.
struct Offset {
  int dy;
  int dx;
};

/// Fixed neighbour ordering; ties in the target direction resolve to the
/// earliest entry.
inline constexpr std::array<Offset, 8> kNeighbourOffsets{{
    {-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1},
}};

/// Marks pixels with a 4-neighbour of a different label. Out-of-image
/// neighbours are clamped to the pixel itself.
std::vector<std::uint8_t> extract_boundary(std::span<const int> labels, std::size_t h, std::size_t w);

struct DistanceField {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<double> values;
  /// Set when no pixel was marked; values are then +infinity.
  bool degenerate = false;
};

/// Exact Euclidean distance to the nearest marked pixel (separable lower
/// envelope of parabolas).
DistanceField distance_transform(std::span<const std::uint8_t> marked, std::size_t h, std::size_t w);

struct BoundaryContext {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::uint8_t> gt_boundary;
  DistanceField distance;
  double kl_threshold = 0.1;
  double clamp_distance = 5.0;
  /// Probability mass placed on the target direction; the rest is spread
  /// evenly over the other seven.
  double target_mass = 0.8;

  static BoundaryContext from_labels(std::span<const int> labels, std::size_t h, std::size_t w);
  bool degenerate() const { return distance.degenerate; }
};

struct AblResult {
  double loss = 0.0;
  Tensor grad;             // d loss / d probs; neighbour distributions are held constant
  std::size_t pdb_count = 0;      // pixels detected on the predicted boundary
  std::size_t active_count = 0;   // detected pixels off the ground-truth boundary
  bool degenerate = false;
};

/// Active boundary loss for one image; probs has shape [1, C, H, W].
AblResult active_boundary_loss(const Tensor& probs, const BoundaryContext& ctx);

/// Batch mean over images, one context per image.
AblResult active_boundary_loss(const Tensor& probs, std::span<const BoundaryContext> contexts);

}  // namespace uqseg
