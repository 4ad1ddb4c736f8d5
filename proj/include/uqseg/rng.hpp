#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace uqseg {

/// Seeded generator. Independent named substreams are derived from a root seed
/// so that changing one consumer (e.g. dropout masks) leaves the others intact.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }

  /// Child generator keyed by (seed, name); does not advance this generator.
  Rng substream(std::string_view name) const;
  Rng substream(std::uint64_t index) const;

  double uniform();                         // [0, 1)
  double uniform(double lo, double hi);     // [lo, hi)
  /// Open interval (0, 1); safe for logit/log.
  double uniform_open();
  double normal();
  double normal(double mean, double sd);
  bool bernoulli(double p);
  std::uint64_t below(std::uint64_t n);     // [0, n)

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// 64-bit mixing hash used for seed derivation and config fingerprints.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace uqseg
