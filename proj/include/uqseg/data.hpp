#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "uqseg/rng.hpp"
#include "uqseg/tensor.hpp"

namespace uqseg {

struct MoonsSample {
  std::array<double, 2> x{};
  int label = 0;
};

/// Upper arc (label 0): (cos t, sin t); lower arc (label 1): (1 - cos t, 0.5 - sin t),
/// t ~ U(0, pi), plus isotropic N(0, noise_sd^2) jitter. Labels balanced within one.
std::vector<MoonsSample> gen_two_moons(std::size_t n, double noise_sd, Rng& rng);

/// [N, 2, 1, 1] inputs and [N, 1, 1] labels.
std::pair<Tensor, LabelMap> moons_to_tensors(const std::vector<MoonsSample>& samples);

struct ImageSample {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<double> image;        // intensities in [0, 255]
  std::vector<std::uint8_t> mask;   // 1 = crack
  std::string name;
};

struct CrackParams {
  double crack_width = 2.0;       // 1..5 px
  std::size_t n_segments = 4;
  double intensity_dip = 70.0;
  double texture_scale = 8.0;     // lattice spacing of the value noise, px
  double blur_sd = 0.7;
  double background = 150.0;
  double texture_amplitude = 35.0;
  double grain_sd = 4.0;          // per-pixel white noise on top of the texture
  double min_fraction = 0.002;
  double max_fraction = 0.08;

  void validate() const;
};

nlohmann::json to_json(const CrackParams& p);
CrackParams crack_params_from_json(const nlohmann::json& j);

/// Polyline in pixel coordinates (x, y); pixel (r, c) has its centre at (c, r).
struct CrackGeometry {
  std::vector<std::array<double, 2>> points;
  double width = 1.0;
};

/// Marks pixels whose centre lies within width / 2 of the polyline.
std::vector<std::uint8_t> rasterize(const CrackGeometry& g, std::size_t h, std::size_t w);

/// Smooth random texture: bilinear (smoothstep) interpolation of a random lattice.
std::vector<double> value_noise(std::size_t h, std::size_t w, double scale, Rng& rng);
std::vector<double> gaussian_blur(const std::vector<double>& img, std::size_t h, std::size_t w, double sd);

/// Each sample consumes its own substream (index i), so sample i does not
/// depend on how many samples are generated.
std::vector<ImageSample> gen_synthetic_cracks(std::size_t n, std::size_t h, std::size_t w, const CrackParams& params,
                                              const Rng& rng, std::vector<CrackGeometry>* geometry = nullptr);

/// Adds N(0, variance) per pixel (0-255 scale) and clips to [0, 255].
std::vector<double> add_gaussian_noise(const std::vector<double>& image, double variance, Rng& rng);

/// Pairs `<root>/images/X.png` with `<root>/masks/X.png` in lexicographic order.
std::vector<ImageSample> load_folder_dataset(const std::filesystem::path& root);
void export_folder_dataset(const std::vector<ImageSample>& samples, const std::filesystem::path& root);

/// Images as [N, 1, H, W] normalised to (I / 255 - 0.5) / 0.25; masks as labels.
Tensor images_to_tensor(const std::vector<ImageSample>& samples);
LabelMap masks_to_labels(const std::vector<ImageSample>& samples);

template <typename T>
struct Split {
  std::vector<T> train, val, test;
};

/// Sizes are round(n * f_train), round(n * f_val), and the remainder.
template <typename T>
Split<T> split(const std::vector<T>& data, std::array<double, 3> fractions, std::uint64_t seed) {
  for (double f : fractions) {
    if (!(f >= 0.0)) throw std::invalid_argument("split: fractions must be nonnegative");
  }
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-6) {
    throw std::invalid_argument("split: fractions must sum to 1");
  }
  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const std::size_t n_train = std::min(n, static_cast<std::size_t>(std::llround(static_cast<double>(n) * fractions[0])));
  const std::size_t n_val =
      std::min(n - n_train, static_cast<std::size_t>(std::llround(static_cast<double>(n) * fractions[1])));
  Split<T> out;
  for (std::size_t i = 0; i < n; ++i) {
    const T& item = data[order[i]];
    if (i < n_train) out.train.push_back(item);
    else if (i < n_train + n_val) out.val.push_back(item);
    else out.test.push_back(item);
  }
  return out;
}

}  // namespace uqseg
