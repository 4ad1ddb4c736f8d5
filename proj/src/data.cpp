#include "uqseg/data.hpp"

#include <iostream>
#include <numbers>
#include <set>

#include "uqseg/image_io.hpp"

namespace uqseg {

std::vector<MoonsSample> gen_two_moons(std::size_t n, double noise_sd, Rng& rng) {
  if (n < 2) throw std::invalid_argument("gen_two_moons: need at least 2 samples");
  if (!(noise_sd >= 0.0)) throw std::invalid_argument("gen_two_moons: noise_sd must be nonnegative");
  std::vector<MoonsSample> out(n);
  const std::size_t n_upper = (n + 1) / 2;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = rng.uniform(0.0, std::numbers::pi);
    MoonsSample& s = out[i];
    if (i < n_upper) {
      s.x = {std::cos(t), std::sin(t)};
      s.label = 0;
    } else {
      s.x = {1.0 - std::cos(t), 0.5 - std::sin(t)};
      s.label = 1;
    }
  }
  for (std::size_t i = n; i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
  if (noise_sd > 0.0) {
    for (MoonsSample& s : out) {
      s.x[0] += rng.normal(0.0, noise_sd);
      s.x[1] += rng.normal(0.0, noise_sd);
    }
  }
  return out;
}

std::pair<Tensor, LabelMap> moons_to_tensors(const std::vector<MoonsSample>& samples) {
  Tensor x({samples.size(), 2, 1, 1});
  LabelMap y(samples.size(), 1, 1);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    x.at(i, 0, 0, 0) = samples[i].x[0];
    x.at(i, 1, 0, 0) = samples[i].x[1];
    y[i] = samples[i].label;
  }
  return {std::move(x), std::move(y)};
}

// ---------------------------------------------------------------- cracks

void CrackParams::validate() const {
  if (!(crack_width >= 1.0 && crack_width <= 5.0)) throw std::invalid_argument("cracks: crack_width must be in [1, 5]");
  if (n_segments < 1) throw std::invalid_argument("cracks: n_segments must be positive");
  if (!(texture_scale > 0.0)) throw std::invalid_argument("cracks: texture_scale must be positive");
  if (!(blur_sd >= 0.0) || !(grain_sd >= 0.0)) throw std::invalid_argument("cracks: negative noise scale");
  if (!(min_fraction >= 0.0 && max_fraction > min_fraction)) throw std::invalid_argument("cracks: bad fraction range");
}

nlohmann::json to_json(const CrackParams& p) {
  return {{"crack_width", p.crack_width},   {"n_segments", p.n_segments},
          {"intensity_dip", p.intensity_dip}, {"texture_scale", p.texture_scale},
          {"blur_sd", p.blur_sd},           {"background", p.background},
          {"texture_amplitude", p.texture_amplitude}, {"grain_sd", p.grain_sd},
          {"min_fraction", p.min_fraction}, {"max_fraction", p.max_fraction}};
}

CrackParams crack_params_from_json(const nlohmann::json& j) {
  CrackParams p;
  p.crack_width = j.value("crack_width", p.crack_width);
  p.n_segments = j.value("n_segments", p.n_segments);
  p.intensity_dip = j.value("intensity_dip", p.intensity_dip);
  p.texture_scale = j.value("texture_scale", p.texture_scale);
  p.blur_sd = j.value("blur_sd", p.blur_sd);
  p.background = j.value("background", p.background);
  p.texture_amplitude = j.value("texture_amplitude", p.texture_amplitude);
  p.grain_sd = j.value("grain_sd", p.grain_sd);
  p.min_fraction = j.value("min_fraction", p.min_fraction);
  p.max_fraction = j.value("max_fraction", p.max_fraction);
  p.validate();
  return p;
}

namespace {

double segment_distance(double px, double py, const std::array<double, 2>& a, const std::array<double, 2>& b) {
  const double dx = b[0] - a[0], dy = b[1] - a[1];
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - a[0]) * dx + (py - a[1]) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a[0] + t * dx - px, ey = a[1] + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

CrackGeometry random_polyline(std::size_t h, std::size_t w, const CrackParams& p, Rng& rng) {
  CrackGeometry g;
  g.width = p.crack_width;
  const double H = static_cast<double>(h), W = static_cast<double>(w);
  const double diag = std::sqrt(H * H + W * W);
  double x = rng.uniform(0.2 * W, 0.8 * W);
  double y = rng.uniform(0.2 * H, 0.8 * H);
  double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  // Grow half the segments each way from the seed point.
  const std::size_t forward = (p.n_segments + 1) / 2;
  std::vector<std::array<double, 2>> ahead{{x, y}}, behind;
  const double seg = 0.9 * diag / static_cast<double>(p.n_segments);
  double fx = x, fy = y, ft = theta;
  for (std::size_t i = 0; i < forward; ++i) {
    ft += rng.uniform(-0.5, 0.5);
    const double len = seg * rng.uniform(0.6, 1.0);
    fx += len * std::cos(ft);
    fy += len * std::sin(ft);
    ahead.push_back({fx, fy});
  }
  double bx = x, by = y, bt = theta + std::numbers::pi;
  for (std::size_t i = forward; i < p.n_segments; ++i) {
    bt += rng.uniform(-0.5, 0.5);
    const double len = seg * rng.uniform(0.6, 1.0);
    bx += len * std::cos(bt);
    by += len * std::sin(bt);
    behind.push_back({bx, by});
  }
  g.points.assign(behind.rbegin(), behind.rend());
  g.points.insert(g.points.end(), ahead.begin(), ahead.end());
  return g;
}

}  // namespace

std::vector<std::uint8_t> rasterize(const CrackGeometry& g, std::size_t h, std::size_t w) {
  std::vector<std::uint8_t> mask(h * w, 0);
  const double r = 0.5 * g.width;
  if (g.points.empty()) return mask;
  for (std::size_t row = 0; row < h; ++row) {
    for (std::size_t col = 0; col < w; ++col) {
      const double px = static_cast<double>(col), py = static_cast<double>(row);
      double d = std::hypot(px - g.points[0][0], py - g.points[0][1]);
      for (std::size_t k = 1; k < g.points.size(); ++k) d = std::min(d, segment_distance(px, py, g.points[k - 1], g.points[k]));
      if (d <= r) mask[row * w + col] = 1;
    }
  }
  return mask;
}

std::vector<double> value_noise(std::size_t h, std::size_t w, double scale, Rng& rng) {
  const std::size_t gh = static_cast<std::size_t>(std::ceil(static_cast<double>(h) / scale)) + 2;
  const std::size_t gw = static_cast<std::size_t>(std::ceil(static_cast<double>(w) / scale)) + 2;
  std::vector<double> lattice(gh * gw);
  for (double& v : lattice) v = rng.uniform(-1.0, 1.0);
  const double ox = rng.uniform(0.0, 1.0), oy = rng.uniform(0.0, 1.0);
  auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
  std::vector<double> out(h * w);
  for (std::size_t r = 0; r < h; ++r) {
    const double fy = static_cast<double>(r) / scale + oy;
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const double ty = smooth(fy - static_cast<double>(y0));
    for (std::size_t c = 0; c < w; ++c) {
      const double fx = static_cast<double>(c) / scale + ox;
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const double tx = smooth(fx - static_cast<double>(x0));
      const double a = lattice[y0 * gw + x0], b = lattice[y0 * gw + x0 + 1];
      const double cc = lattice[(y0 + 1) * gw + x0], d = lattice[(y0 + 1) * gw + x0 + 1];
      out[r * w + c] = (a * (1 - tx) + b * tx) * (1 - ty) + (cc * (1 - tx) + d * tx) * ty;
    }
  }
  return out;
}

std::vector<double> gaussian_blur(const std::vector<double>& img, std::size_t h, std::size_t w, double sd) {
  if (sd <= 0.0) return img;
  const int radius = static_cast<int>(std::ceil(3.0 * sd));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double ks = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sd * sd));
    ks += k[static_cast<std::size_t>(i + radius)];
  }
  for (double& v : k) v /= ks;
  const int H = static_cast<int>(h), W = static_cast<int>(w);
  std::vector<double> tmp(img.size()), out(img.size());
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * img[static_cast<std::size_t>(r * W + std::clamp(c + i, 0, W - 1))];
      tmp[static_cast<std::size_t>(r * W + c)] = acc;
    }
  }
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(std::clamp(r + i, 0, H - 1) * W + c)];
      out[static_cast<std::size_t>(r * W + c)] = acc;
    }
  }
  return out;
}

std::vector<ImageSample> gen_synthetic_cracks(std::size_t n, std::size_t h, std::size_t w, const CrackParams& params,
                                              const Rng& rng, std::vector<CrackGeometry>* geometry) {
  if (h < 32 || w < 32) throw std::invalid_argument("gen_synthetic_cracks: images must be at least 32x32");
  params.validate();
  std::vector<ImageSample> out;
  out.reserve(n);
  if (geometry) geometry->clear();
  const double pixels = static_cast<double>(h * w);
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = rng.substream(static_cast<std::uint64_t>(i));
    CrackGeometry g;
    std::vector<std::uint8_t> mask;
    for (int attempt = 0;; ++attempt) {
      if (attempt == 1000) throw std::runtime_error("gen_synthetic_cracks: cannot meet crack-fraction bounds");
      g = random_polyline(h, w, params, r);
      mask = rasterize(g, h, w);
      const double frac = static_cast<double>(std::count(mask.begin(), mask.end(), 1)) / pixels;
      if (frac >= params.min_fraction && frac <= params.max_fraction) break;
    }
    std::vector<double> img = value_noise(h, w, params.texture_scale, r);
    for (std::size_t k = 0; k < img.size(); ++k) {
      img[k] = params.background + params.texture_amplitude * img[k] + params.grain_sd * r.normal() -
               params.intensity_dip * mask[k];
    }
    img = gaussian_blur(img, h, w, params.blur_sd);
    for (double& v : img) v = std::clamp(v, 0.0, 255.0);
    ImageSample s{h, w, std::move(img), std::move(mask), "crack_" + std::to_string(i)};
    out.push_back(std::move(s));
    if (geometry) geometry->push_back(std::move(g));
  }
  return out;
}

std::vector<double> add_gaussian_noise(const std::vector<double>& image, double variance, Rng& rng) {
  if (!(variance > 0.0)) throw std::invalid_argument("add_gaussian_noise: variance must be positive");
  const double sd = std::sqrt(variance);
  std::vector<double> out(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = std::clamp(image[i] + rng.normal(0.0, sd), 0.0, 255.0);
  return out;
}

// ---------------------------------------------------------------- folders

namespace {

std::set<std::string> png_names(const std::filesystem::path& dir) {
  std::set<std::string> names;
  if (!std::filesystem::is_directory(dir)) return names;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") names.insert(e.path().filename().string());
  }
  return names;
}

}  // namespace

std::vector<ImageSample> load_folder_dataset(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw std::runtime_error("dataset root '" + root.string() + "' not found");
  const std::set<std::string> images = png_names(root / "images");
  const std::set<std::string> masks = png_names(root / "masks");
  for (const std::string& name : images) {
    if (!masks.count(name)) throw std::runtime_error("image '" + name + "' has no mask in " + (root / "masks").string());
  }
  for (const std::string& name : masks) {
    if (!images.count(name)) throw std::runtime_error("mask '" + name + "' has no image in " + (root / "images").string());
  }
  std::vector<ImageSample> out;
  if (images.empty()) {
    std::clog << "warning: no image/mask pairs under " << root.string() << "\n";
    return out;
  }
  for (const std::string& name : images) {
    const Image8 img = read_png_gray(root / "images" / name);
    const Image8 msk = read_png_gray(root / "masks" / name);
    if (img.width != msk.width || img.height != msk.height) {
      throw std::runtime_error("size mismatch between image and mask '" + name + "'");
    }
    ImageSample s;
    s.h = img.height;
    s.w = img.width;
    s.name = std::filesystem::path(name).stem().string();
    s.image.assign(img.pixels.begin(), img.pixels.end());
    s.mask.resize(msk.pixels.size());
    for (std::size_t i = 0; i < msk.pixels.size(); ++i) s.mask[i] = msk.pixels[i] > 127 ? 1 : 0;
    out.push_back(std::move(s));
  }
  return out;
}

void export_folder_dataset(const std::vector<ImageSample>& samples, const std::filesystem::path& root) {
  std::filesystem::create_directories(root / "images");
  std::filesystem::create_directories(root / "masks");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ImageSample& s = samples[i];
    const std::string name = (s.name.empty() ? "sample_" + std::to_string(i) : s.name) + ".png";
    Image8 img{s.w, s.h, 1, std::vector<std::uint8_t>(s.h * s.w)};
    Image8 msk = img;
    for (std::size_t k = 0; k < s.image.size(); ++k) {
      img.pixels[k] = static_cast<std::uint8_t>(std::lround(std::clamp(s.image[k], 0.0, 255.0)));
      msk.pixels[k] = s.mask[k] ? 255 : 0;
    }
    write_png(root / "images" / name, img);
    write_png(root / "masks" / name, msk);
  }
}

Tensor images_to_tensor(const std::vector<ImageSample>& samples) {
  if (samples.empty()) return Tensor();
  const std::size_t h = samples.front().h, w = samples.front().w;
  Tensor t({samples.size(), 1, h, w});
  for (std::size_t n = 0; n < samples.size(); ++n) {
    if (samples[n].h != h || samples[n].w != w) throw std::invalid_argument("images_to_tensor: mixed image sizes");
    auto p = t.plane(n, 0);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = (samples[n].image[i] / 255.0 - 0.5) / 0.25;
  }
  return t;
}

LabelMap masks_to_labels(const std::vector<ImageSample>& samples) {
  if (samples.empty()) return LabelMap();
  const std::size_t h = samples.front().h, w = samples.front().w;
  LabelMap y(samples.size(), h, w);
  for (std::size_t n = 0; n < samples.size(); ++n) {
    if (samples[n].h != h || samples[n].w != w) throw std::invalid_argument("masks_to_labels: mixed image sizes");
    auto img = y.image(n);
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = samples[n].mask[i];
  }
  return y;
}

}  // namespace uqseg
