#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "uqseg/array_io.hpp"
#include "uqseg/data.hpp"
#include "uqseg/image_io.hpp"

using namespace uqseg;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  const auto d = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("two moons") {
  Rng rng(1);
  const auto s = gen_two_moons(100, 0.15, rng);
  CHECK(s.size() == 100);
  CHECK(std::ranges::count_if(s, [](const MoonsSample& m) { return m.label == 1; }) == 50);
  Rng odd(2);
  const auto o = gen_two_moons(101, 0.1, odd);
  const auto ones = std::ranges::count_if(o, [](const MoonsSample& m) { return m.label == 1; });
  CHECK(std::abs(static_cast<long>(ones) - static_cast<long>(101 - ones)) <= 1);
  CHECK_THROWS_AS(gen_two_moons(1, 0.1, rng), std::invalid_argument);
  CHECK_THROWS_AS(gen_two_moons(10, -0.1, rng), std::invalid_argument);

  Rng clean(3);
  for (const MoonsSample& m : gen_two_moons(500, 0.0, clean)) {
    const double cx = m.label == 0 ? 0.0 : 1.0, cy = m.label == 0 ? 0.0 : 0.5;
    const double r = std::hypot(m.x[0] - cx, m.x[1] - cy);
    CHECK(std::abs(r - 1.0) < 1e-12);
    if (m.label == 0) CHECK(m.x[1] >= -1e-12);
    else CHECK(m.x[1] <= 0.5 + 1e-12);
  }

  Rng a(4), b(4);
  const auto da = gen_two_moons(50, 0.2, a), db = gen_two_moons(50, 0.2, b);
  for (std::size_t i = 0; i < da.size(); ++i) {
    CHECK(da[i].x == db[i].x);
    CHECK(da[i].label == db[i].label);
  }
  const auto [x, y] = moons_to_tensors(da);
  CHECK(x.shape() == Shape4{50, 2, 1, 1});
  CHECK(y.size() == 50);
  CHECK(x.at(7, 1, 0, 0) == da[7].x[1]);
}

TEST_CASE("crack rasterisation") {
  const CrackGeometry straight{{{0.0, 20.0}, {63.0, 20.0}}, 1.0};
  const auto m = rasterize(straight, 64, 64);
  CHECK(std::ranges::count(m, 1) == 64);
  for (std::size_t c = 0; c < 64; ++c) CHECK(m[20 * 64 + c] == 1);
  const CrackGeometry thick{{{0.0, 20.0}, {63.0, 20.0}}, 3.0};
  CHECK(std::ranges::count(rasterize(thick, 64, 64), 1) == 3 * 64);
}

TEST_CASE("synthetic cracks") {
  CrackParams p;
  const Rng rng(5);
  std::vector<CrackGeometry> geo;
  const auto s = gen_synthetic_cracks(1000, 64, 64, p, rng, &geo);
  REQUIRE(geo.size() == 1000);
  bool fractions_ok = true, exact = true, ranged = true;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double f = static_cast<double>(std::ranges::count(s[i].mask, 1)) / (64.0 * 64.0);
    fractions_ok = fractions_ok && f >= 0.002 && f <= 0.08;
    exact = exact && rasterize(geo[i], 64, 64) == s[i].mask;
    ranged = ranged && std::ranges::all_of(s[i].image, [](double v) { return v >= 0.0 && v <= 255.0; });
  }
  CHECK(fractions_ok);
  CHECK(exact);
  CHECK(ranged);

  // Replay with a shorter run: sample i does not depend on n.
  const auto again = gen_synthetic_cracks(5, 64, 64, p, rng);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(again[i].image == s[i].image);
    CHECK(again[i].mask == s[i].mask);
  }

  CHECK_THROWS_AS(gen_synthetic_cracks(1, 16, 64, p, rng), std::invalid_argument);
  CrackParams bad = p;
  bad.crack_width = 9.0;
  CHECK_THROWS_AS(gen_synthetic_cracks(1, 64, 64, bad, rng), std::invalid_argument);
  CHECK(to_json(crack_params_from_json(to_json(p))) == to_json(p));
}

TEST_CASE("crack contrast") {
  auto contrast = [](double dip) {
    CrackParams p;
    p.intensity_dip = dip;
    p.blur_sd = 0.0;
    const auto s = gen_synthetic_cracks(60, 64, 64, p, Rng(6));
    double in = 0.0, out = 0.0;
    std::size_t ni = 0, no = 0;
    for (const auto& img : s)
      for (std::size_t k = 0; k < img.image.size(); ++k) {
        if (img.mask[k]) {
          in += img.image[k];
          ++ni;
        } else {
          out += img.image[k];
          ++no;
        }
      }
    return out / no - in / ni;
  };
  CHECK(std::abs(contrast(0.0)) < 5.0);
  CHECK(contrast(70.0) > 50.0);
}

TEST_CASE("gaussian noise") {
  Rng rng(7);
  const std::vector<double> gray(100000, 128.0);
  const auto noisy = add_gaussian_noise(gray, 25.0, rng);
  double m = 0.0, v = 0.0;
  for (std::size_t i = 0; i < gray.size(); ++i) m += noisy[i] - gray[i];
  m /= gray.size();
  for (std::size_t i = 0; i < gray.size(); ++i) v += (noisy[i] - gray[i] - m) * (noisy[i] - gray[i] - m);
  const double sd = std::sqrt(v / gray.size());
  CHECK(sd >= 4.8);
  CHECK(sd <= 5.2);

  const std::vector<double> black(10000, 0.0);
  const auto clipped = add_gaussian_noise(black, 50.0, rng);
  double mean = 0.0;
  for (double x : clipped) mean += x;
  mean /= clipped.size();
  CHECK(mean > 0.0);
  // Half-normal expectation: sd / sqrt(2 pi).
  CHECK(mean == doctest::Approx(std::sqrt(50.0) / std::sqrt(2.0 * M_PI)).epsilon(0.05));

  const auto tiny = add_gaussian_noise(gray, 1e-12, rng);
  for (std::size_t i = 0; i < 100; ++i) CHECK(tiny[i] == doctest::Approx(128.0).epsilon(1e-5));
  CHECK(tiny.size() == gray.size());
  CHECK_THROWS_AS(add_gaussian_noise(gray, 0.0, rng), std::invalid_argument);
}

TEST_CASE("split") {
  std::vector<int> items(100);
  std::iota(items.begin(), items.end(), 0);
  const auto s = split(items, {0.72, 0.10, 0.18}, 3);
  CHECK(s.train.size() == 72);
  CHECK(s.val.size() == 10);
  CHECK(s.test.size() == 18);
  const auto t = split(items, {0.72, 0.10, 0.18}, 3);
  CHECK(s.train == t.train);
  CHECK(s.test == t.test);
  std::vector<int> all = s.train;
  all.insert(all.end(), s.val.begin(), s.val.end());
  all.insert(all.end(), s.test.begin(), s.test.end());
  std::ranges::sort(all);
  CHECK(all == items);
  CHECK_THROWS_AS(split(items, {0.5, 0.5, 0.5}, 1), std::invalid_argument);
  CHECK_THROWS_AS(split(items, {1.2, -0.1, -0.1}, 1), std::invalid_argument);
}

TEST_CASE("folder dataset") {
  const auto root = fresh_dir("uqseg_test_folder");
  CHECK(load_folder_dataset(root).empty());

  auto samples = gen_synthetic_cracks(3, 32, 40, CrackParams{}, Rng(8));
  for (auto& s : samples)
    for (double& v : s.image) v = std::round(v);
  export_folder_dataset(samples, root);
  const auto back = load_folder_dataset(root);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].name == samples[i].name);
    CHECK(back[i].h == 32);
    CHECK(back[i].w == 40);
    CHECK(back[i].image == samples[i].image);
    CHECK(back[i].mask == samples[i].mask);
  }
  const Image8 raw = read_png_gray(root / "masks" / "crack_0.png");
  CHECK(std::ranges::all_of(raw.pixels, [](std::uint8_t v) { return v == 0 || v == 255; }));

  std::filesystem::remove(root / "masks" / "crack_1.png");
  CHECK_THROWS_WITH_AS(load_folder_dataset(root), doctest::Contains("crack_1.png"), std::runtime_error);

  const auto odd = fresh_dir("uqseg_test_folder_odd");
  std::filesystem::create_directories(odd / "images");
  std::filesystem::create_directories(odd / "masks");
  write_png(odd / "images" / "a.png", Image8{4, 4, 1, std::vector<std::uint8_t>(16, 9)});
  write_png(odd / "masks" / "a.png", Image8{5, 4, 1, std::vector<std::uint8_t>(20, 200)});
  CHECK_THROWS_AS(load_folder_dataset(odd), std::runtime_error);
  CHECK_THROWS_AS(load_folder_dataset(odd / "missing"), std::runtime_error);

  const Tensor t = images_to_tensor(samples);
  CHECK(t.shape() == Shape4{3, 1, 32, 40});
  CHECK(t[5] == doctest::Approx((samples[0].image[5] / 255.0 - 0.5) / 0.25));
  const LabelMap l = masks_to_labels(samples);
  CHECK(l.size() == 3 * 32 * 40);
  std::filesystem::remove_all(root);
  std::filesystem::remove_all(odd);
}

TEST_CASE("array container") {
  const auto dir = fresh_dir("uqseg_test_arrays");
  Tensor t({2, 3, 4, 5});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::sin(static_cast<double>(i)) * 1e3;
  t[7] = -0.0;
  t[8] = std::numeric_limits<double>::denorm_min();
  const std::vector<ArrayRecord> recs{to_record("t", t), {"v", {3}, {1.0, 2.0, 3.0}}};
  write_arrays(dir / "a.uqa", recs);
  const auto back = read_arrays(dir / "a.uqa");
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "t");
  CHECK(back[0].dims == std::vector<std::uint64_t>{2, 3, 4, 5});
  CHECK(std::memcmp(back[0].values.data(), t.data(), t.size() * sizeof(double)) == 0);
  CHECK(to_tensor(back[1]).shape() == Shape4{1, 1, 1, 3});

  std::ifstream in(dir / "a.uqa", std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  CHECK(std::string(magic, 8) == "UQARRAY1");
  unsigned char count[4];
  in.read(reinterpret_cast<char*>(count), 4);
  CHECK(count[0] == 2);
  CHECK(count[1] == 0);

  {
    std::ofstream bad(dir / "bad.uqa", std::ios::binary);
    bad << "NOTARRAY";
  }
  CHECK_THROWS_AS(read_arrays(dir / "bad.uqa"), std::runtime_error);
  const auto full = std::filesystem::file_size(dir / "a.uqa");
  std::filesystem::copy_file(dir / "a.uqa", dir / "cut.uqa");
  std::filesystem::resize_file(dir / "cut.uqa", full - 10);
  CHECK_THROWS_AS(read_arrays(dir / "cut.uqa"), std::runtime_error);
  const std::vector<ArrayRecord> mismatch{{"m", {2, 2}, {1.0}}};
  CHECK_THROWS_AS(write_arrays(dir / "m.uqa", mismatch), std::invalid_argument);
  std::filesystem::remove_all(dir);
}

TEST_CASE("png helpers") {
  const auto dir = fresh_dir("uqseg_test_png");
  Image8 img{3, 2, 1, {0, 50, 100, 150, 200, 255}};
  write_png(dir / "g.png", img);
  const Image8 back = read_png_gray(dir / "g.png");
  CHECK(back.pixels == img.pixels);
  CHECK(back.at(1, 2) == 255);
  const Image8 g = to_gray8({0.0, 0.5, 1.0, 2.0}, 2, 2, 0.0, 1.0);
  CHECK(g.pixels == std::vector<std::uint8_t>{0, 128, 255, 255});
  CHECK_THROWS_AS(read_png_gray(dir / "none.png"), std::runtime_error);
  std::filesystem::remove_all(dir);
}
