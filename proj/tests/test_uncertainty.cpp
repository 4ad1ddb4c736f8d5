#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "uqseg/array_io.hpp"
#include "uqseg/image_io.hpp"
#include "uqseg/uncertainty.hpp"

using namespace uqseg;

namespace {

MCPredictionSet two_class_set(std::vector<double> p_class0) {
  MCPredictionSet set;
  for (double p : p_class0) set.samples.push_back(Tensor({1, 2, 1, 1}, std::vector<double>{p, 1.0 - p}));
  set.m = set.samples.size();
  return set;
}

std::unique_ptr<Model> tiny_segmenter(double p, VariationalMode mode = VariationalMode::mcd) {
  SegmenterConfig cfg;
  cfg.encoder_channels = {4, 8};
  cfg.dropout_placement = DropoutPlacement::all_decoder;
  cfg.variational.mode = mode;
  cfg.variational.dropout.p = p;
  Rng rng(11);
  return build_segmenter(cfg, rng);
}

Tensor random_batch(std::size_t n, std::size_t hw, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x({n, 1, hw, hw});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
  return x;
}

}  // namespace

TEST_CASE("epistemic variance") {
  const Tensor v = epistemic_variance(two_class_set({0.4, 0.6}));
  CHECK(v[0] == doctest::Approx(0.01));
  CHECK(v[1] == doctest::Approx(0.01));
  const Tensor same = epistemic_variance(two_class_set({0.3, 0.3, 0.3}));
  CHECK(same[0] == 0.0);

  Rng rng(1);
  std::vector<double> ps(9);
  for (double& p : ps) p = rng.uniform();
  const Tensor a = epistemic_variance(two_class_set(ps));
  std::reverse(ps.begin(), ps.end());
  std::rotate(ps.begin(), ps.begin() + 4, ps.end());
  const Tensor b = epistemic_variance(two_class_set(ps));
  CHECK(a[0] == doctest::Approx(b[0]).epsilon(1e-14));
  CHECK(a[0] <= 0.25);
  CHECK(epistemic_variance(two_class_set({0.0, 1.0}))[0] == doctest::Approx(0.25));
}

TEST_CASE("predictive entropy") {
  CHECK(predictive_entropy(two_class_set({0.5}))[0] == doctest::Approx(std::log(2.0)));
  CHECK(predictive_entropy(two_class_set({1.0}))[0] == 0.0);
  CHECK(predictive_entropy(two_class_set({0.9}))[0] == doctest::Approx(0.3251).epsilon(1e-4));
  CHECK(predictive_entropy(two_class_set({0.8, 1.0}))[0] == doctest::Approx(0.3251).epsilon(1e-4));
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    MCPredictionSet set;
    std::vector<double> p(4);
    double z = 0.0;
    for (double& v : p) z += (v = rng.uniform());
    for (double& v : p) v /= z;
    set.samples.push_back(Tensor({1, 4, 1, 1}, p));
    set.m = 1;
    CHECK(predictive_entropy(set)[0] <= std::log(4.0) + 1e-12);
  }
  MCPredictionSet uniform;
  uniform.samples.push_back(Tensor({1, 4, 1, 1}, 0.25));
  uniform.m = 1;
  CHECK(predictive_entropy(uniform)[0] == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("prediction set validation") {
  MCPredictionSet bad = two_class_set({0.5});
  bad.samples[0][0] = 0.7;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  MCPredictionSet empty;
  CHECK_THROWS_AS(empty.validate(), std::invalid_argument);
  CHECK_NOTHROW(two_class_set({0.2, 0.9}).validate());
}

TEST_CASE("aleatoric map") {
  const HeteroscedasticOutput unit{Tensor({1, 2, 3, 3}), Tensor({1, 2, 3, 3}, 0.0)};
  const Tensor s = aleatoric_map(unit);
  CHECK(std::all_of(s.values().begin(), s.values().end(), [](double v) { return v == 1.0; }));
  CHECK(aleatoric_scalar(unit) == 1.0);
  const HeteroscedasticOutput two{Tensor({1, 1, 1, 1}), Tensor({1, 1, 1, 1}, 2.0 * std::log(2.0))};
  CHECK(aleatoric_map(two)[0] == doctest::Approx(2.0));
  HeteroscedasticOutput bad = unit;
  bad.log_variance[3] = INFINITY;
  CHECK_THROWS_AS(aleatoric_map(bad), std::invalid_argument);

  Rng rng(3);
  HeteroscedasticOutput r{Tensor({1, 2, 4, 4}), Tensor({1, 2, 4, 4})};
  for (std::size_t i = 0; i < r.log_variance.size(); ++i) r.log_variance[i] = rng.normal();
  HeteroscedasticOutput perm = r;
  for (std::size_t c = 0; c < 2; ++c) {
    auto pl = perm.log_variance.plane(0, c);
    std::reverse(pl.begin(), pl.end());
  }
  CHECK(aleatoric_scalar(r) == doctest::Approx(aleatoric_scalar(perm)).epsilon(1e-14));
}

TEST_CASE("mc prediction") {
  auto model = tiny_segmenter(0.3);
  const Tensor x = random_batch(2, 8, 4);
  CHECK_THROWS_AS(mc_predict(*model, x, 0, Rng(1)), std::invalid_argument);
  const MCPredictionSet a = mc_predict(*model, x, 25, Rng(5));
  CHECK(a.samples.size() == 25);
  CHECK(a.m == 25);
  CHECK_NOTHROW(a.validate());
  const MCPredictionSet b = mc_predict(*model, x, 25, Rng(5));
  for (std::size_t i = 0; i < 25; ++i) CHECK(std::ranges::equal(a.samples[i].values(), b.samples[i].values()));
  CHECK(!std::ranges::equal(a.samples[0].values(), a.samples[1].values()));

  auto still = tiny_segmenter(0.0);
  const MCPredictionSet c = mc_predict(*still, x, 25, Rng(5));
  for (std::size_t i = 1; i < 25; ++i) CHECK(std::ranges::equal(c.samples[0].values(), c.samples[i].values()));
  const Tensor ep = epistemic_variance(c);
  CHECK(std::all_of(ep.values().begin(), ep.values().end(), [](double v) { return v == 0.0; }));
  MCPredictionSet single = c;
  single.samples.resize(1);
  single.m = 1;
  CHECK(std::ranges::equal(predictive_entropy(c).values(), predictive_entropy(single).values()));
}

TEST_CASE("bbb weight draws vary across passes") {
  auto model = tiny_segmenter(0.0, VariationalMode::bbb);
  const MCPredictionSet s = mc_predict(*model, random_batch(1, 8, 6), 3, Rng(7));
  CHECK(!std::ranges::equal(s.samples[0].values(), s.samples[2].values()));
}

TEST_CASE("decompose") {
  MCPredictionSet set;
  set.samples.assign(3, Tensor({1, 2, 2, 2}, 0.5));
  set.m = 3;
  const HeteroscedasticOutput out{Tensor({1, 2, 2, 2}), Tensor({1, 2, 2, 2}, 0.0)};
  LabelMap gt(1, 2, 2, std::vector<int>{0, 0, 0, 1});
  const UncertaintyDecomposition d = decompose(set, out, &gt);
  CHECK(d.epistemic_mean == 0.0);
  CHECK(d.aleatoric_mean == 1.0);
  CHECK(d.entropy_mean == doctest::Approx(std::log(2.0)));
  REQUIRE(d.aleatoric_per_class.size() == 2);
  CHECK(d.aleatoric_per_class[1] == 1.0);
  REQUIRE(d.gt_region.size() == 2);
  CHECK(d.gt_region[1].present);
  CHECK(d.gt_region[1].pixels == 1);
  CHECK(d.gt_region[0].pixels == 3);
  CHECK(d.gt_region[1].entropy == doctest::Approx(std::log(2.0)));
  CHECK(decompose(set, out).gt_region.empty());

  const HeteroscedasticOutput wrong{Tensor({1, 2, 3, 2}), Tensor({1, 2, 3, 2})};
  CHECK_THROWS_AS(decompose(set, wrong), std::invalid_argument);
}

TEST_CASE("uncertainty maps on disk") {
  auto model = tiny_segmenter(0.4);
  const Tensor x = random_batch(2, 8, 8);
  const MCPrediction p = mc_predict_full(*model, x, 5, Rng(9));
  const UncertaintyDecomposition d = decompose(p.set, p.mean_output);
  const auto dir = std::filesystem::temp_directory_path() / "uqseg_test_maps";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  write_uncertainty_arrays(dir / "u.uqa", d);
  const auto recs = read_arrays(dir / "u.uqa");
  REQUIRE(recs.size() == 3);
  bool found = false;
  for (const auto& r : recs) {
    if (r.name != "epistemic") continue;
    found = true;
    CHECK(to_tensor(r).shape() == d.epistemic.shape());
    CHECK(std::ranges::equal(r.values, d.epistemic.values()));
  }
  CHECK(found);
  write_uncertainty_pngs(dir, d, 1, 1);
  for (const char* f : {"epistemic.png", "entropy.png", "aleatoric.png"}) {
    const Image8 img = read_png_gray(dir / f);
    CHECK(img.width == 8);
    CHECK(img.height == 8);
  }
  std::filesystem::remove_all(dir);
}
