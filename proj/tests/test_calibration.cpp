#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "uqseg/calibration.hpp"
#include "uqseg/rng.hpp"

using namespace uqseg;

TEST_CASE("precision / recall / f1") {
  const std::vector<int> gt{1, 1, 1, 1, 1, 0, 0};
  const PrfScore perfect = precision_recall_f1(gt, gt, 1);
  CHECK(perfect.tp == 5);
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);
  CHECK(perfect.f1 == 1.0);

  const std::vector<int> g{1, 1, 0, 0}, p{1, 0, 1, 0};
  const PrfScore half = precision_recall_f1(p, g, 1);
  CHECK(half.tp == 1);
  CHECK(half.fp == 1);
  CHECK(half.fn == 1);
  CHECK(half.precision == 0.5);
  CHECK(half.recall == 0.5);
  CHECK(half.f1 == 0.5);

  const PrfScore absent = precision_recall_f1(p, g, 2);
  CHECK_FALSE(absent.present);
  const ClasswiseScore cw = classwise_scores(p, g, 3);
  CHECK_FALSE(cw.included[2]);
  CHECK(cw.macro_f1 == doctest::Approx(0.5));

  const std::vector<int> zeros(4, 0), ones(4, 1);
  const PrfScore missed = precision_recall_f1(zeros, ones, 1);
  CHECK(missed.precision == 0.0);
  CHECK(missed.f1 == 0.0);
  CHECK(classwise_scores(zeros, zeros, 1).macro_f1 == 1.0);
}

TEST_CASE("macro f1 is the mean of included class scores") {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const std::size_t classes = 2 + rng.below(3);
    std::vector<int> p(50), g(50);
    for (auto& v : p) v = static_cast<int>(rng.below(classes));
    for (auto& v : g) v = static_cast<int>(rng.below(classes));
    const ClasswiseScore s = classwise_scores(p, g, classes + 1);
    double acc = 0.0;
    int n = 0;
    for (std::size_t c = 0; c < s.per_class.size(); ++c) {
      CHECK(s.per_class[c].f1 >= 0.0);
      CHECK(s.per_class[c].f1 <= 1.0);
      if (!s.included[c]) continue;
      acc += s.per_class[c].f1;
      ++n;
    }
    CHECK(s.macro_f1 == doctest::Approx(acc / n).epsilon(1e-14));
  }
}

TEST_CASE("expected calibration error") {
  const std::vector<double> ones(10, 1.0);
  const std::vector<std::uint8_t> right(10, 1);
  CHECK(ece(ones, right).ece == 0.0);

  const std::vector<double> conf{0.8, 0.8, 0.2, 0.2};
  const std::vector<std::uint8_t> corr{1, 0, 0, 0};
  const CalibrationReport r = ece(conf, corr);
  CHECK(r.ece == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(r.bins.n_bins == 30);
  CHECK(r.bins.total() == 4);

  CHECK_THROWS_AS(ece(std::vector<double>{1.2}, std::vector<std::uint8_t>{1}), std::invalid_argument);
  CHECK_THROWS_AS(ece(std::vector<double>{-0.1}, std::vector<std::uint8_t>{1}), std::invalid_argument);
  CHECK_THROWS_AS(ece(std::vector<double>{0.5, 0.5}, std::vector<std::uint8_t>{1}), std::invalid_argument);

  Rng rng(2);
  std::vector<double> c(100000);
  std::vector<std::uint8_t> k(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    c[i] = rng.uniform_open();
    k[i] = rng.bernoulli(c[i]) ? 1 : 0;
  }
  const double e = ece(c, k).ece;
  CHECK(e < 0.02);

  std::vector<std::size_t> idx(c.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  std::vector<double> c2(c.size());
  std::vector<std::uint8_t> k2(c.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    c2[i] = c[idx[i]];
    k2[i] = k[idx[i]];
  }
  CHECK(ece(c2, k2).ece == doctest::Approx(e).epsilon(1e-12));
}

TEST_CASE("reliability bins") {
  ReliabilityBins b(30);
  CHECK(b.bin_of(0.0) == 0);
  CHECK(b.bin_of(1.0 / 30.0) == 0);
  CHECK(b.bin_of(1.0) == 29);
  CHECK(b.bin_of(0.5) == 14);
  CHECK(b.lo(29) == doctest::Approx(29.0 / 30.0));
  CHECK(b.hi(29) == 1.0);

  // Sharded accumulation merges to the same table.
  Rng rng(3);
  ReliabilityBins whole(30), left(30), right(30);
  for (int i = 0; i < 1000; ++i) {
    const double c = rng.uniform();
    const bool ok = rng.bernoulli(0.6);
    whole.add(c, ok);
    (i % 3 == 0 ? left : right).add(c, ok);
  }
  left.merge(right);
  CHECK(left.count == whole.count);
  CHECK(ece_from_bins(left).ece == doctest::Approx(ece_from_bins(whole).ece).epsilon(1e-12));
  CHECK(left.total() == 1000);

  Tensor probs({1, 2, 1, 2}, std::vector<double>{0.9, 0.3, 0.1, 0.7});
  const ReliabilityBins pb = bin_predictions(probs, LabelMap(1, 1, 2, std::vector<int>{0, 0}));
  CHECK(pb.total() == 2);
  CHECK(pb.count[pb.bin_of(0.9)] == 1);
  CHECK(pb.correct_sum[pb.bin_of(0.9)] == 1.0);
  CHECK(pb.correct_sum[pb.bin_of(0.7)] == 0.0);
}

TEST_CASE("calibration report and reliability csv round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "uqseg_test_cal";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  Rng rng(4);
  std::vector<double> c(500);
  std::vector<std::uint8_t> k(500);
  for (std::size_t i = 0; i < c.size(); ++i) {
    c[i] = rng.uniform();
    k[i] = rng.bernoulli(0.5);
  }
  CalibrationReport r = ece(c, k);
  r.temperature = 1.7;
  const nlohmann::json j = to_json(r);
  CHECK(j.contains("ece"));
  CHECK(j.contains("temperature"));
  REQUIRE(j["bins"].size() == 30);
  for (const char* key : {"lo", "hi", "count", "acc", "conf"}) CHECK(j["bins"][0].contains(key));
  const CalibrationReport back = calibration_report_from_json(j);
  CHECK(back.ece == r.ece);
  CHECK(back.temperature == r.temperature);
  CHECK(back.bins.count == r.bins.count);

  write_calibration_report(dir / "r.json", r);
  std::ifstream in(dir / "r.json");
  CHECK(calibration_report_from_json(nlohmann::json::parse(in)).ece == r.ece);

  write_reliability_csv(dir / "rel.csv", r.bins);
  std::ifstream csv(dir / "rel.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "bin_lo,bin_hi,count,accuracy,confidence");
  const ReliabilityBins rb = read_reliability_csv(dir / "rel.csv");
  CHECK(rb.count == r.bins.count);
  CHECK(ece_from_bins(rb).ece == doctest::Approx(r.ece).epsilon(1e-12));
  std::filesystem::remove_all(dir);
}

namespace {

// Logits z ~ N(0, 1.5^2) per class, label drawn from softmax(z).
void calibrated_logits(std::size_t n, std::size_t classes, double scale, Rng& rng, Tensor& logits, LabelMap& labels) {
  logits = Tensor({n, classes, 1, 1});
  labels = LabelMap(n, 1, 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> p(classes);
    double mx = -INFINITY, z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, logits.at(i, c, 0, 0) = rng.normal(0.0, 1.5));
    for (std::size_t c = 0; c < classes; ++c) z += (p[c] = std::exp(logits.at(i, c, 0, 0) - mx));
    double u = rng.uniform() * z;
    std::size_t k = 0;
    while (k + 1 < classes && (u -= p[k]) > 0.0) ++k;
    labels[i] = static_cast<int>(k);
    for (std::size_t c = 0; c < classes; ++c) logits.at(i, c, 0, 0) *= scale;
  }
}

}  // namespace

TEST_CASE("temperature fit") {
  Rng rng(5);
  Tensor logits;
  LabelMap labels;
  calibrated_logits(20000, 3, 1.0, rng, logits, labels);
  const TemperatureFit one = fit_temperature(logits, labels);
  CHECK(one.temperature >= 0.95);
  CHECK(one.temperature <= 1.05);
  CHECK(one.nll <= one.nll_at_one);

  Tensor doubled = logits;
  doubled *= 2.0;
  const TemperatureFit two = fit_temperature(doubled, labels);
  CHECK(two.temperature >= 1.9);
  CHECK(two.temperature <= 2.1);
  CHECK(two.nll <= two.nll_at_one);
  CHECK(two.nll == doctest::Approx(temperature_nll(doubled, labels, two.temperature)));

  const Tensor scaled = scale_logits(doubled, two.temperature);
  CHECK(argmax_channels(scaled) == argmax_channels(doubled));
  for (double t : {0.05, 0.3, 7.0, 20.0}) CHECK(argmax_channels(scale_logits(logits, t)) == argmax_channels(logits));
  CHECK_THROWS_AS(scale_logits(logits, 0.0), std::invalid_argument);

  CHECK_THROWS_AS(fit_temperature(Tensor({0, 2, 1, 1}), LabelMap(0, 1, 1)), std::invalid_argument);
  Tensor sc({4, 2, 1, 1}, std::vector<double>{1, 2, 3, 4, 0, 0, 0, 0});
  const TemperatureFit single = fit_temperature(sc, LabelMap(4, 1, 1, 0));
  CHECK(single.single_class);
  CHECK(single.temperature > 0.0);
}

TEST_CASE("spearman") {
  const std::vector<double> a{1, 2, 3, 4}, b{10, 20, 30, 40}, c{4, 3, 2, 1};
  CHECK(*spearman(a, b) == doctest::Approx(1.0));
  CHECK(*spearman(a, c) == doctest::Approx(-1.0));
  CHECK_FALSE(spearman(a, std::vector<double>{5, 5, 5, 5}).has_value());
  CHECK_FALSE(spearman(std::vector<double>{1}, std::vector<double>{2}).has_value());
  // Ties take average ranks: ranks (1.5, 1.5, 3) vs (1, 2, 3).
  CHECK(*spearman(std::vector<double>{1, 1, 2}, std::vector<double>{1, 2, 3}) == doctest::Approx(std::sqrt(3.0) / 2.0));
}

TEST_CASE("class-wise f1 against uncertainty") {
  std::vector<F1UncertaintyRecord> same(4, {1, 0.7, 0.2});
  const CalibrationScatter s = classwise_f1_vs_uncertainty(same);
  REQUIRE(s.classes.size() == 1);
  CHECK(s.classes[0].degenerate);
  CHECK_FALSE(s.classes[0].rho_error.has_value());
  CHECK(s.reference.size() == 2);

  std::vector<F1UncertaintyRecord> mono;
  for (int i = 0; i < 6; ++i) mono.push_back({1, 0.9 - 0.1 * i, 0.05 * i});
  mono.push_back({0, 0.99, 0.01});
  mono.push_back({0, 0.95, 0.02});
  const CalibrationScatter m = classwise_f1_vs_uncertainty(mono);
  REQUIRE(m.classes.size() == 2);
  const ClassScatter& crack = m.classes[0].cls == 1 ? m.classes[0] : m.classes[1];
  CHECK(*crack.rho_f1 == doctest::Approx(-1.0));
  CHECK(*crack.rho_error == doctest::Approx(1.0));
  CHECK(crack.uncertainty.size() == 6);
  for (const ClassScatter& cs : m.classes) CHECK(cs.cls != 2);

  const auto path = std::filesystem::temp_directory_path() / "uqseg_scatter.csv";
  write_scatter_csv(path, m);
  CHECK(std::filesystem::file_size(path) > 0);
  std::filesystem::remove(path);
}
