#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "uqseg/variational.hpp"

using namespace uqseg;

TEST_CASE("mc dropout: identity, degenerate rate, bad input") {
  Rng rng(1);
  const std::vector<double> x{3.0, -1.0};
  CHECK(mc_dropout_apply(x, {0.0, false, DropoutScaling::inverted}, rng) == x);
  try {
    mc_dropout_apply(x, {1.0, false, DropoutScaling::inverted}, rng);
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("degenerate dropout rate") != std::string::npos);
  }
  CHECK_THROWS_AS(mc_dropout_apply(x, {-0.1, false, DropoutScaling::inverted}, rng), std::invalid_argument);
  const std::vector<double> bad{1.0, std::numeric_limits<double>::quiet_NaN()};
  CHECK_THROWS_AS(mc_dropout_apply(bad, {0.5, false, DropoutScaling::inverted}, rng), std::invalid_argument);
}

TEST_CASE("mc dropout: inverted scaling is unbiased") {
  Rng rng(2);
  const std::vector<double> ones(1000000, 1.0);
  const auto y = mc_dropout_apply(ones, {0.5, false, DropoutScaling::inverted}, rng);
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  CHECK(mean >= 0.99);
  CHECK(mean <= 1.01);
  CHECK(std::all_of(y.begin(), y.end(), [](double v) { return v == 0.0 || v == 2.0; }));
}

TEST_CASE("mc dropout: same rng state, same mask") {
  Rng a(9), b(9);
  const std::vector<double> x(100, 1.5);
  CHECK(mc_dropout_apply(x, {0.3, false, DropoutScaling::plain}, a) ==
        mc_dropout_apply(x, {0.3, false, DropoutScaling::plain}, b));
}

TEST_CASE("dropout moments: closed-form cases") {
  const MomentPair r = propagate_dropout_moments({2.0, 1.0}, 0.5);
  CHECK(r.mean == doctest::Approx(1.0));
  CHECK(r.variance == doctest::Approx(1.5));
  const MomentPair id = propagate_dropout_moments({-0.7, 2.5}, 0.0);
  CHECK(id.mean == -0.7);
  CHECK(id.variance == 2.5);
  const MomentPair z = propagate_dropout_moments({0.0, 0.0}, 0.3);
  CHECK(z.mean == 0.0);
  CHECK(z.variance == 0.0);
  CHECK_THROWS_AS(propagate_dropout_moments({1.0, -0.1}, 0.3), std::invalid_argument);
}

TEST_CASE("dropout moments agree with sampled masks") {
  Rng rng(3);
  for (int trial = 0; trial < 4; ++trial) {
    const double e = rng.uniform(0.5, 2.0), v = rng.uniform(0.2, 2.0), p = rng.uniform(0.1, 0.7);
    const std::size_t n = 1000000;
    std::vector<double> x(n);
    for (double& xi : x) xi = rng.normal(e, std::sqrt(v));
    const auto y = mc_dropout_apply(x, {p, false, DropoutScaling::plain}, rng);
    double m = 0.0;
    for (double yi : y) m += yi;
    m /= static_cast<double>(n);
    double var = 0.0;
    for (double yi : y) var += (yi - m) * (yi - m);
    var /= static_cast<double>(n);
    const MomentPair ref = propagate_dropout_moments({e, v}, p);
    CHECK(std::abs(m - ref.mean) / ref.mean < 0.01);
    CHECK(std::abs(var - ref.variance) / ref.variance < 0.01);
  }
}

TEST_CASE("dropout regression equals ridge penalty in expectation") {
  Rng rng(4);
  const std::size_t N = 50, D = 5;
  std::vector<double> X(N * D), y(N), w(D);
  for (double& v : X) v = rng.normal();
  for (double& v : y) v = rng.normal();
  for (double& v : w) v = rng.normal();
  for (double keep : {0.3, 0.5, 0.7}) {
    // Multipliers are 0/1 with survival probability `keep`.
    const DropoutSpec spec{1.0 - keep, false, DropoutScaling::plain};
    const std::size_t draws = 100000;
    double acc = 0.0;
    for (std::size_t t = 0; t < draws; ++t) {
      const auto z = sample_dropout_multipliers(N * D, spec, rng);
      double sq = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        double pred = 0.0;
        for (std::size_t j = 0; j < D; ++j) pred += z[i * D + j] * X[i * D + j] * w[j];
        sq += (y[i] - pred) * (y[i] - pred);
      }
      acc += sq;
    }
    const double mc = acc / static_cast<double>(draws);
    double fit = 0.0, penalty = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      double pred = 0.0;
      for (std::size_t j = 0; j < D; ++j) pred += X[i * D + j] * keep * w[j];
      fit += (y[i] - pred) * (y[i] - pred);
    }
    for (std::size_t j = 0; j < D; ++j) {
      double col = 0.0;
      for (std::size_t i = 0; i < N; ++i) col += X[i * D + j] * X[i * D + j];
      penalty += col * (keep * w[j]) * (keep * w[j]);
    }
    const double ridge = fit + (1.0 - keep) / keep * penalty;
    INFO("keep=" << keep << " mc=" << mc << " ridge=" << ridge);
    CHECK(std::abs(mc - ridge) / ridge < 0.01);
  }
}

TEST_CASE("concrete dropout indicator") {
  for (double t : {0.01, 0.1, 1.0, 5.0}) CHECK(concrete_drop_indicator(0.0, t, 0.5) == doctest::Approx(0.5));
  Rng rng(5);
  const double pl = logit(0.3);
  double acc = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) acc += concrete_drop_indicator(pl, 0.01, rng.uniform_open());
  const double mean = acc / n;
  CHECK(mean >= 0.29);
  CHECK(mean <= 0.31);
  // Monotone in u and in p.
  double prev = -1.0;
  for (double u = 0.05; u < 1.0; u += 0.05) {
    const double z = concrete_drop_indicator(pl, 0.1, u);
    CHECK(z >= prev);
    prev = z;
  }
  prev = -1.0;
  for (double p = 0.05; p < 1.0; p += 0.05) {
    const double z = concrete_drop_indicator(logit(p), 0.1, 0.4);
    CHECK(z >= prev);
    prev = z;
  }
}

TEST_CASE("concrete dropout sample") {
  Rng rng(6);
  ConcreteDropoutState s = ConcreteDropoutState::with_rate(0.4);
  const std::vector<double> zero(20, 0.0);
  CHECK(concrete_dropout_sample(zero, s, rng) == zero);
  s.relaxation_temperature = 0.0;
  const std::vector<double> one(3, 1.0);
  CHECK_THROWS_AS(concrete_dropout_sample(one, s, rng), std::invalid_argument);
  CHECK(ConcreteDropoutState::with_rate(0.25).p() == doctest::Approx(0.25));
}

TEST_CASE("concrete regulariser") {
  ConcreteDropoutState s = ConcreteDropoutState::with_rate(0.5);
  s.weight_reg_coeff = 1.0;
  s.dropout_reg_coeff = 2.0;
  CHECK(concrete_dropout_regularizer(s, 0.0, 4) == doctest::Approx(2.0 * -std::log(2.0) / 4.0));
  ConcreteDropoutState small = ConcreteDropoutState::with_rate(1e-9);
  small.weight_reg_coeff = 1.0;
  small.dropout_reg_coeff = 1.0;
  CHECK(concrete_dropout_regularizer(small, 1.0, 1) == doctest::Approx(1.0).epsilon(1e-6));
  s = ConcreteDropoutState::with_rate(0.2);
  const double a = concrete_dropout_regularizer(s, 3.0, 10);
  const double b = concrete_dropout_regularizer(s, 3.0, 20);
  CHECK(b == doctest::Approx(a / 2.0));
  CHECK(std::isfinite(concrete_dropout_regularizer(ConcreteDropoutState::with_rate(0.999999), 1.0, 1)));
}

TEST_CASE("concrete regulariser gradient") {
  ConcreteDropoutState s = ConcreteDropoutState::with_rate(0.3);
  s.weight_reg_coeff = 0.5;
  const double l2 = 2.0;
  const auto g = concrete_dropout_regularizer_grad(s, l2, 7);
  const double h = 1e-6;
  CHECK(g.d_weight_l2 ==
        doctest::Approx((concrete_dropout_regularizer(s, l2 + h, 7) - concrete_dropout_regularizer(s, l2 - h, 7)) / (2 * h)));
  ConcreteDropoutState up = s, down = s;
  up.p_logit += h;
  down.p_logit -= h;
  CHECK(g.d_p_logit ==
        doctest::Approx((concrete_dropout_regularizer(up, l2, 7) - concrete_dropout_regularizer(down, l2, 7)) / (2 * h)));
}

TEST_CASE("bayes-by-backprop weight draws") {
  GaussianVariationalParam q{Tensor({1, 1, 2, 3}, 0.5), Tensor({1, 1, 2, 3}, -1.0), 0.0, 1.0};
  q.mu[2] = -2.0;
  const Tensor eps0({1, 1, 2, 3}, 0.0);
  const Tensor w = bbb_sample_weights(q, eps0);
  CHECK(w.shape() == q.mu.shape());
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(w[i] == q.mu[i]);

  Rng rng(7);
  const Tensor sigma = q.sigma();
  const int n = 100000;
  std::vector<double> sum(q.mu.size()), sq(q.mu.size());
  for (int t = 0; t < n; ++t) {
    const Tensor d = bbb_sample_weights(q, rng);
    for (std::size_t i = 0; i < d.size(); ++i) {
      sum[i] += d[i];
      sq[i] += d[i] * d[i];
    }
  }
  for (std::size_t i = 0; i < q.mu.size(); ++i) {
    const double m = sum[i] / n;
    const double var = sq[i] / n - m * m;
    CHECK(std::abs(var - sigma[i] * sigma[i]) / (sigma[i] * sigma[i]) < 0.03);
  }
}

TEST_CASE("gaussian kl closed form") {
  auto single = [](double mu, double sigma) {
    return GaussianVariationalParam{Tensor({1, 1, 1, 1}, mu), Tensor({1, 1, 1, 1}, inverse_softplus(sigma)), 0.0, 1.0};
  };
  CHECK(bbb_kl(single(0.0, 1.0)) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
  CHECK(bbb_kl(single(1.0, 1.0)) == doctest::Approx(0.5));
  CHECK(bbb_kl(single(0.0, 2.0)) == doctest::Approx(std::log(0.5) + 2.0 - 0.5));
  CHECK(bbb_kl(single(0.0, 2.0)) == doctest::Approx(0.8069).epsilon(1e-4));
  GaussianVariationalParam bad = single(0.0, 1.0);
  bad.prior_sigma = 0.0;
  CHECK_THROWS_AS(bbb_kl(bad), std::invalid_argument);

  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    GaussianVariationalParam q = single(rng.normal(0.0, 2.0), rng.uniform(0.01, 4.0));
    q.prior_mu = rng.normal();
    q.prior_sigma = rng.uniform(0.1, 3.0);
    CHECK(bbb_kl(q) >= 0.0);
  }
}

TEST_CASE("gaussian kl gradient") {
  GaussianVariationalParam q{Tensor({1, 1, 1, 2}, 0.0), Tensor({1, 1, 1, 2}, 0.0), 0.2, 1.5};
  q.mu[0] = 0.7;
  q.mu[1] = -1.1;
  q.rho[0] = -0.4;
  q.rho[1] = 1.3;
  const KlGrad g = bbb_kl_grad(q);
  const double h = 1e-6;
  for (std::size_t i = 0; i < 2; ++i) {
    GaussianVariationalParam a = q, b = q;
    a.mu[i] += h;
    b.mu[i] -= h;
    CHECK(g.d_mu[i] == doctest::Approx((bbb_kl(a) - bbb_kl(b)) / (2 * h)));
    a = q;
    b = q;
    a.rho[i] += h;
    b.rho[i] -= h;
    CHECK(g.d_rho[i] == doctest::Approx((bbb_kl(a) - bbb_kl(b)) / (2 * h)));
  }
}
