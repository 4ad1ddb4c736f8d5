#include "uqseg/variational.hpp"

#include <cmath>
#include <stdexcept>

namespace uqseg {

void DropoutSpec::validate() const {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("degenerate dropout rate");
}

double ConcreteDropoutState::p() const { return sigmoid(p_logit); }

ConcreteDropoutState ConcreteDropoutState::with_rate(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("concrete dropout rate must lie in (0, 1)");
  ConcreteDropoutState s;
  s.p_logit = logit(p);
  return s;
}

Tensor GaussianVariationalParam::sigma() const {
  Tensor s(rho.shape());
  for (std::size_t i = 0; i < rho.size(); ++i) s[i] = softplus(rho[i]);
  return s;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logit(double p) { return std::log(p) - std::log1p(-p); }

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double inverse_softplus(double y) {
  if (!(y > 0.0)) throw std::invalid_argument("inverse_softplus: argument must be positive");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

std::vector<double> sample_dropout_multipliers(std::size_t count, const DropoutSpec& spec, Rng& rng) {
  spec.validate();
  const double keep_scale = spec.scaling == DropoutScaling::inverted ? 1.0 / (1.0 - spec.p) : 1.0;
  std::vector<double> m(count, keep_scale);
  if (spec.p == 0.0) return m;
  for (double& v : m) {
    if (rng.uniform() < spec.p) v = 0.0;
  }
  return m;
}

std::vector<double> mc_dropout_apply(std::span<const double> x, const DropoutSpec& spec, Rng& rng) {
  spec.validate();
  for (double v : x) {
    if (!std::isfinite(v)) throw std::invalid_argument("mc_dropout_apply: non-finite input");
  }
  std::vector<double> out = sample_dropout_multipliers(x.size(), spec, rng);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] *= x[i];
  return out;
}

MomentPair propagate_dropout_moments(MomentPair m, double p) {
  if (m.variance < 0.0) throw std::invalid_argument("propagate_dropout_moments: negative variance");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("propagate_dropout_moments: p outside [0, 1]");
  const double keep = 1.0 - p;
  return {m.mean * keep, m.variance * p * keep + m.variance * keep * keep + m.mean * m.mean * p * keep};
}

double concrete_drop_indicator(double p_logit, double temperature, double u) {
  return sigmoid((p_logit + logit(u)) / temperature);
}

std::vector<double> concrete_dropout_sample(std::span<const double> x, const ConcreteDropoutState& state,
                                            Rng& rng) {
  if (!(state.relaxation_temperature > 0.0)) {
    throw std::invalid_argument("concrete_dropout_sample: temperature must be positive");
  }
  const double keep = 1.0 - state.p();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double z = concrete_drop_indicator(state.p_logit, state.relaxation_temperature, rng.uniform_open());
    out[i] = x[i] * (1.0 - z) / keep;
  }
  return out;
}

namespace {
void check_n_data(std::size_t n_data) {
  if (n_data < 1) throw std::invalid_argument("concrete_dropout_regularizer: n_data must be >= 1");
}
}  // namespace

double concrete_dropout_regularizer(const ConcreteDropoutState& state, double weight_l2, std::size_t n_data) {
  check_n_data(n_data);
  const double p = state.p();
  const double n = static_cast<double>(n_data);
  // log(1 - sigmoid(l)) = -softplus(l), log(sigmoid(l)) = -softplus(-l)
  const double log_p = -softplus(-state.p_logit);
  const double log_keep = -softplus(state.p_logit);
  const double weight_term = state.weight_reg_coeff * weight_l2 / (1.0 - p) / n;
  const double entropy_term = state.dropout_reg_coeff * (p * log_p + (1.0 - p) * log_keep) / n;
  return weight_term + entropy_term;
}

ConcreteRegularizerGrad concrete_dropout_regularizer_grad(const ConcreteDropoutState& state, double weight_l2,
                                                          std::size_t n_data) {
  check_n_data(n_data);
  const double p = state.p();
  const double n = static_cast<double>(n_data);
  ConcreteRegularizerGrad g;
  g.d_weight_l2 = state.weight_reg_coeff / (1.0 - p) / n;
  // d/dl [1/(1-p)] = p/(1-p); d/dl [p log p + (1-p) log(1-p)] = l * p (1-p)
  g.d_p_logit = state.weight_reg_coeff * weight_l2 * p / (1.0 - p) / n +
                state.dropout_reg_coeff * state.p_logit * p * (1.0 - p) / n;
  return g;
}

Tensor bbb_sample_weights(const GaussianVariationalParam& param, Rng& rng) {
  Tensor eps(param.mu.shape());
  for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
  return bbb_sample_weights(param, eps);
}

Tensor bbb_sample_weights(const GaussianVariationalParam& param, const Tensor& eps) {
  if (!(param.mu.shape() == param.rho.shape()) || !(eps.shape() == param.mu.shape())) {
    throw std::invalid_argument("bbb_sample_weights: shape mismatch");
  }
  Tensor w(param.mu.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = param.mu[i] + softplus(param.rho[i]) * eps[i];
  return w;
}

double bbb_kl(const GaussianVariationalParam& param) {
  if (!(param.prior_sigma > 0.0)) throw std::invalid_argument("bbb_kl: prior sigma must be positive");
  if (!(param.mu.shape() == param.rho.shape())) throw std::invalid_argument("bbb_kl: shape mismatch");
  const double ps2 = param.prior_sigma * param.prior_sigma;
  double kl = 0.0;
  for (std::size_t i = 0; i < param.mu.size(); ++i) {
    const double s = softplus(param.rho[i]);
    const double d = param.mu[i] - param.prior_mu;
    kl += std::log(param.prior_sigma / s) + (s * s + d * d) / (2.0 * ps2) - 0.5;
  }
  return kl;
}

KlGrad bbb_kl_grad(const GaussianVariationalParam& param) {
  if (!(param.prior_sigma > 0.0)) throw std::invalid_argument("bbb_kl: prior sigma must be positive");
  const double ps2 = param.prior_sigma * param.prior_sigma;
  KlGrad g{Tensor(param.mu.shape()), Tensor(param.rho.shape())};
  for (std::size_t i = 0; i < param.mu.size(); ++i) {
    const double s = softplus(param.rho[i]);
    g.d_mu[i] = (param.mu[i] - param.prior_mu) / ps2;
    g.d_rho[i] = (-1.0 / s + s / ps2) * sigmoid(param.rho[i]);
  }
  return g;
}

}  // namespace uqseg
