#pragma once

#include <span>
#include <vector>

#include "uqseg/rng.hpp"
#include "uqseg/tensor.hpp"

namespace uqseg {

enum class DropoutScaling { inverted, plain };

/// Bernoulli dropout configuration. `p` is the drop probability.
struct DropoutSpec {
  double p = 0.5;
  bool learnable = false;
  DropoutScaling scaling = DropoutScaling::inverted;

  /// Throws std::invalid_argument unless 0 <= p < 1.
  void validate() const;
};

/// Relaxed-Bernoulli dropout with a learnable rate. The rate is stored as an
/// unconstrained logit; p = sigmoid(p_logit) is always interior to (0, 1).
struct ConcreteDropoutState {
  double p_logit = 0.0;
  double relaxation_temperature = 0.1;
  double weight_reg_coeff = 1e-4;
  double dropout_reg_coeff = 1.0;

  double p() const;
  static ConcreteDropoutState with_rate(double p);
};

/// Factorized Gaussian over a weight tensor, sigma = softplus(rho).
struct GaussianVariationalParam {
  Tensor mu;
  Tensor rho;
  double prior_mu = 0.0;
  double prior_sigma = 1.0;

  Tensor sigma() const;
};

struct MomentPair {
  double mean = 0.0;
  double variance = 0.0;
};

double sigmoid(double x);
double logit(double p);
double softplus(double x);
double inverse_softplus(double y);

/// Per-unit multipliers for one dropout draw: 0 for dropped units, 1 or
/// 1/(1-p) for survivors depending on the scaling mode.
std::vector<double> sample_dropout_multipliers(std::size_t count, const DropoutSpec& spec, Rng& rng);

std::vector<double> mc_dropout_apply(std::span<const double> x, const DropoutSpec& spec, Rng& rng);

/// Mean and variance of a unit after plain (non-inverted) dropout with drop
/// probability p, given the input moments.
MomentPair propagate_dropout_moments(MomentPair m, double p);

/// Relaxed drop indicator z = sigmoid((logit p + logit u) / temperature).
double concrete_drop_indicator(double p_logit, double temperature, double u);

std::vector<double> concrete_dropout_sample(std::span<const double> x, const ConcreteDropoutState& state,
                                            Rng& rng);

struct ConcreteRegularizerGrad {
  double d_weight_l2 = 0.0;
  double d_p_logit = 0.0;
};

/// weight_reg_coeff * weight_l2 / (1 - p) / n_data
///   + dropout_reg_coeff * (p log p + (1 - p) log(1 - p)) / n_data
double concrete_dropout_regularizer(const ConcreteDropoutState& state, double weight_l2, std::size_t n_data);
ConcreteRegularizerGrad concrete_dropout_regularizer_grad(const ConcreteDropoutState& state, double weight_l2,
                                                          std::size_t n_data);

/// w = mu + softplus(rho) * eps with eps ~ N(0, I).
Tensor bbb_sample_weights(const GaussianVariationalParam& param, Rng& rng);
/// Same map with caller-supplied noise (eps must match mu's shape).
Tensor bbb_sample_weights(const GaussianVariationalParam& param, const Tensor& eps);

/// Closed-form KL(q || prior) summed over elements.
double bbb_kl(const GaussianVariationalParam& param);

struct KlGrad {
  Tensor d_mu;
  Tensor d_rho;
};
KlGrad bbb_kl_grad(const GaussianVariationalParam& param);

}  // namespace uqseg
