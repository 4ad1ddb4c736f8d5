#pragma once

#include <optional>
#include <string>
#include <vector>

#include "uqseg/rng.hpp"
#include "uqseg/tensor.hpp"
#include "uqseg/variational.hpp"

namespace uqseg::nn {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool decay = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool wd = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), decay(wd) {}
  void zero_grad() { grad.fill(0.0); }
};

/// Per-pass switches. `sampling` draws dropout masks / weight noise; `train`
/// uses batch statistics in normalisation layers and keeps what backward needs.
struct PassContext {
  bool sampling = false;
  bool train = false;
  bool zero_weight_noise = false;
  Rng* rng = nullptr;
};

enum class VariationalMode { mcd, concrete, bbb };

std::string to_string(VariationalMode m);
VariationalMode variational_mode_from_string(const std::string& s);

/// Weight tensor that is either a point estimate or a factorized Gaussian.
class WeightParam {
 public:
  WeightParam() = default;
  WeightParam(std::string name, Shape4 shape, double init_sd, Rng& rng);

  /// Turns the weight into a Gaussian with the current values as means.
  void make_bayesian(double init_rho, double prior_mu, double prior_sigma);
  bool bayesian() const { return rho_.has_value(); }

  /// Effective weights for this pass (mu, or mu + softplus(rho) * eps).
  const Tensor& materialize(const PassContext& ctx);
  /// Weights returned by the most recent materialize().
  const Tensor& current() const { return noisy_ ? sampled_ : mu_.value; }
  /// Routes a gradient w.r.t. the last materialized weights to mu / rho.
  void accumulate(const Tensor& grad_w);

  GaussianVariationalParam posterior() const;
  double kl() const;
  void add_kl_grad(double scale);

  Parameter& mu() { return mu_; }
  const Parameter& mu() const { return mu_; }
  void collect(std::vector<Parameter*>& out);

 private:
  Parameter mu_;
  std::optional<Parameter> rho_;
  double prior_mu_ = 0.0;
  double prior_sigma_ = 1.0;
  Tensor eps_;
  Tensor sampled_;
  bool noisy_ = false;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
         std::size_t pad, bool bias, Rng& rng);

  Tensor forward(const Tensor& x, const PassContext& ctx);
  Tensor backward(const Tensor& grad_out);
  WeightParam& weight() { return weight_; }
  void collect(std::vector<Parameter*>& out);

 private:
  std::size_t in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  WeightParam weight_;
  std::optional<Parameter> bias_;
  Shape4 in_shape_;
  std::vector<Tensor> cols_;
};

/// Transposed convolution; output extent (H - 1) * stride - 2 * pad + kernel + output_pad.
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(std::string name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                  std::size_t pad, std::size_t output_pad, bool bias, Rng& rng);

  Tensor forward(const Tensor& x, const PassContext& ctx);
  Tensor backward(const Tensor& grad_out);
  WeightParam& weight() { return weight_; }
  void collect(std::vector<Parameter*>& out);

 private:
  std::size_t in_ = 0, out_ = 0, k_ = 3, stride_ = 2, pad_ = 1, output_pad_ = 1;
  WeightParam weight_;
  std::optional<Parameter> bias_;
  Tensor input_;
};

class Linear {
 public:
  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out, Rng& rng);

  Tensor forward(const Tensor& x, const PassContext& ctx);
  Tensor backward(const Tensor& grad_out);
  WeightParam& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  void collect(std::vector<Parameter*>& out);

 private:
  std::size_t in_ = 0, out_ = 0;
  WeightParam weight_;
  Parameter bias_;
  Tensor input_;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, std::size_t channels);

  /// Batch statistics when ctx.train, running statistics otherwise.
  Tensor forward(const Tensor& x, const PassContext& ctx);
  Tensor backward(const Tensor& grad_out);
  void collect(std::vector<Parameter*>& out);
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }

 private:
  std::size_t channels_ = 0;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
  Parameter gamma_, beta_;
  Tensor running_mean_, running_var_;
  Tensor x_hat_;
  std::vector<double> inv_std_;
};

class ReLU {
 public:
  Tensor forward(const Tensor& x, const PassContext& ctx);
  Tensor backward(const Tensor& grad_out) const;

 private:
  Tensor output_;
};

/// Optional stochastic regularizer inserted between layers: Bernoulli
/// (MC) dropout, concrete dropout, or nothing.
class StochasticSite {
 public:
  enum class Kind { none, bernoulli, concrete };

  StochasticSite() = default;
  explicit StochasticSite(std::string name) : name_(std::move(name)) {}

  void set_bernoulli(const DropoutSpec& spec);
  void set_concrete(const ConcreteDropoutState& state);
  void disable() { kind_ = Kind::none; }

  Kind kind() const { return kind_; }
  bool active() const { return kind_ != Kind::none; }
  double rate() const;
  /// Overrides the drop probability (for concrete sites, the logit is reset).
  void set_rate(double p);
  const ConcreteDropoutState& concrete_state() const { return concrete_; }
  Parameter* p_logit() { return kind_ == Kind::concrete ? &p_logit_ : nullptr; }
  /// Copies the learnable logit back into the state (after optimizer steps).
  void sync_from_parameter();

  Tensor forward(const Tensor& x, const PassContext& ctx);
  Tensor backward(const Tensor& grad_out);

 private:
  std::string name_;
  Kind kind_ = Kind::none;
  DropoutSpec spec_;
  ConcreteDropoutState concrete_;
  Parameter p_logit_;
  bool masked_ = false;
  std::vector<double> multipliers_;
  std::vector<double> z_;
  Tensor input_;
};

/// Column buffer for a k x k / stride / pad convolution over one CHW image.
void im2col(const double* image, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, double* cols);
void col2im(const double* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, double* image);

}  // namespace uqseg::nn
