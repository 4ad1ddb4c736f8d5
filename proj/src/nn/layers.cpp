#include "uqseg/nn/layers.hpp"

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>

namespace uqseg::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

Tensor init_normal(Shape4 shape, double sd, Rng& rng) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = sd * rng.normal();
  return t;
}

void require_rng(const PassContext& ctx) {
  if (ctx.sampling && ctx.rng == nullptr) throw std::invalid_argument("sampling pass requires an rng");
}

}  // namespace

std::string to_string(VariationalMode m) {
  switch (m) {
    case VariationalMode::mcd: return "mcd";
    case VariationalMode::concrete: return "concrete";
    case VariationalMode::bbb: return "bbb";
  }
  return "unknown";
}

VariationalMode variational_mode_from_string(const std::string& s) {
  if (s == "mcd") return VariationalMode::mcd;
  if (s == "concrete") return VariationalMode::concrete;
  if (s == "bbb") return VariationalMode::bbb;
  throw std::invalid_argument("unknown variational mode '" + s + "'");
}

// ---------------------------------------------------------------- WeightParam

WeightParam::WeightParam(std::string name, Shape4 shape, double init_sd, Rng& rng)
    : mu_(std::move(name), init_normal(shape, init_sd, rng)) {}

void WeightParam::make_bayesian(double init_rho, double prior_mu, double prior_sigma) {
  rho_.emplace(mu_.name + ".rho", Tensor(mu_.value.shape(), init_rho), false);
  prior_mu_ = prior_mu;
  prior_sigma_ = prior_sigma;
}

const Tensor& WeightParam::materialize(const PassContext& ctx) {
  noisy_ = bayesian() && ctx.sampling && !ctx.zero_weight_noise;
  if (!noisy_) return mu_.value;
  require_rng(ctx);
  if (!(eps_.shape() == mu_.value.shape())) {
    eps_ = Tensor(mu_.value.shape());
    sampled_ = Tensor(mu_.value.shape());
  }
  for (std::size_t i = 0; i < eps_.size(); ++i) {
    eps_[i] = ctx.rng->normal();
    sampled_[i] = mu_.value[i] + softplus(rho_->value[i]) * eps_[i];
  }
  return sampled_;
}

void WeightParam::accumulate(const Tensor& grad_w) {
  mu_.grad += grad_w;
  if (!noisy_) return;
  for (std::size_t i = 0; i < grad_w.size(); ++i) {
    rho_->grad[i] += grad_w[i] * eps_[i] * sigmoid(rho_->value[i]);
  }
}

GaussianVariationalParam WeightParam::posterior() const {
  if (!bayesian()) throw std::logic_error("posterior() on a point-estimate weight");
  return {mu_.value, rho_->value, prior_mu_, prior_sigma_};
}

double WeightParam::kl() const { return bayesian() ? bbb_kl(posterior()) : 0.0; }

void WeightParam::add_kl_grad(double scale) {
  if (!bayesian()) return;
  const KlGrad g = bbb_kl_grad(posterior());
  for (std::size_t i = 0; i < g.d_mu.size(); ++i) {
    mu_.grad[i] += scale * g.d_mu[i];
    rho_->grad[i] += scale * g.d_rho[i];
  }
}

void WeightParam::collect(std::vector<Parameter*>& out) {
  out.push_back(&mu_);
  if (rho_) out.push_back(&*rho_);
}

// ---------------------------------------------------------------- im2col

void im2col(const double* image, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, double* cols) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          double* dst = row + oy * out_w;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill_n(dst, out_w, 0.0);
            continue;
          }
          const double* src = image + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const double* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, double* image) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          double* dst = image + (c * h + static_cast<std::size_t>(iy)) * w;
          const double* src = row + oy * out_w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::string name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
               std::size_t pad, bool bias, Rng& rng)
    : in_(in),
      out_(out),
      k_(kernel),
      stride_(stride),
      pad_(pad),
      weight_(name + ".weight", {out, in, kernel, kernel}, std::sqrt(2.0 / static_cast<double>(in * kernel * kernel)),
              rng) {
  if (bias) bias_.emplace(name + ".bias", Tensor({1, out, 1, 1}));
}

Tensor Conv2d::forward(const Tensor& x, const PassContext& ctx) {
  const Shape4& s = x.shape();
  if (s.c != in_) throw std::invalid_argument("conv2d: expected " + std::to_string(in_) + " channels, got " + s.str());
  const std::size_t oh = (s.h + 2 * pad_ - k_) / stride_ + 1;
  const std::size_t ow = (s.w + 2 * pad_ - k_) / stride_ + 1;
  const std::size_t ckk = in_ * k_ * k_;
  const std::size_t plane = oh * ow;
  const bool pointwise = k_ == 1 && stride_ == 1 && pad_ == 0;
  const Tensor& w = weight_.materialize(ctx);
  ConstMapMat W(w.data(), static_cast<long>(out_), static_cast<long>(ckk));

  Tensor y({s.n, out_, oh, ow});
  in_shape_ = s;
  cols_.assign(ctx.train ? s.n : 0, Tensor());
  Tensor scratch;
  for (std::size_t n = 0; n < s.n; ++n) {
    const double* src = x.data() + x.index(n, 0, 0, 0);
    if (!pointwise) {
      Tensor& cols = ctx.train ? cols_[n] : scratch;
      if (cols.size() != ckk * plane) cols = Tensor({1, 1, ckk, plane});
      im2col(src, in_, s.h, s.w, k_, stride_, pad_, oh, ow, cols.data());
      src = cols.data();
    } else if (ctx.train) {
      cols_[n] = Tensor({1, 1, ckk, plane}, std::vector<double>(src, src + ckk * plane));
    }
    ConstMapMat X(src, static_cast<long>(ckk), static_cast<long>(plane));
    MapMat Y(y.data() + y.index(n, 0, 0, 0), static_cast<long>(out_), static_cast<long>(plane));
    Y.noalias() = W * X;
    if (bias_) {
      for (std::size_t c = 0; c < out_; ++c) Y.row(static_cast<long>(c)).array() += bias_->value[c];
    }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  const Shape4& s = in_shape_;
  if (cols_.size() != s.n) throw std::logic_error("conv2d: backward without a training forward pass");
  const Shape4& g = grad_out.shape();
  const std::size_t ckk = in_ * k_ * k_;
  const std::size_t plane = g.h * g.w;
  const bool pointwise = k_ == 1 && stride_ == 1 && pad_ == 0;
  ConstMapMat W(weight_.current().data(), static_cast<long>(out_), static_cast<long>(ckk));

  Tensor grad_w(weight_.mu().value.shape());
  MapMat GW(grad_w.data(), static_cast<long>(out_), static_cast<long>(ckk));
  Tensor grad_x(s);
  Tensor gcols({1, 1, ckk, plane});
  for (std::size_t n = 0; n < s.n; ++n) {
    ConstMapMat G(grad_out.data() + grad_out.index(n, 0, 0, 0), static_cast<long>(out_), static_cast<long>(plane));
    ConstMapMat X(cols_[n].data(), static_cast<long>(ckk), static_cast<long>(plane));
    GW.noalias() += G * X.transpose();
    if (bias_) {
      for (std::size_t c = 0; c < out_; ++c) bias_->grad[c] += G.row(static_cast<long>(c)).sum();
    }
    double* gx = grad_x.data() + grad_x.index(n, 0, 0, 0);
    if (pointwise) {
      MapMat GX(gx, static_cast<long>(ckk), static_cast<long>(plane));
      GX.noalias() = W.transpose() * G;
    } else {
      MapMat GC(gcols.data(), static_cast<long>(ckk), static_cast<long>(plane));
      GC.noalias() = W.transpose() * G;
      col2im(gcols.data(), in_, s.h, s.w, k_, stride_, pad_, g.h, g.w, gx);
    }
  }
  weight_.accumulate(grad_w);
  return grad_x;
}

void Conv2d::collect(std::vector<Parameter*>& out) {
  weight_.collect(out);
  if (bias_) out.push_back(&*bias_);
}

// ---------------------------------------------------------------- ConvTranspose2d

ConvTranspose2d::ConvTranspose2d(std::string name, std::size_t in, std::size_t out, std::size_t kernel,
                                 std::size_t stride, std::size_t pad, std::size_t output_pad, bool bias, Rng& rng)
    : in_(in),
      out_(out),
      k_(kernel),
      stride_(stride),
      pad_(pad),
      output_pad_(output_pad),
      weight_(name + ".weight", {in, out, kernel, kernel},
              std::sqrt(2.0 * static_cast<double>(stride * stride) / static_cast<double>(in * kernel * kernel)), rng) {
  if (output_pad >= stride) throw std::invalid_argument("conv_transpose2d: output padding must be < stride");
  if (bias) bias_.emplace(name + ".bias", Tensor({1, out, 1, 1}));
}

Tensor ConvTranspose2d::forward(const Tensor& x, const PassContext& ctx) {
  const Shape4& s = x.shape();
  if (s.c != in_) {
    throw std::invalid_argument("conv_transpose2d: expected " + std::to_string(in_) + " channels, got " + s.str());
  }
  const std::size_t oh = (s.h - 1) * stride_ + k_ + output_pad_ - 2 * pad_;
  const std::size_t ow = (s.w - 1) * stride_ + k_ + output_pad_ - 2 * pad_;
  const std::size_t okk = out_ * k_ * k_;
  const std::size_t plane = s.h * s.w;
  const Tensor& w = weight_.materialize(ctx);
  ConstMapMat W(w.data(), static_cast<long>(in_), static_cast<long>(okk));

  Tensor y({s.n, out_, oh, ow});
  Tensor cols({1, 1, okk, plane});
  MapMat CO(cols.data(), static_cast<long>(okk), static_cast<long>(plane));
  for (std::size_t n = 0; n < s.n; ++n) {
    ConstMapMat X(x.data() + x.index(n, 0, 0, 0), static_cast<long>(in_), static_cast<long>(plane));
    CO.noalias() = W.transpose() * X;
    double* dst = y.data() + y.index(n, 0, 0, 0);
    col2im(cols.data(), out_, oh, ow, k_, stride_, pad_, s.h, s.w, dst);
    if (bias_) {
      for (std::size_t c = 0; c < out_; ++c) {
        for (std::size_t i = 0; i < oh * ow; ++i) dst[c * oh * ow + i] += bias_->value[c];
      }
    }
  }
  input_ = ctx.train ? x : Tensor();
  return y;
}

Tensor ConvTranspose2d::backward(const Tensor& grad_out) {
  const Shape4& s = input_.shape();
  if (input_.empty()) throw std::logic_error("conv_transpose2d: backward without a training forward pass");
  const Shape4& g = grad_out.shape();
  const std::size_t okk = out_ * k_ * k_;
  const std::size_t plane = s.h * s.w;
  ConstMapMat W(weight_.current().data(), static_cast<long>(in_), static_cast<long>(okk));

  Tensor grad_w(weight_.mu().value.shape());
  MapMat GW(grad_w.data(), static_cast<long>(in_), static_cast<long>(okk));
  Tensor grad_x(s);
  Tensor gcols({1, 1, okk, plane});
  ConstMapMat GC(gcols.data(), static_cast<long>(okk), static_cast<long>(plane));
  for (std::size_t n = 0; n < s.n; ++n) {
    const double* go = grad_out.data() + grad_out.index(n, 0, 0, 0);
    im2col(go, out_, g.h, g.w, k_, stride_, pad_, s.h, s.w, gcols.data());
    ConstMapMat X(input_.data() + input_.index(n, 0, 0, 0), static_cast<long>(in_), static_cast<long>(plane));
    GW.noalias() += X * GC.transpose();
    MapMat GX(grad_x.data() + grad_x.index(n, 0, 0, 0), static_cast<long>(in_), static_cast<long>(plane));
    GX.noalias() = W * GC;
    if (bias_) {
      for (std::size_t c = 0; c < out_; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.h * g.w; ++i) acc += go[c * g.h * g.w + i];
        bias_->grad[c] += acc;
      }
    }
  }
  weight_.accumulate(grad_w);
  return grad_x;
}

void ConvTranspose2d::collect(std::vector<Parameter*>& out) {
  weight_.collect(out);
  if (bias_) out.push_back(&*bias_);
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::string name, std::size_t in, std::size_t out, Rng& rng)
    : in_(in),
      out_(out),
      weight_(name + ".weight", {out, in, 1, 1}, std::sqrt(2.0 / static_cast<double>(in)), rng),
      bias_(name + ".bias", Tensor({1, out, 1, 1})) {}

Tensor Linear::forward(const Tensor& x, const PassContext& ctx) {
  const Shape4& s = x.shape();
  if (s.c * s.h * s.w != in_) {
    throw std::invalid_argument("linear: expected " + std::to_string(in_) + " features, got " + s.str());
  }
  const Tensor& w = weight_.materialize(ctx);
  ConstMapMat W(w.data(), static_cast<long>(out_), static_cast<long>(in_));
  ConstMapMat X(x.data(), static_cast<long>(s.n), static_cast<long>(in_));
  Tensor y({s.n, out_, 1, 1});
  MapMat Y(y.data(), static_cast<long>(s.n), static_cast<long>(out_));
  Y.noalias() = X * W.transpose();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t o = 0; o < out_; ++o) y[n * out_ + o] += bias_.value[o];
  }
  input_ = ctx.train ? x : Tensor();
  return y;
}

Tensor Linear::backward(const Tensor& grad_out) {
  if (input_.empty()) throw std::logic_error("linear: backward without a training forward pass");
  const std::size_t n = input_.shape().n;
  ConstMapMat W(weight_.current().data(), static_cast<long>(out_), static_cast<long>(in_));
  ConstMapMat X(input_.data(), static_cast<long>(n), static_cast<long>(in_));
  ConstMapMat G(grad_out.data(), static_cast<long>(n), static_cast<long>(out_));
  Tensor grad_w(weight_.mu().value.shape());
  MapMat GW(grad_w.data(), static_cast<long>(out_), static_cast<long>(in_));
  GW.noalias() = G.transpose() * X;
  weight_.accumulate(grad_w);
  for (std::size_t o = 0; o < out_; ++o) bias_.grad[o] += G.col(static_cast<long>(o)).sum();
  Tensor grad_x(input_.shape());
  MapMat GX(grad_x.data(), static_cast<long>(n), static_cast<long>(in_));
  GX.noalias() = G * W;
  return grad_x;
}

void Linear::collect(std::vector<Parameter*>& out) {
  weight_.collect(out);
  out.push_back(&bias_);
}

// ---------------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(std::string name, std::size_t channels)
    : channels_(channels),
      gamma_(name + ".gamma", Tensor({1, channels, 1, 1}, 1.0)),
      beta_(name + ".beta", Tensor({1, channels, 1, 1}, 0.0)),
      running_mean_({1, channels, 1, 1}, 0.0),
      running_var_({1, channels, 1, 1}, 1.0) {}

Tensor BatchNorm2d::forward(const Tensor& x, const PassContext& ctx) {
  const Shape4& s = x.shape();
  if (s.c != channels_) throw std::invalid_argument("batchnorm: channel mismatch " + s.str());
  const std::size_t hw = s.spatial();
  const double count = static_cast<double>(s.n * hw);
  Tensor y(s);
  if (ctx.train) {
    x_hat_ = Tensor(s);
    inv_std_.assign(channels_, 0.0);
  }
  for (std::size_t c = 0; c < channels_; ++c) {
    double mean = running_mean_[c];
    double var = running_var_[c];
    if (ctx.train) {
      double acc = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) {
        for (double v : x.plane(n, c)) acc += v;
      }
      mean = acc / count;
      double sq = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) {
        for (double v : x.plane(n, c)) sq += (v - mean) * (v - mean);
      }
      var = sq / count;
      const double unbiased = count > 1.0 ? sq / (count - 1.0) : var;
      running_mean_[c] = (1.0 - momentum_) * running_mean_[c] + momentum_ * mean;
      running_var_[c] = (1.0 - momentum_) * running_var_[c] + momentum_ * unbiased;
    }
    const double inv = 1.0 / std::sqrt(var + eps_);
    if (ctx.train) inv_std_[c] = inv;
    for (std::size_t n = 0; n < s.n; ++n) {
      const auto src = x.plane(n, c);
      auto dst = y.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        const double xh = (src[i] - mean) * inv;
        if (ctx.train) x_hat_[x_hat_.index(n, c, 0, 0) + i] = xh;
        dst[i] = gamma_.value[c] * xh + beta_.value[c];
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
  if (x_hat_.empty()) throw std::logic_error("batchnorm: backward without a training forward pass");
  const Shape4& s = grad_out.shape();
  const std::size_t hw = s.spatial();
  const double count = static_cast<double>(s.n * hw);
  Tensor grad_x(s);
  for (std::size_t c = 0; c < channels_; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const auto g = grad_out.plane(n, c);
      const auto xh = x_hat_.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        sum_g += g[i];
        sum_gx += g[i] * xh[i];
      }
    }
    gamma_.grad[c] += sum_gx;
    beta_.grad[c] += sum_g;
    const double k = gamma_.value[c] * inv_std_[c] / count;
    for (std::size_t n = 0; n < s.n; ++n) {
      const auto g = grad_out.plane(n, c);
      const auto xh = x_hat_.plane(n, c);
      auto dst = grad_x.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) dst[i] = k * (count * g[i] - sum_g - xh[i] * sum_gx);
    }
  }
  return grad_x;
}

void BatchNorm2d::collect(std::vector<Parameter*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

// ---------------------------------------------------------------- ReLU

Tensor ReLU::forward(const Tensor& x, const PassContext& ctx) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (ctx.train) output_ = y;
  return y;
}

Tensor ReLU::backward(const Tensor& grad_out) const {
  if (output_.empty()) throw std::logic_error("relu: backward without a training forward pass");
  Tensor g(grad_out.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = output_[i] > 0.0 ? grad_out[i] : 0.0;
  return g;
}

// ---------------------------------------------------------------- StochasticSite

void StochasticSite::set_bernoulli(const DropoutSpec& spec) {
  spec.validate();
  spec_ = spec;
  kind_ = Kind::bernoulli;
}

void StochasticSite::set_concrete(const ConcreteDropoutState& state) {
  if (!(state.relaxation_temperature > 0.0)) throw std::invalid_argument("concrete dropout: temperature must be positive");
  concrete_ = state;
  p_logit_ = Parameter(name_ + ".p_logit", Tensor({1, 1, 1, 1}, state.p_logit), false);
  kind_ = Kind::concrete;
}

double StochasticSite::rate() const {
  switch (kind_) {
    case Kind::none: return 0.0;
    case Kind::bernoulli: return spec_.p;
    case Kind::concrete: return sigmoid(p_logit_.value[0]);
  }
  return 0.0;
}

void StochasticSite::set_rate(double p) {
  if (kind_ == Kind::bernoulli) {
    DropoutSpec s = spec_;
    s.p = p;
    set_bernoulli(s);
  } else if (kind_ == Kind::concrete) {
    concrete_.p_logit = logit(p);
    p_logit_.value[0] = concrete_.p_logit;
  }
}

void StochasticSite::sync_from_parameter() {
  if (kind_ == Kind::concrete) concrete_.p_logit = p_logit_.value[0];
}

Tensor StochasticSite::forward(const Tensor& x, const PassContext& ctx) {
  masked_ = false;
  if (kind_ == Kind::none || !ctx.sampling) return x;
  require_rng(ctx);
  Tensor y(x.shape());
  if (kind_ == Kind::bernoulli) {
    if (spec_.p == 0.0) return x;
    multipliers_ = sample_dropout_multipliers(x.size(), spec_, *ctx.rng);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * multipliers_[i];
  } else {
    sync_from_parameter();
    const double keep = 1.0 - concrete_.p();
    z_.resize(x.size());
    multipliers_.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      z_[i] = concrete_drop_indicator(concrete_.p_logit, concrete_.relaxation_temperature, ctx.rng->uniform_open());
      multipliers_[i] = (1.0 - z_[i]) / keep;
      y[i] = x[i] * multipliers_[i];
    }
    if (ctx.train) input_ = x;
  }
  masked_ = true;
  return y;
}

Tensor StochasticSite::backward(const Tensor& grad_out) {
  if (!masked_) return grad_out;
  Tensor g(grad_out.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * multipliers_[i];
  if (kind_ == Kind::concrete && !input_.empty()) {
    const double p = concrete_.p();
    const double t = concrete_.relaxation_temperature;
    double acc = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double z = z_[i];
      acc += grad_out[i] * input_[i] * (-z * (1.0 - z) / t + (1.0 - z) * p);
    }
    p_logit_.grad[0] += acc / (1.0 - p);
  }
  return g;
}

}  // namespace uqseg::nn
