#include "uqseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace uqseg {

void HeteroscedasticOutput::validate() const {
  if (!(mean_logits.shape() == log_variance.shape())) {
    throw std::invalid_argument("heteroscedastic output: head shapes differ " + mean_logits.shape().str() + " vs " +
                                log_variance.shape().str());
  }
  if (!log_variance.all_finite()) throw std::invalid_argument("heteroscedastic output: non-finite log-variance");
}

namespace {

void check_labels(const Tensor& t, const LabelMap& labels) {
  const Shape4& s = t.shape();
  if (labels.n() != s.n || labels.h() != s.h || labels.w() != s.w) {
    throw std::invalid_argument("labels do not match prediction shape " + s.str());
  }
  for (int l : labels.values()) {
    if (l < 0 || static_cast<std::size_t>(l) >= s.c) throw std::invalid_argument("label index out of range");
  }
}

// Shared core; `draw(t, flat_index)` yields the standard-normal noise value.
template <typename Draw>
NllResult nll_core(const HeteroscedasticOutput& out, const LabelMap& labels, std::size_t t_samples, Draw&& draw,
                   bool with_grad) {
  if (t_samples < 1) throw std::invalid_argument("heteroscedastic_nll: t_samples must be >= 1");
  out.validate();
  check_labels(out.mean_logits, labels);
  const Shape4& s = out.mean_logits.shape();
  const std::size_t hw = s.spatial();
  const std::size_t C = s.c;
  const double pixels = static_cast<double>(s.n * hw);

  NllResult r;
  if (with_grad) {
    r.grad_mean = Tensor(s);
    r.grad_log_variance = Tensor(s);
  }
  std::vector<double> eps(t_samples * C);
  std::vector<double> logp(t_samples);
  std::vector<double> y(C), sigma(C);
  double total = 0.0;

  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      const int label = labels[n * hw + p];
      for (std::size_t c = 0; c < C; ++c) sigma[c] = std::exp(0.5 * out.log_variance.at(n, c, 0, 0 + p));
      for (std::size_t t = 0; t < t_samples; ++t) {
        double mx = -INFINITY;
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t flat = out.mean_logits.index(n, c, 0, 0) + p;
          eps[t * C + c] = draw(t, flat);
          y[c] = out.mean_logits[flat] + sigma[c] * eps[t * C + c];
          mx = std::max(mx, y[c]);
        }
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(y[c] - mx);
        logp[t] = y[static_cast<std::size_t>(label)] - mx - std::log(z);
      }
      const double m = *std::max_element(logp.begin(), logp.end());
      double acc = 0.0;
      for (double lp : logp) acc += std::exp(lp - m);
      const double log_mean = m + std::log(acc) - std::log(static_cast<double>(t_samples));
      total -= log_mean;

      if (!with_grad) continue;
      for (std::size_t t = 0; t < t_samples; ++t) {
        const double wt = std::exp(logp[t] - m) / acc;
        if (wt == 0.0) continue;
        double mx = -INFINITY;
        for (std::size_t c = 0; c < C; ++c) {
          y[c] = out.mean_logits.at(n, c, 0, 0 + p) + sigma[c] * eps[t * C + c];
          mx = std::max(mx, y[c]);
        }
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(y[c] - mx);
        for (std::size_t c = 0; c < C; ++c) {
          const double sm = std::exp(y[c] - mx) / z;
          const double dy = wt * (sm - (static_cast<int>(c) == label ? 1.0 : 0.0)) / pixels;
          const std::size_t flat = out.mean_logits.index(n, c, 0, 0) + p;
          r.grad_mean[flat] += dy;
          r.grad_log_variance[flat] += dy * eps[t * C + c] * 0.5 * sigma[c];
        }
      }
    }
  }
  r.loss = total / pixels;
  return r;
}

}  // namespace

NllResult heteroscedastic_nll(const HeteroscedasticOutput& out, const LabelMap& labels, std::size_t t_samples,
                              Rng& rng, bool with_grad) {
  return nll_core(out, labels, t_samples, [&rng](std::size_t, std::size_t) { return rng.normal(); }, with_grad);
}

NllResult heteroscedastic_nll(const HeteroscedasticOutput& out, const LabelMap& labels,
                              std::span<const double> noise, std::size_t t_samples, bool with_grad) {
  const std::size_t per = out.mean_logits.size();
  if (noise.size() != t_samples * per) throw std::invalid_argument("heteroscedastic_nll: noise size mismatch");
  return nll_core(
      out, labels, t_samples, [&noise, per](std::size_t t, std::size_t flat) { return noise[t * per + flat]; },
      with_grad);
}

double cross_entropy(const Tensor& logits, const LabelMap& labels) {
  check_labels(logits, labels);
  const Shape4& s = logits.shape();
  const std::size_t hw = s.spatial();
  double total = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      double mx = -INFINITY;
      for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, logits.at(n, c, 0, p));
      double z = 0.0;
      for (std::size_t c = 0; c < s.c; ++c) z += std::exp(logits.at(n, c, 0, p) - mx);
      const auto label = static_cast<std::size_t>(labels[n * hw + p]);
      total -= logits.at(n, label, 0, p) - mx - std::log(z);
    }
  }
  return total / static_cast<double>(s.n * hw);
}

LossGrad lovasz_jaccard_loss(const Tensor& probs, const LabelMap& labels) {
  if (labels.size() == 0) throw std::invalid_argument("lovasz_jaccard_loss: empty label set");
  check_labels(probs, labels);
  const Shape4& s = probs.shape();
  const std::size_t hw = s.spatial();
  LossGrad r{0.0, Tensor(s)};
  std::vector<double> errors(hw);
  std::vector<std::size_t> order(hw);
  std::vector<int> fg(hw);

  for (std::size_t n = 0; n < s.n; ++n) {
    const auto lab = labels.image(n);
    std::vector<std::size_t> present;
    for (std::size_t c = 0; c < s.c; ++c) {
      if (std::find(lab.begin(), lab.end(), static_cast<int>(c)) != lab.end()) present.push_back(c);
    }
    const double image_scale = 1.0 / static_cast<double>(s.n) / static_cast<double>(present.size());
    for (std::size_t c : present) {
      const auto pc = probs.plane(n, c);
      double gts = 0.0;
      for (std::size_t i = 0; i < hw; ++i) {
        fg[i] = lab[i] == static_cast<int>(c) ? 1 : 0;
        gts += fg[i];
        errors[i] = std::abs(static_cast<double>(fg[i]) - pc[i]);
      }
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return errors[a] > errors[b]; });
      // Lovasz gradient of the Jaccard set function along the sorted order.
      double cum_fg = 0.0, cum_bg = 0.0, prev_jac = 0.0, loss_c = 0.0;
      auto grad = r.grad.plane(n, c);
      for (std::size_t k = 0; k < hw; ++k) {
        const std::size_t i = order[k];
        cum_fg += fg[i];
        cum_bg += 1 - fg[i];
        const double inter = gts - cum_fg;
        const double uni = gts + cum_bg;
        const double jac = 1.0 - inter / uni;
        const double g = jac - prev_jac;
        prev_jac = jac;
        loss_c += errors[i] * g;
        // d|fg - p|/dp = -1 on foreground, +1 on background
        grad[i] = image_scale * g * (fg[i] ? -1.0 : 1.0);
      }
      r.loss += image_scale * loss_c;
    }
  }
  return r;
}

double sigmoid_rampup(std::size_t epoch, std::size_t ramp_length) {
  if (ramp_length < 1) throw std::invalid_argument("sigmoid_rampup: ramp_length must be >= 1");
  const double t = static_cast<double>(std::min(epoch, ramp_length)) / static_cast<double>(ramp_length);
  const double phase = 1.0 - t;
  return std::exp(-5.0 * phase * phase);
}

std::string to_string(LossStrategy s) {
  switch (s) {
    case LossStrategy::baseline_sum: return "baseline_sum";
    case LossStrategy::sigmoid_ramp: return "sigmoid_ramp";
    case LossStrategy::cov: return "cov";
  }
  return "unknown";
}

LossStrategy loss_strategy_from_string(const std::string& s) {
  if (s == "baseline_sum") return LossStrategy::baseline_sum;
  if (s == "sigmoid_ramp") return LossStrategy::sigmoid_ramp;
  if (s == "cov") return LossStrategy::cov;
  throw std::invalid_argument("unknown loss strategy '" + s + "'");
}

void RunningStats::push(double x) {
  ++count;
  const double delta = x - mean;
  mean += delta / static_cast<double>(count);
  m2 += delta * (x - mean);
}

double RunningStats::stddev() const { return std::sqrt(std::max(0.0, variance())); }

CombinedLoss combine_losses(LossWeightState& state, double l_mle, double l_abl, double l_iou) {
  const std::array<double, 3> raw{l_mle, l_abl, l_iou};
  for (double v : raw) {
    if (!std::isfinite(v)) throw std::invalid_argument("combine_losses: non-finite loss value");
  }
  CombinedLoss out;
  switch (state.strategy) {
    case LossStrategy::baseline_sum:
      out.weights = {1.0, 1.0, 1.0};
      break;
    case LossStrategy::sigmoid_ramp: {
      const double phi = sigmoid_rampup(state.epoch, state.ramp_length);
      out.weights = {1.0, phi, phi};
      break;
    }
    case LossStrategy::cov: {
      const bool first = state.raw_stats[0].count == 0;
      std::array<double, 3> c{};
      for (std::size_t i = 0; i < 3; ++i) {
        // l_it = L_t / mean(L_1..L_{t-1}); the first step has ratio 1 by definition.
        const double prev_mean = state.raw_stats[i].mean;
        const double ratio = (first || prev_mean <= 0.0) ? 1.0 : raw[i] / prev_mean;
        state.ratio_stats[i].push(ratio);
        state.raw_stats[i].push(raw[i]);
        const double mu = state.ratio_stats[i].mean;
        const double sd = state.ratio_stats[i].stddev();
        c[i] = (mu > 0.0 && sd > 0.0) ? std::max(sd / mu, kCovFloor) : kCovFloor;
      }
      if (first) {
        out.weights = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
      } else {
        const double z = c[0] + c[1] + c[2];
        out.weights = {c[0] / z, c[1] / z, c[2] / z};
      }
      break;
    }
  }
  out.total = out.weights[0] * l_mle + out.weights[1] * l_abl + out.weights[2] * l_iou;
  return out;
}

}  // namespace uqseg
