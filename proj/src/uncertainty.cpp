#include "uqseg/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "uqseg/array_io.hpp"
#include "uqseg/image_io.hpp"

namespace uqseg {

void MCPredictionSet::validate() const {
  if (samples.empty() || m != samples.size()) throw std::invalid_argument("mc set: sample count mismatch");
  const Shape4& s = samples.front().shape();
  for (const Tensor& t : samples) {
    if (!(t.shape() == s)) throw std::invalid_argument("mc set: samples differ in shape");
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t i = 0; i < s.spatial(); ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < s.c; ++c) acc += t.plane(n, c)[i];
        if (std::abs(acc - 1.0) > 1e-5) throw std::invalid_argument("mc set: probabilities do not sum to one");
      }
    }
  }
}

Tensor MCPredictionSet::mean_probs() const {
  if (samples.empty()) throw std::invalid_argument("mc set: empty");
  // Incremental mean: exact when every sample is the same.
  Tensor mean = samples.front();
  for (std::size_t k = 1; k < samples.size(); ++k) {
    const double inv = 1.0 / static_cast<double>(k + 1);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += (samples[k][i] - mean[i]) * inv;
  }
  return mean;
}

MCPrediction mc_predict_full(Model& model, const Tensor& batch, std::size_t m, const Rng& rng) {
  if (m < 1) throw std::invalid_argument("mc_predict: m must be at least 1");
  MCPrediction out;
  out.set.m = m;
  out.set.sampling_mode = model.mode();
  out.set.samples.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    Rng pass_rng = rng.substream(static_cast<std::uint64_t>(i));
    HeteroscedasticOutput y = forward(model, batch, true, pass_rng);
    out.set.samples.push_back(softmax_channels(y.mean_logits));
    if (i == 0) {
      out.mean_output = std::move(y);
    } else {
      out.mean_output.mean_logits += y.mean_logits;
      out.mean_output.log_variance += y.log_variance;
    }
  }
  out.mean_output.mean_logits *= 1.0 / static_cast<double>(m);
  out.mean_output.log_variance *= 1.0 / static_cast<double>(m);
  return out;
}

MCPredictionSet mc_predict(Model& model, const Tensor& batch, std::size_t m, const Rng& rng) {
  return mc_predict_full(model, batch, m, rng).set;
}

Tensor epistemic_variance(const MCPredictionSet& set) {
  const Tensor mean = set.mean_probs();
  Tensor var(mean.shape());
  for (const Tensor& t : set.samples) {
    for (std::size_t i = 0; i < var.size(); ++i) {
      const double d = t[i] - mean[i];
      var[i] += d * d;
    }
  }
  var *= 1.0 / static_cast<double>(set.samples.size());
  return var;
}

Tensor predictive_entropy(const MCPredictionSet& set) {
  const Tensor mean = set.mean_probs();
  const Shape4& s = mean.shape();
  Tensor h({s.n, 1, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    auto out = h.plane(n, 0);
    for (std::size_t c = 0; c < s.c; ++c) {
      auto p = mean.plane(n, c);
      for (std::size_t i = 0; i < s.spatial(); ++i) {
        if (p[i] > 0.0) out[i] -= p[i] * std::log(p[i]);
      }
    }
    for (double& v : out) v = std::max(v, 0.0);
  }
  return h;
}

Tensor aleatoric_map(const HeteroscedasticOutput& out) {
  if (!out.log_variance.all_finite()) throw std::invalid_argument("aleatoric_map: non-finite log-variance");
  Tensor sigma(out.log_variance.shape());
  for (std::size_t i = 0; i < sigma.size(); ++i) sigma[i] = std::exp(0.5 * out.log_variance[i]);
  return sigma;
}

double aleatoric_scalar(const HeteroscedasticOutput& out) {
  const Tensor sigma = aleatoric_map(out);
  return sigma.size() > 0 ? sigma.sum() / static_cast<double>(sigma.size()) : 0.0;
}

namespace {

double channel_mean(const Tensor& t, std::size_t c) {
  const Shape4& s = t.shape();
  double acc = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (double v : t.plane(n, c)) acc += v;
  }
  const double count = static_cast<double>(s.n * s.spatial());
  return count > 0 ? acc / count : 0.0;
}

}  // namespace

UncertaintyDecomposition decompose(const MCPredictionSet& set, const HeteroscedasticOutput& out, const LabelMap* gt) {
  if (set.samples.empty()) throw std::invalid_argument("decompose: empty prediction set");
  const Shape4& s = set.samples.front().shape();
  if (!(out.log_variance.shape() == s)) {
    throw std::invalid_argument("decompose: head shape " + out.log_variance.shape().str() + " does not match " + s.str());
  }
  if (gt && (gt->n() != s.n || gt->h() != s.h || gt->w() != s.w)) {
    throw std::invalid_argument("decompose: ground-truth shape mismatch");
  }
  UncertaintyDecomposition d;
  d.epistemic = epistemic_variance(set);
  d.entropy = predictive_entropy(set);
  d.aleatoric = aleatoric_map(out);
  d.epistemic_mean = d.epistemic.size() ? d.epistemic.sum() / static_cast<double>(d.epistemic.size()) : 0.0;
  d.entropy_mean = d.entropy.size() ? d.entropy.sum() / static_cast<double>(d.entropy.size()) : 0.0;
  d.aleatoric_mean = d.aleatoric.size() ? d.aleatoric.sum() / static_cast<double>(d.aleatoric.size()) : 0.0;
  for (std::size_t c = 0; c < s.c; ++c) {
    d.epistemic_per_class.push_back(channel_mean(d.epistemic, c));
    d.aleatoric_per_class.push_back(channel_mean(d.aleatoric, c));
  }
  if (gt) {
    d.gt_region.resize(s.c);
    for (std::size_t n = 0; n < s.n; ++n) {
      auto labels = gt->image(n);
      auto ent = d.entropy.plane(n, 0);
      for (std::size_t i = 0; i < s.spatial(); ++i) {
        const int c = labels[i];
        if (c < 0 || static_cast<std::size_t>(c) >= s.c) throw std::invalid_argument("decompose: label out of range");
        RegionScalars& r = d.gt_region[static_cast<std::size_t>(c)];
        r.present = true;
        ++r.pixels;
        r.epistemic += d.epistemic.plane(n, static_cast<std::size_t>(c))[i];
        r.aleatoric += d.aleatoric.plane(n, static_cast<std::size_t>(c))[i];
        r.entropy += ent[i];
      }
    }
    for (RegionScalars& r : d.gt_region) {
      if (!r.present) continue;
      const double k = static_cast<double>(r.pixels);
      r.epistemic /= k;
      r.aleatoric /= k;
      r.entropy /= k;
    }
  }
  return d;
}

void write_uncertainty_arrays(const std::filesystem::path& path, const UncertaintyDecomposition& d) {
  const std::vector<ArrayRecord> records{to_record("epistemic", d.epistemic), to_record("entropy", d.entropy),
                                         to_record("aleatoric", d.aleatoric)};
  write_arrays(path, records);
}

void write_uncertainty_pngs(const std::filesystem::path& dir, const UncertaintyDecomposition& d, std::size_t n,
                            std::size_t cls) {
  const Shape4& s = d.epistemic.shape();
  if (n >= s.n || cls >= s.c) throw std::invalid_argument("write_uncertainty_pngs: index out of range");
  std::filesystem::create_directories(dir);
  auto plane = [](const Tensor& t, std::size_t n, std::size_t c) {
    auto p = t.plane(n, c);
    return std::vector<double>(p.begin(), p.end());
  };
  const std::vector<double> ale = plane(d.aleatoric, n, cls);
  const double ale_max = ale.empty() ? 0.0 : *std::max_element(ale.begin(), ale.end());
  write_png(dir / "epistemic.png", to_gray8(plane(d.epistemic, n, cls), s.h, s.w, 0.0, 0.25));
  write_png(dir / "entropy.png", to_gray8(plane(d.entropy, n, 0), s.h, s.w, 0.0, std::log(static_cast<double>(s.c))));
  write_png(dir / "aleatoric.png", to_gray8(ale, s.h, s.w, 0.0, ale_max));
}

}  // namespace uqseg
