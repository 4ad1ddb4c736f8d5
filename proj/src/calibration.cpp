#include "uqseg/calibration.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

namespace uqseg {

PrfScore precision_recall_f1(std::span<const int> pred, std::span<const int> gt, int c) {
  if (pred.size() != gt.size()) throw std::invalid_argument("precision_recall_f1: mask sizes differ");
  PrfScore s;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == c;
    const bool g = gt[i] == c;
    if (p && g) ++s.tp;
    else if (p) ++s.fp;
    else if (g) ++s.fn;
  }
  s.present = s.tp + s.fp + s.fn > 0;
  s.precision = s.tp + s.fp > 0 ? static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp) : 0.0;
  s.recall = s.tp + s.fn > 0 ? static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fn) : 0.0;
  const double denom = s.precision + s.recall;
  s.f1 = denom > 0.0 ? 2.0 * s.precision * s.recall / denom : 0.0;
  return s;
}

ClasswiseScore classwise_scores(std::span<const int> pred, std::span<const int> gt, std::size_t classes) {
  ClasswiseScore out;
  double acc = 0.0;
  std::size_t k = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    PrfScore s = precision_recall_f1(pred, gt, static_cast<int>(c));
    out.included.push_back(s.present);
    if (s.present) {
      acc += s.f1;
      ++k;
    }
    out.per_class.push_back(s);
  }
  out.degenerate = k == 0;
  out.macro_f1 = k > 0 ? acc / static_cast<double>(k) : 0.0;
  return out;
}

// ---------------------------------------------------------------- reliability bins

ReliabilityBins::ReliabilityBins(std::size_t bins)
    : n_bins(bins), conf_sum(bins, 0.0), correct_sum(bins, 0.0), count(bins, 0) {
  if (bins == 0) throw std::invalid_argument("reliability bins: need at least one bin");
}

double ReliabilityBins::accuracy(std::size_t m) const {
  return count[m] ? correct_sum[m] / static_cast<double>(count[m]) : 0.0;
}

double ReliabilityBins::confidence(std::size_t m) const {
  return count[m] ? conf_sum[m] / static_cast<double>(count[m]) : 0.0;
}

std::size_t ReliabilityBins::total() const { return std::accumulate(count.begin(), count.end(), std::size_t{0}); }

std::size_t ReliabilityBins::bin_of(double c) const {
  if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("ece: confidence outside [0, 1]");
  const double scaled = c * static_cast<double>(n_bins);
  std::size_t m = scaled <= 0.0 ? 0 : static_cast<std::size_t>(std::ceil(scaled)) - 1;
  m = std::min(m, n_bins - 1);
  // Guard the rounding of c * n_bins at bin edges.
  while (m > 0 && c <= lo(m)) --m;
  while (m + 1 < n_bins && c > hi(m)) ++m;
  return m;
}

void ReliabilityBins::add(double c, bool correct) {
  const std::size_t m = bin_of(c);
  conf_sum[m] += c;
  correct_sum[m] += correct ? 1.0 : 0.0;
  ++count[m];
}

void ReliabilityBins::merge(const ReliabilityBins& other) {
  if (other.n_bins != n_bins) throw std::invalid_argument("reliability bins: bin counts differ");
  for (std::size_t m = 0; m < n_bins; ++m) {
    conf_sum[m] += other.conf_sum[m];
    correct_sum[m] += other.correct_sum[m];
    count[m] += other.count[m];
  }
}

CalibrationReport ece_from_bins(const ReliabilityBins& bins) {
  CalibrationReport r{0.0, bins, std::nullopt, "max_probability"};
  const double n = static_cast<double>(bins.total());
  if (n == 0) return r;
  for (std::size_t m = 0; m < bins.n_bins; ++m) {
    if (bins.count[m] == 0) continue;
    r.ece += static_cast<double>(bins.count[m]) / n * std::abs(bins.accuracy(m) - bins.confidence(m));
  }
  return r;
}

CalibrationReport ece(std::span<const double> confidences, std::span<const std::uint8_t> correct, std::size_t n_bins) {
  if (confidences.size() != correct.size()) throw std::invalid_argument("ece: array lengths differ");
  ReliabilityBins bins(n_bins);
  for (std::size_t i = 0; i < confidences.size(); ++i) bins.add(confidences[i], correct[i] != 0);
  return ece_from_bins(bins);
}

ReliabilityBins bin_predictions(const Tensor& probs, const LabelMap& labels, std::size_t n_bins) {
  const Shape4& s = probs.shape();
  if (labels.n() != s.n || labels.h() != s.h || labels.w() != s.w) {
    throw std::invalid_argument("bin_predictions: label shape mismatch");
  }
  ReliabilityBins bins(n_bins);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < s.spatial(); ++i) {
      std::size_t best = 0;
      double conf = probs.plane(n, 0)[i];
      for (std::size_t c = 1; c < s.c; ++c) {
        const double v = probs.plane(n, c)[i];
        if (v > conf) {
          conf = v;
          best = c;
        }
      }
      bins.add(std::clamp(conf, 0.0, 1.0), static_cast<int>(best) == labels.image(n)[i]);
    }
  }
  return bins;
}

nlohmann::json to_json(const CalibrationReport& r) {
  nlohmann::json bins = nlohmann::json::array();
  for (std::size_t m = 0; m < r.bins.n_bins; ++m) {
    bins.push_back({{"lo", r.bins.lo(m)},
                    {"hi", r.bins.hi(m)},
                    {"count", r.bins.count[m]},
                    {"acc", r.bins.accuracy(m)},
                    {"conf", r.bins.confidence(m)}});
  }
  nlohmann::json j{{"ece", r.ece}, {"bins", bins}, {"confidence", r.confidence_kind}};
  j["temperature"] = r.temperature ? nlohmann::json(*r.temperature) : nlohmann::json(nullptr);
  return j;
}

CalibrationReport calibration_report_from_json(const nlohmann::json& j) {
  const auto& bins = j.at("bins");
  CalibrationReport r{j.at("ece").get<double>(), ReliabilityBins(bins.size()), std::nullopt,
                      j.value("confidence", std::string("max_probability"))};
  for (std::size_t m = 0; m < bins.size(); ++m) {
    const std::size_t count = bins[m].at("count").get<std::size_t>();
    r.bins.count[m] = count;
    r.bins.correct_sum[m] = bins[m].at("acc").get<double>() * static_cast<double>(count);
    r.bins.conf_sum[m] = bins[m].at("conf").get<double>() * static_cast<double>(count);
  }
  if (j.contains("temperature") && !j["temperature"].is_null()) r.temperature = j["temperature"].get<double>();
  return r;
}

void write_calibration_report(const std::filesystem::path& path, const CalibrationReport& r) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << to_json(r).dump(2) << "\n";
}

void write_reliability_csv(const std::filesystem::path& path, const ReliabilityBins& bins) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os.precision(17);
  os << "bin_lo,bin_hi,count,accuracy,confidence\n";
  for (std::size_t m = 0; m < bins.n_bins; ++m) {
    os << bins.lo(m) << ',' << bins.hi(m) << ',' << bins.count[m] << ',' << bins.accuracy(m) << ','
       << bins.confidence(m) << '\n';
  }
}

ReliabilityBins read_reliability_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read '" + path.string() + "'");
  std::string line;
  std::getline(is, line);
  if (line != "bin_lo,bin_hi,count,accuracy,confidence") {
    throw std::runtime_error("'" + path.string() + "' is not a reliability table");
  }
  std::vector<std::array<double, 5>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::array<double, 5> r{};
    std::size_t pos = 0;
    for (double& v : r) {
      std::size_t used = 0;
      v = std::stod(line.substr(pos), &used);
      pos += used + 1;
    }
    rows.push_back(r);
  }
  ReliabilityBins bins(rows.size());
  for (std::size_t m = 0; m < rows.size(); ++m) {
    const auto count = static_cast<std::size_t>(rows[m][2]);
    bins.count[m] = count;
    bins.correct_sum[m] = rows[m][3] * static_cast<double>(count);
    bins.conf_sum[m] = rows[m][4] * static_cast<double>(count);
  }
  return bins;
}

// ---------------------------------------------------------------- temperature

double temperature_nll(const Tensor& logits, const LabelMap& labels, double temperature) {
  const Shape4& s = logits.shape();
  if (labels.n() != s.n || labels.h() != s.h || labels.w() != s.w) {
    throw std::invalid_argument("temperature_nll: label shape mismatch");
  }
  const double inv = 1.0 / temperature;
  double acc = 0.0;
  std::vector<double> z(s.c);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < s.spatial(); ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < s.c; ++c) {
        z[c] = logits.plane(n, c)[i] * inv;
        mx = std::max(mx, z[c]);
      }
      double se = 0.0;
      for (double v : z) se += std::exp(v - mx);
      acc += mx + std::log(se) - z[static_cast<std::size_t>(labels.image(n)[i])];
    }
  }
  return acc / static_cast<double>(s.n * s.spatial());
}

TemperatureFit fit_temperature(const Tensor& logits, const LabelMap& labels) {
  if (logits.size() == 0 || labels.size() == 0) throw std::invalid_argument("fit_temperature: empty validation set");
  for (int v : labels.values()) {
    if (v < 0 || static_cast<std::size_t>(v) >= logits.shape().c) {
      throw std::invalid_argument("fit_temperature: label out of range");
    }
  }
  TemperatureFit fit;
  const auto [lo, hi] = std::minmax_element(labels.values().begin(), labels.values().end());
  fit.single_class = *lo == *hi;

  auto nll_at = [&](double log_t) { return temperature_nll(logits, labels, std::exp(log_t)); };
  double best_log_t = 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 60; ++i) {
    const double log_t = static_cast<double>(i - 30) / 10.0;
    const double v = nll_at(log_t);
    if (i == 30) fit.nll_at_one = v;
    if (v < best) {
      best = v;
      best_log_t = log_t;
    }
  }
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = best_log_t - 0.1, b = best_log_t + 0.1;
  double c = b - gr * (b - a), d = a + gr * (b - a);
  double fc = nll_at(c), fd = nll_at(d);
  while (b - a >= 1e-4) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - gr * (b - a);
      fc = nll_at(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + gr * (b - a);
      fd = nll_at(d);
    }
  }
  const double refined = 0.5 * (a + b);
  const double refined_nll = nll_at(refined);
  if (refined_nll <= best) {
    best = refined_nll;
    best_log_t = refined;
  }
  fit.temperature = std::exp(best_log_t);
  fit.nll = best;
  return fit;
}

Tensor scale_logits(const Tensor& logits, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("scale_logits: temperature must be positive");
  Tensor out = logits;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = logits[i] / temperature;
  return out;
}

// ---------------------------------------------------------------- rank correlation

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: lengths differ");
  if (x.size() < 2) return std::nullopt;
  const std::vector<double> rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

CalibrationScatter classwise_f1_vs_uncertainty(std::span<const F1UncertaintyRecord> records) {
  if (records.empty()) throw std::invalid_argument("classwise_f1_vs_uncertainty: no records");
  std::map<int, ClassScatter> by_class;
  for (const F1UncertaintyRecord& r : records) {
    ClassScatter& s = by_class[r.cls];
    s.cls = r.cls;
    s.uncertainty.push_back(r.uncertainty);
    s.error.push_back(1.0 - r.f1);
  }
  CalibrationScatter out;
  for (auto& [cls, s] : by_class) {
    s.rho_error = spearman(s.uncertainty, s.error);
    if (s.rho_error) s.rho_f1 = -*s.rho_error;
    s.degenerate = !s.rho_error.has_value();
    out.classes.push_back(std::move(s));
  }
  return out;
}

void write_scatter_csv(const std::filesystem::path& path, const CalibrationScatter& s) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os.precision(17);
  os << "class,uncertainty,f1\n";
  for (const ClassScatter& c : s.classes) {
    for (std::size_t i = 0; i < c.uncertainty.size(); ++i) {
      os << c.cls << ',' << c.uncertainty[i] << ',' << 1.0 - c.error[i] << '\n';
    }
  }
}

}  // namespace uqseg
