#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "uqseg/tensor.hpp"

namespace uqseg {

struct PrfScore {
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  /// False when class c occurs in neither mask.
  bool present = true;
};

/// Counts for class c. With TP+FP = 0 precision is 0; with TP+FN = 0 recall is 0.
PrfScore precision_recall_f1(std::span<const int> pred, std::span<const int> gt, int c);

struct ClasswiseScore {
  std::vector<PrfScore> per_class;
  /// Classes absent from both masks are left out of the mean.
  std::vector<bool> included;
  double macro_f1 = 0.0;
  /// No class was included.
  bool degenerate = false;
};

ClasswiseScore classwise_scores(std::span<const int> pred, std::span<const int> gt, std::size_t classes);

/// Uniform right-inclusive bins over (0, 1]; bin 0 also takes confidence 0.
struct ReliabilityBins {
  std::size_t n_bins = 30;
  std::vector<double> conf_sum;
  std::vector<double> correct_sum;
  std::vector<std::size_t> count;

  explicit ReliabilityBins(std::size_t bins = 30);
  double lo(std::size_t m) const { return static_cast<double>(m) / static_cast<double>(n_bins); }
  double hi(std::size_t m) const { return static_cast<double>(m + 1) / static_cast<double>(n_bins); }
  double accuracy(std::size_t m) const;
  double confidence(std::size_t m) const;
  std::size_t total() const;
  std::size_t bin_of(double confidence) const;
  void add(double confidence, bool correct);
  void merge(const ReliabilityBins& other);
};

struct CalibrationReport {
  double ece = 0.0;
  ReliabilityBins bins;
  std::optional<double> temperature;
  std::string confidence_kind = "max_probability";
};

CalibrationReport ece_from_bins(const ReliabilityBins& bins);
CalibrationReport ece(std::span<const double> confidences, std::span<const std::uint8_t> correct,
                      std::size_t n_bins = 30);
/// Max-probability confidence and argmax correctness of [N, C, H, W] probabilities.
ReliabilityBins bin_predictions(const Tensor& probs, const LabelMap& labels, std::size_t n_bins = 30);

nlohmann::json to_json(const CalibrationReport& r);
CalibrationReport calibration_report_from_json(const nlohmann::json& j);
void write_calibration_report(const std::filesystem::path& path, const CalibrationReport& r);
/// Header: bin_lo,bin_hi,count,accuracy,confidence
void write_reliability_csv(const std::filesystem::path& path, const ReliabilityBins& bins);
ReliabilityBins read_reliability_csv(const std::filesystem::path& path);

/// Mean cross-entropy of logits / T.
double temperature_nll(const Tensor& logits, const LabelMap& labels, double temperature);

struct TemperatureFit {
  double temperature = 1.0;
  double nll = 0.0;
  double nll_at_one = 0.0;
  /// Validation labels cover a single class.
  bool single_class = false;
};

/// 61-point grid over log T in [-3, 3], then golden-section refinement of the
/// best cell to |d log T| < 1e-4. Only the mean-logit head is meant to be scaled.
TemperatureFit fit_temperature(const Tensor& logits, const LabelMap& labels);
Tensor scale_logits(const Tensor& logits, double temperature);

/// Spearman rank correlation with average ranks for ties; empty when either
/// side is constant or fewer than two points are given.
std::optional<double> spearman(std::span<const double> x, std::span<const double> y);

struct F1UncertaintyRecord {
  int cls = 0;
  double f1 = 0.0;
  double uncertainty = 0.0;
};

struct ClassScatter {
  int cls = 0;
  std::vector<double> uncertainty;
  std::vector<double> error;  // 1 - f1
  /// Rank correlation of uncertainty against 1 - f1 (and its negation against f1).
  std::optional<double> rho_error;
  std::optional<double> rho_f1;
  bool degenerate = false;
};

struct CalibrationScatter {
  std::vector<ClassScatter> classes;
  /// Line of equality, uncertainty = 1 - f1, as two endpoints.
  std::vector<std::pair<double, double>> reference{{0.0, 0.0}, {1.0, 1.0}};
};

CalibrationScatter classwise_f1_vs_uncertainty(std::span<const F1UncertaintyRecord> records);
void write_scatter_csv(const std::filesystem::path& path, const CalibrationScatter& s);

}  // namespace uqseg
