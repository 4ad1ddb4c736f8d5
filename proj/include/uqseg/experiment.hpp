#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "uqseg/boundary.hpp"
#include "uqseg/calibration.hpp"
#include "uqseg/data.hpp"
#include "uqseg/losses.hpp"
#include "uqseg/models.hpp"
#include "uqseg/uncertainty.hpp"

namespace uqseg {

enum class Task { twomoons, cracks };

struct DataSpec {
  Task task = Task::cracks;
  std::size_t n_train = 200;
  std::size_t n_val = 20;
  std::size_t n_test = 50;
  double noise_sd = 0.15;          // two-moons jitter
  std::size_t size = 64;           // crack image side
  CrackParams crack;
  /// Optional `<root>/images`, `<root>/masks` dataset replacing the generator.
  std::string folder;
  std::array<double, 3> fractions{0.72, 0.10, 0.18};
  /// Out-of-distribution test sets: texture-shifted variant and noise-injected test set.
  bool ood = false;
  double ood_texture_scale = 3.0;
  double ood_noise_variance = 30.0;
};

struct LossSpec {
  LossStrategy strategy = LossStrategy::baseline_sum;
  std::size_t ramp_length = 100;
  bool use_abl = true;
  bool use_iou = true;
  std::size_t nll_samples = 10;
  double kl_threshold = 0.1;
  double clamp_distance = 5.0;
};

struct OptimizerSpec {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  double lr_decay = 0.8;
  std::size_t lr_interval = 50;
  std::size_t batch_size = 8;
  std::size_t max_epochs = 200;
};

struct EarlyStopSpec {
  std::size_t window = 50;
  double min_improvement = 0.001;
};

struct ExperimentConfig {
  DataSpec data;
  SegmenterConfig segmenter;
  TwoMoonsNetConfig twomoons;
  LossSpec loss;
  OptimizerSpec optimizer;
  EarlyStopSpec early_stop;
  std::size_t mc_samples = 25;
  std::vector<std::uint64_t> seeds{0};
  std::string sweep_axis;
  std::vector<std::string> sweep_values;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  /// Hash of the fully resolved config.
  std::string hash() const;
};

struct Dataset {
  Tensor x;
  LabelMap y;
  std::size_t size() const { return x.shape().n; }
  Dataset slice(std::size_t begin, std::size_t end) const { return {x.slice_batch(begin, end), y.slice_batch(begin, end)}; }
};

struct TaskData {
  Dataset train, val, test;
  std::optional<Dataset> ood_shift;
  std::optional<Dataset> ood_noise;
  /// Raw crack samples per split; empty for two-moons.
  std::vector<ImageSample> train_images, val_images, test_images;
};

/// Everything is drawn from Rng(seed).substream("data").
TaskData build_data(const ExperimentConfig& cfg, std::uint64_t seed);

std::unique_ptr<Model> build_model(const ExperimentConfig& cfg, Rng& init_rng);

double learning_rate(const OptimizerSpec& opt, std::size_t epoch);
/// True once at least `window` values exist and the mean per-epoch decrease
/// over the trailing window, (h[n-W] - h[n-1]) / (W - 1), is below min_improvement.
bool should_stop(std::span<const double> val_history, const EarlyStopSpec& spec);

struct MetricsRow {
  double f1 = 0.0;
  double epistemic = 0.0;
  double entropy = 0.0;
  double aleatoric = 0.0;
  double ece = 0.0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::array<double, 3> components{};
  std::array<double, 3> weights{};
};

struct RunRecord {
  std::vector<EpochLog> epochs;
  std::optional<MetricsRow> metrics;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string status = "ok";
  bool early_stopped = false;
  std::vector<double> dropout_rates;
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, RunRecord record)
      : std::runtime_error("training diverged at epoch " + std::to_string(epoch)), epoch_(epoch), record_(std::move(record)) {}
  std::size_t epoch() const { return epoch_; }
  const RunRecord& record() const { return record_; }

 private:
  std::size_t epoch_;
  RunRecord record_;
};

struct TrainResult {
  std::unique_ptr<Model> model;
  RunRecord record;
};

/// SGD with momentum; L2 weight decay skips rho and dropout logits.
/// Throws TrainingDiverged on a non-finite objective.
TrainResult train(const ExperimentConfig& cfg, const TaskData& data, std::uint64_t seed);

struct Evaluation {
  MetricsRow row;
  ReliabilityBins bins;
  ClasswiseScore scores;
  /// Mean uncertainties restricted to ground-truth class regions (last class = crack).
  std::vector<RegionScalars> gt_region;
  /// Decomposition of the first evaluation chunk, for map output.
  UncertaintyDecomposition first_chunk;
  LabelMap prediction;
  Tensor mean_probs;
};

/// MC inference (cfg.mc_samples passes) over the set in chunks of batch_size.
Evaluation evaluate(Model& model, const Dataset& set, const ExperimentConfig& cfg, const Rng& rng);

struct CalibrationOutcome {
  CalibrationReport before;
  CalibrationReport after;
  TemperatureFit fit;
  double f1_before = 0.0;
  double f1_after = 0.0;
};

/// Fits T on MC-averaged validation logits (times logit_scale) and reports test
/// ECE before and after dividing the logits by T.
CalibrationOutcome calibrate(Model& model, const Dataset& val, const Dataset& test, const ExperimentConfig& cfg,
                             const Rng& rng, double logit_scale = 1.0);

inline const std::vector<std::string> kSweepAxes{"train_samples", "dropout_ratio", "dropout_layers", "loss_strategy",
                                                 "uq_method"};

/// Returns a copy of the config JSON with one axis set to `value`.
nlohmann::json apply_axis(const nlohmann::json& config, const std::string& axis, const std::string& value);

struct SweepRow {
  std::string run_id;
  std::string axis_value;
  std::string seed;
  MetricsRow metrics;
  std::string status;
};

struct SweepResult {
  std::vector<SweepRow> rows;       // runs then per-value aggregates
  std::vector<SweepRow> ood_rows;   // run_id, axis_value = "<value>/<ood set>"
};

/// Trains |values| x |seeds| runs. Writes metrics.csv, metrics_agg.csv,
/// metrics_ood.csv (when OOD sets exist) and runs/<run_id>/run.json under out_dir.
SweepResult sweep(const ExperimentConfig& cfg, const std::string& axis, const std::vector<std::string>& values,
                  const std::filesystem::path& out_dir);

inline constexpr const char* kMetricsHeader = "run_id,axis_value,seed,f1,epistemic,entropy,aleatoric,ece,status";
std::string format_number(double v);
void write_metrics_csv(const std::filesystem::path& path, std::span<const SweepRow> rows);
std::vector<SweepRow> read_metrics_csv(const std::filesystem::path& path);

}  // namespace uqseg
