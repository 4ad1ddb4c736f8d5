#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "uqseg/losses.hpp"
#include "uqseg/nn/layers.hpp"
#include "uqseg/variational.hpp"

namespace uqseg {

using nn::PassContext;
using nn::VariationalMode;

enum class DropoutPlacement { final_layer, last_two, all_decoder };

std::string to_string(DropoutPlacement p);
DropoutPlacement dropout_placement_from_string(const std::string& s);

/// Settings shared by every stochastic site / Bayesian layer of a model.
struct VariationalSettings {
  VariationalMode mode = VariationalMode::mcd;
  DropoutSpec dropout;
  /// Starting state for concrete sites; p_logit is overwritten from dropout.p.
  ConcreteDropoutState concrete;
  double bbb_prior_sigma = 1.0;
  double bbb_init_rho = -5.0;
};

struct SegmenterConfig {
  std::vector<std::size_t> encoder_channels{16, 32, 64, 128};
  std::size_t input_channels = 1;
  std::size_t classes = 2;
  DropoutPlacement dropout_placement = DropoutPlacement::final_layer;
  VariationalSettings variational;
  bool skip_connections = true;
};

struct TwoMoonsNetConfig {
  std::vector<std::size_t> hidden{64, 64};
  VariationalSettings variational;
  /// Sanity hook: all weights and biases start at zero.
  bool zero_init = false;
};

/// A network producing a HeteroscedasticOutput, trained by explicit backward.
class Model {
 public:
  virtual ~Model() = default;

  virtual std::string kind() const = 0;
  virtual HeteroscedasticOutput forward(const Tensor& x, const PassContext& ctx) = 0;
  /// Backward pass for the most recent forward with ctx.train set.
  virtual void backward(const Tensor& grad_mean, const Tensor& grad_log_variance) = 0;

  virtual std::vector<nn::Parameter*> parameters() = 0;
  /// Every tensor needed to restore the model (parameters plus running statistics).
  virtual std::vector<std::pair<std::string, Tensor*>> state() = 0;

  /// Sites that currently inject noise.
  virtual std::vector<nn::StochasticSite*> active_sites() = 0;
  virtual VariationalMode mode() const = 0;

  /// Sum of KL terms of Bayesian layers, and its gradient scaled by `scale`.
  virtual double kl() = 0;
  virtual void add_kl_grad(double scale) = 0;
  /// Concrete-dropout regularizer over all concrete sites; accumulates gradients when asked.
  virtual double concrete_regularizer(std::size_t n_data, bool accumulate_grad) = 0;

  void zero_grad();
  std::size_t parameter_count();
  void set_dropout_rate(double p);
  std::vector<double> dropout_rates();
  bool stochastic();
};

std::unique_ptr<Model> build_segmenter(const SegmenterConfig& cfg, Rng& rng);
std::unique_ptr<Model> build_twomoons_net(const TwoMoonsNetConfig& cfg, Rng& rng);

/// Inference pass: normalisation uses running statistics; `sampling` turns on
/// dropout / concrete masks / weight draws.
HeteroscedasticOutput forward(Model& model, const Tensor& batch, bool sampling, Rng& rng);

nlohmann::json to_json(const VariationalSettings& v);
VariationalSettings variational_settings_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SegmenterConfig& c);
SegmenterConfig segmenter_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TwoMoonsNetConfig& c);
TwoMoonsNetConfig twomoons_config_from_json(const nlohmann::json& j);

/// Fingerprint of a structured config (FNV-1a over its canonical dump), hex.
std::string config_hash(const nlohmann::json& config);

/// Writes `config.json` (snapshot + hash) and `weights.uqa` into `dir`.
void save_checkpoint(Model& model, const nlohmann::json& config, const std::filesystem::path& dir);
/// Loads weights into `model`; rejects checkpoints whose hash differs from `config`'s.
void load_checkpoint(Model& model, const nlohmann::json& config, const std::filesystem::path& dir);

}  // namespace uqseg
