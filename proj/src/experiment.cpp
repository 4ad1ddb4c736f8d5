#include "uqseg/experiment.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace uqseg {

// ---------------------------------------------------------------- config

namespace {

std::string to_string(Task t) { return t == Task::twomoons ? "twomoons" : "cracks"; }

Task task_from_string(const std::string& s) {
  if (s == "twomoons") return Task::twomoons;
  if (s == "cracks") return Task::cracks;
  throw std::invalid_argument("unknown task '" + s + "'");
}

}  // namespace

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["data"] = {{"task", to_string(data.task)},
               {"n_train", data.n_train},
               {"n_val", data.n_val},
               {"n_test", data.n_test},
               {"noise_sd", data.noise_sd},
               {"size", data.size},
               {"crack", uqseg::to_json(data.crack)},
               {"folder", data.folder},
               {"fractions", data.fractions},
               {"ood", data.ood},
               {"ood_texture_scale", data.ood_texture_scale},
               {"ood_noise_variance", data.ood_noise_variance}};
  j["model"] = data.task == Task::twomoons ? uqseg::to_json(twomoons) : uqseg::to_json(segmenter);
  j["loss"] = {{"strategy", uqseg::to_string(loss.strategy)},
               {"ramp_length", loss.ramp_length},
               {"use_abl", loss.use_abl},
               {"use_iou", loss.use_iou},
               {"nll_samples", loss.nll_samples},
               {"kl_threshold", loss.kl_threshold},
               {"clamp_distance", loss.clamp_distance}};
  j["optimizer"] = {{"lr", optimizer.lr},
                    {"momentum", optimizer.momentum},
                    {"weight_decay", optimizer.weight_decay},
                    {"lr_decay", optimizer.lr_decay},
                    {"lr_interval", optimizer.lr_interval},
                    {"batch_size", optimizer.batch_size},
                    {"max_epochs", optimizer.max_epochs}};
  j["early_stop"] = {{"window", early_stop.window}, {"min_improvement", early_stop.min_improvement}};
  j["mc_samples"] = mc_samples;
  j["seeds"] = seeds;
  j["sweep"] = {{"axis", sweep_axis}, {"values", sweep_values}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  const nlohmann::json empty = nlohmann::json::object();
  const auto& d = j.contains("data") ? j.at("data") : empty;
  c.data.task = task_from_string(d.value("task", std::string("cracks")));
  c.data.n_train = d.value("n_train", c.data.n_train);
  c.data.n_val = d.value("n_val", c.data.n_val);
  c.data.n_test = d.value("n_test", c.data.n_test);
  c.data.noise_sd = d.value("noise_sd", c.data.noise_sd);
  c.data.size = d.value("size", c.data.size);
  if (d.contains("crack")) c.data.crack = crack_params_from_json(d.at("crack"));
  c.data.folder = d.value("folder", c.data.folder);
  c.data.fractions = d.value("fractions", c.data.fractions);
  c.data.ood = d.value("ood", c.data.ood);
  c.data.ood_texture_scale = d.value("ood_texture_scale", c.data.ood_texture_scale);
  c.data.ood_noise_variance = d.value("ood_noise_variance", c.data.ood_noise_variance);

  const auto& m = j.contains("model") ? j.at("model") : empty;
  if (c.data.task == Task::twomoons) c.twomoons = twomoons_config_from_json(m);
  else c.segmenter = segmenter_config_from_json(m);

  const auto& l = j.contains("loss") ? j.at("loss") : empty;
  c.loss.strategy = loss_strategy_from_string(l.value("strategy", std::string("baseline_sum")));
  c.loss.ramp_length = l.value("ramp_length", c.loss.ramp_length);
  c.loss.use_abl = l.value("use_abl", c.loss.use_abl);
  c.loss.use_iou = l.value("use_iou", c.loss.use_iou);
  c.loss.nll_samples = l.value("nll_samples", c.loss.nll_samples);
  c.loss.kl_threshold = l.value("kl_threshold", c.loss.kl_threshold);
  c.loss.clamp_distance = l.value("clamp_distance", c.loss.clamp_distance);
  if (c.data.task == Task::twomoons) c.loss.use_abl = c.loss.use_iou = false;

  const auto& o = j.contains("optimizer") ? j.at("optimizer") : empty;
  c.optimizer.lr = o.value("lr", c.optimizer.lr);
  c.optimizer.momentum = o.value("momentum", c.optimizer.momentum);
  c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
  c.optimizer.lr_decay = o.value("lr_decay", c.optimizer.lr_decay);
  c.optimizer.lr_interval = o.value("lr_interval", c.optimizer.lr_interval);
  c.optimizer.batch_size = o.value("batch_size", c.optimizer.batch_size);
  c.optimizer.max_epochs = o.value("max_epochs", c.optimizer.max_epochs);

  const auto& e = j.contains("early_stop") ? j.at("early_stop") : empty;
  c.early_stop.window = e.value("window", c.early_stop.window);
  c.early_stop.min_improvement = e.value("min_improvement", c.early_stop.min_improvement);

  c.mc_samples = j.value("mc_samples", c.mc_samples);
  c.seeds = j.value("seeds", c.seeds);
  if (j.contains("sweep")) {
    c.sweep_axis = j["sweep"].value("axis", std::string());
    c.sweep_values = j["sweep"].value("values", std::vector<std::string>{});
  }

  if (c.mc_samples < 1) throw std::invalid_argument("config: mc_samples must be at least 1");
  if (c.loss.nll_samples < 1) throw std::invalid_argument("config: nll_samples must be at least 1");
  if (c.optimizer.batch_size < 1) throw std::invalid_argument("config: batch_size must be at least 1");
  if (c.optimizer.lr_interval < 1 || c.loss.ramp_length < 1) throw std::invalid_argument("config: intervals must be positive");
  if (c.early_stop.window < 2) throw std::invalid_argument("config: early-stop window must be at least 2");
  if (c.seeds.empty()) throw std::invalid_argument("config: at least one seed required");
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config '" + path.string() + "'");
  return from_json(nlohmann::json::parse(is));
}

std::string ExperimentConfig::hash() const { return config_hash(to_json()); }

// ---------------------------------------------------------------- data

TaskData build_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  const Rng root = Rng(seed).substream("data");
  TaskData out;
  const DataSpec& d = cfg.data;
  if (d.task == Task::twomoons) {
    auto make = [&](std::size_t n, const char* name) {
      Rng r = root.substream(name);
      auto [x, y] = moons_to_tensors(gen_two_moons(n, d.noise_sd, r));
      return Dataset{std::move(x), std::move(y)};
    };
    out.train = make(d.n_train, "train");
    out.val = make(d.n_val, "val");
    out.test = make(d.n_test, "test");
    return out;
  }
  std::vector<ImageSample> train, val, test;
  if (!d.folder.empty()) {
    const Split<ImageSample> s = split(load_folder_dataset(d.folder), d.fractions, root.substream("split").seed());
    train = s.train;
    val = s.val;
    test = s.test;
  } else {
    train = gen_synthetic_cracks(d.n_train, d.size, d.size, d.crack, root.substream("train"));
    val = gen_synthetic_cracks(d.n_val, d.size, d.size, d.crack, root.substream("val"));
    test = gen_synthetic_cracks(d.n_test, d.size, d.size, d.crack, root.substream("test"));
  }
  if (train.empty() || test.empty()) throw std::runtime_error("dataset has an empty train or test split");
  if (val.empty()) val = train;
  out.train = {images_to_tensor(train), masks_to_labels(train)};
  out.val = {images_to_tensor(val), masks_to_labels(val)};
  out.test = {images_to_tensor(test), masks_to_labels(test)};
  if (d.ood) {
    CrackParams shifted = d.crack;
    shifted.texture_scale = d.ood_texture_scale;
    const std::size_t h = test.front().h, w = test.front().w;
    auto b = gen_synthetic_cracks(test.size(), h, w, shifted, root.substream("ood_shift"));
    out.ood_shift = Dataset{images_to_tensor(b), masks_to_labels(b)};
    std::vector<ImageSample> noisy = test;
    Rng nr = root.substream("ood_noise");
    for (ImageSample& s : noisy) s.image = add_gaussian_noise(s.image, d.ood_noise_variance, nr);
    out.ood_noise = Dataset{images_to_tensor(noisy), masks_to_labels(noisy)};
  }
  out.train_images = std::move(train);
  out.val_images = std::move(val);
  out.test_images = std::move(test);
  return out;
}

std::unique_ptr<Model> build_model(const ExperimentConfig& cfg, Rng& init_rng) {
  if (cfg.data.task == Task::twomoons) return build_twomoons_net(cfg.twomoons, init_rng);
  return build_segmenter(cfg.segmenter, init_rng);
}

double learning_rate(const OptimizerSpec& opt, std::size_t epoch) {
  return opt.lr * std::pow(opt.lr_decay, static_cast<double>(epoch / opt.lr_interval));
}

bool should_stop(std::span<const double> h, const EarlyStopSpec& spec) {
  const std::size_t n = h.size(), w = spec.window;
  if (w < 2 || n < w) return false;
  const double mean_gain = (h[n - w] - h[n - 1]) / static_cast<double>(w - 1);
  return mean_gain < spec.min_improvement;
}

// ---------------------------------------------------------------- records

nlohmann::json RunRecord::to_json() const {
  nlohmann::json epochs_json = nlohmann::json::array();
  for (const EpochLog& e : epochs) {
    epochs_json.push_back({{"epoch", e.epoch},
                           {"lr", e.lr},
                           {"train_loss", e.train_loss},
                           {"val_loss", e.val_loss},
                           {"components", e.components},
                           {"weights", e.weights}});
  }
  nlohmann::json j{{"epochs", epochs_json},   {"wall_seconds", wall_seconds}, {"seed", seed},
                   {"config_hash", config_hash}, {"status", status},         {"early_stopped", early_stopped},
                   {"dropout_rates", dropout_rates}};
  if (metrics) {
    j["metrics"] = {{"f1", metrics->f1},
                    {"epistemic", metrics->epistemic},
                    {"entropy", metrics->entropy},
                    {"aleatoric", metrics->aleatoric},
                    {"ece", metrics->ece}};
  }
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  return j;
}

// ---------------------------------------------------------------- training

namespace {

struct Batch {
  Tensor x;
  LabelMap y;
  std::vector<BoundaryContext> contexts;
};

Batch gather(const Dataset& d, std::span<const std::size_t> idx, const std::vector<BoundaryContext>* ctx) {
  const Shape4& s = d.x.shape();
  Batch b{Tensor({idx.size(), s.c, s.h, s.w}), LabelMap(idx.size(), d.y.h(), d.y.w()), {}};
  const std::size_t per = s.c * s.spatial();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::copy_n(d.x.data() + idx[k] * per, per, b.x.data() + k * per);
    auto src = d.y.image(idx[k]);
    std::copy(src.begin(), src.end(), b.y.image(k).begin());
    if (ctx) b.contexts.push_back((*ctx)[idx[k]]);
  }
  return b;
}

double validation_loss(Model& model, const Dataset& val, const ExperimentConfig& cfg, const Rng& nll_root) {
  Rng dummy(0);
  double acc = 0.0;
  const std::size_t bs = std::max<std::size_t>(cfg.optimizer.batch_size, 32);
  for (std::size_t b = 0; b < val.size(); b += bs) {
    const std::size_t e = std::min(val.size(), b + bs);
    const Dataset part = val.slice(b, e);
    HeteroscedasticOutput out = forward(model, part.x, false, dummy);
    if (!out.mean_logits.all_finite() || !out.log_variance.all_finite()) return std::nan("");
    Rng r = nll_root.substream(static_cast<std::uint64_t>(b));
    acc += heteroscedastic_nll(out, part.y, cfg.loss.nll_samples, r, false).loss * static_cast<double>(e - b);
  }
  return acc / static_cast<double>(val.size());
}

}  // namespace

TrainResult train(const ExperimentConfig& cfg, const TaskData& data, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const Rng root(seed);
  Rng init_rng = root.substream("init");
  Rng dropout_rng = root.substream("dropout");
  Rng nll_rng = root.substream("nll");
  Rng shuffle_rng = root.substream("data").substream("shuffle");
  const Rng val_nll = root.substream("nll").substream("val");

  TrainResult result{build_model(cfg, init_rng), {}};
  Model& model = *result.model;
  RunRecord& rec = result.record;
  rec.seed = seed;
  rec.config_hash = cfg.hash();

  const Dataset& train_set = data.train;
  const std::size_t n = train_set.size();
  if (n == 0) throw std::invalid_argument("train: empty training set");
  const bool segmentation = cfg.data.task == Task::cracks;
  const bool use_abl = segmentation && cfg.loss.use_abl;
  const bool use_iou = segmentation && cfg.loss.use_iou;

  std::vector<BoundaryContext> contexts;
  if (use_abl) {
    for (std::size_t i = 0; i < n; ++i) {
      BoundaryContext c = BoundaryContext::from_labels(train_set.y.image(i), train_set.y.h(), train_set.y.w());
      c.kl_threshold = cfg.loss.kl_threshold;
      c.clamp_distance = cfg.loss.clamp_distance;
      contexts.push_back(std::move(c));
    }
  }

  std::vector<nn::Parameter*> params = model.parameters();
  std::vector<Tensor> velocity;
  for (nn::Parameter* p : params) velocity.emplace_back(p->value.shape());

  LossWeightState weights;
  weights.strategy = cfg.loss.strategy;
  weights.ramp_length = cfg.loss.ramp_length;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> val_history;
  const double inv_n = 1.0 / static_cast<double>(n);
  auto diverged = [&rec](std::size_t epoch, const EpochLog& log) {
    rec.status = "diverged";
    rec.extra["diverged_epoch"] = epoch;
    rec.epochs.push_back(log);
    return TrainingDiverged(epoch, rec);
  };

  for (std::size_t epoch = 0; epoch < cfg.optimizer.max_epochs; ++epoch) {
    const double lr = learning_rate(cfg.optimizer, epoch);
    weights.epoch = epoch;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    std::size_t steps = 0;
    for (std::size_t b = 0; b < n; b += cfg.optimizer.batch_size) {
      const std::size_t e = std::min(n, b + cfg.optimizer.batch_size);
      const Batch batch = gather(train_set, std::span(order).subspan(b, e - b), use_abl ? &contexts : nullptr);
      PassContext ctx{true, true, false, &dropout_rng};
      HeteroscedasticOutput out = model.forward(batch.x, ctx);
      if (!out.mean_logits.all_finite() || !out.log_variance.all_finite()) throw diverged(epoch, log);
      const NllResult nll = heteroscedastic_nll(out, batch.y, cfg.loss.nll_samples, nll_rng, true);
      Tensor probs;
      AblResult abl;
      LossGrad iou{0.0, Tensor()};
      if (use_abl || use_iou) probs = softmax_channels(out.mean_logits);
      if (use_abl) abl = active_boundary_loss(probs, batch.contexts);
      if (use_iou) iou = lovasz_jaccard_loss(probs, batch.y);
      if (!std::isfinite(nll.loss) || !std::isfinite(abl.loss) || !std::isfinite(iou.loss)) throw diverged(epoch, log);
      const CombinedLoss combined = combine_losses(weights, nll.loss, abl.loss, iou.loss);
      double objective = combined.total;

      Tensor grad_mean = nll.grad_mean;
      grad_mean *= combined.weights[0];
      Tensor grad_lv = nll.grad_log_variance;
      grad_lv *= combined.weights[0];
      if (use_abl || use_iou) {
        Tensor grad_probs(probs.shape());
        if (use_abl) {
          Tensor g = abl.grad;
          g *= combined.weights[1];
          grad_probs += g;
        }
        if (use_iou) {
          Tensor g = iou.grad;
          g *= combined.weights[2];
          grad_probs += g;
        }
        grad_mean += softmax_channels_backward(probs, grad_probs);
      }
      model.zero_grad();
      model.backward(grad_mean, grad_lv);
      if (model.mode() == VariationalMode::bbb) {
        objective += model.kl() * inv_n;
        model.add_kl_grad(inv_n);
      }
      if (model.mode() == VariationalMode::concrete) objective += model.concrete_regularizer(n, true);

      if (!std::isfinite(objective)) throw diverged(epoch, log);
      for (std::size_t k = 0; k < params.size(); ++k) {
        nn::Parameter& p = *params[k];
        Tensor& v = velocity[k];
        const double wd = p.decay ? cfg.optimizer.weight_decay : 0.0;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
          v[i] = cfg.optimizer.momentum * v[i] + p.grad[i] + wd * p.value[i];
          p.value[i] -= lr * v[i];
        }
      }
      for (nn::StochasticSite* s : model.active_sites()) s->sync_from_parameter();

      log.train_loss += objective;
      log.components[0] += nll.loss;
      log.components[1] += abl.loss;
      log.components[2] += iou.loss;
      log.weights = combined.weights;
      ++steps;
    }
    const double k = 1.0 / static_cast<double>(steps);
    log.train_loss *= k;
    for (double& c : log.components) c *= k;
    log.val_loss = validation_loss(model, data.val, cfg, val_nll);
    if (!std::isfinite(log.val_loss) || !std::isfinite(log.train_loss)) throw diverged(epoch, log);
    rec.epochs.push_back(log);
    val_history.push_back(log.val_loss);
    if (should_stop(val_history, cfg.early_stop)) {
      rec.early_stopped = true;
      break;
    }
  }
  rec.dropout_rates = model.dropout_rates();
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------- evaluation

Evaluation evaluate(Model& model, const Dataset& set, const ExperimentConfig& cfg, const Rng& rng) {
  if (set.size() == 0) throw std::invalid_argument("evaluate: empty test set");
  const Shape4& s = set.x.shape();
  const std::size_t classes = model.kind() == "twomoons" ? 2 : cfg.segmenter.classes;
  Evaluation ev{{}, ReliabilityBins(30), {}, {}, {}, LabelMap(set.size(), set.y.h(), set.y.w()),
                Tensor({s.n, classes, set.y.h(), set.y.w()})};
  std::vector<RegionScalars> region(classes);
  double epi = 0.0, ent = 0.0, ale = 0.0;
  const std::size_t chunk = model.kind() == "twomoons" ? set.size() : cfg.optimizer.batch_size;
  for (std::size_t b = 0; b < set.size(); b += chunk) {
    const std::size_t e = std::min(set.size(), b + chunk);
    const Dataset part = set.slice(b, e);
    const MCPrediction mc = mc_predict_full(model, part.x, cfg.mc_samples, rng.substream(static_cast<std::uint64_t>(b)));
    UncertaintyDecomposition d = decompose(mc.set, mc.mean_output, &part.y);
    const double wgt = static_cast<double>(e - b);
    epi += d.epistemic_mean * wgt;
    ent += d.entropy_mean * wgt;
    ale += d.aleatoric_mean * wgt;
    for (std::size_t c = 0; c < classes && c < d.gt_region.size(); ++c) {
      const RegionScalars& r = d.gt_region[c];
      if (!r.present) continue;
      const double k = static_cast<double>(r.pixels);
      region[c].present = true;
      region[c].pixels += r.pixels;
      region[c].epistemic += r.epistemic * k;
      region[c].entropy += r.entropy * k;
      region[c].aleatoric += r.aleatoric * k;
    }
    const Tensor mean = mc.set.mean_probs();
    ev.bins.merge(bin_predictions(mean, part.y));
    const LabelMap pred = argmax_channels(mean);
    std::copy(pred.values().begin(), pred.values().end(), ev.prediction.image(b).begin());
    std::copy(mean.values().begin(), mean.values().end(), ev.mean_probs.data() + b * classes * s.spatial());
    if (b == 0) ev.first_chunk = std::move(d);
  }
  for (RegionScalars& r : region) {
    if (!r.present) continue;
    const double k = static_cast<double>(r.pixels);
    r.epistemic /= k;
    r.entropy /= k;
    r.aleatoric /= k;
  }
  ev.gt_region = std::move(region);
  const double total = static_cast<double>(set.size());
  ev.scores = classwise_scores(ev.prediction.values(), set.y.values(), classes);
  ev.row.f1 = ev.scores.macro_f1;
  ev.row.epistemic = epi / total;
  ev.row.entropy = ent / total;
  ev.row.aleatoric = ale / total;
  ev.row.ece = ece_from_bins(ev.bins).ece;
  return ev;
}

// ---------------------------------------------------------------- calibration

namespace {

Tensor mc_mean_logits(Model& model, const Dataset& set, const ExperimentConfig& cfg, const Rng& rng, double scale) {
  const Shape4& s = set.x.shape();
  Tensor out;
  const std::size_t chunk = model.kind() == "twomoons" ? set.size() : cfg.optimizer.batch_size;
  for (std::size_t b = 0; b < set.size(); b += chunk) {
    const std::size_t e = std::min(set.size(), b + chunk);
    MCPrediction mc = mc_predict_full(model, set.slice(b, e).x, cfg.mc_samples, rng.substream(static_cast<std::uint64_t>(b)));
    const Tensor& l = mc.mean_output.mean_logits;
    if (out.empty()) out = Tensor({s.n, l.shape().c, l.shape().h, l.shape().w});
    std::copy(l.values().begin(), l.values().end(), out.data() + b * l.shape().c * l.shape().spatial());
  }
  out *= scale;
  return out;
}

}  // namespace

CalibrationOutcome calibrate(Model& model, const Dataset& val, const Dataset& test, const ExperimentConfig& cfg,
                             const Rng& rng, double logit_scale) {
  if (val.size() == 0 || test.size() == 0) throw std::invalid_argument("calibrate: empty validation or test set");
  const Tensor val_logits = mc_mean_logits(model, val, cfg, rng.substream("val"), logit_scale);
  const Tensor test_logits = mc_mean_logits(model, test, cfg, rng.substream("test"), logit_scale);
  CalibrationOutcome out;
  out.fit = fit_temperature(val_logits, val.y);
  if (out.fit.single_class) throw std::invalid_argument("calibrate: validation labels cover a single class");
  const std::size_t classes = val_logits.shape().c;

  const Tensor p_before = softmax_channels(test_logits);
  out.before = ece_from_bins(bin_predictions(p_before, test.y));
  out.before.temperature = 1.0;
  out.f1_before = classwise_scores(argmax_channels(test_logits).values(), test.y.values(), classes).macro_f1;

  const Tensor scaled = scale_logits(test_logits, out.fit.temperature);
  out.after = ece_from_bins(bin_predictions(softmax_channels(scaled), test.y));
  out.after.temperature = out.fit.temperature;
  out.f1_after = classwise_scores(argmax_channels(scaled).values(), test.y.values(), classes).macro_f1;
  return out;
}

// ---------------------------------------------------------------- sweep

nlohmann::json apply_axis(const nlohmann::json& config, const std::string& axis, const std::string& value) {
  nlohmann::json j = config;
  if (axis == "train_samples") {
    std::size_t n = 0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), n);
    if (ec != std::errc() || ptr != value.data() + value.size() || n == 0) {
      throw std::invalid_argument("train_samples: '" + value + "' is not a positive integer");
    }
    j["data"]["n_train"] = n;
  } else if (axis == "dropout_ratio") {
    std::size_t used = 0;
    const double p = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("dropout_ratio: '" + value + "' is not a number");
    j["model"]["variational"]["dropout_p"] = p;
  } else if (axis == "dropout_layers") {
    dropout_placement_from_string(value);
    j["model"]["dropout_placement"] = value;
  } else if (axis == "loss_strategy") {
    if (value == "nll_only") {
      j["loss"]["strategy"] = "baseline_sum";
      j["loss"]["use_abl"] = false;
      j["loss"]["use_iou"] = false;
    } else {
      loss_strategy_from_string(value);
      j["loss"]["strategy"] = value;
      j["loss"]["use_abl"] = true;
      j["loss"]["use_iou"] = true;
    }
  } else if (axis == "uq_method") {
    nn::variational_mode_from_string(value);
    j["model"]["variational"]["mode"] = value;
  } else {
    throw std::invalid_argument("unknown sweep axis '" + axis + "'");
  }
  return j;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const SweepRow> rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << kMetricsHeader << '\n';
  for (const SweepRow& r : rows) {
    os << r.run_id << ',' << r.axis_value << ',' << r.seed << ',' << format_number(r.metrics.f1) << ','
       << format_number(r.metrics.epistemic) << ',' << format_number(r.metrics.entropy) << ','
       << format_number(r.metrics.aleatoric) << ',' << format_number(r.metrics.ece) << ',' << r.status << '\n';
  }
}

std::vector<SweepRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read '" + path.string() + "'");
  std::string line;
  std::getline(is, line);
  if (line != kMetricsHeader) throw std::runtime_error("'" + path.string() + "' is not a metrics table");
  std::vector<SweepRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 9) throw std::runtime_error("malformed metrics row: " + line);
    auto num = [](const std::string& s) { return s == "nan" ? std::nan("") : std::stod(s); };
    rows.push_back({f[0], f[1], f[2], {num(f[3]), num(f[4]), num(f[5]), num(f[6]), num(f[7])}, f[8]});
  }
  return rows;
}

namespace {

MetricsRow nan_row() {
  const double q = std::nan("");
  return {q, q, q, q, q};
}

struct Agg {
  std::vector<MetricsRow> rows;
  MetricsRow mean() const {
    if (rows.empty()) return nan_row();
    MetricsRow m;
    for (const MetricsRow& r : rows) {
      m.f1 += r.f1;
      m.epistemic += r.epistemic;
      m.entropy += r.entropy;
      m.aleatoric += r.aleatoric;
      m.ece += r.ece;
    }
    const double k = 1.0 / static_cast<double>(rows.size());
    return {m.f1 * k, m.epistemic * k, m.entropy * k, m.aleatoric * k, m.ece * k};
  }
  MetricsRow stddev() const {
    if (rows.empty()) return nan_row();
    const MetricsRow mu = mean();
    MetricsRow v;
    for (const MetricsRow& r : rows) {
      v.f1 += (r.f1 - mu.f1) * (r.f1 - mu.f1);
      v.epistemic += (r.epistemic - mu.epistemic) * (r.epistemic - mu.epistemic);
      v.entropy += (r.entropy - mu.entropy) * (r.entropy - mu.entropy);
      v.aleatoric += (r.aleatoric - mu.aleatoric) * (r.aleatoric - mu.aleatoric);
      v.ece += (r.ece - mu.ece) * (r.ece - mu.ece);
    }
    const double k = 1.0 / static_cast<double>(rows.size());
    return {std::sqrt(v.f1 * k), std::sqrt(v.epistemic * k), std::sqrt(v.entropy * k), std::sqrt(v.aleatoric * k),
            std::sqrt(v.ece * k)};
  }
};

std::string sanitize(std::string s) {
  for (char& c : s) {
    if (c == ',' || c == '\n') c = ';';
  }
  return s;
}

}  // namespace

SweepResult sweep(const ExperimentConfig& cfg, const std::string& axis, const std::vector<std::string>& values,
                  const std::filesystem::path& out_dir) {
  if (std::find(kSweepAxes.begin(), kSweepAxes.end(), axis) == kSweepAxes.end()) {
    throw std::invalid_argument("unknown sweep axis '" + axis + "'");
  }
  if (values.empty()) throw std::invalid_argument("sweep: no axis values");
  std::filesystem::create_directories(out_dir / "runs");
  const nlohmann::json base = cfg.to_json();
  SweepResult result;
  std::vector<Agg> aggs(values.size());
  std::size_t run = 0;
  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    for (std::uint64_t seed : cfg.seeds) {
      char id[16];
      std::snprintf(id, sizeof(id), "r%03zu", run++);
      SweepRow row{id, values[vi], std::to_string(seed), nan_row(), "ok"};
      RunRecord rec;
      try {
        const ExperimentConfig rc = ExperimentConfig::from_json(apply_axis(base, axis, values[vi]));
        const TaskData data = build_data(rc, seed);
        TrainResult tr = train(rc, data, seed);
        rec = tr.record;
        const Rng eval_rng = Rng(seed).substream("dropout").substream("eval");
        const Evaluation ev = evaluate(*tr.model, data.test, rc, eval_rng);
        row.metrics = ev.row;
        rec.metrics = ev.row;
        aggs[vi].rows.push_back(ev.row);
        auto ood = [&](const std::optional<Dataset>& set, const char* name) {
          if (!set) return;
          const Evaluation e = evaluate(*tr.model, *set, rc, eval_rng.substream(name));
          result.ood_rows.push_back({row.run_id, values[vi] + "/" + name, row.seed, e.row, "ok"});
          rec.extra["ood_" + std::string(name)] = {{"f1", e.row.f1},           {"epistemic", e.row.epistemic},
                                                  {"entropy", e.row.entropy}, {"aleatoric", e.row.aleatoric},
                                                  {"ece", e.row.ece}};
        };
        ood(data.ood_shift, "shift");
        ood(data.ood_noise, "noise");
      } catch (const TrainingDiverged& e) {
        rec = e.record();
        row.status = "diverged@" + std::to_string(e.epoch());
      } catch (const std::exception& e) {
        rec.status = "failed";
        rec.extra["error"] = e.what();
        row.status = "failed: " + sanitize(e.what());
      }
      rec.extra["axis"] = axis;
      rec.extra["axis_value"] = values[vi];
      std::filesystem::create_directories(out_dir / "runs" / row.run_id);
      std::ofstream(out_dir / "runs" / row.run_id / "run.json") << rec.to_json().dump(2) << "\n";
      result.rows.push_back(std::move(row));
    }
  }
  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    result.rows.push_back({"agg" + std::to_string(vi), values[vi], "mean", aggs[vi].mean(), "aggregate"});
  }
  write_metrics_csv(out_dir / "metrics.csv", result.rows);

  std::ofstream agg(out_dir / "metrics_agg.csv", std::ios::binary);
  agg << "axis_value,n_ok,f1_mean,f1_std,epistemic_mean,epistemic_std,entropy_mean,entropy_std,aleatoric_mean,"
         "aleatoric_std,ece_mean,ece_std\n";
  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    const MetricsRow m = aggs[vi].mean(), s = aggs[vi].stddev();
    agg << values[vi] << ',' << aggs[vi].rows.size() << ',' << format_number(m.f1) << ',' << format_number(s.f1) << ','
        << format_number(m.epistemic) << ',' << format_number(s.epistemic) << ',' << format_number(m.entropy) << ','
        << format_number(s.entropy) << ',' << format_number(m.aleatoric) << ',' << format_number(s.aleatoric) << ','
        << format_number(m.ece) << ',' << format_number(s.ece) << '\n';
  }
  if (!result.ood_rows.empty()) write_metrics_csv(out_dir / "metrics_ood.csv", result.ood_rows);
  std::ofstream(out_dir / "config.json") << nlohmann::json{{"config", base}, {"config_hash", cfg.hash()}, {"axis", axis}, {"values", values}}.dump(2) << "\n";
  return result;
}

}  // namespace uqseg
