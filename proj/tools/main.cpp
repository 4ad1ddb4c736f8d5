// Command-line front end: gen-data, train, eval, sweep, calibrate, plot.
#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "uqseg/array_io.hpp"
#include "uqseg/experiment.hpp"
#include "uqseg/plots.hpp"

namespace fs = std::filesystem;
using namespace uqseg;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string axis;
  std::string values;
  std::string dataset;
  std::string checkpoint;
  double logit_scale = 1.0;
};

ExperimentConfig load_config(const Options& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(o.config);
  if (!o.dataset.empty()) cfg.data.folder = o.dataset;
  if (o.seed) cfg.seeds = {*o.seed};
  return cfg;
}

std::uint64_t run_seed(const ExperimentConfig& cfg) { return cfg.seeds.front(); }

void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
  os << j.dump(2) << "\n";
}

nlohmann::json row_json(const MetricsRow& r) {
  return {{"f1", r.f1}, {"epistemic", r.epistemic}, {"entropy", r.entropy}, {"aleatoric", r.aleatoric}, {"ece", r.ece}};
}

std::vector<double> plane_of(const Tensor& t, std::size_t n, std::size_t c) {
  auto p = t.plane(n, c);
  return {p.begin(), p.end()};
}

// Stores the first few test images with their maps for `plot`.
void write_panels(const fs::path& path, const Dataset& test, const Evaluation& ev) {
  const UncertaintyDecomposition& d = ev.first_chunk;
  const std::size_t k = std::min<std::size_t>(4, d.epistemic.shape().n);
  const std::size_t crack = d.epistemic.shape().c - 1;
  const std::size_t h = test.y.h(), w = test.y.w();
  std::vector<ArrayRecord> recs;
  for (std::size_t n = 0; n < k; ++n) {
    Tensor pred({1, 1, h, w}), gt({1, 1, h, w});
    for (std::size_t i = 0; i < h * w; ++i) {
      pred[i] = ev.prediction.image(n)[i];
      gt[i] = test.y.image(n)[i];
    }
    const std::string tag = std::to_string(n);
    recs.push_back(to_record("input" + tag, test.x.slice_batch(n, n + 1).slice_channels(0, 1)));
    recs.push_back(to_record("prediction" + tag, pred));
    recs.push_back(to_record("ground_truth" + tag, gt));
    recs.push_back(to_record("epistemic" + tag, d.epistemic.slice_batch(n, n + 1).slice_channels(crack, crack + 1)));
    recs.push_back(to_record("aleatoric" + tag, d.aleatoric.slice_batch(n, n + 1).slice_channels(crack, crack + 1)));
  }
  write_arrays(path, recs);
}

void write_evaluation(const fs::path& out, const ExperimentConfig& cfg, std::uint64_t seed, const Evaluation& ev,
                      const Dataset& test) {
  const SweepRow row{"r000", "-", std::to_string(seed), ev.row, "ok"};
  write_metrics_csv(out / "metrics.csv", std::span(&row, 1));
  write_reliability_csv(out / "reliability.csv", ev.bins);
  write_calibration_report(out / "calibration_report.json", ece_from_bins(ev.bins));
  if (cfg.data.task == Task::cracks) {
    write_uncertainty_arrays(out / "uncertainty.uqa", ev.first_chunk);
    write_uncertainty_pngs(out / "maps", ev.first_chunk, 0, ev.first_chunk.epistemic.shape().c - 1);
    write_panels(out / "panels.uqa", test, ev);
  }
}

nlohmann::json region_json(const std::vector<RegionScalars>& regions) {
  nlohmann::json j = nlohmann::json::array();
  for (std::size_t c = 0; c < regions.size(); ++c) {
    const RegionScalars& r = regions[c];
    if (!r.present) continue;
    j.push_back({{"class", c}, {"pixels", r.pixels}, {"epistemic", r.epistemic}, {"entropy", r.entropy},
                 {"aleatoric", r.aleatoric}});
  }
  return j;
}

std::unique_ptr<Model> load_model(const ExperimentConfig& cfg, const fs::path& dir) {
  Rng init(0);
  std::unique_ptr<Model> m = build_model(cfg, init);
  load_checkpoint(*m, cfg.to_json(), dir);
  return m;
}

int cmd_gen_data(const Options& o) {
  const ExperimentConfig cfg = load_config(o);
  const TaskData data = build_data(cfg, run_seed(cfg));
  fs::create_directories(o.out);
  if (cfg.data.task == Task::cracks) {
    export_folder_dataset(data.train_images, fs::path(o.out) / "train");
    export_folder_dataset(data.val_images, fs::path(o.out) / "val");
    export_folder_dataset(data.test_images, fs::path(o.out) / "test");
  } else {
    for (const auto& [name, set] : {std::pair{"train", &data.train}, {"val", &data.val}, {"test", &data.test}}) {
      std::ofstream os(fs::path(o.out) / (std::string(name) + ".csv"));
      os << "x0,x1,label\n";
      for (std::size_t i = 0; i < set->size(); ++i) {
        os << format_number(set->x.at(i, 0, 0, 0)) << ',' << format_number(set->x.at(i, 1, 0, 0)) << ',' << set->y[i] << '\n';
      }
    }
  }
  write_json(fs::path(o.out) / "config.json", {{"config", cfg.to_json()}, {"config_hash", cfg.hash()}});
  return 0;
}

int cmd_train(const Options& o) {
  const ExperimentConfig cfg = load_config(o);
  const std::uint64_t seed = run_seed(cfg);
  const fs::path out = o.out;
  fs::create_directories(out);
  const TaskData data = build_data(cfg, seed);
  TrainResult tr = train(cfg, data, seed);
  save_checkpoint(*tr.model, cfg.to_json(), out / "checkpoint");
  const Rng eval_rng = Rng(seed).substream("dropout").substream("eval");
  const Evaluation ev = evaluate(*tr.model, data.test, cfg, eval_rng);
  tr.record.metrics = ev.row;
  tr.record.extra["gt_region"] = region_json(ev.gt_region);
  std::vector<SweepRow> ood;
  auto run_ood = [&](const std::optional<Dataset>& set, const char* name) {
    if (!set) return;
    const Evaluation e = evaluate(*tr.model, *set, cfg, eval_rng.substream(name));
    tr.record.extra["ood_" + std::string(name)] = row_json(e.row);
    ood.push_back({"r000", std::string("-/") + name, std::to_string(seed), e.row, "ok"});
  };
  run_ood(data.ood_shift, "shift");
  run_ood(data.ood_noise, "noise");
  if (!ood.empty()) write_metrics_csv(out / "metrics_ood.csv", ood);
  write_evaluation(out, cfg, seed, ev, data.test);
  nlohmann::json rec = tr.record.to_json();
  rec["config"] = cfg.to_json();
  write_json(out / "run.json", rec);
  return 0;
}

int cmd_eval(const Options& o) {
  const ExperimentConfig cfg = load_config(o);
  const std::uint64_t seed = run_seed(cfg);
  const fs::path out = o.out;
  fs::create_directories(out);
  const fs::path ckpt = o.checkpoint.empty() ? out / "checkpoint" : fs::path(o.checkpoint);
  std::unique_ptr<Model> model = load_model(cfg, ckpt);
  const TaskData data = build_data(cfg, seed);
  const Evaluation ev = evaluate(*model, data.test, cfg, Rng(seed).substream("dropout").substream("eval"));
  write_evaluation(out, cfg, seed, ev, data.test);
  write_json(out / "eval.json", {{"metrics", row_json(ev.row)}, {"config_hash", cfg.hash()}, {"seed", seed},
                                 {"gt_region", region_json(ev.gt_region)}});
  return 0;
}

std::vector<std::string> split_values(const std::string& s) {
  std::vector<std::string> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) v.push_back(item);
  }
  return v;
}

int cmd_sweep(const Options& o) {
  const ExperimentConfig cfg = load_config(o);
  const std::string axis = o.axis.empty() ? cfg.sweep_axis : o.axis;
  const std::vector<std::string> values = o.values.empty() ? cfg.sweep_values : split_values(o.values);
  if (axis.empty()) throw std::invalid_argument("sweep: no axis given (--axis or config sweep.axis)");
  const SweepResult r = sweep(cfg, axis, values, o.out);
  std::size_t failed = 0;
  for (const SweepRow& row : r.rows) failed += row.status != "ok" && row.status != "aggregate";
  std::cout << "sweep: " << r.rows.size() << " rows, " << failed << " failed runs\n";
  return 0;
}

int cmd_calibrate(const Options& o) {
  const ExperimentConfig cfg = load_config(o);
  const std::uint64_t seed = run_seed(cfg);
  const fs::path out = o.out;
  fs::create_directories(out);
  const TaskData data = build_data(cfg, seed);
  std::unique_ptr<Model> model;
  const fs::path ckpt = o.checkpoint.empty() ? out / "checkpoint" : fs::path(o.checkpoint);
  if (fs::exists(ckpt / "config.json")) {
    model = load_model(cfg, ckpt);
  } else {
    model = train(cfg, data, seed).model;
    save_checkpoint(*model, cfg.to_json(), ckpt);
  }
  const CalibrationOutcome c =
      calibrate(*model, data.val, data.test, cfg, Rng(seed).substream("dropout").substream("calibrate"), o.logit_scale);
  write_calibration_report(out / "calibration_before.json", c.before);
  write_calibration_report(out / "calibration_after.json", c.after);
  write_reliability_csv(out / "reliability_before.csv", c.before.bins);
  write_reliability_csv(out / "reliability_after.csv", c.after.bins);
  write_json(out / "calibration.json", {{"temperature", c.fit.temperature},
                                        {"val_nll", c.fit.nll},
                                        {"val_nll_at_1", c.fit.nll_at_one},
                                        {"ece_before", c.before.ece},
                                        {"ece_after", c.after.ece},
                                        {"f1_before", c.f1_before},
                                        {"f1_after", c.f1_after},
                                        {"logit_scale", o.logit_scale},
                                        {"config_hash", cfg.hash()}});
  std::cout << "temperature " << c.fit.temperature << ", ece " << c.before.ece << " -> " << c.after.ece << "\n";
  return 0;
}

int cmd_plot(const Options& o) {
  const fs::path in = o.out;
  PlotInputs inputs;
  if (fs::exists(in / "metrics.csv")) inputs.rows = read_metrics_csv(in / "metrics.csv");
  if (fs::is_directory(in)) {
    std::vector<fs::path> rel;
    for (const auto& e : fs::directory_iterator(in)) {
      const std::string name = e.path().filename().string();
      if (name.starts_with("reliability") && e.path().extension() == ".csv") rel.push_back(e.path());
    }
    std::sort(rel.begin(), rel.end());
    for (const fs::path& p : rel) {
      std::string tag = p.stem().string().substr(std::string("reliability").size());
      if (!tag.empty() && tag.front() == '_') tag.erase(0, 1);
      inputs.reliability.emplace_back(tag.empty() ? "test" : tag, read_reliability_csv(p));
    }
  }
  if (fs::exists(in / "panels.uqa")) {
    std::map<std::string, ArrayRecord> recs;
    for (ArrayRecord& r : read_arrays(in / "panels.uqa")) recs.emplace(r.name, std::move(r));
    for (std::size_t n = 0; recs.count("input" + std::to_string(n)); ++n) {
      const std::string tag = std::to_string(n);
      const Tensor input = to_tensor(recs.at("input" + tag));
      PanelSet ps{input.shape().h, input.shape().w, {}, {}, {}, {}, {}};
      ps.input = plane_of(input, 0, 0);
      ps.prediction = plane_of(to_tensor(recs.at("prediction" + tag)), 0, 0);
      ps.ground_truth = plane_of(to_tensor(recs.at("ground_truth" + tag)), 0, 0);
      ps.epistemic = plane_of(to_tensor(recs.at("epistemic" + tag)), 0, 0);
      ps.aleatoric = plane_of(to_tensor(recs.at("aleatoric" + tag)), 0, 0);
      inputs.panels.push_back(std::move(ps));
    }
  }
  if (inputs.rows.empty() && inputs.reliability.empty() && inputs.panels.empty()) {
    throw std::runtime_error("plot: nothing to plot in '" + in.string() + "'");
  }
  const auto written = emit_plots(inputs, in / "plots");
  std::cout << "plot: wrote " << written.size() << " figures to " << (in / "plots").string() << "\n";
  return 0;
}

void report_error(const std::string& command, const Options& o, const std::exception& e) {
  nlohmann::json err{{"status", "error"}, {"command", command}, {"message", e.what()}};
  if (const auto* d = dynamic_cast<const TrainingDiverged*>(&e)) {
    err["diverged_epoch"] = d->epoch();
    err["record"] = d->record().to_json();
  }
  std::cerr << err.dump() << "\n";
  if (o.out.empty()) return;
  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (fs::is_directory(o.out)) std::ofstream(fs::path(o.out) / "error.json") << err.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian uncertainty-aware segmentation toolkit"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sc) {
    sc->add_option("--config", o.config, "experiment config (JSON)");
    sc->add_option("--seed", o.seed, "root seed (overrides config seeds)");
    sc->add_option("--out", o.out, "output directory");
    sc->add_option("--dataset", o.dataset, "folder dataset with images/ and masks/");
  };
  CLI::App* gen = app.add_subcommand("gen-data", "generate and export a dataset");
  CLI::App* tr = app.add_subcommand("train", "train one model and evaluate it");
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  CLI::App* sw = app.add_subcommand("sweep", "train over one hyperparameter axis");
  CLI::App* ca = app.add_subcommand("calibrate", "fit a temperature and report ECE before/after");
  CLI::App* pl = app.add_subcommand("plot", "render figures from an output directory");
  for (CLI::App* sc : {gen, tr, ev, sw, ca}) common(sc);
  pl->add_option("--out", o.out, "directory holding metrics/reliability/panel files");
  for (CLI::App* sc : {ev, ca}) sc->add_option("--checkpoint", o.checkpoint, "checkpoint directory");
  ca->add_option("--logit-scale", o.logit_scale, "multiply logits before calibration");
  sw->add_option("--axis", o.axis, "train_samples | dropout_ratio | dropout_layers | loss_strategy | uq_method");
  sw->add_option("--values", o.values, "comma-separated axis values");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (name == "gen-data") return cmd_gen_data(o);
    if (name == "train") return cmd_train(o);
    if (name == "eval") return cmd_eval(o);
    if (name == "sweep") return cmd_sweep(o);
    if (name == "calibrate") return cmd_calibrate(o);
    return cmd_plot(o);
  } catch (const std::exception& e) {
    report_error(name, o, e);
    return 1;
  }
}
