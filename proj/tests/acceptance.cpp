// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any selected criterion fails.
#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "uqseg/boundary.hpp"
#include "uqseg/calibration.hpp"
#include "uqseg/experiment.hpp"
#include "uqseg/losses.hpp"
#include "uqseg/variational.hpp"

using namespace uqseg;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

json moons_base() {
  return json::parse(R"({
    "data": {"task": "twomoons", "n_train": 200, "n_val": 100, "n_test": 500, "noise_sd": 0.15},
    "model": {"hidden": [64, 64], "variational": {"mode": "mcd", "dropout_p": 0.2}},
    "optimizer": {"max_epochs": 100, "batch_size": 32, "lr": 0.01},
    "mc_samples": 25
  })");
}

// Desk-scale crack setup shared by the segmentation criteria.
json crack_base(std::size_t size, std::size_t epochs) {
  json j = json::parse(R"({
    "data": {"task": "cracks", "n_train": 200, "n_val": 20, "n_test": 50},
    "model": {"encoder_channels": [8, 16, 32, 64], "dropout_placement": "final_layer",
              "variational": {"mode": "mcd", "dropout_p": 0.2}},
    "loss": {"strategy": "baseline_sum", "use_abl": true, "use_iou": true, "nll_samples": 10},
    "optimizer": {"batch_size": 8, "lr": 0.01},
    "mc_samples": 25
  })");
  j["data"]["size"] = size;
  j["optimizer"]["max_epochs"] = epochs;
  return j;
}

struct RunOut {
  MetricsRow test;
  std::optional<MetricsRow> shift, noise;
  std::vector<double> dropout_rates;
};

// Same rng conventions as a sweep run.
RunOut run(const json& config, std::uint64_t seed) {
  const ExperimentConfig cfg = ExperimentConfig::from_json(config);
  const TaskData data = build_data(cfg, seed);
  TrainResult tr = train(cfg, data, seed);
  const Rng eval_rng = Rng(seed).substream("dropout").substream("eval");
  RunOut out;
  out.test = evaluate(*tr.model, data.test, cfg, eval_rng).row;
  if (data.ood_shift) out.shift = evaluate(*tr.model, *data.ood_shift, cfg, eval_rng.substream("shift")).row;
  if (data.ood_noise) out.noise = evaluate(*tr.model, *data.ood_noise, cfg, eval_rng.substream("noise")).row;
  out.dropout_rates = tr.record.dropout_rates;
  return out;
}

Outcome epistemic_trend() {
  const std::vector<std::size_t> sizes{50, 200, 1000, 5000};
  std::vector<double> x, epi, ale;
  for (std::size_t n : sizes) {
    double e = 0.0, a = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      json c = moons_base();
      c["data"]["n_train"] = n;
      const RunOut r = run(c, seed);
      e += r.test.epistemic / 5.0;
      a += r.test.aleatoric / 5.0;
    }
    x.push_back(static_cast<double>(n));
    epi.push_back(e);
    ale.push_back(a);
  }
  const auto rho = spearman(x, epi);
  std::string d = "rho=" + (rho ? fmt(*rho) : std::string("undefined")) + " epistemic=[";
  for (std::size_t i = 0; i < epi.size(); ++i) d += (i ? " " : "") + fmt(epi[i]);
  d += "] aleatoric=[";
  for (std::size_t i = 0; i < ale.size(); ++i) d += (i ? " " : "") + fmt(ale[i]);
  d += "]";
  return {rho && *rho <= -0.8, d};
}

Outcome ood_inflation() {
  json c = crack_base(64, 30);
  c["data"]["ood"] = true;
  c["data"]["ood_texture_scale"] = 3.0;
  c["data"]["ood_noise_variance"] = 30.0;
  bool ok = true;
  std::string d;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const RunOut r = run(c, seed);
    const double h = r.test.entropy;
    const bool s_ok = r.shift->entropy >= 1.2 * h && r.shift->ece > r.test.ece;
    const bool n_ok = r.noise->entropy >= 1.2 * h && r.noise->ece > r.test.ece;
    ok = ok && s_ok && n_ok;
    d += "seed" + std::to_string(seed) + "{H in/shift/noise=" + fmt(h) + "/" + fmt(r.shift->entropy) + "/" +
         fmt(r.noise->entropy) + " ECE=" + fmt(r.test.ece) + "/" + fmt(r.shift->ece) + "/" + fmt(r.noise->ece) + "} ";
  }
  return {ok, d};
}

Outcome boundary_benefit() {
  const json base = crack_base(64, 30);
  double full = 0.0, nll = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    full += run(apply_axis(base, "loss_strategy", "baseline_sum"), seed).test.f1 / 3.0;
    nll += run(apply_axis(base, "loss_strategy", "nll_only"), seed).test.f1 / 3.0;
  }
  return {full - nll >= 0.01, "F1 nll+abl+iou=" + fmt(full) + " nll_only=" + fmt(nll) + " gain=" + fmt(full - nll)};
}

Outcome temperature_scaling() {
  json c = crack_base(32, 15);
  c["data"]["n_train"] = 100;
  const ExperimentConfig cfg = ExperimentConfig::from_json(c);
  const TaskData data = build_data(cfg, 0);
  TrainResult tr = train(cfg, data, 0);
  const Rng rng = Rng(0).substream("dropout").substream("calibrate");
  const CalibrationOutcome o = calibrate(*tr.model, data.val, data.test, cfg, rng, 3.0);
  const bool ok = o.after.ece <= 0.9 * o.before.ece && o.f1_after == o.f1_before;
  return {ok, "logits x3: ECE " + fmt(o.before.ece) + " -> " + fmt(o.after.ece) + " T=" + fmt(o.fit.temperature) +
                  " dF1=" + fmt(o.f1_after - o.f1_before)};
}

Outcome placement_ablation() {
  json c = crack_base(64, 30);
  c["model"]["variational"]["dropout_p"] = 0.5;
  int wins = 0;
  std::string d;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const double all = run(apply_axis(c, "dropout_layers", "all_decoder"), seed).test.entropy;
    const double last = run(apply_axis(c, "dropout_layers", "final_layer"), seed).test.entropy;
    wins += all > last;
    d += "seed" + std::to_string(seed) + "{all=" + fmt(all) + " final=" + fmt(last) + "} ";
  }
  return {wins == 3, std::to_string(wins) + "/3 " + d};
}

Outcome concrete_trend() {
  json c = moons_base();
  c["model"]["variational"]["mode"] = "concrete";
  int wins = 0;
  std::string d;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    c["data"]["n_train"] = 100;
    const double small = run(c, seed).dropout_rates.at(0);
    c["data"]["n_train"] = 5000;
    const double large = run(c, seed).dropout_rates.at(0);
    wins += large < small;
    d += fmt(small, 3) + ">" + fmt(large, 3) + " ";
  }
  return {wins == 5, std::to_string(wins) + "/5 p(n=100)>p(n=5000): " + d};
}

// ---------------------------------------------------------------- oracles

Outcome oracle_suite() {
  std::vector<std::string> failed;
  auto expect = [&failed](bool ok, const std::string& what) {
    if (!ok) failed.push_back(what);
  };
  Rng rng(2024);

  {
    const std::vector<double> c{0.8, 0.8, 0.2, 0.2};
    const std::vector<std::uint8_t> k{1, 0, 0, 0};
    expect(std::abs(ece(c, k).ece - 0.25) < 1e-12, "ece hand bins");
  }
  {
    bool same = true;
    for (int t = 0; t < 20; ++t) {
      std::vector<std::uint8_t> m(256);
      for (auto& v : m) v = rng.bernoulli(0.05) ? 1 : 0;
      m[rng.below(256)] = 1;
      const DistanceField f = distance_transform(m, 16, 16);
      for (int i = 0; i < 256; ++i) {
        int best = std::numeric_limits<int>::max();
        for (int j = 0; j < 256; ++j)
          if (m[j]) best = std::min(best, (i / 16 - j / 16) * (i / 16 - j / 16) + (i % 16 - j % 16) * (i % 16 - j % 16));
        same = same && f.values[i] == std::sqrt(static_cast<double>(best));
      }
    }
    expect(same, "distance transform vs brute force");
  }
  {
    bool same = true;
    for (int t = 0; t < 20; ++t) {
      LabelMap gt(1, 8, 8);
      Tensor p({1, 2, 8, 8});
      std::vector<int> pred(64);
      for (int i = 0; i < 64; ++i) {
        gt[i] = static_cast<int>(rng.below(2));
        pred[i] = rng.bernoulli(0.25) ? 1 - gt[i] : gt[i];
        p[pred[i] * 64 + i] = 1.0;
      }
      double acc = 0.0;
      int present = 0;
      for (int c = 0; c < 2; ++c) {
        int inter = 0, uni = 0, has = 0;
        for (int i = 0; i < 64; ++i) {
          inter += gt[i] == c && pred[i] == c;
          uni += gt[i] == c || pred[i] == c;
          has += gt[i] == c;
        }
        if (has) {
          ++present;
          acc += 1.0 - static_cast<double>(inter) / uni;
        }
      }
      same = same && std::abs(lovasz_jaccard_loss(p, gt).loss - acc / present) < 1e-12;
    }
    expect(same, "lovasz vs 1 - IoU");
  }
  {
    const double e = 1.3, v = 0.8, p = 0.3;
    const std::size_t n = 1000000;
    std::vector<double> x(n);
    for (double& xi : x) xi = rng.normal(e, std::sqrt(v));
    const auto y = mc_dropout_apply(x, {p, false, DropoutScaling::plain}, rng);
    const double m = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double var = 0.0;
    for (double yi : y) var += (yi - m) * (yi - m);
    var /= n;
    const MomentPair ref = propagate_dropout_moments({e, v}, p);
    expect(std::abs(m / ref.mean - 1.0) < 0.01 && std::abs(var / ref.variance - 1.0) < 0.01, "dropout moments vs MC");
  }
  {
    auto kl = [](double mu, double sigma) {
      return bbb_kl({Tensor({1, 1, 1, 1}, mu), Tensor({1, 1, 1, 1}, inverse_softplus(sigma)), 0.0, 1.0});
    };
    expect(std::abs(kl(0.0, 1.0)) < 1e-12 && std::abs(kl(1.0, 1.0) - 0.5) < 1e-12 &&
               std::abs(kl(0.0, 2.0) - 0.8069) < 1e-4,
           "gaussian kl closed forms");
  }
  {
    const std::size_t N = 40, D = 4, draws = 100000;
    const double keep = 0.6;
    std::vector<double> X(N * D), y(N), w(D);
    for (double& v : X) v = rng.normal();
    for (double& v : y) v = rng.normal();
    for (double& v : w) v = rng.normal();
    double mc = 0.0;
    for (std::size_t t = 0; t < draws; ++t) {
      const auto z = sample_dropout_multipliers(N * D, {1.0 - keep, false, DropoutScaling::plain}, rng);
      for (std::size_t i = 0; i < N; ++i) {
        double pr = 0.0;
        for (std::size_t j = 0; j < D; ++j) pr += z[i * D + j] * X[i * D + j] * w[j];
        mc += (y[i] - pr) * (y[i] - pr) / draws;
      }
    }
    double ridge = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      double pr = 0.0;
      for (std::size_t j = 0; j < D; ++j) pr += X[i * D + j] * keep * w[j];
      ridge += (y[i] - pr) * (y[i] - pr);
    }
    for (std::size_t j = 0; j < D; ++j) {
      double col = 0.0;
      for (std::size_t i = 0; i < N; ++i) col += X[i * D + j] * X[i * D + j];
      ridge += (1.0 - keep) / keep * col * keep * w[j] * keep * w[j];
    }
    expect(std::abs(mc / ridge - 1.0) < 0.01, "dropout ridge identity");
  }
  {
    const Shape4 s{2, 3, 3, 3};
    HeteroscedasticOutput out{Tensor(s), Tensor(s)};
    for (std::size_t i = 0; i < s.size(); ++i) {
      out.mean_logits[i] = rng.normal();
      out.log_variance[i] = rng.normal(0.0, 0.5);
    }
    LabelMap lab(2, 3, 3);
    for (std::size_t i = 0; i < lab.size(); ++i) lab[i] = static_cast<int>(rng.below(3));
    const std::size_t t = 5;
    std::vector<double> eps(t * s.size());
    for (double& e : eps) e = rng.normal();
    const NllResult g = heteroscedastic_nll(out, lab, eps, t);
    double worst = 0.0;
    for (int head = 0; head < 2; ++head)
      for (std::size_t i = 0; i < s.size(); ++i) {
        HeteroscedasticOutput a = out, b = out;
        (head ? a.log_variance : a.mean_logits)[i] += 1e-6;
        (head ? b.log_variance : b.mean_logits)[i] -= 1e-6;
        const double fd =
            (heteroscedastic_nll(a, lab, eps, t, false).loss - heteroscedastic_nll(b, lab, eps, t, false).loss) / 2e-6;
        const double an = head ? g.grad_log_variance[i] : g.grad_mean[i];
        worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-8));
      }
    expect(worst < 1e-3, "nll gradient check");
  }
  std::string d = "7 oracle groups";
  for (const std::string& f : failed) d += "; failed: " + f;
  return {failed.empty(), d};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  const auto root = std::filesystem::temp_directory_path() / "uqseg_acceptance_determinism";
  std::filesystem::remove_all(root);
  json moons = moons_base();
  moons["optimizer"]["max_epochs"] = 20;
  moons["seeds"] = {0, 1};
  json crack = crack_base(32, 2);
  crack["data"]["n_train"] = 16;
  crack["mc_samples"] = 5;
  crack["seeds"] = {3};
  bool ok = true;
  std::size_t bytes = 0;
  for (const auto& [name, cfg, axis, values] :
       std::vector<std::tuple<std::string, json, std::string, std::vector<std::string>>>{
           {"moons", moons, "dropout_ratio", {"0.1", "0.3"}}, {"cracks", crack, "loss_strategy", {"cov"}}}) {
    const ExperimentConfig c = ExperimentConfig::from_json(cfg);
    sweep(c, axis, values, root / name / "a");
    sweep(c, axis, values, root / name / "b");
    const std::string a = slurp(root / name / "a" / "metrics.csv");
    ok = ok && !a.empty() && a == slurp(root / name / "b" / "metrics.csv");
    bytes += a.size();
  }
  std::filesystem::remove_all(root);
  return {ok, "two configs rerun, " + std::to_string(bytes) + " CSV bytes compared"};
}

struct Criterion {
  int id;
  double budget_s;
  std::function<Outcome()> fn;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  app.add_option("criteria", only, "criterion numbers to run (default: all)");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all{{1, 300, epistemic_trend},      {2, 900, ood_inflation},
                                   {3, 1200, boundary_benefit},    {4, 120, temperature_scaling},
                                   {5, 1200, placement_ablation},   {6, 300, concrete_trend},
                                   {7, 180, oracle_suite},         {8, 300, determinism}};
  int failures = 0;
  for (const Criterion& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::cout << "criterion " << c.id << ": " << (pass ? "PASS" : "FAIL") << " (" << fmt(secs, 3) << "s"
              << (in_time ? "" : " over budget") << ") " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
