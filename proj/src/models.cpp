#include "uqseg/models.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

#include "uqseg/array_io.hpp"

namespace uqseg {

using nn::BatchNorm2d;
using nn::Conv2d;
using nn::ConvTranspose2d;
using nn::Linear;
using nn::Parameter;
using nn::ReLU;
using nn::StochasticSite;
using nn::WeightParam;

std::string to_string(DropoutPlacement p) {
  switch (p) {
    case DropoutPlacement::final_layer: return "final_layer";
    case DropoutPlacement::last_two: return "last_two";
    case DropoutPlacement::all_decoder: return "all_decoder";
  }
  return "unknown";
}

DropoutPlacement dropout_placement_from_string(const std::string& s) {
  if (s == "final_layer") return DropoutPlacement::final_layer;
  if (s == "last_two") return DropoutPlacement::last_two;
  if (s == "all_decoder") return DropoutPlacement::all_decoder;
  throw std::invalid_argument("unknown dropout placement '" + s + "'");
}

void Model::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

std::size_t Model::parameter_count() {
  std::size_t n = 0;
  for (Parameter* p : parameters()) n += p->value.size();
  return n;
}

void Model::set_dropout_rate(double p) {
  for (StochasticSite* s : active_sites()) s->set_rate(p);
}

std::vector<double> Model::dropout_rates() {
  std::vector<double> r;
  for (StochasticSite* s : active_sites()) r.push_back(s->rate());
  return r;
}

bool Model::stochastic() {
  if (mode() == VariationalMode::bbb) return true;
  for (StochasticSite* s : active_sites()) {
    if (s->rate() > 0.0) return true;
  }
  return false;
}

namespace {

// Configures a site (or the layer after it, for weight-space noise).
void configure_site(StochasticSite& site, WeightParam& following, const VariationalSettings& v) {
  switch (v.mode) {
    case VariationalMode::mcd:
      site.set_bernoulli(v.dropout);
      break;
    case VariationalMode::concrete: {
      ConcreteDropoutState st = v.concrete;
      st.p_logit = ConcreteDropoutState::with_rate(v.dropout.p).p_logit;
      site.set_concrete(st);
      break;
    }
    case VariationalMode::bbb:
      site.disable();
      following.make_bayesian(v.bbb_init_rho, 0.0, v.bbb_prior_sigma);
      break;
  }
}

double concrete_reg(StochasticSite& site, WeightParam& following, std::size_t n_data, bool accumulate) {
  if (site.kind() != StochasticSite::Kind::concrete) return 0.0;
  site.sync_from_parameter();
  const Tensor& w = following.mu().value;
  const double l2 = w.squared_norm();
  const double value = concrete_dropout_regularizer(site.concrete_state(), l2, n_data);
  if (accumulate) {
    const ConcreteRegularizerGrad g = concrete_dropout_regularizer_grad(site.concrete_state(), l2, n_data);
    Tensor& gw = following.mu().grad;
    for (std::size_t i = 0; i < w.size(); ++i) gw[i] += 2.0 * g.d_weight_l2 * w[i];
    site.p_logit()->grad[0] += g.d_p_logit;
  }
  return value;
}

HeteroscedasticOutput split_heads(const Tensor& y, std::size_t classes) {
  return {y.slice_channels(0, classes), y.slice_channels(classes, 2 * classes)};
}

class Segmenter final : public Model {
 public:
  Segmenter(const SegmenterConfig& cfg, Rng& rng) : cfg_(cfg) {
    const auto& ch = cfg.encoder_channels;
    if (ch.empty()) throw std::invalid_argument("segmenter: encoder_channels must not be empty");
    if (cfg.classes < 2) throw std::invalid_argument("segmenter: at least two classes required");
    const std::size_t L = ch.size();
    std::size_t in = cfg.input_channels;
    for (std::size_t i = 0; i < L; ++i) {
      const std::string name = "enc" + std::to_string(i);
      enc_conv_.emplace_back(name + ".conv", in, ch[i], 3, 2, 1, false, rng);
      enc_bn_.emplace_back(name + ".bn", ch[i]);
      in = ch[i];
    }
    enc_relu_.resize(L);
    for (std::size_t i = 0; i < L; ++i) {
      const std::string name = "dec" + std::to_string(i);
      const std::size_t out = i + 1 < L ? ch[L - 2 - i] : ch[0];
      dec_conv_.emplace_back(name + ".deconv", in, out, 3, 2, 1, 1, false, rng);
      dec_bn_.emplace_back(name + ".bn", out);
      dec_out_.push_back(out);
      in = out + ((cfg.skip_connections && i + 1 < L) ? ch[L - 2 - i] : 0);
    }
    dec_relu_.resize(L);
    head_ = Conv2d("head", in, 2 * cfg.classes, 1, 1, 0, true, rng);
    for (std::size_t i = 0; i <= L; ++i) sites_.emplace_back("site" + std::to_string(i));

    std::size_t first_active = L;
    switch (cfg.dropout_placement) {
      case DropoutPlacement::final_layer: first_active = L; break;
      case DropoutPlacement::last_two: first_active = L - 1; break;
      case DropoutPlacement::all_decoder: first_active = 0; break;
    }
    for (std::size_t i = first_active; i <= L; ++i) configure_site(sites_[i], following(i), cfg.variational);
  }

  std::string kind() const override { return "segmenter"; }
  VariationalMode mode() const override { return cfg_.variational.mode; }

  HeteroscedasticOutput forward(const Tensor& x, const PassContext& ctx) override {
    const Shape4& s = x.shape();
    const std::size_t L = enc_conv_.size();
    const std::size_t stride = std::size_t{1} << L;
    if (s.c != cfg_.input_channels) throw std::invalid_argument("segmenter: input channel mismatch " + s.str());
    if (s.h == 0 || s.w == 0 || s.h % stride != 0 || s.w % stride != 0) {
      throw std::invalid_argument("segmenter: input size " + s.str() + " not divisible by total stride " +
                                  std::to_string(stride));
    }
    std::vector<Tensor> skips(L);
    Tensor h = x;
    for (std::size_t i = 0; i < L; ++i) {
      h = enc_relu_[i].forward(enc_bn_[i].forward(enc_conv_[i].forward(h, ctx), ctx), ctx);
      if (cfg_.skip_connections && i + 1 < L) skips[i] = h;
    }
    for (std::size_t i = 0; i < L; ++i) {
      h = sites_[i].forward(h, ctx);
      h = dec_relu_[i].forward(dec_bn_[i].forward(dec_conv_[i].forward(h, ctx), ctx), ctx);
      if (cfg_.skip_connections && i + 1 < L) h = concat_channels(h, skips[L - 2 - i]);
    }
    h = sites_[L].forward(h, ctx);
    return split_heads(head_.forward(h, ctx), cfg_.classes);
  }

  void backward(const Tensor& grad_mean, const Tensor& grad_log_variance) override {
    const std::size_t L = enc_conv_.size();
    Tensor g = head_.backward(concat_channels(grad_mean, grad_log_variance));
    g = sites_[L].backward(g);
    std::vector<Tensor> skip_grads(L);
    for (std::size_t i = L; i-- > 0;) {
      if (cfg_.skip_connections && i + 1 < L) {
        skip_grads[L - 2 - i] = g.slice_channels(dec_out_[i], g.shape().c);
        g = g.slice_channels(0, dec_out_[i]);
      }
      g = dec_conv_[i].backward(dec_bn_[i].backward(dec_relu_[i].backward(g)));
      g = sites_[i].backward(g);
    }
    for (std::size_t i = L; i-- > 0;) {
      if (!skip_grads[i].empty()) g += skip_grads[i];
      g = enc_conv_[i].backward(enc_bn_[i].backward(enc_relu_[i].backward(g)));
    }
  }

  std::vector<Parameter*> parameters() override {
    std::vector<Parameter*> out;
    for (std::size_t i = 0; i < enc_conv_.size(); ++i) {
      enc_conv_[i].collect(out);
      enc_bn_[i].collect(out);
    }
    for (std::size_t i = 0; i < dec_conv_.size(); ++i) {
      dec_conv_[i].collect(out);
      dec_bn_[i].collect(out);
    }
    head_.collect(out);
    for (StochasticSite& s : sites_) {
      if (Parameter* p = s.p_logit()) out.push_back(p);
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor*>> state() override {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (Parameter* p : parameters()) out.emplace_back(p->name, &p->value);
    for (std::size_t i = 0; i < enc_bn_.size(); ++i) {
      out.emplace_back("enc" + std::to_string(i) + ".bn.running_mean", &enc_bn_[i].running_mean());
      out.emplace_back("enc" + std::to_string(i) + ".bn.running_var", &enc_bn_[i].running_var());
    }
    for (std::size_t i = 0; i < dec_bn_.size(); ++i) {
      out.emplace_back("dec" + std::to_string(i) + ".bn.running_mean", &dec_bn_[i].running_mean());
      out.emplace_back("dec" + std::to_string(i) + ".bn.running_var", &dec_bn_[i].running_var());
    }
    return out;
  }

  std::vector<StochasticSite*> active_sites() override {
    std::vector<StochasticSite*> out;
    for (StochasticSite& s : sites_) {
      if (s.active()) out.push_back(&s);
    }
    return out;
  }

  double kl() override {
    double acc = 0.0;
    for (std::size_t i = 0; i < sites_.size(); ++i) acc += following(i).kl();
    return acc;
  }

  void add_kl_grad(double scale) override {
    for (std::size_t i = 0; i < sites_.size(); ++i) following(i).add_kl_grad(scale);
  }

  double concrete_regularizer(std::size_t n_data, bool accumulate_grad) override {
    double acc = 0.0;
    for (std::size_t i = 0; i < sites_.size(); ++i) acc += concrete_reg(sites_[i], following(i), n_data, accumulate_grad);
    return acc;
  }

 private:
  WeightParam& following(std::size_t site) {
    return site < dec_conv_.size() ? dec_conv_[site].weight() : head_.weight();
  }

  SegmenterConfig cfg_;
  std::vector<Conv2d> enc_conv_;
  std::vector<BatchNorm2d> enc_bn_;
  std::vector<ReLU> enc_relu_;
  std::vector<ConvTranspose2d> dec_conv_;
  std::vector<BatchNorm2d> dec_bn_;
  std::vector<ReLU> dec_relu_;
  std::vector<std::size_t> dec_out_;
  std::vector<StochasticSite> sites_;
  Conv2d head_;
};

class TwoMoonsNet final : public Model {
 public:
  static constexpr std::size_t kInputs = 2;
  static constexpr std::size_t kClasses = 2;

  TwoMoonsNet(const TwoMoonsNetConfig& cfg, Rng& rng) : cfg_(cfg), site_("site") {
    if (cfg.hidden.empty()) throw std::invalid_argument("two-moons net: at least one hidden layer required");
    std::size_t in = kInputs;
    for (std::size_t i = 0; i < cfg.hidden.size(); ++i) {
      hidden_.emplace_back("fc" + std::to_string(i), in, cfg.hidden[i], rng);
      in = cfg.hidden[i];
    }
    relu_.resize(hidden_.size());
    out_ = Linear("out", in, 2 * kClasses, rng);
    configure_site(site_, out_.weight(), cfg.variational);
    if (cfg.zero_init) {
      for (Parameter* p : parameters()) {
        if (p->name.ends_with(".weight") || p->name.ends_with(".bias")) p->value.fill(0.0);
      }
    }
  }

  std::string kind() const override { return "twomoons"; }
  VariationalMode mode() const override { return cfg_.variational.mode; }

  HeteroscedasticOutput forward(const Tensor& x, const PassContext& ctx) override {
    if (x.shape().c * x.shape().h * x.shape().w != kInputs) {
      throw std::invalid_argument("two-moons net: expected [N x 2] input, got " + x.shape().str());
    }
    Tensor h({x.shape().n, kInputs, 1, 1}, std::vector<double>(x.values().begin(), x.values().end()));
    for (std::size_t i = 0; i < hidden_.size(); ++i) h = relu_[i].forward(hidden_[i].forward(h, ctx), ctx);
    h = site_.forward(h, ctx);
    return split_heads(out_.forward(h, ctx), kClasses);
  }

  void backward(const Tensor& grad_mean, const Tensor& grad_log_variance) override {
    Tensor g = out_.backward(concat_channels(grad_mean, grad_log_variance));
    g = site_.backward(g);
    for (std::size_t i = hidden_.size(); i-- > 0;) g = hidden_[i].backward(relu_[i].backward(g));
  }

  std::vector<Parameter*> parameters() override {
    std::vector<Parameter*> out;
    for (Linear& l : hidden_) l.collect(out);
    out_.collect(out);
    if (Parameter* p = site_.p_logit()) out.push_back(p);
    return out;
  }

  std::vector<std::pair<std::string, Tensor*>> state() override {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (Parameter* p : parameters()) out.emplace_back(p->name, &p->value);
    return out;
  }

  std::vector<StochasticSite*> active_sites() override {
    if (site_.active()) return {&site_};
    return {};
  }

  double kl() override { return out_.weight().kl(); }
  void add_kl_grad(double scale) override { out_.weight().add_kl_grad(scale); }
  double concrete_regularizer(std::size_t n_data, bool accumulate_grad) override {
    return concrete_reg(site_, out_.weight(), n_data, accumulate_grad);
  }

 private:
  TwoMoonsNetConfig cfg_;
  std::vector<Linear> hidden_;
  std::vector<ReLU> relu_;
  StochasticSite site_;
  Linear out_;
};

}  // namespace

std::unique_ptr<Model> build_segmenter(const SegmenterConfig& cfg, Rng& rng) {
  return std::make_unique<Segmenter>(cfg, rng);
}

std::unique_ptr<Model> build_twomoons_net(const TwoMoonsNetConfig& cfg, Rng& rng) {
  return std::make_unique<TwoMoonsNet>(cfg, rng);
}

HeteroscedasticOutput forward(Model& model, const Tensor& batch, bool sampling, Rng& rng) {
  PassContext ctx;
  ctx.sampling = sampling;
  ctx.train = false;
  ctx.rng = &rng;
  return model.forward(batch, ctx);
}

// ---------------------------------------------------------------- config <-> json

nlohmann::json to_json(const VariationalSettings& v) {
  return {
      {"mode", nn::to_string(v.mode)},
      {"dropout_p", v.dropout.p},
      {"dropout_scaling", v.dropout.scaling == DropoutScaling::inverted ? "inverted" : "plain"},
      {"concrete_temperature", v.concrete.relaxation_temperature},
      {"concrete_weight_reg", v.concrete.weight_reg_coeff},
      {"concrete_dropout_reg", v.concrete.dropout_reg_coeff},
      {"bbb_prior_sigma", v.bbb_prior_sigma},
      {"bbb_init_rho", v.bbb_init_rho},
  };
}

VariationalSettings variational_settings_from_json(const nlohmann::json& j) {
  VariationalSettings v;
  v.mode = nn::variational_mode_from_string(j.value("mode", std::string("mcd")));
  v.dropout.p = j.value("dropout_p", v.dropout.p);
  const std::string scaling = j.value("dropout_scaling", std::string("inverted"));
  if (scaling != "inverted" && scaling != "plain") throw std::invalid_argument("unknown dropout scaling '" + scaling + "'");
  v.dropout.scaling = scaling == "plain" ? DropoutScaling::plain : DropoutScaling::inverted;
  v.dropout.learnable = v.mode == VariationalMode::concrete;
  v.concrete.relaxation_temperature = j.value("concrete_temperature", v.concrete.relaxation_temperature);
  v.concrete.weight_reg_coeff = j.value("concrete_weight_reg", v.concrete.weight_reg_coeff);
  v.concrete.dropout_reg_coeff = j.value("concrete_dropout_reg", v.concrete.dropout_reg_coeff);
  v.bbb_prior_sigma = j.value("bbb_prior_sigma", v.bbb_prior_sigma);
  v.bbb_init_rho = j.value("bbb_init_rho", v.bbb_init_rho);
  v.dropout.validate();
  return v;
}

nlohmann::json to_json(const SegmenterConfig& c) {
  return {
      {"encoder_channels", c.encoder_channels},
      {"input_channels", c.input_channels},
      {"classes", c.classes},
      {"dropout_placement", to_string(c.dropout_placement)},
      {"variational", to_json(c.variational)},
      {"skip_connections", c.skip_connections},
  };
}

SegmenterConfig segmenter_config_from_json(const nlohmann::json& j) {
  SegmenterConfig c;
  c.encoder_channels = j.value("encoder_channels", c.encoder_channels);
  c.input_channels = j.value("input_channels", c.input_channels);
  c.classes = j.value("classes", c.classes);
  c.dropout_placement = dropout_placement_from_string(j.value("dropout_placement", std::string("final_layer")));
  if (j.contains("variational")) c.variational = variational_settings_from_json(j.at("variational"));
  c.skip_connections = j.value("skip_connections", c.skip_connections);
  return c;
}

nlohmann::json to_json(const TwoMoonsNetConfig& c) {
  return {{"hidden", c.hidden}, {"variational", to_json(c.variational)}, {"zero_init", c.zero_init}};
}

TwoMoonsNetConfig twomoons_config_from_json(const nlohmann::json& j) {
  TwoMoonsNetConfig c;
  c.hidden = j.value("hidden", c.hidden);
  if (j.contains("variational")) c.variational = variational_settings_from_json(j.at("variational"));
  c.zero_init = j.value("zero_init", c.zero_init);
  return c;
}

std::string config_hash(const nlohmann::json& config) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(config.dump())));
  return buf;
}

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(Model& model, const nlohmann::json& config, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const nlohmann::json snapshot = {{"config", config}, {"config_hash", config_hash(config)}, {"model", model.kind()}};
  std::ofstream(dir / "config.json") << snapshot.dump(2) << "\n";
  std::vector<ArrayRecord> records;
  for (auto& [name, tensor] : model.state()) records.push_back(to_record(name, *tensor));
  write_arrays(dir / "weights.uqa", records);
}

void load_checkpoint(Model& model, const nlohmann::json& config, const std::filesystem::path& dir) {
  std::ifstream is(dir / "config.json");
  if (!is) throw std::runtime_error("checkpoint: missing config.json in '" + dir.string() + "'");
  const nlohmann::json snapshot = nlohmann::json::parse(is);
  const std::string stored = snapshot.at("config_hash").get<std::string>();
  if (stored != config_hash(snapshot.at("config"))) {
    throw std::runtime_error("checkpoint: config snapshot does not match its recorded hash");
  }
  if (stored != config_hash(config)) {
    throw std::runtime_error("checkpoint: config hash mismatch (checkpoint " + stored + ", requested " +
                             config_hash(config) + ")");
  }
  std::map<std::string, ArrayRecord> by_name;
  for (ArrayRecord& r : read_arrays(dir / "weights.uqa")) by_name.emplace(r.name, std::move(r));
  for (auto& [name, tensor] : model.state()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
    Tensor t = to_tensor(it->second);
    if (!(t.shape() == tensor->shape())) throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    *tensor = std::move(t);
  }
}

}  // namespace uqseg
