#include "pbn/train.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>

#include "pbn/error.hpp"

namespace pbn {
namespace {

double softplus(double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

// Unit read by the binary head: a single-unit network always uses unit 0.
int binary_unit(Eigen::Index k, int class_index) { return k == 1 ? 0 : class_index; }

double sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

// Copy of the model with the training output density, or the model itself when unchanged.
const NetworkModel& training_view(const NetworkModel& model, const DaLossConfig& cfg, NetworkModel& storage) {
  const int unit = binary_unit(model.output_dim(), cfg.class_index);
  if (model.output.kind != OutputKind::ted_indicator ||
      (model.output.class_index == unit && model.output.confidence == cfg.train_confidence)) {
    return model;
  }
  storage = model;
  storage.output.class_index = unit;
  storage.output.confidence = cfg.train_confidence;
  return storage;
}

DaGradResult da_impl(const NetworkModel& model_in, const Dataset& batch, const DaLossConfig& cfg,
                     bool with_grad, bool allow_all_failed) {
  if (batch.empty()) throw EmptyBatch("empty batch");
  NetworkModel storage;
  const NetworkModel& model = training_view(model_in, cfg, storage);
  NetworkEvaluator ev(model);
  DaGradResult out;
  DaLossResult& r = out.loss;
  r.valid.assign(batch.size(), true);
  NetworkGradient g;
  if (with_grad) g = NetworkGradient::zeros_like(model);
  const int k = model.output_dim();
  if (k > 1 && cfg.class_index >= k) throw DimensionError("class index exceeds the output dimension");
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch[i];
    if (s.label < 0 || (cfg.head == CeHead::k_way && s.label >= k)) {
      throw DimensionError("label " + std::to_string(s.label) + " out of range");
    }
    ForwardTrace trace;
    try {
      trace = ev.forward(s.x);
    } catch (const ParameterError&) {
      // No forward output either: the sample drops out of both terms.
      r.valid[i] = false;
      if (s.label == cfg.class_index) {
        ++r.class_samples;
        ++r.failed;
      }
      continue;
    }
    const Eigen::VectorXd& pre = trace.pre.back();
    Eigen::VectorXd d_pre;
    r.ce += cross_entropy(pre, s.label, cfg.class_index, cfg.head, with_grad ? &d_pre : nullptr);
    if (forward_error(pre, s.label, cfg.class_index, cfg.head)) ++r.errors;
    if (with_grad && cfg.ce_scale > 0.0) {
      NetworkGradient gc = ev.backprop_pre(trace, d_pre);
      gc *= cfg.ce_scale;
      g += gc;
    }
    if (s.label != cfg.class_index) continue;
    ++r.class_samples;
    try {
      if (with_grad) {
        LikelihoodResult lr = ev.log_likelihood_grad(s.x);
        if (!std::isfinite(lr.value)) throw SamplingFailure("non-finite likelihood", 0.0);
        r.nll -= lr.value;
        lr.grad *= -1.0;
        g += lr.grad;
      } else {
        const double v = ev.log_likelihood(s.x);
        if (!std::isfinite(v)) throw SamplingFailure("non-finite likelihood", 0.0);
        r.nll -= v;
      }
    } catch (const SamplingFailure&) {
      r.valid[i] = false;
      ++r.failed;
    }
  }
  if (r.class_samples > 0 && r.failed == r.class_samples && !allow_all_failed) {
    throw AllFailed("all " + std::to_string(r.class_samples) + " class samples failed");
  }
  r.loss = r.nll + cfg.ce_scale * r.ce;
  if (with_grad) out.grad = flatten_gradient(model, g);
  return out;
}

}  // namespace

bool AugmentConfig::enabled() const {
  return map_time > 0 && map_freq > 0 &&
         (max_time_shift > 0 || max_freq_shift > 0 || max_fractional_time > 0.0 ||
          max_fractional_freq > 0.0);
}

void AugmentConfig::validate() const {
  if (map_time < 0 || map_freq < 0) throw ConfigError("map shape must be nonnegative");
  if (max_time_shift < 0 || max_freq_shift < 0 || max_fractional_time < 0.0 || max_fractional_freq < 0.0) {
    throw ConfigError("shift bounds must be nonnegative");
  }
  if (max_time_shift > map_time || max_freq_shift > map_freq || max_fractional_time > map_time ||
      max_fractional_freq > map_freq) {
    throw ConfigError("shift bounds exceed map dimensions");
  }
}

void DaLossConfig::validate() const {
  if (!(ce_scale >= 0.0)) throw ConfigError("ce_scale must be >= 0");
  if (!(adam.step > 0.0)) throw ConfigError("step size must be > 0");
  if (!(train_confidence > 0.0)) throw ConfigError("train_confidence must be > 0");
  if (class_index < 0) throw ConfigError("class index must be >= 0");
  if (epochs < 0 || batch_size < 0 || patience < 1) throw ConfigError("invalid epoch, batch or patience setting");
  augment.validate();
}

double DaLossResult::sampling_efficiency() const {
  return class_samples == 0 ? 1.0 : static_cast<double>(class_samples - failed) / class_samples;
}

double cross_entropy(const Eigen::VectorXd& pre, int label, int class_index, CeHead head,
                     Eigen::VectorXd* d_pre) {
  if (head == CeHead::binary) {
    const int unit = binary_unit(pre.size(), class_index);
    const double v = pre(unit);
    const bool target = label == class_index;
    if (d_pre) {
      *d_pre = Eigen::VectorXd::Zero(pre.size());
      (*d_pre)(unit) = sigmoid(v) - (target ? 1.0 : 0.0);
    }
    return target ? softplus(-v) : softplus(v);
  }
  const double m = pre.maxCoeff();
  const Eigen::ArrayXd e = (pre.array() - m).exp();
  const double sum = e.sum();
  if (d_pre) {
    *d_pre = e / sum;
    (*d_pre)(label) -= 1.0;
  }
  return m + std::log(sum) - pre(label);
}

bool forward_error(const Eigen::VectorXd& pre, int label, int class_index, CeHead head) {
  if (head == CeHead::binary) {
    return (pre(binary_unit(pre.size(), class_index)) > 0.0) != (label == class_index);
  }
  return argmax_lowest(pre) != label;
}

DaLossResult da_loss(const NetworkModel& model, const Dataset& batch, const DaLossConfig& cfg) {
  return da_impl(model, batch, cfg, false, false).loss;
}

DaGradResult da_grad(const NetworkModel& model, const Dataset& batch, const DaLossConfig& cfg) {
  return da_impl(model, batch, cfg, true, false);
}

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.rel_error);
  return m;
}

const GradCheckEntry& GradCheckReport::worst() const {
  return *std::max_element(entries.begin(), entries.end(),
                           [](const auto& a, const auto& b) { return a.rel_error < b.rel_error; });
}

GradCheckReport grad_check(const NetworkModel& model, const Dataset& batch, const DaLossConfig& cfg,
                           double step) {
  const DaGradResult a = da_grad(model, batch, cfg);
  const auto names = parameter_names(model);
  NetworkModel m = model;
  const Eigen::VectorXd theta = get_parameters(model);
  GradCheckReport rep;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    Eigen::VectorXd t = theta;
    t(i) = theta(i) + step;
    set_parameters(m, t);
    const double up = da_loss(m, batch, cfg).loss;
    t(i) = theta(i) - step;
    set_parameters(m, t);
    const double dn = da_loss(m, batch, cfg).loss;
    GradCheckEntry e;
    e.name = names[i];
    e.analytic = a.grad(i);
    e.numeric = (up - dn) / (2 * step);
    e.rel_error = std::abs(e.analytic - e.numeric) /
                  std::max({std::abs(e.analytic), std::abs(e.numeric), kGradCheckFloor});
    rep.entries.push_back(std::move(e));
  }
  return rep;
}

TrainResult train_pbn_da(NetworkModel model, const Dataset& data, const DaLossConfig& cfg, Rng& rng) {
  cfg.validate();
  if (data.empty()) throw EmptyBatch("empty training set");
  if (model.output.kind == OutputKind::ted_indicator) {
    model.output.class_index = binary_unit(model.output_dim(), cfg.class_index);
    model.output.confidence = cfg.train_confidence;
  }
  model.validate();
  if (cfg.augment.enabled()) {
    for (const auto& s : data) {
      if (s.x.size() != cfg.augment.map_time * cfg.augment.map_freq) {
        throw ConfigError("augmentation map shape does not match the input length");
      }
    }
  }

  TrainResult res;
  Eigen::VectorXd theta = get_parameters(model);
  Eigen::VectorXd good = theta;
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(theta.size()), m2 = m1;
  long step = 0;
  const std::size_t bs = cfg.batch_size > 0 ? static_cast<std::size_t>(cfg.batch_size) : data.size();
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  auto diverge = [&] {
    set_parameters(model, good);
    res.stop_reason = "diverged";
  };

  res.stop_reason = "epochs";
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    bool bad = false;
    for (std::size_t start = 0; start < order.size() && !bad; start += bs) {
      Dataset batch;
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) {
        LabeledSample s = data[order[i]];
        if (cfg.augment.enabled()) {
          const auto map = FeatureMap::unflatten(s.x, cfg.augment.map_time, cfg.augment.map_freq);
          s.x = FeatureMap{augment(map, cfg.augment, rng), {}, {}}.flatten();
        }
        batch.push_back(std::move(s));
      }
      const DaGradResult r = da_impl(model, batch, cfg, true, true);
      if (!std::isfinite(r.loss.loss) || !r.grad.allFinite()) {
        bad = true;
        break;
      }
      good = theta;
      ++step;
      const auto& a = cfg.adam;
      m1 = a.beta1 * m1 + (1 - a.beta1) * r.grad;
      m2 = a.beta2 * m2 + (1 - a.beta2) * r.grad.cwiseAbs2();
      const double c1 = 1 - std::pow(a.beta1, static_cast<double>(step));
      const double c2 = 1 - std::pow(a.beta2, static_cast<double>(step));
      theta -= (a.step * (m1 / c1).array() / ((m2 / c2).array().sqrt() + a.epsilon)).matrix();
      set_parameters(model, theta);
    }
    if (bad) {
      diverge();
      break;
    }
    const DaLossResult e = da_impl(model, data, cfg, false, true).loss;
    if (!std::isfinite(e.loss)) {
      diverge();
      break;
    }
    good = theta;
    res.history.push_back({epoch, e.nll, e.ce, e.errors, e.sampling_efficiency()});
    const auto n = res.history.size();
    if (e.errors == 0 && n > static_cast<std::size_t>(cfg.patience)) {
      const double before = res.history[n - 1 - cfg.patience].nll;
      if (before - e.nll < cfg.plateau_tol * (1.0 + std::abs(e.nll))) {
        res.stop_reason = "converged";
        break;
      }
    }
  }
  res.model = std::move(model);
  return res;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history,
                       const std::string& config_hash) {
  std::ofstream f(path);
  if (!f) throw Error("cannot open " + path.string());
  if (!config_hash.empty()) f << "# config_hash=" << config_hash << '\n';
  f << "epoch,nll,ce,errors,sampling_efficiency\n";
  char buf[160];
  for (const auto& h : history) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%d,%.17g\n", h.epoch, h.nll, h.ce, h.errors,
                  h.sampling_efficiency);
    f << buf;
  }
}

NetworkModel initialize_network(int input_dim, const std::vector<LayerPlan>& plan,
                                const OutputDensitySpec& output, Rng& rng, int gaussian_group_len,
                                std::optional<int> tap_index) {
  NetworkModel net;
  net.input_dim_hint = input_dim;
  int in = input_dim;
  for (const auto& p : plan) {
    if (p.conv) {
      const ConvGeometry& g = *p.conv;
      if (g.input_size() != in) throw DimensionError("convolution input size does not match the previous layer");
      std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(g.kernel_time * g.kernel_freq * g.in_channels));
      Eigen::VectorXd k(g.kernel_size());
      for (Eigen::Index i = 0; i < k.size(); ++i) k(i) = nd(rng);
      net.layers.push_back(LayerSpec::convolution(g, std::move(k), Eigen::VectorXd::Zero(g.out_channels),
                                                  p.input_family, p.activation));
    } else {
      std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(in));
      Eigen::MatrixXd w(in, p.output_dim);
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = nd(rng);
      net.layers.push_back(LayerSpec::dense(std::move(w), Eigen::VectorXd::Zero(p.output_dim), p.input_family,
                                            p.activation));
    }
    in = net.layers.back().output_dim();
  }
  net.output = output;
  net.gaussian_group_len = gaussian_group_len;
  net.tap_index = tap_index;
  net.validate();
  return net;
}

// ---------------------------------------------------------------------------
// Augmentation

Eigen::MatrixXd shift_map(const Eigen::MatrixXd& map, int dt, int df) {
  const Eigen::Index t = map.rows(), f = map.cols();
  Eigen::MatrixXd out(t, f);
  for (Eigen::Index i = 0; i < t; ++i) {
    const Eigen::Index ti = ((i + dt) % t + t) % t;
    for (Eigen::Index j = 0; j < f; ++j) out(ti, ((j + df) % f + f) % f) = map(i, j);
  }
  return out;
}

namespace {

// Phase factor of a shift by d on frequency index k of an n-point axis.
std::complex<double> ramp(Eigen::Index k, Eigen::Index n, double d) {
  if (n % 2 == 0 && k == n / 2) return std::cos(std::numbers::pi * d);
  const double ks = static_cast<double>(k <= n / 2 ? k : k - n);
  return std::polar(1.0, -2.0 * std::numbers::pi * ks * d / static_cast<double>(n));
}

struct FftwBuffer {
  explicit FftwBuffer(std::size_t n) : p(fftw_alloc_complex(n)) {
    if (!p) throw std::bad_alloc();
  }
  ~FftwBuffer() { fftw_free(p); }
  FftwBuffer(const FftwBuffer&) = delete;
  FftwBuffer& operator=(const FftwBuffer&) = delete;
  fftw_complex* p;
};

struct FftwPlan {
  explicit FftwPlan(fftw_plan plan) : p(plan) {}
  ~FftwPlan() { fftw_destroy_plan(p); }
  FftwPlan(const FftwPlan&) = delete;
  FftwPlan& operator=(const FftwPlan&) = delete;
  fftw_plan p;
};

}  // namespace

Eigen::MatrixXd fractional_shift(const Eigen::MatrixXd& map, double dt, double df) {
  const int t = static_cast<int>(map.rows()), f = static_cast<int>(map.cols());
  const std::size_t n = static_cast<std::size_t>(t) * f;
  FftwBuffer buf(n);
  FftwPlan fwd(fftw_plan_dft_2d(t, f, buf.p, buf.p, FFTW_FORWARD, FFTW_ESTIMATE));
  FftwPlan inv(fftw_plan_dft_2d(t, f, buf.p, buf.p, FFTW_BACKWARD, FFTW_ESTIMATE));
  for (int i = 0; i < t; ++i) {
    for (int j = 0; j < f; ++j) {
      buf.p[i * f + j][0] = map(i, j);
      buf.p[i * f + j][1] = 0.0;
    }
  }
  fftw_execute(fwd.p);
  for (int i = 0; i < t; ++i) {
    const auto rt = ramp(i, t, dt);
    for (int j = 0; j < f; ++j) {
      auto* c = buf.p[i * f + j];
      const std::complex<double> v = std::complex<double>(c[0], c[1]) * rt * ramp(j, f, df);
      c[0] = v.real();
      c[1] = v.imag();
    }
  }
  fftw_execute(inv.p);
  Eigen::MatrixXd out(t, f);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < f; ++j) out(i, j) = buf.p[i * f + j][0] / static_cast<double>(n);
  return out;
}

Eigen::MatrixXd augment(const Eigen::MatrixXd& map, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  if (map.rows() < cfg.max_time_shift || map.cols() < cfg.max_freq_shift) {
    throw ConfigError("shift bounds exceed map dimensions");
  }
  auto draw_int = [&](int bound) {
    return bound > 0 ? std::uniform_int_distribution<int>(-bound, bound)(rng) : 0;
  };
  auto draw_real = [&](double bound) {
    return bound > 0.0 ? std::uniform_real_distribution<double>(-bound, bound)(rng) : 0.0;
  };
  const int dt = draw_int(cfg.max_time_shift);
  const int df = draw_int(cfg.max_freq_shift);
  const double ft = draw_real(cfg.max_fractional_time);
  const double ff = draw_real(cfg.max_fractional_freq);
  Eigen::MatrixXd out = shift_map(map, dt, df);
  if (ft != 0.0 || ff != 0.0) out = fractional_shift(out, ft, ff);
  return out;
}

FeatureMap augment(const FeatureMap& map, const AugmentConfig& cfg, Rng& rng) {
  FeatureMap out = map;
  out.values = augment(map.values, cfg, rng);
  return out;
}

}  // namespace pbn
