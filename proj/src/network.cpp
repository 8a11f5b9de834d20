#include "pbn/network.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"
#include "pbn/error.hpp"

namespace pbn {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

VectorXd activation_deriv2(Activation a, const VectorXd& pre) {
  VectorXd out(pre.size());
  for (Eigen::Index i = 0; i < pre.size(); ++i) out(i) = expfam::activation_deriv2(a, pre(i));
  return out;
}

VectorXd activation_inverse(Activation a, const VectorXd& y) {
  VectorXd out(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) out(i) = expfam::activation_inverse(a, y(i));
  return out;
}

VectorXd linear_map(const LayerSpec& l, const VectorXd& x) {
  if (l.conv) return conv_forward(*l.conv, l.kernel, x);
  return l.weights.transpose() * x;
}

// Evaluates the activation, turning an inadmissible pre-activation into a
// sampling failure at the given layer.
VectorXd activate(const LayerSpec& l, const VectorXd& pre, int layer) {
  try {
    return apply_activation(l.activation, pre);
  } catch (const ParameterError& e) {
    throw SamplingFailure(std::string("pre-activation outside activation domain: ") + e.what(),
                          std::numeric_limits<double>::infinity(), layer);
  }
}

}  // namespace

std::string_view output_kind_name(OutputKind k) {
  switch (k) {
    case OutputKind::ted_indicator:
      return "ted_indicator";
    case OutputKind::standard_normal:
      return "standard_normal";
    case OutputKind::none:
      return "none";
  }
  return "none";
}

OutputKind parse_output_kind(std::string_view name) {
  for (auto k : {OutputKind::ted_indicator, OutputKind::standard_normal, OutputKind::none}) {
    if (output_kind_name(k) == name) return k;
  }
  throw ConfigError("unknown output density kind '" + std::string(name) + "'");
}

VectorXd OutputDensitySpec::ted_alpha() const {
  VectorXd a = VectorXd::Constant(num_classes, -confidence);
  a(class_index) = confidence;
  return a;
}

void OutputDensitySpec::validate() const {
  if (num_classes < 1) throw ConfigError("output density needs at least one dimension");
  if (kind == OutputKind::ted_indicator) {
    if (class_index < 0 || class_index >= num_classes) {
      throw ConfigError("class index " + std::to_string(class_index) + " out of range");
    }
    if (!(confidence > 0.0) || !std::isfinite(confidence)) {
      throw ConfigError("confidence must be positive");
    }
  }
}

double output_log_density(const OutputDensitySpec& spec, const VectorXd& y) {
  if (y.size() != spec.num_classes) throw DimensionError("output length mismatch");
  switch (spec.kind) {
    case OutputKind::ted_indicator: {
      const VectorXd a = spec.ted_alpha();
      double s = 0.0;
      for (Eigen::Index i = 0; i < y.size(); ++i) {
        s += expfam::log_density(Family::trunc_exponential, a(i), y(i));
      }
      return s;
    }
    case OutputKind::standard_normal:
      return log_prior(Family::gaussian, y);
    case OutputKind::none:
      return 0.0;
  }
  return 0.0;
}

VectorXd output_log_density_grad(const OutputDensitySpec& spec, const VectorXd& y) {
  switch (spec.kind) {
    case OutputKind::ted_indicator:
      return spec.ted_alpha();
    case OutputKind::standard_normal:
      return -y;
    case OutputKind::none:
      break;
  }
  return VectorXd::Zero(y.size());
}

VectorXd sample_output(const OutputDensitySpec& spec, Rng& rng) {
  VectorXd y(spec.num_classes);
  switch (spec.kind) {
    case OutputKind::ted_indicator: {
      const VectorXd a = spec.ted_alpha();
      for (Eigen::Index i = 0; i < y.size(); ++i) {
        y(i) = expfam::sample(Family::trunc_exponential, a(i), rng);
      }
      return y;
    }
    case OutputKind::standard_normal:
      for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = expfam::sample(Family::gaussian, 0.0, rng);
      return y;
    case OutputKind::none:
      break;
  }
  throw ModeError("output density 'none' cannot be sampled");
}

// ---------------------------------------------------------------------------
// NetworkModel

int NetworkModel::input_dim() const {
  return layers.empty() ? input_dim_hint : layers.front().input_dim();
}

int NetworkModel::output_dim() const {
  return layers.empty() ? input_dim_hint : layers.back().output_dim();
}

void NetworkModel::validate() const {
  const int n = static_cast<int>(layers.size());
  for (int i = 0; i < n; ++i) {
    layers[i].validate();
    // Inside the Gaussian group only the collapsed map has to reduce dimension.
    const bool grouped = i + 1 < gaussian_group_len;
    if (layers[i].output_dim() > layers[i].input_dim() ||
        (!grouped && layers[i].output_dim() == layers[i].input_dim())) {
      throw DimensionError("layer " + std::to_string(i) + " is not dimension reducing");
    }
    if (i + 1 < n) {
      if (layers[i].output_dim() != layers[i + 1].input_dim()) {
        throw DimensionError("layer " + std::to_string(i) + " output dim " +
                             std::to_string(layers[i].output_dim()) + " != layer " +
                             std::to_string(i + 1) + " input dim " +
                             std::to_string(layers[i + 1].input_dim()));
      }
      if (domain_of(layers[i].activation) != domain_of(layers[i + 1].input_family)) {
        throw ConfigError("layer " + std::to_string(i + 1) + " input family " +
                          std::string(family_name(layers[i + 1].input_family)) +
                          " does not match the range of the preceding activation");
      }
    }
  }
  if (gaussian_group_len < 0 || gaussian_group_len > n) {
    throw ConfigError("gaussian group length out of range");
  }
  for (int i = 0; i < gaussian_group_len; ++i) {
    if (layers[i].activation != linear_activation) {
      throw ConfigError("gaussian group layer " + std::to_string(i) + " is not linear");
    }
    if (i > 0 && layers[i].input_family != Family::gaussian) {
      throw ConfigError("gaussian group layer " + std::to_string(i) + " needs a gaussian prior");
    }
  }
  if (tap_index) {
    if (*tap_index < 0 || *tap_index >= n) throw ConfigError("tap index out of range");
    if (gaussian_group_len > 1 && *tap_index < gaussian_group_len - 1) {
      throw ConfigError("tap index lies inside the gaussian group");
    }
  }
  if (layers.empty() && input_dim_hint < 1) throw DimensionError("empty network needs input_dim_hint");
  output.validate();
  if (output.num_classes != output_dim()) {
    throw DimensionError("output density dimension " + std::to_string(output.num_classes) +
                         " != network output dim " + std::to_string(output_dim()));
  }
  const Domain out_domain = layers.empty() ? Domain::reals : domain_of(layers.back().activation);
  if (output.kind == OutputKind::ted_indicator && out_domain != Domain::unit) {
    throw ConfigError("ted_indicator output requires a truncated-exponential final activation");
  }
  if (output.kind == OutputKind::standard_normal && out_domain != Domain::reals) {
    throw ConfigError("standard_normal output requires a linear final activation");
  }
}

// ---------------------------------------------------------------------------
// Gradients and parameter packing

NetworkGradient NetworkGradient::zeros_like(const NetworkModel& net) {
  NetworkGradient g;
  for (const auto& l : net.layers) {
    g.d_weights.push_back(MatrixXd::Zero(l.input_dim(), l.output_dim()));
    g.d_bias.push_back(VectorXd::Zero(l.output_dim()));
  }
  return g;
}

NetworkGradient& NetworkGradient::operator+=(const NetworkGradient& o) {
  if (d_weights.empty()) return *this = o;
  for (std::size_t i = 0; i < d_weights.size(); ++i) {
    d_weights[i] += o.d_weights[i];
    d_bias[i] += o.d_bias[i];
  }
  return *this;
}

NetworkGradient& NetworkGradient::operator*=(double s) {
  for (auto& w : d_weights) w *= s;
  for (auto& b : d_bias) b *= s;
  return *this;
}

Eigen::Index parameter_count(const NetworkModel& net) {
  Eigen::Index n = 0;
  for (const auto& l : net.layers) {
    n += l.conv ? l.kernel.size() + l.channel_bias.size() : l.weights.size() + l.bias.size();
  }
  return n;
}

VectorXd get_parameters(const NetworkModel& net) {
  VectorXd theta(parameter_count(net));
  Eigen::Index k = 0;
  auto put = [&](const auto& m) {
    theta.segment(k, m.size()) = Eigen::Map<const VectorXd>(m.data(), m.size());
    k += m.size();
  };
  for (const auto& l : net.layers) {
    if (l.conv) {
      put(l.kernel);
      put(l.channel_bias);
    } else {
      put(l.weights);
      put(l.bias);
    }
  }
  return theta;
}

void set_parameters(NetworkModel& net, const VectorXd& theta) {
  if (theta.size() != parameter_count(net)) throw DimensionError("parameter vector length mismatch");
  Eigen::Index k = 0;
  auto take = [&](auto& m) {
    Eigen::Map<VectorXd>(m.data(), m.size()) = theta.segment(k, m.size());
    k += m.size();
  };
  for (auto& l : net.layers) {
    if (l.conv) {
      take(l.kernel);
      take(l.channel_bias);
      l.materialize();
    } else {
      take(l.weights);
      take(l.bias);
    }
  }
}

VectorXd flatten_gradient(const NetworkModel& net, const NetworkGradient& g) {
  VectorXd out(parameter_count(net));
  Eigen::Index k = 0;
  auto put = [&](const auto& m) {
    out.segment(k, m.size()) = Eigen::Map<const VectorXd>(m.data(), m.size());
    k += m.size();
  };
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    if (l.conv) {
      put(reduce_conv_gradient(*l.conv, g.d_weights[i]));
      put(reduce_conv_bias_gradient(*l.conv, g.d_bias[i]));
    } else {
      put(g.d_weights[i]);
      put(g.d_bias[i]);
    }
  }
  return out;
}

std::vector<std::string> parameter_names(const NetworkModel& net) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    if (l.conv) {
      for (Eigen::Index j = 0; j < l.kernel.size(); ++j) names.push_back(p + "kernel[" + std::to_string(j) + "]");
      for (Eigen::Index j = 0; j < l.channel_bias.size(); ++j) names.push_back(p + "b[" + std::to_string(j) + "]");
    } else {
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) {
        for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
          names.push_back(p + "W[" + std::to_string(r) + "," + std::to_string(c) + "]");
        }
      }
      for (Eigen::Index j = 0; j < l.bias.size(); ++j) names.push_back(p + "b[" + std::to_string(j) + "]");
    }
  }
  return names;
}

// ---------------------------------------------------------------------------
// NetworkEvaluator

NetworkEvaluator::NetworkEvaluator(const NetworkModel& net, SolverOptions options)
    : net_(net), group_(net.gaussian_group_len >= 2 ? net.gaussian_group_len : 0) {
  net_.validate();
  if (group_ > 0) {
    MatrixXd a = net_.layers[0].weights;
    VectorXd c = net_.layers[0].bias;
    for (int j = 1; j < group_; ++j) {
      a = a * net_.layers[j].weights;
      c = net_.layers[j].weights.transpose() * c + net_.layers[j].bias;
    }
    composite_ = std::make_unique<LayerSpec>(
        LayerSpec::dense(std::move(a), std::move(c), net_.layers[0].input_family, linear_activation));
    stages_.push_back(composite_.get());
  }
  for (std::size_t i = static_cast<std::size_t>(group_); i < net_.layers.size(); ++i) {
    stages_.push_back(&net_.layers[i]);
  }
  evaluators_.reserve(stages_.size());
  for (const LayerSpec* s : stages_) evaluators_.emplace_back(*s, options);
}

int NetworkEvaluator::layer_of_stage_end(int s) const { return group_ > 0 ? s + group_ - 1 : s; }

int NetworkEvaluator::stage_of_layer(int layer) const {
  return group_ > 0 ? std::max(0, layer - group_ + 1) : layer;
}

double NetworkEvaluator::accumulate(const VectorXd& x_in, int last_stage, bool with_grad,
                                    NetworkGradient* grad, Terms* terms, VectorXd* out) const {
  if (x_in.size() != net_.input_dim()) {
    throw DimensionError("input length " + std::to_string(x_in.size()) + " != " +
                         std::to_string(net_.input_dim()));
  }
  const int ns = last_stage + 1;
  std::vector<VectorXd> xs(ns), pre(ns);
  std::vector<LogJResult> lj(ns);
  double total = 0.0;
  VectorXd x = x_in;
  for (int s = 0; s < ns; ++s) {
    const LayerSpec& l = *stages_[s];
    const int layer = layer_of_stage_end(s);
    try {
      lj[s] = evaluators_[s].log_j(x, with_grad);
    } catch (const SamplingFailure& e) {
      throw e.at_layer(layer);
    }
    pre[s] = l.bias + linear_map(l, x);
    const VectorXd y = activate(l, pre[s], layer);
    double jac = 0.0;
    if (l.activation != linear_activation) {
      jac = activation_deriv(l.activation, pre[s]).array().log().sum();
    }
    if (terms) {
      terms->log_j.push_back(lj[s].value);
      terms->log_jacobian.push_back(jac);
    }
    total += lj[s].value + jac;
    xs[s] = std::move(x);
    x = y;
  }
  if (!std::isfinite(total)) {
    throw SamplingFailure("non-finite log J", std::numeric_limits<double>::infinity(),
                          layer_of_stage_end(last_stage));
  }
  if (out) *out = x;
  const bool full = last_stage == num_stages() - 1;
  if (full) {
    const double lg = output_log_density(net_.output, x);
    if (terms) terms->log_g = lg;
    total += lg;
  }
  if (!with_grad) return total;

  *grad = NetworkGradient::zeros_like(net_);
  VectorXd gy = full ? output_log_density_grad(net_.output, x) : VectorXd(VectorXd::Zero(x.size()));
  for (int s = ns - 1; s >= 0; --s) {
    const LayerSpec& l = *stages_[s];
    VectorXd ga = gy;
    if (l.activation != linear_activation) {
      const VectorXd d1 = activation_deriv(l.activation, pre[s]);
      const VectorXd d2 = activation_deriv2(l.activation, pre[s]);
      ga = gy.cwiseProduct(d1) + d2.cwiseQuotient(d1);
    }
    if (s == 0 && group_ > 0) {
      // Linear chain part (x and biases through every group layer).
      std::vector<VectorXd> ys(group_);
      VectorXd v = xs[0];
      for (int j = 0; j < group_; ++j) {
        ys[j] = v;
        v = net_.layers[j].weights.transpose() * v + net_.layers[j].bias;
      }
      VectorXd g = ga;
      for (int j = group_ - 1; j >= 0; --j) {
        grad->d_weights[j] += ys[j] * g.transpose();
        grad->d_bias[j] += g;
        g = net_.layers[j].weights * g;
      }
      // J-function part through A = W_0 ... W_{k-1}.
      MatrixXd prefix = MatrixXd::Identity(net_.input_dim(), net_.input_dim());
      for (int j = 0; j < group_; ++j) {
        MatrixXd suffix = MatrixXd::Identity(net_.layers[j].output_dim(), net_.layers[j].output_dim());
        for (int i = j + 1; i < group_; ++i) suffix = suffix * net_.layers[i].weights;
        grad->d_weights[j] += prefix.transpose() * lj[0].d_weights * suffix.transpose();
        prefix = prefix * net_.layers[j].weights;
      }
    } else {
      const int layer = layer_of_stage_end(s);
      grad->d_weights[layer] += xs[s] * ga.transpose() + lj[s].d_weights;
      grad->d_bias[layer] += ga;
    }
    if (s > 0) gy = l.weights * ga + lj[s].d_input;
  }
  return total;
}

double NetworkEvaluator::log_likelihood(const VectorXd& x) const {
  if (stages_.empty()) {
    if (x.size() != net_.input_dim()) throw DimensionError("input length mismatch");
    return output_log_density(net_.output, x);
  }
  return accumulate(x, num_stages() - 1, false, nullptr, nullptr, nullptr);
}

LikelihoodResult NetworkEvaluator::log_likelihood_grad(const VectorXd& x) const {
  LikelihoodResult r;
  if (stages_.empty()) {
    r.value = log_likelihood(x);
    return r;
  }
  r.value = accumulate(x, num_stages() - 1, true, &r.grad, nullptr, nullptr);
  return r;
}

NetworkEvaluator::Terms NetworkEvaluator::log_likelihood_terms(const VectorXd& x) const {
  Terms t;
  if (stages_.empty()) {
    t.log_g = log_likelihood(x);
    return t;
  }
  accumulate(x, num_stages() - 1, false, nullptr, &t, nullptr);
  return t;
}

TapResult NetworkEvaluator::tap(const VectorXd& x) const {
  if (!net_.tap_index) throw ConfigError("network has no tap index");
  const int layer = *net_.tap_index;
  TapResult r;
  VectorXd y;
  r.log_j = accumulate(x, stage_of_layer(layer), false, nullptr, nullptr, &y);
  const LayerSpec& l = net_.layers[layer];
  if (l.conv) {
    const int t = l.conv->out_time();
    const int d = l.conv->out_freq() * l.conv->out_channels;
    r.frames = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        y.data(), t, d);
  } else {
    r.frames = y.transpose();
  }
  return r;
}

ForwardTrace NetworkEvaluator::forward(const VectorXd& x) const {
  if (x.size() != net_.input_dim()) throw DimensionError("input length mismatch");
  ForwardTrace t;
  VectorXd v = x;
  for (std::size_t i = 0; i < net_.layers.size(); ++i) {
    const LayerSpec& l = net_.layers[i];
    t.inputs.push_back(v);
    t.pre.push_back(l.bias + linear_map(l, v));
    v = apply_activation(l.activation, t.pre.back());
  }
  t.output = std::move(v);
  return t;
}

NetworkGradient NetworkEvaluator::backprop_pre(const ForwardTrace& trace, const VectorXd& d_pre) const {
  NetworkGradient g = NetworkGradient::zeros_like(net_);
  VectorXd d = d_pre;
  for (int i = static_cast<int>(net_.layers.size()) - 1; i >= 0; --i) {
    const LayerSpec& l = net_.layers[i];
    g.d_weights[i] = trace.inputs[i] * d.transpose();
    g.d_bias[i] = d;
    if (i > 0) {
      const LayerSpec& prev = net_.layers[i - 1];
      d = (l.weights * d).cwiseProduct(activation_deriv(prev.activation, trace.pre[i - 1]));
    }
  }
  return g;
}

VectorXd NetworkEvaluator::invert_to_pre(int s, const VectorXd& y) const {
  const LayerSpec& l = *stages_[s];
  return activation_inverse(l.activation, y) - l.bias;
}

VectorXd NetworkEvaluator::reconstruct(const VectorXd& x) const {
  if (stages_.empty()) return x;
  if (x.size() != net_.input_dim()) throw DimensionError("input length mismatch");
  VectorXd v = x, z;
  for (int s = 0; s < num_stages(); ++s) {
    const LayerSpec& l = *stages_[s];
    z = linear_map(l, v);
    if (s + 1 < num_stages()) v = activate(l, l.bias + z, layer_of_stage_end(s));
  }
  for (int s = num_stages() - 1; s >= 0; --s) {
    SaddleSolution sol = evaluators_[s].try_solve(z);
    if (!sol.converged) {
      throw SamplingFailure("reconstruction has no saddle point", sol.residual,
                            layer_of_stage_end(s));
    }
    if (s == 0) return sol.xbar;
    const LayerSpec& l = *stages_[s];
    const LayerSpec& prev = *stages_[s - 1];
    if (l.input_family == prev.activation) {
      z = l.weights * sol.h - prev.bias;  // activation bypass
    } else {
      z = invert_to_pre(s - 1, sol.xbar);
    }
  }
  return v;  // unreachable
}

VectorXd NetworkEvaluator::generate(Rng& rng, const GenerateOptions& opts) const {
  if (net_.output.kind == OutputKind::none) throw ModeError("output density 'none' cannot be sampled");
  for (int attempt = 0; attempt < opts.max_retries; ++attempt) {
    try {
      VectorXd y = sample_output(net_.output, rng);
      if (stages_.empty()) return y;
      VectorXd z = invert_to_pre(num_stages() - 1, y);
      for (int s = num_stages() - 1; s >= 0; --s) {
        const SampleMode mode = stages_[s]->input_family == Family::gaussian ? SampleMode::exact_gaussian
                                                                             : SampleMode::surrogate;
        VectorXd x = evaluators_[s].sample_given_z(z, mode, rng);
        if (s == 0) return x;
        z = invert_to_pre(s - 1, x);
      }
    } catch (const SamplingFailure&) {
    } catch (const RangeError&) {
    }
  }
  throw SamplingFailure("generation failed after " + std::to_string(opts.max_retries) + " attempts",
                        std::numeric_limits<double>::infinity());
}

double log_likelihood(const NetworkModel& net, const VectorXd& x) {
  return NetworkEvaluator(net).log_likelihood(x);
}

VectorXd reconstruct(const NetworkModel& net, const VectorXd& x) {
  return NetworkEvaluator(net).reconstruct(x);
}

VectorXd generate(const NetworkModel& net, Rng& rng, const GenerateOptions& opts) {
  return NetworkEvaluator(net).generate(rng, opts);
}

double mixture_log_likelihood(const std::vector<const NetworkModel*>& nets,
                              const std::vector<double>& weights, const VectorXd& x) {
  if (nets.size() != weights.size() || nets.empty()) {
    throw DimensionError("mixture needs one weight per component");
  }
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ConfigError("mixture weights must be nonnegative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("mixture weights must sum to 1");
  std::vector<double> terms;
  for (std::size_t i = 0; i < nets.size(); ++i) {
    if (weights[i] == 0.0) continue;
    try {
      terms.push_back(std::log(weights[i]) + log_likelihood(*nets[i], x));
    } catch (const SamplingFailure&) {
    }
  }
  if (terms.empty()) {
    throw SamplingFailure("every mixture component failed", std::numeric_limits<double>::infinity());
  }
  const double m = *std::max_element(terms.begin(), terms.end());
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - m);
  return m + std::log(acc);
}

int argmax_lowest(const VectorXd& scores) {
  int best = -1;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    if (scores(i) == kNegInf || std::isnan(scores(i))) continue;
    if (best < 0 || scores(i) > scores(best)) best = static_cast<int>(i);
  }
  if (best < 0) throw ClassificationError("every class failed to score");
  return best;
}

Classification classify(const std::vector<const NetworkModel*>& models, const VectorXd& x,
                        const std::vector<double>& log_priors) {
  if (!log_priors.empty() && log_priors.size() != models.size()) {
    throw DimensionError("one log prior per class required");
  }
  Classification c;
  c.scores.resize(static_cast<Eigen::Index>(models.size()));
  for (std::size_t i = 0; i < models.size(); ++i) {
    const double prior = log_priors.empty() ? 0.0 : log_priors[i];
    try {
      c.scores(i) = log_likelihood(*models[i], x) + prior;
    } catch (const SamplingFailure&) {
      c.scores(i) = kNegInf;
    }
  }
  c.label = argmax_lowest(c.scores);
  return c;
}

// ---------------------------------------------------------------------------
// Serialization

Section network_section(const NetworkModel& net) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(net.layers.size()));
  w.u32(static_cast<std::uint32_t>(net.gaussian_group_len));
  w.i32(net.tap_index ? *net.tap_index : -1);
  w.u32(static_cast<std::uint32_t>(net.input_dim_hint));
  w.u32(static_cast<std::uint32_t>(net.output.kind));
  w.u32(static_cast<std::uint32_t>(net.output.class_index));
  w.u32(static_cast<std::uint32_t>(net.output.num_classes));
  w.f64(net.output.confidence);
  for (const auto& l : net.layers) {
    w.u32(static_cast<std::uint32_t>(l.input_family));
    w.u32(static_cast<std::uint32_t>(l.activation));
    w.u8(l.conv ? 1 : 0);
    if (l.conv) {
      const auto& g = *l.conv;
      for (int v : {g.in_time, g.in_freq, g.in_channels, g.kernel_time, g.kernel_freq,
                    g.out_channels, g.stride_time, g.stride_freq, g.pad_time, g.pad_freq}) {
        w.i32(v);
      }
      w.vec(l.kernel);
      w.vec(l.channel_bias);
    } else {
      w.mat(l.weights);
      w.vec(l.bias);
    }
  }
  return {kNetworkTag, w.take()};
}

NetworkModel network_from_section(const Section& s, std::size_t file_offset) {
  if (s.tag != kNetworkTag) throw FormatError("expected NETW section", file_offset);
  // Payload starts after the 4-byte tag and the 8-byte length.
  ByteReader r(s.payload, file_offset + 12);
  auto family = [&](const char* what) {
    const std::uint32_t v = r.u32();
    if (v > 3) r.fail(std::string("invalid ") + what + " tag " + std::to_string(v));
    return static_cast<Family>(v);
  };
  NetworkModel net;
  const std::uint32_t n = r.u32();
  if (n > 1024) r.fail("implausible layer count");
  net.gaussian_group_len = static_cast<int>(r.u32());
  const int tap = r.i32();
  if (tap >= 0) net.tap_index = tap;
  net.input_dim_hint = static_cast<int>(r.u32());
  const std::uint32_t kind = r.u32();
  if (kind > 2) r.fail("invalid output kind");
  net.output.kind = static_cast<OutputKind>(kind);
  net.output.class_index = static_cast<int>(r.u32());
  net.output.num_classes = static_cast<int>(r.u32());
  net.output.confidence = r.f64();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t at = r.offset();
    const Family in = family("family");
    const Family act = family("activation");
    const std::uint8_t is_conv = r.u8();
    try {
      if (is_conv == 1) {
        ConvGeometry g;
        for (int* v : {&g.in_time, &g.in_freq, &g.in_channels, &g.kernel_time, &g.kernel_freq,
                       &g.out_channels, &g.stride_time, &g.stride_freq, &g.pad_time, &g.pad_freq}) {
          *v = r.i32();
        }
        VectorXd k = r.vec();
        VectorXd cb = r.vec();
        net.layers.push_back(LayerSpec::convolution(g, std::move(k), std::move(cb), in, act));
      } else if (is_conv == 0) {
        MatrixXd w = r.mat();
        VectorXd b = r.vec();
        net.layers.push_back(LayerSpec::dense(std::move(w), std::move(b), in, act));
      } else {
        r.fail("invalid layer kind");
      }
    } catch (const FormatError&) {
      throw;
    } catch (const Error& e) {
      throw FormatError(std::string("invalid layer: ") + e.what(), at);
    }
  }
  if (!r.done()) r.fail("trailing bytes in network section");
  try {
    net.validate();
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(std::string("invalid network: ") + e.what(), file_offset);
  }
  return net;
}

void save_network(const NetworkModel& net, const std::filesystem::path& path) {
  net.validate();
  const Section s = network_section(net);
  write_container(path, {s});
  const std::uint64_t sum = fnv1a64(s.payload.data(), s.payload.size());
  std::ofstream(path.string() + ".json") << network_manifest(net, sum) << "\n";
}

NetworkModel load_network(const std::filesystem::path& path) {
  const auto sections = read_container(path);
  std::size_t offset = 8;
  for (const auto& s : sections) {
    if (s.tag == kNetworkTag) return network_from_section(s, offset);
    offset += 12 + s.payload.size();
  }
  throw FormatError("no NETW section in " + path.string(), 8);
}

std::string network_manifest(const NetworkModel& net, std::uint64_t checksum) {
  nlohmann::json j;
  j["format"] = "PBN1";
  j["version"] = kContainerVersion;
  j["checksum_fnv1a64"] = hex64(checksum);
  j["gaussian_group_len"] = net.gaussian_group_len;
  j["tap_index"] = net.tap_index ? nlohmann::json(*net.tap_index) : nlohmann::json(nullptr);
  j["output"] = {{"kind", output_kind_name(net.output.kind)},
                 {"class_index", net.output.class_index},
                 {"num_classes", net.output.num_classes},
                 {"confidence", net.output.confidence}};
  j["parameters"] = parameter_count(net);
  auto& layers = j["layers"] = nlohmann::json::array();
  for (const auto& l : net.layers) {
    nlohmann::json e = {{"input_dim", l.input_dim()},
                        {"output_dim", l.output_dim()},
                        {"input_family", family_name(l.input_family)},
                        {"activation", activation_name(l.activation)}};
    if (l.conv) {
      const auto& g = *l.conv;
      e["conv"] = {{"in", {g.in_time, g.in_freq, g.in_channels}},
                   {"kernel", {g.kernel_time, g.kernel_freq}},
                   {"out_channels", g.out_channels},
                   {"stride", {g.stride_time, g.stride_freq}},
                   {"pad", {g.pad_time, g.pad_freq}}};
    }
    layers.push_back(std::move(e));
  }
  return j.dump(2);
}

}  // namespace pbn
