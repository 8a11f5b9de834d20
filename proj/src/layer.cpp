#include "pbn/layer.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "pbn/error.hpp"

namespace pbn {
namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kExponentialMargin = 1e-6;
constexpr double kArmijo = 1e-4;

VectorXd map_family(Family f, const VectorXd& a, double (*fn)(Family, double)) {
  VectorXd out(a.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) out(i) = fn(f, a(i));
  return out;
}

double cgf_sum(Family f, const VectorXd& a) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) s += expfam::cgf(f, a(i));
  return s;
}

// Cholesky of a symmetric PD matrix, retrying with growing diagonal jitter.
Eigen::LLT<MatrixXd> factor_spd(const MatrixXd& sigma) {
  Eigen::LLT<MatrixXd> llt(sigma);
  if (llt.info() == Eigen::Success && llt.matrixLLT().allFinite()) return llt;
  const double m = static_cast<double>(sigma.rows());
  double jitter = 1e-10 * std::max(sigma.trace() / m, 1e-300);
  for (int k = 0; k < 8; ++k, jitter *= 100.0) {
    MatrixXd s = sigma;
    s.diagonal().array() += jitter;
    llt.compute(s);
    if (llt.info() == Eigen::Success && llt.matrixLLT().allFinite()) return llt;
  }
  throw SamplingFailure("saddle Jacobian is not positive definite",
                        std::numeric_limits<double>::infinity());
}

double llt_logdet(const Eigen::LLT<MatrixXd>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

MatrixXd jacobian(const MatrixXd& w, const VectorXd& d1) {
  return w.transpose() * d1.asDiagonal() * w;
}

void check_domain(Family f, const VectorXd& x) {
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (!expfam::in_domain(f, x(i))) {
      throw DomainError("input component " + std::to_string(i) + " = " + std::to_string(x(i)) +
                        " outside the " + std::string(family_name(f)) + " domain");
    }
  }
}

}  // namespace

void ConvGeometry::validate() const {
  if (in_time <= 0 || in_freq <= 0 || in_channels <= 0 || kernel_time <= 0 || kernel_freq <= 0 ||
      out_channels <= 0 || stride_time <= 0 || stride_freq <= 0 || pad_time < 0 || pad_freq < 0) {
    throw DimensionError("convolution geometry has a non-positive extent");
  }
  if (kernel_time > in_time + 2 * pad_time || kernel_freq > in_freq + 2 * pad_freq) {
    throw DimensionError("convolution kernel larger than its input map");
  }
}

MatrixXd materialize_conv(const ConvGeometry& g, const VectorXd& kernel) {
  g.validate();
  if (kernel.size() != g.kernel_size()) throw DimensionError("kernel size mismatch");
  MatrixXd w = MatrixXd::Zero(g.input_size(), g.output_size());
  const int ot = g.out_time(), of = g.out_freq();
  for (int t = 0; t < ot; ++t) {
    for (int f = 0; f < of; ++f) {
      for (int co = 0; co < g.out_channels; ++co) {
        const int col = (t * of + f) * g.out_channels + co;
        for (int dt = 0; dt < g.kernel_time; ++dt) {
          for (int df = 0; df < g.kernel_freq; ++df) {
            const int ti = t * g.stride_time + dt - g.pad_time, fi = f * g.stride_freq + df - g.pad_freq;
            if (ti < 0 || ti >= g.in_time || fi < 0 || fi >= g.in_freq) continue;
            for (int ci = 0; ci < g.in_channels; ++ci) {
              const int row = (ti * g.in_freq + fi) * g.in_channels + ci;
              const int k = ((co * g.kernel_time + dt) * g.kernel_freq + df) * g.in_channels + ci;
              w(row, col) = kernel(k);
            }
          }
        }
      }
    }
  }
  return w;
}

VectorXd conv_forward(const ConvGeometry& g, const VectorXd& kernel, const VectorXd& x) {
  if (x.size() != g.input_size()) throw DimensionError("convolution input size mismatch");
  const int ot = g.out_time(), of = g.out_freq();
  VectorXd z = VectorXd::Zero(g.output_size());
  for (int t = 0; t < ot; ++t) {
    for (int f = 0; f < of; ++f) {
      for (int co = 0; co < g.out_channels; ++co) {
        double acc = 0.0;
        for (int dt = 0; dt < g.kernel_time; ++dt) {
          for (int df = 0; df < g.kernel_freq; ++df) {
            const int ti = t * g.stride_time + dt - g.pad_time, fi = f * g.stride_freq + df - g.pad_freq;
            if (ti < 0 || ti >= g.in_time || fi < 0 || fi >= g.in_freq) continue;
            const double* xp = x.data() + (ti * g.in_freq + fi) * g.in_channels;
            const double* kp =
                kernel.data() + ((co * g.kernel_time + dt) * g.kernel_freq + df) * g.in_channels;
            for (int ci = 0; ci < g.in_channels; ++ci) acc += kp[ci] * xp[ci];
          }
        }
        z((t * of + f) * g.out_channels + co) = acc;
      }
    }
  }
  return z;
}

VectorXd reduce_conv_gradient(const ConvGeometry& g, const MatrixXd& d_weights) {
  VectorXd dk = VectorXd::Zero(g.kernel_size());
  const int ot = g.out_time(), of = g.out_freq();
  for (int t = 0; t < ot; ++t) {
    for (int f = 0; f < of; ++f) {
      for (int co = 0; co < g.out_channels; ++co) {
        const int col = (t * of + f) * g.out_channels + co;
        for (int dt = 0; dt < g.kernel_time; ++dt) {
          for (int df = 0; df < g.kernel_freq; ++df) {
            const int ti = t * g.stride_time + dt - g.pad_time, fi = f * g.stride_freq + df - g.pad_freq;
            if (ti < 0 || ti >= g.in_time || fi < 0 || fi >= g.in_freq) continue;
            for (int ci = 0; ci < g.in_channels; ++ci) {
              const int row = (ti * g.in_freq + fi) * g.in_channels + ci;
              dk(((co * g.kernel_time + dt) * g.kernel_freq + df) * g.in_channels + ci) +=
                  d_weights(row, col);
            }
          }
        }
      }
    }
  }
  return dk;
}

VectorXd reduce_conv_bias_gradient(const ConvGeometry& g, const VectorXd& d_bias) {
  VectorXd db = VectorXd::Zero(g.out_channels);
  for (Eigen::Index j = 0; j < d_bias.size(); ++j) db(j % g.out_channels) += d_bias(j);
  return db;
}

LayerSpec LayerSpec::dense(MatrixXd weights, VectorXd bias, Family input_family,
                           Activation activation) {
  LayerSpec l;
  l.weights = std::move(weights);
  l.bias = std::move(bias);
  l.input_family = input_family;
  l.activation = activation;
  l.validate();
  return l;
}

LayerSpec LayerSpec::convolution(const ConvGeometry& geometry, VectorXd kernel,
                                 VectorXd channel_bias, Family input_family,
                                 Activation activation) {
  geometry.validate();
  if (kernel.size() != geometry.kernel_size()) throw DimensionError("kernel size mismatch");
  if (channel_bias.size() != geometry.out_channels) {
    throw DimensionError("channel bias size mismatch");
  }
  LayerSpec l;
  l.conv = geometry;
  l.kernel = std::move(kernel);
  l.channel_bias = std::move(channel_bias);
  l.input_family = input_family;
  l.activation = activation;
  l.materialize();
  l.validate();
  return l;
}

void LayerSpec::materialize() {
  if (!conv) return;
  weights = materialize_conv(*conv, kernel);
  bias.resize(conv->output_size());
  for (Eigen::Index j = 0; j < bias.size(); ++j) bias(j) = channel_bias(j % conv->out_channels);
}

void LayerSpec::validate(bool check_rank) const {
  if (weights.rows() == 0 || weights.cols() == 0) throw DimensionError("empty weight matrix");
  if (bias.size() != weights.cols()) {
    throw DimensionError("bias length " + std::to_string(bias.size()) + " != output dim " +
                         std::to_string(weights.cols()));
  }
  if (weights.cols() > weights.rows()) {
    throw DimensionError("layer must not increase dimension (" + std::to_string(weights.rows()) +
                         " -> " + std::to_string(weights.cols()) + ")");
  }
  if (!weights.allFinite() || !bias.allFinite()) throw DimensionError("non-finite parameters");
  if (conv) {
    if (weights.rows() != conv->input_size() || weights.cols() != conv->output_size()) {
      throw DimensionError("materialized weights disagree with convolution geometry");
    }
  }
  if (check_rank) {
    Eigen::JacobiSVD<MatrixXd> svd(weights);
    const auto& s = svd.singularValues();
    if (s(s.size() - 1) <= 1e-10 * s(0)) throw DimensionError("weight matrix is rank deficient");
  }
}

VectorXd apply_activation(Activation a, const VectorXd& pre) {
  return map_family(a, pre, &expfam::activation);
}

VectorXd activation_deriv(Activation a, const VectorXd& pre) {
  return map_family(a, pre, &expfam::activation_deriv);
}

double log_prior(Family f, const VectorXd& x) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) s += expfam::log_density(f, 0.0, x(i));
  return s;
}

VectorXd clamp_to_interior(Family f, const VectorXd& x) {
  check_domain(f, x);
  VectorXd out = x;
  switch (domain_of(f)) {
    case Domain::reals:
      break;
    case Domain::positive:
      out = out.cwiseMax(kBoundaryEpsilon);
      break;
    case Domain::unit:
      out = out.cwiseMax(kBoundaryEpsilon).cwiseMin(1.0 - kBoundaryEpsilon);
      break;
  }
  return out;
}

LayerEvaluator::LayerEvaluator(const LayerSpec& layer, SolverOptions options)
    : layer_(layer), options_(options), gaussian_(layer.input_family == Family::gaussian) {
  layer_.validate();
  if (gaussian_) {
    gram_llt_ = factor_spd(layer_.weights.transpose() * layer_.weights);
    gram_logdet_ = llt_logdet(gram_llt_);
  }
}

ForwardResult LayerEvaluator::forward(const VectorXd& x) const {
  if (x.size() != layer_.input_dim()) {
    throw DimensionError("input length " + std::to_string(x.size()) + " != " +
                         std::to_string(layer_.input_dim()));
  }
  check_domain(layer_.input_family, x);
  ForwardResult r;
  r.z = layer_.conv ? conv_forward(*layer_.conv, layer_.kernel, x)
                    : VectorXd(layer_.weights.transpose() * x);
  r.y = apply_activation(layer_.activation, layer_.bias + r.z);
  return r;
}

SaddleSolution LayerEvaluator::try_solve(const VectorXd& z) const {
  const MatrixXd& w = layer_.weights;
  const Family f = layer_.input_family;
  if (z.size() != layer_.output_dim()) throw DimensionError("feature length mismatch");
  SaddleSolution s;
  const double zscale = 1.0 + (z.size() ? z.cwiseAbs().maxCoeff() : 0.0);
  if (!z.allFinite()) {
    s.h = VectorXd::Zero(z.size());
    s.residual = std::numeric_limits<double>::infinity();
    return s;
  }

  if (gaussian_) {
    // W'Wh = z is linear: one exact step.
    s.h = gram_llt_.solve(z);
    s.xbar = w * s.h;
    s.sigma_logdet = gram_logdet_;
    s.iterations = 1;
    s.residual = (w.transpose() * s.xbar - z).cwiseAbs().maxCoeff();
    s.converged = s.residual <= options_.tolerance * zscale;
    s.residual_history = {z.norm(), (w.transpose() * s.xbar - z).norm()};
    return s;
  }

  const double polish = 1e-14 * zscale;
  const double a_max = 0.5 - kExponentialMargin;
  VectorXd h = VectorXd::Zero(z.size());
  VectorXd a = VectorXd::Zero(w.rows());
  VectorXd lam = map_family(f, a, &expfam::activation);
  VectorXd fres = w.transpose() * lam - z;
  double fnorm = fres.norm();
  s.residual_history.push_back(fnorm);
  int it = 0;
  for (; it < options_.max_iterations; ++it) {
    if (fres.cwiseAbs().maxCoeff() <= polish) break;
    const VectorXd d1 = map_family(f, a, &expfam::activation_deriv);
    Eigen::LLT<MatrixXd> llt;
    try {
      llt = factor_spd(jacobian(w, d1));
    } catch (const SamplingFailure&) {
      break;
    }
    const VectorXd dir = -llt.solve(fres);
    if (!dir.allFinite()) break;
    const VectorXd wd = w * dir;
    double t = 1.0;
    if (f == Family::exponential) {
      for (Eigen::Index i = 0; i < wd.size(); ++i) {
        if (wd(i) > 0.0) t = std::min(t, 0.99 * (a_max - a(i)) / wd(i));
      }
    }
    bool accepted = false;
    for (int k = 0; k < 60 && t > 1e-16; ++k, t *= 0.5) {
      const VectorXd a_new = a + t * wd;
      if (!a_new.allFinite()) continue;  // overflowing step on an infeasible target
      const VectorXd lam_new = map_family(f, a_new, &expfam::activation);
      const VectorXd f_new = w.transpose() * lam_new - z;
      const double n_new = f_new.norm();
      if (std::isfinite(n_new) && n_new <= (1.0 - kArmijo * t) * fnorm) {
        h += t * dir;
        a = a_new;
        lam = lam_new;
        fres = f_new;
        fnorm = n_new;
        s.residual_history.push_back(fnorm);
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
  }

  s.h = h;
  s.xbar = lam;
  s.iterations = it;
  s.residual = fres.cwiseAbs().maxCoeff();
  s.converged = s.residual <= options_.tolerance * zscale && lam.allFinite();
  if (s.converged) {
    try {
      s.sigma_logdet =
          llt_logdet(factor_spd(jacobian(w, map_family(f, a, &expfam::activation_deriv))));
    } catch (const SamplingFailure&) {
      s.converged = false;
    }
  }
  return s;
}

SaddleSolution LayerEvaluator::solve(const VectorXd& z) const {
  SaddleSolution s = try_solve(z);
  if (!s.converged) {
    throw SamplingFailure("saddle-point solve failed after " + std::to_string(s.iterations) +
                              " iterations (residual " + std::to_string(s.residual) + ")",
                          s.residual);
  }
  return s;
}

double LayerEvaluator::log_p0z(const VectorXd& z, const SaddleSolution& sol) const {
  const double m = static_cast<double>(z.size());
  const double k = gaussian_ ? 0.5 * sol.h.dot(z)  // K(h) = |Wh|^2/2 = h'z/2
                             : cgf_sum(layer_.input_family, layer_.weights * sol.h);
  return k - sol.h.dot(z) - 0.5 * sol.sigma_logdet - 0.5 * m * kLog2Pi;
}

double LayerEvaluator::log_p0z(const VectorXd& z) const { return log_p0z(z, solve(z)); }

LogJResult LayerEvaluator::log_j(const VectorXd& x_in, bool with_gradient) const {
  if (x_in.size() != layer_.input_dim()) throw DimensionError("input length mismatch");
  const Family f = layer_.input_family;
  const MatrixXd& w = layer_.weights;
  const VectorXd x = clamp_to_interior(f, x_in);
  const VectorXd z = w.transpose() * x;
  const SaddleSolution sol = solve(z);
  LogJResult r;
  r.value = log_prior(f, x) - log_p0z(z, sol);
  if (!with_gradient) return r;

  // S(W, z) = K(h) - h'z - logdet(Sigma)/2 with h = h(W, z) defined implicitly.
  MatrixXd ds_dw;
  VectorXd ds_dz;
  if (gaussian_) {
    const MatrixXd b = gram_llt_.solve(w.transpose()).transpose();  // W Sigma^-1
    ds_dw = sol.xbar * sol.h.transpose() - b;
    ds_dz = -sol.h;
  } else {
    const VectorXd a = w * sol.h;
    const VectorXd d1 = map_family(f, a, &expfam::activation_deriv);
    const VectorXd d2 = map_family(f, a, &expfam::activation_deriv2);
    const Eigen::LLT<MatrixXd> llt = factor_spd(jacobian(w, d1));
    const MatrixXd b = llt.solve(w.transpose()).transpose();  // W Sigma^-1, N x M
    const VectorXd p = (b.array() * w.array()).rowwise().sum();  // diag(W Sigma^-1 W')
    const VectorXd q = d2.cwiseProduct(p);
    const VectorXd u = llt.solve(w.transpose() * q);
    const VectorXd dwu = d1.cwiseProduct(w * u);
    ds_dw = sol.xbar * sol.h.transpose() -
            (d1.asDiagonal() * b + 0.5 * q * sol.h.transpose() -
             0.5 * sol.xbar * u.transpose() - 0.5 * dwu * sol.h.transpose());
    ds_dz = -sol.h - 0.5 * u;
  }
  r.d_weights = -ds_dw - x * ds_dz.transpose();
  r.d_input = -w * ds_dz;
  for (Eigen::Index i = 0; i < x.size(); ++i) r.d_input(i) += expfam::log_prior_grad(f, x(i));
  return r;
}

VectorXd LayerEvaluator::sample_given_z(const VectorXd& z, SampleMode mode, Rng& rng) const {
  if (mode == SampleMode::exact_gaussian && !gaussian_) {
    throw ModeError("exact Gaussian sampling requires a Gaussian input prior");
  }
  const SaddleSolution sol = solve(z);
  const MatrixXd& w = layer_.weights;
  if (mode == SampleMode::exact_gaussian) {
    std::normal_distribution<double> nd;
    VectorXd n(w.rows());
    for (Eigen::Index i = 0; i < n.size(); ++i) n(i) = nd(rng);
    // Remove the range(W) component so that W'x = z.
    const VectorXd proj = w * gram_llt_.solve(w.transpose() * n);
    return sol.xbar + n - proj;
  }
  const VectorXd a = w * sol.h;
  VectorXd x(a.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) x(i) = expfam::sample(layer_.input_family, a(i), rng);
  return x;
}

ForwardResult forward(const LayerSpec& layer, const VectorXd& x) {
  return LayerEvaluator(layer).forward(x);
}

SaddleSolution solve_saddle(const LayerSpec& layer, const VectorXd& z,
                            const SolverOptions& options) {
  return LayerEvaluator(layer, options).solve(z);
}

VectorXd conditional_mean(const LayerSpec& layer, const VectorXd& z) {
  return LayerEvaluator(layer).solve(z).xbar;
}

double log_p0z_spa(const LayerSpec& layer, const VectorXd& z) {
  return LayerEvaluator(layer).log_p0z(z);
}

double log_j(const LayerSpec& layer, const VectorXd& x) {
  return LayerEvaluator(layer).log_j(x, false).value;
}

VectorXd sample_given_z(const LayerSpec& layer, const VectorXd& z, SampleMode mode, Rng& rng) {
  return LayerEvaluator(layer).sample_given_z(z, mode, rng);
}

}  // namespace pbn
