#pragma once

// A single projected-belief-network layer y = act(b + W'x), together with the
// saddle-point machinery that turns it into a generative model:
//
//   * the saddle point h_z solving W' lambda(W h) = z,
//   * the conditional mean (right inverse) lambda(W h_z),
//   * the saddle-point approximation of the prior feature density p0(z),
//   * the log J-function log p0(x) - log p0(z).

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "pbn/expfam.hpp"

namespace pbn {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Valid-border 2-D convolution over a time x frequency x channel map. Maps
/// are flattened time-major: index = (t * freq + f) * channels + c.
struct ConvGeometry {
  int in_time = 0;
  int in_freq = 0;
  int in_channels = 1;
  int kernel_time = 1;
  int kernel_freq = 1;
  int out_channels = 1;
  int stride_time = 1;
  int stride_freq = 1;
  int pad_time = 0;  // zeros on both ends of the time axis
  int pad_freq = 0;

  int out_time() const { return (in_time + 2 * pad_time - kernel_time) / stride_time + 1; }
  int out_freq() const { return (in_freq + 2 * pad_freq - kernel_freq) / stride_freq + 1; }
  int input_size() const { return in_time * in_freq * in_channels; }
  int output_size() const { return out_time() * out_freq() * out_channels; }
  /// Kernel layout: ((out_ch * kernel_time + dt) * kernel_freq + df) * in_channels + in_ch.
  int kernel_size() const { return out_channels * kernel_time * kernel_freq * in_channels; }

  void validate() const;
  bool operator==(const ConvGeometry&) const = default;
};

/// Builds the block-structured dense weight matrix (input_size x output_size).
MatrixXd materialize_conv(const ConvGeometry& g, const VectorXd& kernel);
/// Direct convolution, equal to materialize_conv(g, kernel)' * x.
VectorXd conv_forward(const ConvGeometry& g, const VectorXd& kernel, const VectorXd& x);
/// Sums a dense-weight gradient over tied positions into a kernel gradient.
VectorXd reduce_conv_gradient(const ConvGeometry& g, const MatrixXd& d_weights);
/// Sums a dense-bias gradient over positions into a per-channel gradient.
VectorXd reduce_conv_bias_gradient(const ConvGeometry& g, const VectorXd& d_bias);

struct LayerSpec {
  MatrixXd weights;  // N x M
  VectorXd bias;     // M
  Family input_family = Family::gaussian;
  Activation activation = linear_activation;

  // Convolutional layers keep the kernel and per-channel bias as the trainable
  // parameters; weights and bias above are their materialization.
  std::optional<ConvGeometry> conv;
  VectorXd kernel;
  VectorXd channel_bias;

  static LayerSpec dense(MatrixXd weights, VectorXd bias, Family input_family,
                         Activation activation);
  static LayerSpec convolution(const ConvGeometry& geometry, VectorXd kernel,
                               VectorXd channel_bias, Family input_family,
                               Activation activation);

  int input_dim() const { return static_cast<int>(weights.rows()); }
  int output_dim() const { return static_cast<int>(weights.cols()); }
  bool is_conv() const { return conv.has_value(); }

  /// Rebuilds weights/bias from kernel/channel_bias (no-op for dense layers).
  void materialize();
  /// Dimension checks; with check_rank also verifies full column rank by SVD.
  void validate(bool check_rank = false) const;
};

struct ForwardResult {
  VectorXd z;  // W'x
  VectorXd y;  // act(b + z)
};

struct SaddleSolution {
  VectorXd h;      // saddle point, length M
  VectorXd xbar;   // conditional mean lambda(W h), length N
  double sigma_logdet = 0.0;
  bool converged = false;
  int iterations = 0;
  double residual = 0.0;  // max-norm of W' lambda(W h) - z
  std::vector<double> residual_history;  // 2-norm after each accepted iterate
};

struct SolverOptions {
  int max_iterations = 200;
  /// Convergence requires residual <= tolerance * (1 + |z|_inf).
  double tolerance = 1e-9;
};

enum class SampleMode { surrogate, exact_gaussian };

/// Log J-function value and, optionally, its gradients.
struct LogJResult {
  double value = 0.0;
  MatrixXd d_weights;  // d log J / dW (x fixed)
  VectorXd d_input;    // d log J / dx
};

/// Reusable evaluator bound to one layer. Precomputes the factorization of
/// W'W when the input prior is Gaussian, where every quantity is closed form.
/// Holds a reference: the layer must outlive the evaluator.
class LayerEvaluator {
 public:
  explicit LayerEvaluator(const LayerSpec& layer, SolverOptions options = {});

  const LayerSpec& layer() const { return layer_; }

  ForwardResult forward(const VectorXd& x) const;
  SaddleSolution try_solve(const VectorXd& z) const;
  SaddleSolution solve(const VectorXd& z) const;  // throws SamplingFailure
  double log_p0z(const VectorXd& z, const SaddleSolution& sol) const;
  double log_p0z(const VectorXd& z) const;
  LogJResult log_j(const VectorXd& x, bool with_gradient) const;
  VectorXd sample_given_z(const VectorXd& z, SampleMode mode, Rng& rng) const;

 private:
  const LayerSpec& layer_;
  SolverOptions options_;
  bool gaussian_;
  Eigen::LLT<MatrixXd> gram_llt_;  // W'W, Gaussian prior only
  double gram_logdet_ = 0.0;
};

// Free-function forms of the layer operations.
ForwardResult forward(const LayerSpec& layer, const VectorXd& x);
SaddleSolution solve_saddle(const LayerSpec& layer, const VectorXd& z,
                            const SolverOptions& options = {});
VectorXd conditional_mean(const LayerSpec& layer, const VectorXd& z);
double log_p0z_spa(const LayerSpec& layer, const VectorXd& z);
double log_j(const LayerSpec& layer, const VectorXd& x);
VectorXd sample_given_z(const LayerSpec& layer, const VectorXd& z, SampleMode mode, Rng& rng);

/// log p0(x) = sum_i log p_e(x_i; 0) for the given prior family.
double log_prior(Family f, const VectorXd& x);

/// Moves boundary inputs into the open domain ([eps, 1-eps] or [eps, inf));
/// throws DomainError for values outside the closed domain.
VectorXd clamp_to_interior(Family f, const VectorXd& x);

inline constexpr double kBoundaryEpsilon = 1e-9;

/// Elementwise activation and its derivatives.
VectorXd apply_activation(Activation a, const VectorXd& pre);
VectorXd activation_deriv(Activation a, const VectorXd& pre);

}  // namespace pbn
