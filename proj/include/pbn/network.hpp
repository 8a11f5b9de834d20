#pragma once

// Multi-layer projected belief network.
//
// The likelihood accumulates, stage by stage, the log J-function of each
// linear map, the log Jacobian of the elementwise bias+activation that
// follows it, and finally the log density g of the network output. Leading
// linear layers (the Gaussian group) are collapsed into one composite map
// x -> A'x + c before any of this happens.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pbn/binary_io.hpp"
#include "pbn/layer.hpp"

namespace pbn {

enum class OutputKind { ted_indicator, standard_normal, none };

std::string_view output_kind_name(OutputKind k);
OutputKind parse_output_kind(std::string_view name);

struct OutputDensitySpec {
  OutputKind kind = OutputKind::standard_normal;
  int class_index = 0;
  int num_classes = 1;  // K, which is also the output dimension
  double confidence = 1.0;

  /// Natural parameters of the class-indicator density: +C at the class index, -C elsewhere.
  VectorXd ted_alpha() const;
  void validate() const;
};

/// log g(y). Throws DomainError for TED_INDICATOR outside [0,1]^K.
double output_log_density(const OutputDensitySpec& spec, const VectorXd& y);
VectorXd output_log_density_grad(const OutputDensitySpec& spec, const VectorXd& y);
VectorXd sample_output(const OutputDensitySpec& spec, Rng& rng);

struct NetworkModel {
  std::vector<LayerSpec> layers;
  int gaussian_group_len = 0;
  std::optional<int> tap_index;
  OutputDensitySpec output;
  /// Input dimension; only consulted when there are no layers.
  int input_dim_hint = 0;

  int input_dim() const;
  int output_dim() const;
  /// Structural checks: chained dimensions strictly decreasing, domains of
  /// consecutive layers compatible, group and tap placement, output density.
  void validate() const;
};

/// Per-layer parameter gradients in dense form (W as N x M, b as M).
struct NetworkGradient {
  std::vector<MatrixXd> d_weights;
  std::vector<VectorXd> d_bias;

  static NetworkGradient zeros_like(const NetworkModel& net);
  NetworkGradient& operator+=(const NetworkGradient& o);
  NetworkGradient& operator*=(double s);
};

/// Number of trainable scalars: W and b for dense layers, kernel and channel
/// bias for convolutional ones.
Eigen::Index parameter_count(const NetworkModel& net);
VectorXd get_parameters(const NetworkModel& net);
/// Writes parameters back and re-materializes convolutional layers.
void set_parameters(NetworkModel& net, const VectorXd& theta);
/// Packs a dense gradient into the trainable layout of get_parameters.
VectorXd flatten_gradient(const NetworkModel& net, const NetworkGradient& g);
/// Human-readable name of each packed parameter, e.g. "layer1.W[3,0]".
std::vector<std::string> parameter_names(const NetworkModel& net);

struct LikelihoodResult {
  double value = 0.0;
  NetworkGradient grad;  // filled only when requested
};

/// Features emitted by the tapped layer, arranged as a time sequence.
struct TapResult {
  double log_j = 0.0;  // accumulated log J and activation Jacobians through the tap
  MatrixXd frames;     // T x D
};

/// Forward-classifier pass through every layer.
struct ForwardTrace {
  std::vector<VectorXd> inputs;  // input of each layer
  std::vector<VectorXd> pre;     // b + W'x of each layer
  VectorXd output;               // activation of the last layer
};

struct GenerateOptions {
  int max_retries = 100;
};

/// Evaluator bound to one model. Holds references: the model must outlive it
/// and must not be mutated while in use.
class NetworkEvaluator {
 public:
  explicit NetworkEvaluator(const NetworkModel& net, SolverOptions options = {});
  NetworkEvaluator(const NetworkEvaluator&) = delete;
  NetworkEvaluator& operator=(const NetworkEvaluator&) = delete;
  NetworkEvaluator(NetworkEvaluator&&) = default;

  const NetworkModel& model() const { return net_; }
  int num_stages() const { return static_cast<int>(stages_.size()); }
  /// The linear map applied by each stage (the composite for the Gaussian group).
  const LayerSpec& stage(int s) const { return *stages_[s]; }

  /// Throws SamplingFailure (tagged with the layer index) when a stage has no saddle point.
  double log_likelihood(const VectorXd& x) const;
  LikelihoodResult log_likelihood_grad(const VectorXd& x) const;
  /// Per-stage log J values, activation Jacobians and output term, for diagnostics.
  struct Terms {
    std::vector<double> log_j;
    std::vector<double> log_jacobian;
    double log_g = 0.0;
  };
  Terms log_likelihood_terms(const VectorXd& x) const;

  TapResult tap(const VectorXd& x) const;

  ForwardTrace forward(const VectorXd& x) const;
  /// Gradient of a scalar function of the last layer's pre-activation.
  NetworkGradient backprop_pre(const ForwardTrace& trace, const VectorXd& d_pre) const;

  /// Deterministic reconstruction through conditional means.
  VectorXd reconstruct(const VectorXd& x) const;
  VectorXd generate(Rng& rng, const GenerateOptions& opts = {}) const;

 private:
  double accumulate(const VectorXd& x, int last_stage, bool with_grad, NetworkGradient* grad,
                    Terms* terms, VectorXd* out) const;
  VectorXd invert_to_pre(int stage, const VectorXd& y) const;
  int layer_of_stage_end(int s) const;
  int stage_of_layer(int layer) const;

  const NetworkModel& net_;
  std::unique_ptr<LayerSpec> composite_;  // collapsed Gaussian group, if any
  std::vector<const LayerSpec*> stages_;
  std::vector<LayerEvaluator> evaluators_;
  int group_;  // number of layers collapsed into stage 0 (0 or >= 1)
};

double log_likelihood(const NetworkModel& net, const VectorXd& x);
VectorXd reconstruct(const NetworkModel& net, const VectorXd& x);
VectorXd generate(const NetworkModel& net, Rng& rng, const GenerateOptions& opts = {});

/// log sum_i w_i exp(log G_i(x)); components that fail contribute nothing.
/// Throws SamplingFailure only when every component fails.
double mixture_log_likelihood(const std::vector<const NetworkModel*>& nets,
                              const std::vector<double>& weights, const VectorXd& x);

struct Classification {
  int label = -1;
  VectorXd scores;  // log likelihood + log prior; -inf for failed classes
};

/// Argmax of scores with ties going to the lowest index. Throws
/// ClassificationError when every score is -inf.
int argmax_lowest(const VectorXd& scores);
Classification classify(const std::vector<const NetworkModel*>& models, const VectorXd& x,
                        const std::vector<double>& log_priors = {});

// Serialization.
Section network_section(const NetworkModel& net);
NetworkModel network_from_section(const Section& s, std::size_t file_offset = 8);
void save_network(const NetworkModel& net, const std::filesystem::path& path);
NetworkModel load_network(const std::filesystem::path& path);
/// JSON description written next to the binary container.
std::string network_manifest(const NetworkModel& net, std::uint64_t checksum);

inline constexpr Tag kNetworkTag = make_tag("NETW");

}  // namespace pbn
