#pragma once

// Discriminative-alignment training of a class-conditional network: the
// class-m negative log-likelihood plus a scaled cross-entropy of the same
// network read forward as a classifier over every class.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pbn/features.hpp"
#include "pbn/network.hpp"

namespace pbn {

struct AdamConfig {
  double step = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Random shifts applied to time x frequency maps stored time-major.
struct AugmentConfig {
  int map_time = 0;  // 0 disables augmentation
  int map_freq = 0;
  int max_time_shift = 0;  // circular integer shift drawn from {-T..T}
  int max_freq_shift = 0;
  double max_fractional_time = 0.0;  // extra sub-sample shifts via 2-D Fourier phase ramps
  double max_fractional_freq = 0.0;

  bool enabled() const;
  void validate() const;
};

enum class CeHead {
  k_way,   // softmax over the K final pre-activations
  binary,  // logistic on the class-m pre-activation (unit 0 of a one-unit net), class m against the rest
};

struct DaLossConfig {
  double ce_scale = 0.0;
  int class_index = 0;
  double train_confidence = 1.0;
  CeHead head = CeHead::k_way;
  AdamConfig adam;
  int epochs = 100;
  int batch_size = 0;  // 0 means the whole dataset
  AugmentConfig augment;
  /// Early stop once training errors are zero and the class-m NLL improved by
  /// less than plateau_tol * (1 + |nll|) over the last `patience` epochs.
  int patience = 50;
  double plateau_tol = 1e-4;

  void validate() const;
};

struct LabeledSample {
  Eigen::VectorXd x;
  int label = 0;
};
using Dataset = std::vector<LabeledSample>;

struct DaLossResult {
  double loss = 0.0;
  double nll = 0.0;  // -sum of valid class-m log likelihoods
  double ce = 0.0;   // unscaled cross-entropy sum over the batch
  std::vector<bool> valid;  // false for class-m samples without a likelihood and samples without forward output
  int class_samples = 0;
  int failed = 0;
  int errors = 0;  // forward-classifier errors over the batch

  double sampling_efficiency() const;
};

struct DaGradResult {
  DaLossResult loss;
  Eigen::VectorXd grad;  // packed as get_parameters
};

/// Throws EmptyBatch, or AllFailed when class-m samples exist but none has a likelihood.
DaLossResult da_loss(const NetworkModel& model, const Dataset& batch, const DaLossConfig& cfg);
DaGradResult da_grad(const NetworkModel& model, const Dataset& batch, const DaLossConfig& cfg);

/// Cross-entropy of one sample and its gradient with respect to the final pre-activation.
double cross_entropy(const Eigen::VectorXd& pre, int label, int class_index, CeHead head,
                     Eigen::VectorXd* d_pre = nullptr);
/// Whether the forward classifier gets the sample wrong.
bool forward_error(const Eigen::VectorXd& pre, int label, int class_index, CeHead head);

struct GradCheckEntry {
  std::string name;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;  // |a - n| / max(|a|, |n|, floor)
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error() const;
  const GradCheckEntry& worst() const;
};

inline constexpr double kGradCheckFloor = 1e-3;

/// Central differences of da_loss for every packed parameter.
GradCheckReport grad_check(const NetworkModel& model, const Dataset& batch, const DaLossConfig& cfg,
                           double step = 1e-5);

struct EpochRecord {
  int epoch = 0;
  double nll = 0.0;
  double ce = 0.0;
  int errors = 0;
  double sampling_efficiency = 0.0;
};

struct TrainResult {
  NetworkModel model;
  std::vector<EpochRecord> history;
  std::string stop_reason;  // "epochs", "converged" or "diverged"
};

/// Adam on da_loss. On a non-finite loss the last good parameters are kept
/// and training stops with stop_reason "diverged".
TrainResult train_pbn_da(NetworkModel model, const Dataset& data, const DaLossConfig& cfg, Rng& rng);

/// A non-empty config_hash is written as a leading "# config_hash=" line.
void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history,
                       const std::string& config_hash = {});

/// One layer of an architecture to initialize.
struct LayerPlan {
  int output_dim = 0;  // ignored for convolutions
  Family input_family = Family::gaussian;
  Activation activation = linear_activation;
  std::optional<ConvGeometry> conv;
};

/// Zero-mean normal weights with standard deviation 1/sqrt(fan-in), zero biases.
NetworkModel initialize_network(int input_dim, const std::vector<LayerPlan>& plan,
                                const OutputDensitySpec& output, Rng& rng,
                                int gaussian_group_len = 0, std::optional<int> tap_index = {});

/// Circular integer shift: out(t + dt, f + df) = in(t, f).
Eigen::MatrixXd shift_map(const Eigen::MatrixXd& map, int dt, int df);
/// Shift by real amounts through a 2-D Fourier phase ramp. Integer amounts
/// agree with shift_map. Nyquist bins of even-length axes are scaled by
/// cos(pi d) to keep the result real.
Eigen::MatrixXd fractional_shift(const Eigen::MatrixXd& map, double dt, double df);
Eigen::MatrixXd augment(const Eigen::MatrixXd& map, const AugmentConfig& cfg, Rng& rng);
FeatureMap augment(const FeatureMap& map, const AugmentConfig& cfg, Rng& rng);

}  // namespace pbn
