#pragma once

// Hidden Markov model with diagonal-covariance GMM emissions, used as the
// density of the tapped feature sequence of a truncated network.

#include <Eigen/Dense>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "pbn/binary_io.hpp"
#include "pbn/expfam.hpp"
#include "pbn/network.hpp"

namespace pbn {

/// T x D, one time step per row.
using FeatureSequence = Eigen::MatrixXd;

struct Gmm {
  Eigen::VectorXd weights;    // K
  Eigen::MatrixXd means;      // K x D
  Eigen::MatrixXd variances;  // K x D

  int components() const { return static_cast<int>(weights.size()); }
  int dim() const { return static_cast<int>(means.cols()); }
  double log_density(const Eigen::RowVectorXd& x) const;
  /// Per-component log(w_k N_k(x)).
  Eigen::VectorXd component_log_densities(const Eigen::RowVectorXd& x) const;
};

enum class Topology { ergodic, left_to_right };

std::string_view topology_name(Topology t);
Topology parse_topology(std::string_view name);

struct HmmModel {
  Eigen::VectorXd initial;  // S
  Eigen::MatrixXd trans;    // S x S, row-stochastic
  std::vector<Gmm> emissions;

  int states() const { return static_cast<int>(initial.size()); }
  int dim() const { return emissions.empty() ? 0 : emissions.front().dim(); }
  /// Stochastic rows within 1e-12, consistent shapes, variances >= floor.
  void validate(double variance_floor = 0.0) const;
};

/// log b_s(x_t) as a T x S matrix.
Eigen::MatrixXd emission_log_matrix(const HmmModel& hmm, const FeatureSequence& seq);

/// Log-space forward recursion.
double forward_log_likelihood(const HmmModel& hmm, const FeatureSequence& seq);
/// Forward recursion on per-step normalized probabilities.
double forward_log_likelihood_scaled(const HmmModel& hmm, const FeatureSequence& seq);

struct HmmTrainConfig {
  int states = 4;
  int components = 3;
  int iterations = 20;
  double variance_floor = 0.12;
  Topology topology = Topology::ergodic;
  int warmup_iterations = 5;  // GMM-only EM per state before Baum-Welch
  int kmeans_iterations = 20;

  void validate() const;
};

/// k-means seeding on pooled frames, equal weights, then GMM-only EM warm-up.
HmmModel initialize_hmm(const std::vector<FeatureSequence>& data, const HmmTrainConfig& cfg, Rng& rng);

struct BaumWelchResult {
  HmmModel model;
  std::vector<double> log_likelihoods;  // total, before the first and after each iteration
  std::vector<std::string> events;      // re-seeded components and damped steps
};

/// EM with the variance floor added after every M-step. A step that would lower
/// the total likelihood is damped toward the current parameters.
BaumWelchResult baum_welch(const HmmModel& init, const std::vector<FeatureSequence>& data, int iterations,
                           double variance_floor, Rng& rng);

/// Draws a sequence of length t.
FeatureSequence sample_sequence(const HmmModel& hmm, int t, Rng& rng);

inline constexpr Tag kHmmTag = make_tag("HMMM");
Section hmm_section(const HmmModel& hmm);
HmmModel hmm_from_section(const Section& s, std::size_t file_offset = 8);
void save_hmm(const HmmModel& hmm, const std::filesystem::path& path);
HmmModel load_hmm(const std::filesystem::path& path);
void dump_hmm(std::ostream& os, const HmmModel& hmm);

/// Lays a flattened time-major vector out as rows of width `dim`.
FeatureSequence reshape_time_major(const Eigen::VectorXd& v, int dim);

/// A class model for PBN-DA-HMM scoring. Without a tap index the network is
/// bypassed and the HMM sees the raw input.
struct TappedClassModel {
  NetworkModel network;
  HmmModel hmm;
};

/// Per class: accumulated log J through the tap plus the HMM log likelihood of
/// the tapped sequence. Failing classes score -inf.
std::vector<double> pbn_da_hmm_scores(const std::vector<TappedClassModel>& models, const Eigen::VectorXd& x);
Classification pbn_da_hmm_classify(const std::vector<TappedClassModel>& models, const Eigen::VectorXd& x);

}  // namespace pbn
