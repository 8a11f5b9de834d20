#pragma once

// Score tables, folds, evaluation and the score-level sweeps (self-combination
// and ensembling). Sweeps only ever read cached score components.

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pbn/network.hpp"
#include "pbn/train.hpp"

namespace pbn {

/// Events x classes. Failed scores are stored as -inf.
struct ScoreTable {
  std::vector<std::string> ids;
  std::vector<int> labels;
  Eigen::MatrixXd scores;
  std::string source;

  int events() const { return static_cast<int>(ids.size()); }
  int num_classes() const { return static_cast<int>(scores.cols()); }
  /// Shapes agree, labels in [0,K), no NaN and no +inf.
  void validate() const;
};

/// "# config_hash=<hex>" and "# source=<tag>" comment lines, then id,label,s0..s{K-1}.
void write_score_csv(const std::filesystem::path& path, const ScoreTable& t, const std::string& config_hash);
ScoreTable read_score_csv(const std::filesystem::path& path);

struct EvalResult {
  int errors = 0;
  int events = 0;
  int failed = 0;               // events where every class failed; counted as errors
  std::vector<int> predicted;   // -1 for failed events
  Eigen::MatrixXi confusion;    // true x predicted
  Eigen::VectorXi failed_by_class;
};

/// Argmax per event with ties to the lowest class index.
EvalResult evaluate(const ScoreTable& t);
void write_confusion_csv(const std::filesystem::path& path, const EvalResult& r, const std::string& config_hash);

/// Indices into a labelled event list.
struct FoldSpec {
  std::string name;
  std::uint64_t seed = 0;
  std::vector<std::vector<int>> train;  // per class
  std::vector<std::vector<int>> test;

  std::vector<int> train_indices() const;  // ascending
  std::vector<int> test_indices() const;
};

/// Independent random holdouts: per class a quarter of the samples (rounded
/// down) is held out for testing. Fold names run A, B, C, ...
std::vector<FoldSpec> make_folds(const std::vector<int>& labels, int k_folds, std::uint64_t seed);
void save_folds(const std::filesystem::path& path, const std::vector<FoldSpec>& folds,
                const std::string& config_hash = {});
/// Also accepts externally produced fold files in the same JSON layout.
std::vector<FoldSpec> load_folds(const std::filesystem::path& path);
/// Checks disjointness, index range and labels against the event list.
void check_fold(const FoldSpec& f, const std::vector<int>& labels);

/// Score components of PBN-DA models with a class-indicator output: per event
/// and class the log-likelihood without the output term, and the network output.
struct LikelihoodCache {
  std::vector<std::string> ids;
  std::vector<int> labels;
  Eigen::MatrixXd core;                 // events x classes, -inf when the class failed
  std::vector<Eigen::MatrixXd> outputs; // per class: events x output dim
  std::vector<OutputDensitySpec> specs; // per class

  int events() const { return static_cast<int>(ids.size()); }
  int num_classes() const { return static_cast<int>(core.cols()); }
  /// Throws CacheMiss when components are missing or inconsistent.
  void check() const;
};

LikelihoodCache build_likelihood_cache(const std::vector<NetworkModel>& models,
                                       const std::vector<std::string>& ids, const Dataset& events);
/// Full scores with every output density set to confidence c.
ScoreTable cache_scores(const LikelihoodCache& cache, double c, const std::string& source = "pbn-da");
void write_cache_csv(const std::filesystem::path& path, const LikelihoodCache& cache, const std::string& config_hash);
LikelihoodCache read_cache_csv(const std::filesystem::path& path);

struct SweepPoint {
  double value = 0.0;
  int errors = 0;
};

std::vector<SweepPoint> self_combination_sweep(const LikelihoodCache& cache, const std::vector<double>& grid);

/// a + f b, with b reordered to the event order of a. A zero factor ignores b.
ScoreTable combine_scores(const ScoreTable& a, const ScoreTable& b, double factor);
/// Throws AlignmentError unless both tables hold the same events and labels.
std::vector<SweepPoint> ensemble_sweep(const ScoreTable& a, const ScoreTable& b, const std::vector<double>& factors);

void write_sweep_csv(const std::filesystem::path& path, const std::string& column,
                     const std::vector<SweepPoint>& points, const std::string& config_hash);

/// Non-increasing to the first minimum, non-decreasing after it, and the
/// minimum strictly below both ends.
bool strict_interior_minimum(const std::vector<SweepPoint>& points);

/// Two 2-class tables whose error sets are disjoint with graded margins, so
/// their combination has a U-shaped error curve over the factor.
std::pair<ScoreTable, ScoreTable> complementary_tables();

}  // namespace pbn
