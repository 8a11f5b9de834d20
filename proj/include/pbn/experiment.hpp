#pragma once

// Experiment orchestration: configs, data sources, per-class training of
// PBN-DA and PBN-DA-HMM models, evaluation tables and sweeps, and the 2-D
// alignment demo.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "pbn/error.hpp"
#include "pbn/features.hpp"
#include "pbn/harness.hpp"
#include "pbn/hmm.hpp"
#include "pbn/train.hpp"

namespace pbn {

/// An error tagged with the pipeline stage that raised it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Labelled time x frequency maps, flattened time-major.
struct EventSet {
  std::vector<std::string> ids;
  Dataset samples;
  int frames = 0;
  int bands = 0;

  int size() const { return static_cast<int>(samples.size()); }
  std::vector<int> labels() const;
  EventSet subset(const std::vector<int>& indices) const;
};

/// Three classes of band patterns at a random circular time offset in noise:
/// a rising sweep, a falling sweep over the same bands, and two bands that
/// alternate frame by frame.
struct SyntheticConfig {
  int frames = 16;
  int bands = 8;
  int train_per_class = 60;
  int test_per_class = 30;
  double noise = 0.5;
  double amplitude = 3.0;
  std::uint64_t seed = 1;

  void validate() const;
};

struct SyntheticSplit {
  EventSet train;
  EventSet test;
};

SyntheticSplit synthetic_sequences(const SyntheticConfig& cfg);

/// Deliberately weak independent classifier: isotropic Gaussian log density
/// of the time-averaged spectrum around each class mean.
ScoreTable nearest_mean_scores(const EventSet& train, const EventSet& test, int classes);

/// CSV with columns id,label,path (paths relative to the manifest); each path
/// is a WAV file run through the feature extractor.
EventSet load_manifest(const std::filesystem::path& manifest, const FeatureConfig& features);

struct ConvConfig {
  int kernel_time = 1;
  int kernel_freq = 1;
  int channels = 1;
  int stride_time = 1;
  int stride_freq = 1;
  int pad_time = 0;
  int pad_freq = 0;
};

struct LayerConfig {
  int units = 0;  // dense layers
  std::optional<ConvConfig> conv;
  Family input_family = Family::gaussian;
  Activation activation = linear_activation;
};

struct ArchitectureConfig {
  int time = 0;
  int freq = 0;
  std::vector<LayerConfig> layers;
  int gaussian_group = 0;
  std::optional<int> tap;

  /// Chains conv geometries from the input map; no weights are allocated.
  std::vector<LayerPlan> plan() const;
  std::vector<int> dims() const;  // input dim, then each layer's output dim
  /// Shape of the tapped map as (frames, features per frame).
  std::pair<int, int> tap_shape() const;
  long long parameter_count() const;
  /// Dimension, domain, group and tap checks without building the network.
  void validate(int classes) const;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  int classes = 3;

  std::string data = "synthetic";  // "synthetic" or "manifest"
  SyntheticConfig synthetic;
  std::filesystem::path manifest;
  FeatureConfig features;

  std::string folds = "given";  // "given" (synthetic split), "holdout" or "file"
  int fold_count = 4;
  std::uint64_t fold_seed = 1;
  std::filesystem::path fold_file;

  ArchitectureConfig network;
  DaLossConfig train;
  double eval_confidence = 300.0;

  bool hmm = true;
  HmmTrainConfig hmm_train;
  int hmm_trials = 1;

  std::vector<double> confidence_grid;
  std::string external = "nearest_mean";  // or a score CSV path
  std::vector<double> factors;

  std::string hash;  // of the config text

  static ExperimentConfig parse(const std::string& json_text, const std::filesystem::path& base_dir = {});
  static ExperimentConfig load(const std::filesystem::path& path);
  void validate() const;
};

struct ExperimentData {
  EventSet events;
  std::vector<FoldSpec> folds;

  const FoldSpec& fold(const std::string& name) const;
};

/// Events and folds as the config describes them; folds are checked against the labels.
ExperimentData load_experiment_data(const ExperimentConfig& cfg);

/// Human-readable account of what run_experiment will do.
std::string experiment_plan(const ExperimentConfig& cfg);

/// Networks for every class: class m is trained with class_index m.
NetworkModel train_class_network(const ExperimentConfig& cfg, const EventSet& train, int m, Rng& rng,
                                 std::vector<EpochRecord>* history = nullptr);
/// HMM on the tapped maps (or raw maps without a tap) of the class-m training events.
HmmModel train_class_hmm(const ExperimentConfig& cfg, const NetworkModel& net, const EventSet& train, int m,
                         Rng& rng);
ScoreTable hmm_score_table(const std::vector<TappedClassModel>& models, const EventSet& test);

struct MethodErrors {
  std::string method;
  int errors = 0;
  int events = 0;
};

struct FoldOutcome {
  std::string fold;
  std::vector<MethodErrors> methods;
  std::vector<SweepPoint> self_combination;
  std::vector<std::vector<SweepPoint>> ensemble;  // per HMM trial (or one, on PBN-DA, without HMMs)

  int errors_of(const std::string& method) const;
};

struct ExperimentResult {
  std::string config_hash;
  std::vector<FoldOutcome> folds;
};

struct RunOptions {
  bool dry_run = false;
  std::ostream* log = nullptr;
};

/// Runs every stage and writes CSV tables, models and manifest.json under
/// out_dir. Failures surface as StageError.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                const RunOptions& opts = {});

struct Demo2dConfig {
  int train_per_class = 60;
  int test_per_class = 200;
  double ce_scale = 20.0;
  double confidence = 3.0;
  int epochs = 400;
  double step = 0.05;
  int grid = 41;
  int seeds = 5;
  std::uint64_t seed = 1;
};

struct Demo2dSeed {
  std::uint64_t seed = 0;
  int da_train_errors = 0;  // forward-classifier errors of both class networks
  int ml_test_errors = 0;   // likelihood classifier trained without alignment
  int da_test_errors = 0;
  int test_events = 0;
};

struct Demo2dResult {
  std::vector<Demo2dSeed> seeds;
  int total(int Demo2dSeed::*field) const;
};

/// Two elongated 2-D clouds separated across their short axis. Per seed:
/// per-class 2->1 networks trained with and without alignment, likelihood
/// grids and a summary CSV under out_dir.
Demo2dResult demo2d(const Demo2dConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace pbn
