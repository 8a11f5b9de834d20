#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "doctest.h"
#include "pbn/error.hpp"
#include "pbn/experiment.hpp"
#include "pbn/harness.hpp"
#include "test_util.hpp"

#ifndef PBN_CONFIG_DIR
#define PBN_CONFIG_DIR "configs"
#endif

using namespace pbn;
using namespace pbn::testing;
namespace fs = std::filesystem;

namespace {

const double kInf = std::numeric_limits<double>::infinity();

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("pbn_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

ScoreTable table(const Eigen::MatrixXd& scores, const std::vector<int>& labels, const std::string& source = "t") {
  ScoreTable t;
  t.scores = scores;
  t.labels = labels;
  t.source = source;
  for (std::size_t i = 0; i < labels.size(); ++i) t.ids.push_back("e" + std::to_string(i));
  return t;
}

ScoreTable reorder(const ScoreTable& t, const std::vector<int>& perm) {
  ScoreTable r;
  r.source = t.source;
  r.scores.resize(t.scores.rows(), t.scores.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    r.ids.push_back(t.ids[perm[i]]);
    r.labels.push_back(t.labels[perm[i]]);
    r.scores.row(static_cast<Eigen::Index>(i)) = t.scores.row(perm[i]);
  }
  return r;
}

std::vector<int> shuffled(int n, std::uint64_t seed) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  Rng rng(seed);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

// A small end-to-end config that trains in well under a second.
std::string tiny_config(const std::string& external = "nearest_mean") {
  return R"({
    "name": "tiny", "seed": 5, "classes": 3,
    "data": {"source": "synthetic", "frames": 8, "bands": 6, "train_per_class": 12, "test_per_class": 6,
             "noise": 0.5, "amplitude": 3, "seed": 4},
    "network": {"input": [8, 6], "gaussian_group": 1, "tap": 0, "layers": [
      {"conv": {"kernel": [1, 6], "channels": 2}, "input_family": "gaussian", "activation": "linear"},
      {"units": 3, "input_family": "gaussian", "activation": "trunc_exponential"}]},
    "train": {"ce_scale": 10, "confidence": 3, "step": 0.01, "epochs": 5, "batch_size": 0},
    "hmm": {"states": 2, "components": 1, "iterations": 3},
    "self_combination": {"grid": [1, 10, 100]},
    "ensemble": {"external": ")" +
         external + R"(", "factors": [0, 1, 10]}
  })";
}

NetworkModel indicator_net(int m, Rng& rng) {
  NetworkModel n;
  n.layers = {random_layer(Family::gaussian, Family::trunc_gaussian, 6, 4, rng),
              random_layer(Family::trunc_gaussian, Family::trunc_exponential, 4, 3, rng)};
  n.output = {OutputKind::ted_indicator, m, 3, 2.0};
  n.validate();
  return n;
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("score CSV round trip keeps exact values and failures") {
  TempDir dir("scores");
  Eigen::MatrixXd s(3, 2);
  s << 0.1, -1e-300, -kInf, 12345.678901234567, 1.0 / 3.0, -kInf;
  const ScoreTable t = table(s, {0, 1, 1}, "unit");
  write_score_csv(dir.path / "s.csv", t, "abc123");
  const std::string text = slurp(dir.path / "s.csv");
  CHECK(text.rfind("# config_hash=abc123\n", 0) == 0);
  const ScoreTable r = read_score_csv(dir.path / "s.csv");
  CHECK(r.ids == t.ids);
  CHECK(r.labels == t.labels);
  CHECK(r.source == "unit");
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) CHECK(r.scores(i, j) == t.scores(i, j));

  std::ofstream(dir.path / "bad.csv") << "id,label,s0\nx,0,notanumber\n";
  CHECK_THROWS_AS(read_score_csv(dir.path / "bad.csv"), FormatError);
  std::ofstream(dir.path / "short.csv") << "id,label,s0,s1\nx,0,1\n";
  CHECK_THROWS_AS(read_score_csv(dir.path / "short.csv"), FormatError);
}

TEST_CASE("score table validation") {
  CHECK_NOTHROW(table(Eigen::MatrixXd::Zero(2, 2), {0, 1}).validate());
  Eigen::MatrixXd nan = Eigen::MatrixXd::Zero(2, 2);
  nan(0, 1) = std::nan("");
  CHECK_THROWS_AS(table(nan, {0, 1}).validate(), ConfigError);
  Eigen::MatrixXd pinf = Eigen::MatrixXd::Zero(2, 2);
  pinf(1, 0) = kInf;
  CHECK_THROWS_AS(table(pinf, {0, 1}).validate(), ConfigError);
  CHECK_THROWS_AS(table(Eigen::MatrixXd::Zero(2, 2), {0, 2}).validate(), ConfigError);
  CHECK_THROWS_AS(table(Eigen::MatrixXd::Zero(3, 2), {0, 1}).validate(), DimensionError);
}

TEST_CASE("evaluate against hand counts") {
  Eigen::MatrixXd s(5, 3);
  s << 3, 1, 0,      // right
      0, 2, 1,       // right
      0, 1, 2,       // right
      5, 1, 0,       // label 1, predicted 0
      1, 1, 0;       // tie -> class 0, label 2
  const EvalResult r = evaluate(table(s, {0, 1, 2, 1, 2}));
  CHECK(r.errors == 2);
  CHECK(r.events == 5);
  CHECK(r.failed == 0);
  CHECK(r.predicted == std::vector<int>{0, 1, 2, 0, 0});
  CHECK(r.confusion(1, 0) == 1);
  CHECK(r.confusion(2, 0) == 1);
  CHECK(r.confusion.sum() == 5);

  SUBCASE("perfect and uniform tables") {
    Rng rng(3);
    const int n = 40;
    std::vector<int> labels(n);
    Eigen::MatrixXd perfect = random_matrix(n, 4, rng);
    for (int i = 0; i < n; ++i) {
      labels[i] = i % 4;
      perfect(i, labels[i]) = 10.0;
    }
    CHECK(evaluate(table(perfect, labels)).errors == 0);
    CHECK(evaluate(table(Eigen::MatrixXd::Zero(n, 4), labels)).errors == n - n / 4);
  }
  SUBCASE("failed rows count as errors") {
    Eigen::MatrixXd f(2, 2);
    f << -kInf, -kInf, -kInf, 0.0;
    const EvalResult e = evaluate(table(f, {0, 1}));
    CHECK(e.failed == 1);
    CHECK(e.errors == 1);
    CHECK(e.predicted[0] == -1);
    CHECK(e.failed_by_class(0) == 1);
  }
  SUBCASE("event order does not matter") {
    Rng rng(8);
    std::vector<int> labels;
    for (int i = 0; i < 30; ++i) labels.push_back(i % 3);
    const ScoreTable t = table(random_matrix(30, 3, rng), labels);
    CHECK(evaluate(reorder(t, shuffled(30, 1))).errors == evaluate(t).errors);
  }
}

TEST_CASE("holdout folds") {
  std::vector<int> labels;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 40; ++i) labels.push_back(c);
  const auto folds = make_folds(labels, 4, 9);
  REQUIRE(folds.size() == 4);
  CHECK(folds[0].name == "A");
  CHECK(folds[3].name == "D");
  for (const auto& f : folds) {
    CHECK_NOTHROW(check_fold(f, labels));
    for (int c = 0; c < 3; ++c) {
      CHECK(f.train[c].size() == 30);
      CHECK(f.test[c].size() == 10);
    }
    auto all = f.train_indices();
    const auto test = f.test_indices();
    CHECK(std::is_sorted(all.begin(), all.end()));
    all.insert(all.end(), test.begin(), test.end());
    CHECK(std::set<int>(all.begin(), all.end()).size() == labels.size());
  }
  CHECK(folds[0].test != folds[1].test);
  CHECK(make_folds(labels, 4, 9)[2].test == folds[2].test);

  CHECK_THROWS_AS(make_folds({0, 0, 0, 1, 1, 1, 1}, 2, 1), TooFewSamples);

  TempDir dir("folds");
  save_folds(dir.path / "f.json", folds, "feed");
  const auto back = load_folds(dir.path / "f.json");
  REQUIRE(back.size() == folds.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].name == folds[i].name);
    CHECK(back[i].train == folds[i].train);
    CHECK(back[i].test == folds[i].test);
  }

  FoldSpec overlap = folds[0];
  overlap.test[0].push_back(overlap.train[0][0]);
  CHECK_THROWS_AS(check_fold(overlap, labels), ConfigError);
  FoldSpec wrong = folds[0];
  std::swap(wrong.test[0][0], wrong.test[1][0]);
  CHECK_THROWS_AS(check_fold(wrong, labels), ConfigError);
  FoldSpec range = folds[0];
  range.test[2].push_back(500);
  CHECK_THROWS_AS(check_fold(range, labels), ConfigError);
}

TEST_CASE("likelihood cache reproduces the network scores") {
  Rng rng(21);
  std::vector<NetworkModel> models;
  for (int m = 0; m < 3; ++m) models.push_back(indicator_net(m, rng));
  Dataset events;
  std::vector<std::string> ids;
  for (int i = 0; i < 12; ++i) {
    events.push_back({random_vector(6, rng), i % 3});
    ids.push_back("x" + std::to_string(i));
  }
  const LikelihoodCache cache = build_likelihood_cache(models, ids, events);
  CHECK_NOTHROW(cache.check());
  const ScoreTable full = cache_scores(cache, 2.0);
  int finite = 0;
  for (int i = 0; i < 12; ++i) {
    for (int m = 0; m < 3; ++m) {
      if (!std::isfinite(cache.core(i, m))) continue;
      ++finite;
      CHECK(full.scores(i, m) == doctest::Approx(log_likelihood(models[m], events[i].x)).epsilon(1e-10));
    }
  }
  CHECK(finite >= 30);

  // The indicator density tends to uniform as the confidence vanishes.
  const ScoreTable flat = cache_scores(cache, 1e-9);
  for (int i = 0; i < 12; ++i)
    for (int m = 0; m < 3; ++m)
      if (std::isfinite(cache.core(i, m))) CHECK(std::abs(flat.scores(i, m) - cache.core(i, m)) < 1e-6);

  TempDir dir("cache");
  write_cache_csv(dir.path / "c.csv", cache, "beef");
  const LikelihoodCache back = read_cache_csv(dir.path / "c.csv");
  const ScoreTable again = cache_scores(back, 7.5);
  const ScoreTable orig = cache_scores(cache, 7.5);
  for (int i = 0; i < 12; ++i)
    for (int m = 0; m < 3; ++m) CHECK(again.scores(i, m) == orig.scores(i, m));

  LikelihoodCache broken = cache;
  broken.outputs.pop_back();
  CHECK_THROWS_AS(broken.check(), CacheMiss);
  CHECK_THROWS_AS(cache_scores(broken, 1.0), CacheMiss);
}

TEST_CASE("self-combination sweep finds the constructed interior optimum") {
  // Indicator outputs carry table b's margin, so the combined score is a + (C/2) b.
  const auto [a, b] = complementary_tables();
  LikelihoodCache c;
  c.ids = a.ids;
  c.labels = a.labels;
  c.core = a.scores;
  Eigen::MatrixXd y(a.events(), 2);
  for (int i = 0; i < a.events(); ++i) {
    const double d = b.scores(i, 0) - b.scores(i, 1);
    y(i, 0) = 0.5 + d / 8.0;
    y(i, 1) = 0.5 - d / 8.0;
  }
  for (int m = 0; m < 2; ++m) {
    c.outputs.push_back(y);
    c.specs.push_back({OutputKind::ted_indicator, m, 2, 1.0});
  }
  const std::vector<double> grid = {1e-3, 0.5, 1.0, 2.5, 3.0, 3.5, 100.0, 1000.0};
  const auto sweep = self_combination_sweep(c, grid);
  REQUIRE(sweep.size() == grid.size());
  CHECK(sweep.front().errors == evaluate(a).errors);
  CHECK(sweep.back().errors == evaluate(b).errors);
  CHECK(sweep[4].errors == 0);
  CHECK(strict_interior_minimum(sweep));

  LikelihoodCache wrong = c;
  wrong.specs[0].kind = OutputKind::standard_normal;
  CHECK_THROWS_AS(self_combination_sweep(wrong, grid), CacheMiss);
}

TEST_CASE("ensemble sweep") {
  const auto [a, b] = complementary_tables();
  CHECK(evaluate(a).errors == 4);
  CHECK(evaluate(b).errors == 4);
  const ScoreTable zero = combine_scores(a, b, 0.0);
  CHECK(zero.scores == a.scores);

  std::vector<double> factors{0.0};
  for (double f = 0.1; f < 20.0; f *= 1.25) factors.push_back(f);
  const auto sweep = ensemble_sweep(a, b, factors);
  CHECK(sweep.front().errors == 4);
  CHECK(sweep.back().errors == 4);
  for (std::size_t i = 0; i < factors.size(); ++i)
    if (factors[i] > 1.0 && factors[i] < 2.0) CHECK(sweep[i].errors == 0);
  CHECK(strict_interior_minimum(sweep));

  // b given in another order: same errors.
  const auto again = ensemble_sweep(a, reorder(b, shuffled(b.events(), 4)), factors);
  for (std::size_t i = 0; i < sweep.size(); ++i) CHECK(again[i].errors == sweep[i].errors);

  ScoreTable renamed = b;
  renamed.ids[3] = "other";
  CHECK_THROWS_AS(ensemble_sweep(a, renamed, factors), AlignmentError);
  ScoreTable relabeled = b;
  relabeled.labels[2] = 1 - relabeled.labels[2];
  CHECK_THROWS_AS(combine_scores(a, relabeled, 1.0), AlignmentError);
  ScoreTable shorter = table(b.scores.topRows(5), std::vector<int>(b.labels.begin(), b.labels.begin() + 5));
  CHECK_THROWS_AS(combine_scores(a, shorter, 1.0), AlignmentError);
  CHECK_THROWS_AS(combine_scores(a, b, -1.0), ConfigError);

  CHECK_FALSE(strict_interior_minimum({{0, 3}, {1, 2}, {2, 1}}));
  CHECK_FALSE(strict_interior_minimum({{0, 3}, {1, 1}, {2, 2}, {3, 1}, {4, 3}}));
  CHECK(strict_interior_minimum({{0, 3}, {1, 1}, {2, 1}, {3, 3}}));
}

TEST_CASE("synthetic sequences") {
  SyntheticConfig cfg;
  cfg.seed = 17;
  const auto s1 = synthetic_sequences(cfg);
  const auto s2 = synthetic_sequences(cfg);
  CHECK(s1.train.size() == 180);
  CHECK(s1.test.size() == 90);
  CHECK(s1.train.frames == 16);
  CHECK(s1.train.bands == 8);
  CHECK(s1.train.ids == s2.train.ids);
  for (int i = 0; i < s1.train.size(); ++i) CHECK(s1.train.samples[i].x == s2.train.samples[i].x);
  const auto labels = s1.test.labels();
  for (int c = 0; c < 3; ++c) CHECK(std::count(labels.begin(), labels.end(), c) == 30);

  SyntheticConfig other = cfg;
  other.seed = 18;
  CHECK(synthetic_sequences(other).train.samples[0].x != s1.train.samples[0].x);

  const ScoreTable nm = nearest_mean_scores(s1.train, s1.test, 3);
  CHECK(nm.source == "nearest-mean");
  CHECK(nm.events() == 90);
  CHECK_NOTHROW(nm.validate());
  CHECK(evaluate(nm).errors < 60);  // better than chance

  SyntheticConfig bad = cfg;
  bad.bands = 4;
  CHECK_THROWS_AS(synthetic_sequences(bad), ConfigError);
}

TEST_CASE("experiment config parsing") {
  CHECK_NOTHROW(ExperimentConfig::parse(tiny_config()));
  const auto a = ExperimentConfig::parse(tiny_config());
  CHECK(a.hash.size() == 16);
  CHECK(ExperimentConfig::parse(tiny_config()).hash == a.hash);
  CHECK(ExperimentConfig::parse(tiny_config("x.csv")).hash != a.hash);

  CHECK_THROWS_AS(ExperimentConfig::parse("{ not json"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse(R"({"nmae": "typo"})"), ConfigError);
  std::string extra = tiny_config();
  extra.replace(extra.find("\"epochs\""), 0, "\"epoch_count\": 3, ");
  CHECK_THROWS_AS(ExperimentConfig::parse(extra), ConfigError);
  std::string last = tiny_config();
  last.replace(last.rfind("trunc_exponential"), 17, "trunc_gaussian");
  CHECK_THROWS_AS(ExperimentConfig::parse(last), ConfigError);
  std::string units = tiny_config();
  units.replace(units.find("\"units\": 3"), 10, "\"units\": 4");
  CHECK_THROWS_AS(ExperimentConfig::parse(units), DimensionError);
  std::string shape = tiny_config();
  shape.replace(shape.find("[8, 6]"), 6, "[8, 7]");
  CHECK_THROWS(ExperimentConfig::parse(shape));
}

TEST_CASE("shipped configs have the published shapes") {
  const auto e1 = ExperimentConfig::load(fs::path(PBN_CONFIG_DIR) / "exp1.json");
  CHECK(e1.classes == 23);
  CHECK(e1.network.dims().front() == 624 * 48);
  CHECK(e1.network.tap_shape() == std::pair<int, int>(16, 120));
  CHECK(e1.network.dims().back() == 23);

  const auto e2 = ExperimentConfig::load(fs::path(PBN_CONFIG_DIR) / "exp2.json");
  const auto p = e2.network.plan();
  REQUIRE(p[0].conv);
  CHECK(p[0].conv->out_time() == 12);
  CHECK(p[0].conv->out_freq() == 10);
  CHECK(p[0].conv->out_channels == 8);
  CHECK(e2.network.tap_shape() == std::pair<int, int>(5, 48));
  CHECK(e2.network.dims() == std::vector<int>{960, 960, 240, 128, 32, 6});

  const auto mini = ExperimentConfig::load(fs::path(PBN_CONFIG_DIR) / "mini.json");
  CHECK(mini.data == "synthetic");
  CHECK(experiment_plan(mini).find(mini.hash) != std::string::npos);
}

TEST_CASE("run_experiment artifacts") {
  TempDir dir("run");
  const auto cfg = ExperimentConfig::parse(tiny_config());

  std::ostringstream log;
  run_experiment(cfg, dir.path / "dry", {true, &log});
  CHECK_FALSE(fs::exists(dir.path / "dry"));
  CHECK(log.str().find("tiny") != std::string::npos);

  const auto r1 = run_experiment(cfg, dir.path / "a");
  run_experiment(cfg, dir.path / "b");
  CHECK(r1.config_hash == cfg.hash);
  REQUIRE(r1.folds.size() == 1);
  CHECK(r1.folds[0].errors_of("pbn-da") >= 0);
  CHECK(r1.folds[0].ensemble.at(0).size() == 3);
  CHECK(fs::exists(dir.path / "a" / "manifest.json"));
  CHECK(fs::exists(dir.path / "a" / "summary.csv"));

  int csvs = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir.path / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir.path / "a");
    CHECK(slurp(e.path()) == slurp(dir.path / "b" / rel));
    if (e.path().extension() == ".csv") {
      ++csvs;
      INFO(rel.string());
      CHECK(slurp(e.path()).find("config_hash=" + cfg.hash) != std::string::npos);
    }
  }
  CHECK(csvs >= 10);

  const auto missing = ExperimentConfig::parse(tiny_config("missing_scores.csv"), dir.path);
  try {
    run_experiment(missing, dir.path / "c");
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "external");
    CHECK(std::string(e.what()).rfind("[external]", 0) == 0);
  }
}

TEST_CASE("demo2d writes finite likelihood grids") {
  TempDir dir("demo2d");
  Demo2dConfig cfg;
  cfg.train_per_class = 15;
  cfg.test_per_class = 20;
  cfg.epochs = 60;
  cfg.grid = 7;
  cfg.seeds = 2;
  const auto r = demo2d(cfg, dir.path);
  REQUIRE(r.seeds.size() == 2);
  CHECK(r.total(&Demo2dSeed::test_events) == 80);
  std::ifstream grid(dir.path / "grid_seed1.csv");
  REQUIRE(grid);
  std::string line;
  std::getline(grid, line);
  CHECK(line == "x,y,ll_ml_class0,ll_ml_class1,ll_da_class0,ll_da_class1");
  int rows = 0;
  while (std::getline(grid, line)) {
    ++rows;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) CHECK(std::isfinite(std::stod(cell)));
  }
  CHECK(rows == 49);
  CHECK(fs::exists(dir.path / "summary.csv"));
}

}
