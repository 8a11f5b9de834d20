#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <sstream>

#include "doctest.h"
#include "pbn/error.hpp"
#include "pbn/hmm.hpp"
#include "test_util.hpp"

using namespace pbn;
using namespace pbn::testing;

namespace {

Eigen::VectorXd random_simplex(int n, Rng& rng) {
  std::gamma_distribution<double> g(1.0, 1.0);
  Eigen::VectorXd p(n);
  for (int i = 0; i < n; ++i) p(i) = g(rng) + 0.05;
  return p / p.sum();
}

HmmModel random_hmm(int s, int d, int k, Rng& rng) {
  HmmModel h;
  h.initial = random_simplex(s, rng);
  h.trans.resize(s, s);
  for (int i = 0; i < s; ++i) h.trans.row(i) = random_simplex(s, rng).transpose();
  std::uniform_real_distribution<double> var(0.3, 2.0);
  for (int i = 0; i < s; ++i) {
    Gmm g;
    g.weights = random_simplex(k, rng);
    g.means = random_matrix(k, d, rng, 2.0);
    g.variances = Eigen::MatrixXd::NullaryExpr(k, d, [&] { return var(rng); });
    h.emissions.push_back(std::move(g));
  }
  return h;
}

// Diagonal Gaussian mixture density written out directly.
double gmm_density(const Gmm& g, const Eigen::RowVectorXd& x) {
  double p = 0.0;
  for (int k = 0; k < g.components(); ++k) {
    double c = g.weights(k);
    for (int j = 0; j < g.dim(); ++j) {
      const double v = g.variances(k, j), d = x(j) - g.means(k, j);
      c *= std::exp(-0.5 * d * d / v) / std::sqrt(2 * std::numbers::pi * v);
    }
    p += c;
  }
  return p;
}

// Sum over every state path.
double enumerate_paths(const HmmModel& h, const FeatureSequence& seq) {
  const int s = h.states(), t = static_cast<int>(seq.rows());
  int paths = 1;
  for (int i = 0; i < t; ++i) paths *= s;
  double total = 0.0;
  for (int code = 0; code < paths; ++code) {
    int c = code;
    int prev = -1;
    double p = 1.0;
    for (int i = 0; i < t; ++i) {
      const int st = c % s;
      c /= s;
      p *= (i == 0 ? h.initial(st) : h.trans(prev, st)) * gmm_density(h.emissions[st], seq.row(i));
      prev = st;
    }
    total += p;
  }
  return std::log(total);
}

HmmModel permute(const HmmModel& h, const std::vector<int>& perm) {
  HmmModel p = h;
  for (int i = 0; i < h.states(); ++i) {
    p.initial(i) = h.initial(perm[i]);
    p.emissions[i] = h.emissions[perm[i]];
    for (int j = 0; j < h.states(); ++j) p.trans(i, j) = h.trans(perm[i], perm[j]);
  }
  return p;
}

HmmModel two_state_truth() {
  HmmModel h;
  h.initial = Eigen::Vector2d(0.6, 0.4);
  h.trans.resize(2, 2);
  h.trans << 0.8, 0.2, 0.3, 0.7;
  Gmm a, b;
  a.weights = Eigen::VectorXd::Ones(1);
  a.means = Eigen::RowVector2d(-2.0, 1.0);
  a.variances = Eigen::RowVector2d(0.5, 0.8);
  b.weights = Eigen::VectorXd::Ones(1);
  b.means = Eigen::RowVector2d(2.0, -1.0);
  b.variances = Eigen::RowVector2d(0.7, 0.4);
  h.emissions = {a, b};
  return h;
}

}  // namespace

TEST_SUITE("hmm") {

TEST_CASE("degenerate forward cases") {
  Rng rng(51);
  const HmmModel h = random_hmm(3, 2, 2, rng);
  const FeatureSequence one = random_matrix(1, 2, rng);
  double p = 0.0;
  for (int s = 0; s < 3; ++s) p += h.initial(s) * gmm_density(h.emissions[s], one.row(0));
  CHECK(forward_log_likelihood(h, one) == doctest::Approx(std::log(p)).epsilon(1e-13));

  HmmModel single;
  single.initial = Eigen::VectorXd::Ones(1);
  single.trans = Eigen::MatrixXd::Ones(1, 1);
  single.emissions = {h.emissions[1]};
  const FeatureSequence seq = random_matrix(6, 2, rng);
  double sum = 0.0;
  for (int t = 0; t < 6; ++t) sum += std::log(gmm_density(single.emissions[0], seq.row(t)));
  CHECK(forward_log_likelihood(single, seq) == doctest::Approx(sum).epsilon(1e-13));

  CHECK_THROWS_AS(forward_log_likelihood(h, random_matrix(3, 4, rng)), DimensionError);
  CHECK_THROWS_AS(forward_log_likelihood(h, FeatureSequence(0, 2)), DimensionError);
}

TEST_CASE("forward equals path enumeration") {
  Rng rng(52);
  SUBCASE("hand-set two-state chain, three steps") {
    const HmmModel h = two_state_truth();
    FeatureSequence seq(3, 2);
    seq << -1.5, 0.7, 0.4, 0.2, 2.2, -1.3;
    CHECK(std::abs(forward_log_likelihood(h, seq) - enumerate_paths(h, seq)) < 1e-10);
  }
  SUBCASE("random chains up to three states and four steps") {
    for (int s = 1; s <= 3; ++s)
      for (int t = 1; t <= 4; ++t)
        for (int trial = 0; trial < 5; ++trial) {
          const HmmModel h = random_hmm(s, 3, 2, rng);
          const FeatureSequence seq = random_matrix(t, 3, rng, 1.5);
          const double ref = enumerate_paths(h, seq);
          CHECK(std::abs(forward_log_likelihood(h, seq) - ref) < 1e-10);
          CHECK(std::abs(forward_log_likelihood_scaled(h, seq) - ref) < 1e-10);
        }
  }
}

TEST_CASE("scaled and log-space recursions agree") {
  Rng rng(53);
  for (int trial = 0; trial < 20; ++trial) {
    const HmmModel h = random_hmm(4, 5, 3, rng);
    const FeatureSequence seq = random_matrix(200, 5, rng, trial % 2 ? 20.0 : 1.0);
    const double a = forward_log_likelihood(h, seq);
    CHECK(std::isfinite(a));
    CHECK(std::abs(a - forward_log_likelihood_scaled(h, seq)) < 1e-9 * std::max(1.0, std::abs(a)));
  }
}

TEST_CASE("state permutation leaves the likelihood unchanged") {
  Rng rng(54);
  for (int trial = 0; trial < 10; ++trial) {
    const HmmModel h = random_hmm(4, 3, 2, rng);
    std::vector<int> perm = {0, 1, 2, 3};
    std::shuffle(perm.begin(), perm.end(), rng);
    const FeatureSequence seq = random_matrix(12, 3, rng);
    const double a = forward_log_likelihood(h, seq);
    CHECK(std::abs(a - forward_log_likelihood(permute(h, perm), seq)) < 1e-12 * std::max(1.0, std::abs(a)));
  }
}

TEST_CASE("baum welch is monotone and honours the floor") {
  Rng rng(55);
  std::vector<std::vector<FeatureSequence>> sets;
  {
    const HmmModel truth = random_hmm(3, 4, 2, rng);
    std::vector<FeatureSequence> d;
    for (int i = 0; i < 30; ++i) d.push_back(sample_sequence(truth, 16, rng));
    sets.push_back(std::move(d));
  }
  {
    // Tight clusters: the 0.12 floor dominates the fitted variances.
    HmmModel truth = two_state_truth();
    for (auto& g : truth.emissions) g.variances.setConstant(0.01);
    std::vector<FeatureSequence> d;
    for (int i = 0; i < 20; ++i) d.push_back(sample_sequence(truth, 10, rng));
    sets.push_back(std::move(d));
  }
  {
    std::vector<FeatureSequence> d;
    for (int i = 0; i < 15; ++i) d.push_back(random_matrix(8, 3, rng));
    sets.push_back(std::move(d));
  }
  for (std::size_t n = 0; n < sets.size(); ++n) {
    for (Topology topo : {Topology::ergodic, Topology::left_to_right}) {
      HmmTrainConfig cfg;
      cfg.states = 4;
      cfg.components = 3;
      cfg.topology = topo;
      const HmmModel init = initialize_hmm(sets[n], cfg, rng);
      CHECK_NOTHROW(init.validate(0.12));
      const auto res = baum_welch(init, sets[n], 20, 0.12, rng);
      REQUIRE(res.log_likelihoods.size() == 21);
      INFO("dataset " << n << " topology " << topology_name(topo));
      for (std::size_t i = 1; i < res.log_likelihoods.size(); ++i) {
        CHECK(res.log_likelihoods[i] >= res.log_likelihoods[i - 1] - 1e-9);
      }
      for (const auto& g : res.model.emissions) CHECK(g.variances.minCoeff() >= 0.12);
      CHECK_NOTHROW(res.model.validate(0.12));
      if (topo == Topology::left_to_right) CHECK(res.model.trans(3, 0) == 0.0);
    }
  }
}

TEST_CASE("baum welch recovers a known chain") {
  Rng rng(56);
  const HmmModel truth = two_state_truth();
  std::vector<FeatureSequence> data;
  for (int i = 0; i < 500; ++i) data.push_back(sample_sequence(truth, 20, rng));

  SUBCASE("from k-means seeding") {
    HmmTrainConfig cfg;
    cfg.states = 2;
    cfg.components = 1;
    const auto res = baum_welch(initialize_hmm(data, cfg, rng), data, 40, 1e-6, rng);
    const Eigen::MatrixXd& a = res.model.trans;
    const bool swapped = res.model.emissions[0].means(0, 0) > 0.0;
    const Eigen::MatrixXd aligned = swapped ? permute(res.model, {1, 0}).trans : a;
    CHECK((aligned - truth.trans).cwiseAbs().maxCoeff() < 0.05);
  }
  SUBCASE("one iteration from the truth does not lose likelihood") {
    const auto res = baum_welch(truth, data, 1, 1e-6, rng);
    CHECK(res.log_likelihoods[1] >= res.log_likelihoods[0]);
  }
}

TEST_CASE("degenerate components are re-seeded") {
  Rng rng(57);
  const HmmModel truth = two_state_truth();
  std::vector<FeatureSequence> data;
  for (int i = 0; i < 20; ++i) data.push_back(sample_sequence(truth, 10, rng));
  HmmModel init = truth;
  for (auto& g : init.emissions) {
    g.weights = Eigen::Vector2d(0.5, 0.5);
    g.means.conservativeResize(2, 2);
    g.means.row(1) = Eigen::RowVector2d(1e4, 1e4);
    g.variances.conservativeResize(2, 2);
    g.variances.row(1) = g.variances.row(0);
  }
  const auto res = baum_welch(init, data, 3, 0.12, rng);
  const bool reseeded = std::any_of(res.events.begin(), res.events.end(),
                                    [](const std::string& e) { return e.find("re-seeded") != std::string::npos; });
  CHECK(reseeded);
  for (std::size_t i = 1; i < res.log_likelihoods.size(); ++i) CHECK(res.log_likelihoods[i] >= res.log_likelihoods[i - 1]);
}

TEST_CASE("training input checks") {
  Rng rng(58);
  HmmTrainConfig cfg;
  CHECK_THROWS_AS(initialize_hmm({}, cfg, rng), EmptyBatch);
  cfg.variance_floor = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  const HmmModel h = two_state_truth();
  CHECK_THROWS_AS(baum_welch(h, {random_matrix(3, 2, rng)}, 1, 0.0, rng), ConfigError);
  CHECK_THROWS_AS(baum_welch(h, {random_matrix(3, 5, rng)}, 1, 0.1, rng), DimensionError);
  HmmModel bad = h;
  bad.trans(0, 0) = 0.9;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
}

TEST_CASE("hmm serialization") {
  Rng rng(59);
  const HmmModel h = random_hmm(4, 3, 3, rng);
  const auto path = std::filesystem::temp_directory_path() / "pbn_hmm_test.pbn";
  save_hmm(h, path);
  const HmmModel back = load_hmm(path);
  CHECK(back.initial == h.initial);
  CHECK(back.trans == h.trans);
  for (int s = 0; s < 4; ++s) {
    CHECK(back.emissions[s].means == h.emissions[s].means);
    CHECK(back.emissions[s].variances == h.emissions[s].variances);
    CHECK(back.emissions[s].weights == h.emissions[s].weights);
  }
  Section s = hmm_section(h);
  s.payload.resize(s.payload.size() - 3);
  CHECK_THROWS_AS(hmm_from_section(s), FormatError);
  CHECK_THROWS_AS(load_network(path), FormatError);

  std::ostringstream os;
  dump_hmm(os, h);
  CHECK(os.str().rfind("states 4 dim 3\n", 0) == 0);
  CHECK(os.str().find("state 3 components 3") != std::string::npos);
  std::filesystem::remove(path);
}

TEST_CASE("tapped network scores") {
  Rng rng(60);
  const HmmModel h0 = random_hmm(2, 3, 2, rng), h1 = random_hmm(2, 3, 2, rng);

  SUBCASE("without a tap the hmm sees the raw input") {
    NetworkModel raw;
    raw.input_dim_hint = 12;
    const Eigen::VectorXd x = random_vector(12, rng);
    const auto scores = pbn_da_hmm_scores({{raw, h0}, {raw, h1}}, x);
    const FeatureSequence seq = reshape_time_major(x, 3);
    CHECK(seq(1, 0) == x(3));
    CHECK(scores[0] == forward_log_likelihood(h0, seq));
    CHECK(scores[1] == forward_log_likelihood(h1, seq));
  }
  SUBCASE("score is tap log J plus hmm likelihood") {
    NetworkModel net;
    net.layers = {random_layer(Family::trunc_exponential, Family::trunc_gaussian, 10, 6, rng)};
    net.tap_index = 0;
    net.output = {OutputKind::none, 0, 6, 1.0};
    net.validate();
    const Eigen::VectorXd x = random_input(Family::trunc_exponential, 10, rng);
    const TapResult tap = NetworkEvaluator(net).tap(x);
    Eigen::VectorXd flat = tap.frames.transpose().reshaped();
    const double expect = tap.log_j + forward_log_likelihood(h0, reshape_time_major(flat, 3));
    CHECK(pbn_da_hmm_scores({{net, h0}}, x)[0] == doctest::Approx(expect).epsilon(1e-14));
  }
  SUBCASE("identical hmms leave the decision to log J") {
    // Same map under two input priors: identical tapped features, different log J.
    const auto base = random_layer(Family::trunc_exponential, Family::trunc_gaussian, 10, 6, rng);
    NetworkModel a, b;
    a.layers = {base};
    b.layers = {LayerSpec::dense(base.weights, base.bias, Family::trunc_gaussian, Family::trunc_gaussian)};
    for (auto* n : {&a, &b}) {
      n->tap_index = 0;
      n->output = {OutputKind::none, 0, 6, 1.0};
    }
    for (int trial = 0; trial < 5; ++trial) {
      const Eigen::VectorXd x = random_input(Family::trunc_exponential, 10, rng);
      const auto ta = NetworkEvaluator(a).tap(x), tb = NetworkEvaluator(b).tap(x);
      REQUIRE(ta.frames == tb.frames);
      const auto c = pbn_da_hmm_classify({{a, h0}, {b, h0}}, x);
      CHECK(c.scores(0) - c.scores(1) == doctest::Approx(ta.log_j - tb.log_j).epsilon(1e-12));
      CHECK(c.label == (ta.log_j >= tb.log_j ? 0 : 1));
    }
  }
  SUBCASE("shape mismatch") {
    NetworkModel raw;
    CHECK_THROWS_AS(pbn_da_hmm_scores({{raw, h0}}, random_vector(10, rng)), DimensionError);
  }
}

}  // TEST_SUITE
