// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pbn/error.hpp"
#include "pbn/experiment.hpp"
#include "pbn/harness.hpp"
#include "pbn/hmm.hpp"
#include "pbn/layer.hpp"
#include "pbn/train.hpp"
#include "test_util.hpp"

#ifndef PBN_CONFIG_DIR
#define PBN_CONFIG_DIR "configs"
#endif

using namespace pbn;
using namespace pbn::testing;
namespace fs = std::filesystem;
namespace q = boost::math::quadrature;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

const Family kFamilies[] = {Family::gaussian, Family::trunc_gaussian, Family::exponential,
                            Family::trunc_exponential};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

template <class Fn>
double expect(Family f, double alpha, Fn fn) {
  auto integrand = [&](double x) {
    const double p = std::exp(expfam::log_density(f, alpha, x));
    return p == 0.0 ? 0.0 : fn(x) * p;
  };
  switch (domain_of(f)) {
    case Domain::reals:
      return q::gauss_kronrod<double, 61>::integrate(integrand, alpha - 40.0, alpha + 40.0, 15, 1e-14);
    case Domain::positive: {
      const double s = f == Family::exponential ? 1.0 / (0.5 - alpha) : std::max(alpha, 1.0 / std::max(1.0, -alpha));
      const double a = q::gauss_kronrod<double, 61>::integrate(integrand, 0.0, s, 15, 1e-14);
      q::exp_sinh<double> es;
      return a + es.integrate([&](double t) { return integrand(s + t); }, 1e-14);
    }
    case Domain::unit:
      return q::gauss_kronrod<double, 61>::integrate(integrand, 0.0, 1.0, 15, 1e-14);
  }
  return 0.0;
}

Outcome expfam_correctness() {
  double worst_norm = 0, worst_mean = 0, worst_var = 0, worst_cgf = 0;
  for (Family f : kFamilies) {
    const double hi = f == Family::exponential ? 0.45 : 10.0;
    for (int i = 0; i < 21; ++i) {
      const double a = -10.0 + (hi + 10.0) * i / 20.0;
      const double lam = expfam::activation(f, a);
      const double mass = expect(f, a, [](double) { return 1.0; });
      const double mean = expect(f, a, [](double x) { return x; });
      const double var = expect(f, a, [&](double x) { return (x - lam) * (x - lam); });
      // Richardson-extrapolated central difference.
      auto central = [&](double h) { return (expfam::cgf(f, a + h) - expfam::cgf(f, a - h)) / (2 * h); };
      const double dk = (4.0 * central(5e-5) - central(1e-4)) / 3.0;
      worst_norm = std::max(worst_norm, std::abs(mass - 1.0));
      worst_mean = std::max(worst_mean, std::abs(mean - lam));
      worst_var = std::max(worst_var, std::abs(var - expfam::activation_deriv(f, a)));
      worst_cgf = std::max(worst_cgf, std::abs(dk - lam));
    }
  }
  const bool ok = worst_norm <= 1e-8 && worst_mean <= 1e-8 && worst_var <= 1e-6 && worst_cgf <= 1e-6;
  return {ok, "max |mass-1| " + fmt("%.2e", worst_norm) + ", |mean-lambda| " + fmt("%.2e", worst_mean) +
                  ", |var-lambda'| " + fmt("%.2e", worst_var) + ", |kappa'-lambda| " + fmt("%.2e", worst_cgf)};
}

Outcome right_inverse() {
  Rng rng(2718);
  std::uniform_int_distribution<int> nd(4, 40);
  double worst_res = 0, worst_inv = 0;
  int failures = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Family f = kFamilies[trial % 4];
    const int n = nd(rng);
    const int m = std::uniform_int_distribution<int>(1, n - 1)(rng);
    auto l = random_layer(f, linear_activation, n, m, rng);
    const Eigen::VectorXd z = l.weights.transpose() * random_input(f, n, rng);
    try {
      const auto s = solve_saddle(l, z);
      const Eigen::VectorXd wh = l.weights * s.h;
      const Eigen::VectorXd lam = wh.unaryExpr([&](double a) { return expfam::activation(f, a); });
      worst_res = std::max(worst_res, (l.weights.transpose() * lam - z).cwiseAbs().maxCoeff());
      worst_inv = std::max(worst_inv, (l.weights.transpose() * s.xbar - z).cwiseAbs().maxCoeff());
    } catch (const Error&) {
      ++failures;
    }
  }
  const bool ok = failures == 0 && worst_res <= 1e-8 && worst_inv <= 1e-8;
  return {ok, "1000 layers, " + std::to_string(failures) + " solver failures, max residual " +
                  fmt("%.2e", worst_res) + ", max |W'xbar-z| " + fmt("%.2e", worst_inv)};
}

LayerSpec sum_layer(int n, Family prior) {
  return LayerSpec::dense(Eigen::MatrixXd::Ones(n, 1), Eigen::VectorXd::Zero(1), prior, linear_activation);
}

// Density of a sum of n independent U(0,1) variables, evaluated on the nearer half by symmetry.
double irwin_hall(int n, double x) {
  x = std::min(x, n - x);
  long double s = 0.0L, binom = 1.0L;
  for (int k = 0; k <= static_cast<int>(std::floor(x)) && k <= n; ++k) {
    s += ((k % 2) ? -1.0L : 1.0L) * binom * std::pow(static_cast<long double>(x) - k, n - 1);
    binom = binom * (n - k) / (k + 1);
  }
  return static_cast<double>(s / std::tgamma(static_cast<long double>(n)));
}

Outcome spa_validation() {
  Rng rng(31);
  const double two_pi = 2 * std::numbers::pi;
  double worst_gauss = 0;
  for (int trial = 0; trial < 50; ++trial) {
    auto l = random_layer(Family::gaussian, linear_activation, 9, 3, rng);
    const Eigen::VectorXd z = random_vector(3, rng, 2.0);
    Eigen::LLT<Eigen::MatrixXd> llt(l.weights.transpose() * l.weights);
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const double oracle = -0.5 * z.dot(llt.solve(z)) - 0.5 * logdet - 1.5 * std::log(two_pi);
    worst_gauss = std::max(worst_gauss, std::abs(log_p0z_spa(l, z) - oracle));
  }

  auto ted = sum_layer(20, Family::trunc_exponential);
  double worst_ted = 0;
  for (int k = 0; k < 11; ++k) {
    const double z = 2.0 + 1.6 * k;
    const double exact = irwin_hall(20, z);
    const double spa = std::exp(log_p0z_spa(ted, Eigen::VectorXd::Constant(1, z)));
    worst_ted = std::max(worst_ted, std::abs(spa - exact) / exact);
  }

  const int n = 30;
  auto tg = sum_layer(n, Family::trunc_gaussian);
  const double mode = n * std::sqrt(2.0 / std::numbers::pi);
  std::normal_distribution<double> nd;
  const long draws = 10000000;
  const double half = 0.25;
  long hits = 0;
  for (long i = 0; i < draws; ++i) {
    double s = 0.0;
    for (int k = 0; k < n; ++k) s += std::abs(nd(rng));
    hits += std::abs(s - mode) < half;
  }
  const double mc = static_cast<double>(hits) / draws / (2 * half);
  const double tg_err = std::abs(std::exp(log_p0z_spa(tg, Eigen::VectorXd::Constant(1, mode))) - mc) / mc;

  const bool ok = worst_gauss <= 1e-9 && worst_ted <= 0.02 && tg_err <= 0.05;
  return {ok, "gaussian max abs " + fmt("%.2e", worst_gauss) + ", TED N=20 max rel " + fmt("%.4f", worst_ted) +
                  " over 11 points, TG N=30 rel " + fmt("%.4f", tg_err)};
}

// W = (1,1)', TED prior; g uniform on the feature range [0, 2].
Outcome projected_normalization() {
  const LayerSpec layer = sum_layer(2, Family::trunc_exponential);
  LayerEvaluator ev(layer);
  auto inner = [&](double x1) {
    auto fx2 = [&](double x2) { return std::exp(ev.log_j(Eigen::Vector2d(x1, x2), false).value) * 0.5; };
    const double split = 1.0 - x1;
    return q::gauss_kronrod<double, 31>::integrate(fx2, 0.0, split, 5, 1e-9) +
           q::gauss_kronrod<double, 31>::integrate(fx2, split, 1.0, 5, 1e-9);
  };
  const double total = q::gauss_kronrod<double, 31>::integrate(inner, 0.0, 1.0, 5, 1e-9);
  return {std::abs(total - 1.0) <= 0.02, "integral " + fmt("%.5f", total) + " (target 1 +- 0.02)"};
}

NetworkModel make_net(std::vector<LayerSpec> layers, OutputDensitySpec out, int group = 0) {
  NetworkModel n;
  n.layers = std::move(layers);
  n.output = out;
  n.gaussian_group_len = group;
  n.validate();
  return n;
}

Dataset mixed_batch(Family prior, int n, int k, int count, Rng& rng) {
  Dataset d;
  for (int i = 0; i < count; ++i) d.push_back({random_input(prior, n, rng), i % k});
  return d;
}

Outcome gradient_fidelity() {
  Rng rng(404);
  DaLossConfig cfg;
  cfg.class_index = 1;
  cfg.ce_scale = 2.5;
  cfg.train_confidence = 2.0;
  const OutputDensitySpec out{OutputKind::ted_indicator, 1, 3, 2.0};
  double worst = 0;
  long params = 0;
  auto run = [&](const NetworkModel& net, const Dataset& batch, const DaLossConfig& c) {
    if (parameter_count(net) > 300) throw std::logic_error("net too large");
    params += parameter_count(net);
    worst = std::max(worst, grad_check(net, batch, c).max_rel_error());
  };
  for (int t = 0; t < 3; ++t) {
    run(make_net({random_layer(Family::trunc_exponential, Family::trunc_gaussian, 8, 5, rng),
                  random_layer(Family::trunc_gaussian, Family::trunc_exponential, 5, 3, rng)},
                 out),
        mixed_batch(Family::trunc_exponential, 8, 3, 6, rng), cfg);
    run(make_net({random_layer(Family::gaussian, linear_activation, 9, 6, rng, 0.6),
                  random_layer(Family::gaussian, linear_activation, 6, 4, rng, 0.6),
                  random_layer(Family::gaussian, Family::trunc_exponential, 4, 3, rng)},
                 out, 2),
        mixed_batch(Family::gaussian, 9, 3, 6, rng), cfg);
    DaLossConfig b = cfg;
    b.head = CeHead::binary;
    run(make_net({LayerSpec::dense(random_matrix(6, 4, rng, 0.3), Eigen::VectorXd::Constant(4, -1.0),
                                   Family::trunc_gaussian, Family::exponential),
                  random_layer(Family::exponential, Family::trunc_exponential, 4, 3, rng)},
                 out),
        mixed_batch(Family::trunc_gaussian, 6, 3, 6, rng), b);
    ConvGeometry g;
    g.in_time = 5;
    g.in_freq = 4;
    g.kernel_time = 2;
    g.kernel_freq = 4;
    g.out_channels = 2;
    auto conv = LayerSpec::convolution(g, random_vector(g.kernel_size(), rng, 0.7), random_vector(2, rng, 0.3),
                                       Family::trunc_gaussian, Family::trunc_gaussian);
    run(make_net({conv, random_layer(Family::trunc_gaussian, Family::trunc_exponential, 8, 3, rng)}, out),
        mixed_batch(Family::trunc_gaussian, 20, 3, 6, rng), cfg);
  }
  return {worst <= 1e-4, "12 nets, " + std::to_string(params) + " parameters, max rel error " + fmt("%.2e", worst)};
}

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

double enumerate_paths(const HmmModel& h, const FeatureSequence& seq) {
  const int s = h.states(), t = static_cast<int>(seq.rows());
  int paths = 1;
  for (int i = 0; i < t; ++i) paths *= s;
  double total = 0.0;
  for (int code = 0; code < paths; ++code) {
    int c = code, prev = -1;
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

Outcome hmm_checks() {
  Rng rng(606);
  double worst_fwd = 0;
  for (int s = 1; s <= 3; ++s) {
    for (int t = 1; t <= 4; ++t) {
      for (int rep = 0; rep < 5; ++rep) {
        const HmmModel h = random_hmm(s, 2, 2, rng);
        const FeatureSequence seq = random_matrix(t, 2, rng, 1.5);
        const double oracle = enumerate_paths(h, seq);
        worst_fwd = std::max(worst_fwd, std::abs(forward_log_likelihood(h, seq) - oracle));
        worst_fwd = std::max(worst_fwd, std::abs(forward_log_likelihood_scaled(h, seq) - oracle));
      }
    }
  }
  bool monotone = true, floored = true;
  for (int set = 0; set < 3; ++set) {
    const HmmModel truth = random_hmm(3, 3, 2, rng);
    std::vector<FeatureSequence> data;
    for (int i = 0; i < 20; ++i) data.push_back(sample_sequence(truth, 12, rng));
    HmmTrainConfig cfg;
    cfg.states = 4;
    cfg.components = 3;
    cfg.topology = set == 2 ? Topology::left_to_right : Topology::ergodic;
    const auto res = baum_welch(initialize_hmm(data, cfg, rng), data, 20, 0.12, rng);
    for (std::size_t i = 1; i < res.log_likelihoods.size(); ++i)
      monotone = monotone && res.log_likelihoods[i] >= res.log_likelihoods[i - 1] - 1e-9;
    monotone = monotone && res.log_likelihoods.size() == 21;
    for (const auto& g : res.model.emissions) floored = floored && g.variances.minCoeff() >= 0.12;
  }
  const bool ok = worst_fwd <= 1e-10 && monotone && floored;
  return {ok, "forward vs paths max " + fmt("%.2e", worst_fwd) + ", monotone " + (monotone ? "yes" : "no") +
                  ", floor " + (floored ? "held" : "violated")};
}

Outcome demo2d_property(const fs::path& dir) {
  const Demo2dResult r = demo2d(Demo2dConfig{}, dir);
  const int train = r.total(&Demo2dSeed::da_train_errors);
  const int ml = r.total(&Demo2dSeed::ml_test_errors);
  const int da = r.total(&Demo2dSeed::da_test_errors);
  const int events = r.total(&Demo2dSeed::test_events);
  return {train == 0 && da <= ml, "5 seeds: DA training errors " + std::to_string(train) + ", test errors DA " +
                                      std::to_string(da) + " vs ML " + std::to_string(ml) + " of " +
                                      std::to_string(events)};
}

Outcome mini_experiment(const ExperimentResult& r) {
  const FoldOutcome& f = r.folds.at(0);
  const int da = f.errors_of("pbn-da"), hmm = f.errors_of("pbn-da-hmm"), ext = f.errors_of("external");
  const auto& sweep = f.ensemble.at(0);
  int interior = sweep.at(1).errors;
  for (std::size_t i = 1; i + 1 < sweep.size(); ++i) interior = std::min(interior, sweep[i].errors);
  const bool ok = hmm <= da && interior <= std::min(hmm, ext);
  return {ok, "errors pbn-da " + std::to_string(da) + ", pbn-da-hmm " + std::to_string(hmm) + ", external " +
                  std::to_string(ext) + ", best interior ensemble " + std::to_string(interior)};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

Outcome determinism(const fs::path& a, const fs::path& b) {
  int files = 0, differ = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file() || e.path().extension() != ".csv") continue;
    ++files;
    const fs::path other = b / fs::relative(e.path(), a);
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) ++differ;
  }
  return {files > 0 && differ == 0,
          std::to_string(files) + " CSV files compared, " + std::to_string(differ) + " differ"};
}

Outcome ensemble_shape() {
  const auto [a, b] = complementary_tables();
  std::vector<double> factors{0.0};
  for (double f = 0.1; f < 20.0; f *= 1.25) factors.push_back(f);
  const auto sweep = ensemble_sweep(a, b, factors);
  std::ostringstream os;
  os << "errors at f=0 " << sweep.front().errors << ", f=" << fmt("%.3g", factors.back()) << ' '
     << sweep.back().errors;
  int best = sweep.front().errors;
  for (const auto& p : sweep) best = std::min(best, p.errors);
  os << ", minimum " << best;
  return {strict_interior_minimum(sweep), os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path config = argc > 1 ? fs::path(argv[1]) : fs::path(PBN_CONFIG_DIR) / "mini.json";
  const fs::path work = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "pbn_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  int failed = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failed;
    std::printf("%s criterion %d (%s): %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(),
                secs);
    std::fflush(stdout);
  };

  report(1, "exponential families", expfam_correctness);
  report(2, "saddle point and right inverse", right_inverse);
  report(3, "saddle point approximation", spa_validation);
  report(4, "projected density normalization", projected_normalization);
  report(5, "gradient fidelity", gradient_fidelity);
  report(6, "hmm", hmm_checks);
  report(7, "2-D alignment demo", [&] { return demo2d_property(work / "demo2d"); });

  std::optional<ExperimentConfig> cfg;
  std::optional<ExperimentResult> first;
  report(8, "miniature sequence experiment", [&] {
    cfg = ExperimentConfig::load(config);
    first = run_experiment(*cfg, work / "run_a");
    return mini_experiment(*first);
  });
  report(9, "harness determinism", [&] {
    if (!cfg) cfg = ExperimentConfig::load(config);
    if (!first) first = run_experiment(*cfg, work / "run_a");
    run_experiment(*cfg, work / "run_b");
    return determinism(work / "run_a", work / "run_b");
  });
  report(10, "ensemble sweep shape", ensemble_shape);

  std::printf("%d of 10 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
