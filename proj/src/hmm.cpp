#include "pbn/hmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>

#include "pbn/error.hpp"

namespace pbn {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
const double kLog2Pi = std::log(2.0 * std::numbers::pi);

double logsumexp(const Eigen::Ref<const Eigen::VectorXd>& v) {
  const double m = v.maxCoeff();
  if (m == kNegInf) return kNegInf;
  return m + std::log((v.array() - m).exp().sum());
}

void check_sequence(const HmmModel& hmm, const FeatureSequence& seq) {
  if (seq.rows() < 1) throw DimensionError("empty feature sequence");
  if (seq.cols() != hmm.dim()) {
    throw DimensionError("sequence dimension " + std::to_string(seq.cols()) + " does not match HMM dimension " +
                         std::to_string(hmm.dim()));
  }
}

// Sufficient statistics of one E-step.
struct Stats {
  double ll = 0.0;
  Eigen::VectorXd initial;
  Eigen::MatrixXd trans;
  std::vector<Eigen::VectorXd> occ;  // per state, per component
  std::vector<Eigen::MatrixXd> sx, sxx;

  explicit Stats(const HmmModel& h)
      : initial(Eigen::VectorXd::Zero(h.states())), trans(Eigen::MatrixXd::Zero(h.states(), h.states())) {
    for (const auto& g : h.emissions) {
      occ.push_back(Eigen::VectorXd::Zero(g.components()));
      sx.push_back(Eigen::MatrixXd::Zero(g.components(), g.dim()));
      sxx.push_back(Eigen::MatrixXd::Zero(g.components(), g.dim()));
    }
  }
};

void accumulate(const HmmModel& h, const FeatureSequence& seq, Stats& st) {
  const int t_len = static_cast<int>(seq.rows()), s = h.states();
  const Eigen::MatrixXd b = emission_log_matrix(h, seq);
  const Eigen::MatrixXd log_a = h.trans.array().log().matrix();
  Eigen::MatrixXd alpha(t_len, s), beta(t_len, s);
  alpha.row(0) = h.initial.array().log().transpose() + b.row(0).array();
  for (int t = 1; t < t_len; ++t)
    for (int j = 0; j < s; ++j) alpha(t, j) = logsumexp(alpha.row(t - 1).transpose() + log_a.col(j)) + b(t, j);
  beta.row(t_len - 1).setZero();
  for (int t = t_len - 2; t >= 0; --t)
    for (int i = 0; i < s; ++i)
      beta(t, i) = logsumexp(log_a.row(i).transpose() + b.row(t + 1).transpose() + beta.row(t + 1).transpose());
  const double ll = logsumexp(alpha.row(t_len - 1).transpose());
  st.ll += ll;
  const Eigen::MatrixXd gamma = (alpha + beta).array().unaryExpr([ll](double v) { return std::exp(v - ll); });
  st.initial += gamma.row(0).transpose();
  for (int t = 0; t + 1 < t_len; ++t)
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < s; ++j) {
        if (log_a(i, j) == kNegInf) continue;
        st.trans(i, j) += std::exp(alpha(t, i) + log_a(i, j) + b(t + 1, j) + beta(t + 1, j) - ll);
      }
  for (int t = 0; t < t_len; ++t) {
    const Eigen::RowVectorXd x = seq.row(t);
    for (int i = 0; i < s; ++i) {
      if (gamma(t, i) == 0.0) continue;
      const Eigen::VectorXd r =
          gamma(t, i) * (h.emissions[i].component_log_densities(x).array() - b(t, i)).exp();
      st.occ[i] += r;
      st.sx[i] += r * x;
      st.sxx[i] += r * x.cwiseAbs2();
    }
  }
}

double total_log_likelihood(const HmmModel& h, const std::vector<FeatureSequence>& data) {
  double ll = 0.0;
  for (const auto& seq : data) ll += forward_log_likelihood(h, seq);
  return ll;
}

Eigen::MatrixXd stack_frames(const std::vector<FeatureSequence>& data) {
  Eigen::Index n = 0;
  for (const auto& s : data) n += s.rows();
  Eigen::MatrixXd out(n, data.front().cols());
  Eigen::Index r = 0;
  for (const auto& s : data) {
    out.middleRows(r, s.rows()) = s;
    r += s.rows();
  }
  return out;
}

// Lloyd iterations from k-means++ seeds. Returns k x D centers and assignments.
std::pair<Eigen::MatrixXd, std::vector<int>> kmeans(const Eigen::MatrixXd& pts, int k, int iters, Rng& rng) {
  const Eigen::Index n = pts.rows();
  Eigen::MatrixXd c(k, pts.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  c.row(0) = pts.row(pick(rng));
  Eigen::VectorXd d2 = (pts.rowwise() - c.row(0)).rowwise().squaredNorm();
  for (int j = 1; j < k; ++j) {
    Eigen::Index next;
    if (d2.sum() > 0.0) {
      std::discrete_distribution<Eigen::Index> dd(d2.data(), d2.data() + d2.size());
      next = dd(rng);
    } else {
      next = pick(rng);
    }
    c.row(j) = pts.row(next);
    d2 = d2.cwiseMin((pts.rowwise() - c.row(j)).rowwise().squaredNorm());
  }
  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  for (int it = 0; it < iters; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best;
      (c.rowwise() - pts.row(i)).rowwise().squaredNorm().minCoeff(&best);
      if (assign[i] != best) changed = true;
      assign[i] = static_cast<int>(best);
    }
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(k, pts.cols());
    Eigen::VectorXd cnt = Eigen::VectorXd::Zero(k);
    for (Eigen::Index i = 0; i < n; ++i) {
      sum.row(assign[i]) += pts.row(i);
      cnt(assign[i]) += 1.0;
    }
    for (int j = 0; j < k; ++j)
      if (cnt(j) > 0) c.row(j) = sum.row(j) / cnt(j);
    if (!changed && it > 0) break;
  }
  return {c, assign};
}

Gmm fit_gmm(const Eigen::MatrixXd& pts, int k, int kmeans_iters, int warmup, double floor, Rng& rng) {
  const Eigen::RowVectorXd pooled_var =
      (pts.rowwise() - pts.colwise().mean()).cwiseAbs2().colwise().mean();
  auto [centers, assign] = kmeans(pts, k, kmeans_iters, rng);
  Gmm g;
  g.weights = Eigen::VectorXd::Constant(k, 1.0 / k);
  g.means = centers;
  g.variances.resize(k, pts.cols());
  for (int j = 0; j < k; ++j) {
    Eigen::RowVectorXd s = Eigen::RowVectorXd::Zero(pts.cols());
    int cnt = 0;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      if (assign[i] != j) continue;
      s += (pts.row(i) - centers.row(j)).cwiseAbs2();
      ++cnt;
    }
    g.variances.row(j) = (cnt > 1 ? Eigen::RowVectorXd(s / cnt) : pooled_var).array() + floor;
  }
  for (int it = 0; it < warmup; ++it) {
    Eigen::VectorXd occ = Eigen::VectorXd::Zero(k);
    Eigen::MatrixXd sx = Eigen::MatrixXd::Zero(k, pts.cols()), sxx = sx;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      const Eigen::VectorXd lc = g.component_log_densities(pts.row(i));
      const Eigen::VectorXd r = (lc.array() - logsumexp(lc)).exp();
      occ += r;
      sx += r * pts.row(i);
      sxx += r * pts.row(i).cwiseAbs2();
    }
    for (int j = 0; j < k; ++j) {
      if (occ(j) < 1e-10) continue;
      g.means.row(j) = sx.row(j) / occ(j);
      g.variances.row(j) = (sxx.row(j) / occ(j) - g.means.row(j).cwiseAbs2()).cwiseMax(0.0).array() + floor;
    }
    g.weights = occ / occ.sum();
  }
  return g;
}

HmmModel blend(const HmmModel& a, const HmmModel& b, double t) {
  HmmModel m = a;
  m.initial = (1 - t) * a.initial + t * b.initial;
  m.trans = (1 - t) * a.trans + t * b.trans;
  for (std::size_t s = 0; s < a.emissions.size(); ++s) {
    m.emissions[s].weights = (1 - t) * a.emissions[s].weights + t * b.emissions[s].weights;
    m.emissions[s].means = (1 - t) * a.emissions[s].means + t * b.emissions[s].means;
    m.emissions[s].variances = (1 - t) * a.emissions[s].variances + t * b.emissions[s].variances;
  }
  return m;
}

}  // namespace

double Gmm::log_density(const Eigen::RowVectorXd& x) const { return logsumexp(component_log_densities(x)); }

Eigen::VectorXd Gmm::component_log_densities(const Eigen::RowVectorXd& x) const {
  Eigen::VectorXd out(components());
  for (int k = 0; k < components(); ++k) {
    const Eigen::ArrayXd v = variances.row(k).transpose().array();
    const Eigen::ArrayXd d = (x - means.row(k)).transpose().array();
    out(k) = std::log(weights(k)) - 0.5 * ((d * d / v).sum() + v.log().sum() + dim() * kLog2Pi);
  }
  return out;
}

std::string_view topology_name(Topology t) { return t == Topology::ergodic ? "ergodic" : "left_to_right"; }

Topology parse_topology(std::string_view name) {
  if (name == "ergodic") return Topology::ergodic;
  if (name == "left_to_right") return Topology::left_to_right;
  throw ConfigError("unknown HMM topology '" + std::string(name) + "'");
}

void HmmModel::validate(double variance_floor) const {
  const int s = states();
  if (s < 1) throw DimensionError("HMM needs at least one state");
  if (trans.rows() != s || trans.cols() != s || static_cast<int>(emissions.size()) != s) {
    throw DimensionError("HMM state count mismatch");
  }
  auto stochastic = [](const Eigen::VectorXd& p) {
    return p.minCoeff() >= 0.0 && std::abs(p.sum() - 1.0) <= 1e-12;
  };
  if (!stochastic(initial)) throw ParameterError("initial distribution does not sum to 1");
  for (int i = 0; i < s; ++i)
    if (!stochastic(trans.row(i).transpose())) throw ParameterError("transition row " + std::to_string(i) + " is not stochastic");
  const int d = dim();
  for (const auto& g : emissions) {
    if (g.dim() != d || g.variances.cols() != d || g.means.rows() != g.components() ||
        g.variances.rows() != g.components() || g.components() < 1) {
      throw DimensionError("GMM shape mismatch");
    }
    if (!stochastic(g.weights)) throw ParameterError("GMM weights do not sum to 1");
    if (!g.means.allFinite() || !(g.variances.minCoeff() > 0.0)) throw ParameterError("invalid GMM parameters");
    if (g.variances.minCoeff() < variance_floor) throw ParameterError("GMM variance below floor");
  }
}

Eigen::MatrixXd emission_log_matrix(const HmmModel& hmm, const FeatureSequence& seq) {
  check_sequence(hmm, seq);
  Eigen::MatrixXd b(seq.rows(), hmm.states());
  for (Eigen::Index t = 0; t < seq.rows(); ++t)
    for (int s = 0; s < hmm.states(); ++s) b(t, s) = hmm.emissions[s].log_density(seq.row(t));
  return b;
}

double forward_log_likelihood(const HmmModel& hmm, const FeatureSequence& seq) {
  const Eigen::MatrixXd b = emission_log_matrix(hmm, seq);
  const Eigen::MatrixXd log_a = hmm.trans.array().log().matrix();
  Eigen::VectorXd alpha = hmm.initial.array().log().matrix() + b.row(0).transpose();
  Eigen::VectorXd next(hmm.states());
  for (Eigen::Index t = 1; t < seq.rows(); ++t) {
    for (int j = 0; j < hmm.states(); ++j) next(j) = logsumexp(alpha + log_a.col(j)) + b(t, j);
    alpha.swap(next);
  }
  return logsumexp(alpha);
}

double forward_log_likelihood_scaled(const HmmModel& hmm, const FeatureSequence& seq) {
  const Eigen::MatrixXd b = emission_log_matrix(hmm, seq);
  double ll = 0.0;
  Eigen::VectorXd alpha;
  for (Eigen::Index t = 0; t < seq.rows(); ++t) {
    // Emissions are rescaled by their per-step maximum before exponentiating.
    const double shift = b.row(t).maxCoeff();
    const Eigen::VectorXd e = (b.row(t).array() - shift).exp().transpose();
    alpha = (t == 0 ? hmm.initial : Eigen::VectorXd(hmm.trans.transpose() * alpha)).cwiseProduct(e);
    const double c = alpha.sum();
    alpha /= c;
    ll += std::log(c) + shift;
  }
  return ll;
}

void HmmTrainConfig::validate() const {
  if (states < 1 || components < 1) throw ConfigError("HMM needs at least one state and one component");
  if (iterations < 0 || warmup_iterations < 0 || kmeans_iterations < 1) throw ConfigError("invalid iteration counts");
  if (!(variance_floor > 0.0)) throw ConfigError("variance floor must be positive");
}

HmmModel initialize_hmm(const std::vector<FeatureSequence>& data, const HmmTrainConfig& cfg, Rng& rng) {
  cfg.validate();
  if (data.empty()) throw EmptyBatch("no training sequences");
  const Eigen::Index d = data.front().cols();
  for (const auto& s : data) {
    if (s.cols() != d || s.rows() < 1) throw DimensionError("training sequences differ in dimension");
    if (!s.allFinite()) throw DomainError("non-finite feature value");
  }
  const int ns = cfg.states;
  const Eigen::MatrixXd pooled = stack_frames(data);

  // Frames per state: k-means clusters for ergodic chains, equal time
  // segments for left-to-right chains.
  std::vector<std::vector<Eigen::Index>> members(ns);
  if (cfg.topology == Topology::ergodic) {
    const auto assign = kmeans(pooled, ns, cfg.kmeans_iterations, rng).second;
    for (Eigen::Index i = 0; i < pooled.rows(); ++i) members[assign[i]].push_back(i);
  } else {
    Eigen::Index base = 0;
    for (const auto& s : data) {
      for (Eigen::Index t = 0; t < s.rows(); ++t) members[std::min<Eigen::Index>(ns - 1, t * ns / s.rows())].push_back(base + t);
      base += s.rows();
    }
  }
  HmmModel h;
  for (int s = 0; s < ns; ++s) {
    Eigen::MatrixXd pts;
    if (members[s].empty()) {
      pts = pooled;
    } else {
      pts.resize(static_cast<Eigen::Index>(members[s].size()), d);
      for (std::size_t i = 0; i < members[s].size(); ++i) pts.row(i) = pooled.row(members[s][i]);
    }
    h.emissions.push_back(fit_gmm(pts, cfg.components, cfg.kmeans_iterations, cfg.warmup_iterations,
                                  cfg.variance_floor, rng));
  }
  if (cfg.topology == Topology::ergodic) {
    h.initial = Eigen::VectorXd::Constant(ns, 1.0 / ns);
    h.trans = ns == 1 ? Eigen::MatrixXd::Ones(1, 1) : Eigen::MatrixXd::Constant(ns, ns, 0.5 / (ns - 1));
    h.trans.diagonal().setConstant(ns == 1 ? 1.0 : 0.5);
  } else {
    h.initial = Eigen::VectorXd::Zero(ns);
    h.initial(0) = 1.0;
    h.trans = Eigen::MatrixXd::Zero(ns, ns);
    for (int s = 0; s + 1 < ns; ++s) h.trans(s, s) = h.trans(s, s + 1) = 0.5;
    h.trans(ns - 1, ns - 1) = 1.0;
  }
  h.validate(cfg.variance_floor);
  return h;
}

BaumWelchResult baum_welch(const HmmModel& init, const std::vector<FeatureSequence>& data, int iterations,
                           double floor, Rng& rng) {
  if (data.empty()) throw EmptyBatch("no training sequences");
  if (!(floor > 0.0)) throw ConfigError("variance floor must be positive");
  init.validate();
  for (const auto& s : data) check_sequence(init, s);
  const Eigen::MatrixXd pooled = stack_frames(data);
  std::uniform_int_distribution<Eigen::Index> pick(0, pooled.rows() - 1);

  BaumWelchResult res;
  HmmModel cur = init;
  double ll = total_log_likelihood(cur, data);
  res.log_likelihoods.push_back(ll);
  for (int it = 1; it <= iterations; ++it) {
    Stats st(cur);
    for (const auto& seq : data) accumulate(cur, seq, st);

    HmmModel next = cur;
    next.initial = st.initial / st.initial.sum();
    for (int i = 0; i < cur.states(); ++i) {
      const double row = st.trans.row(i).sum();
      if (row > 0.0) next.trans.row(i) = st.trans.row(i) / row;
    }
    for (int s = 0; s < cur.states(); ++s) {
      Gmm& g = next.emissions[s];
      const double occ = st.occ[s].sum();
      if (!(occ > 0.0)) continue;
      for (int k = 0; k < g.components(); ++k) {
        const double n = st.occ[s](k);
        if (n < 1e-10 * occ || n < 1e-300) {
          // Weight underflow: restart the component on a random frame.
          g.means.row(k) = pooled.row(pick(rng));
          g.variances.row(k) = cur.emissions[s].variances.colwise().maxCoeff();
          g.weights(k) = 1.0 / g.components();
          res.events.push_back("iteration " + std::to_string(it) + ": state " + std::to_string(s) + " component " +
                               std::to_string(k) + " re-seeded");
          continue;
        }
        g.weights(k) = n / occ;
        g.means.row(k) = st.sx[s].row(k) / n;
        g.variances.row(k) = (st.sxx[s].row(k) / n - g.means.row(k).cwiseAbs2()).cwiseMax(0.0).array() + floor;
      }
      g.weights /= g.weights.sum();
    }

    // Generalized EM: the floored update is not the exact maximizer, so fall
    // back to the best improving point on the segment toward it.
    double next_ll = total_log_likelihood(next, data);
    if (!(next_ll >= ll)) {
      bool accepted = false;
      for (double t = 0.5; t >= 1.0 / 1024; t *= 0.5) {
        HmmModel trial = blend(cur, next, t);
        const double trial_ll = total_log_likelihood(trial, data);
        if (trial_ll >= ll) {
          next = std::move(trial);
          next_ll = trial_ll;
          accepted = true;
          res.events.push_back("iteration " + std::to_string(it) + ": step damped to " + std::to_string(t));
          break;
        }
      }
      if (!accepted) {
        next = cur;
        next_ll = ll;
        res.events.push_back("iteration " + std::to_string(it) + ": no improving step");
      }
    }
    for (int i = 0; i < next.states(); ++i) next.trans.row(i) /= next.trans.row(i).sum();
    next.initial /= next.initial.sum();
    cur = std::move(next);
    ll = next_ll;
    res.log_likelihoods.push_back(ll);
  }
  res.model = std::move(cur);
  return res;
}

FeatureSequence sample_sequence(const HmmModel& hmm, int t, Rng& rng) {
  if (t < 1) throw DimensionError("sequence length must be positive");
  FeatureSequence seq(t, hmm.dim());
  auto draw = [&rng](const Eigen::VectorXd& p) {
    std::discrete_distribution<int> dd(p.data(), p.data() + p.size());
    return dd(rng);
  };
  std::normal_distribution<double> nd;
  int s = draw(hmm.initial);
  for (int i = 0; i < t; ++i) {
    if (i > 0) s = draw(hmm.trans.row(s).transpose());
    const Gmm& g = hmm.emissions[s];
    const int k = draw(g.weights);
    for (int j = 0; j < g.dim(); ++j) seq(i, j) = g.means(k, j) + std::sqrt(g.variances(k, j)) * nd(rng);
  }
  return seq;
}

Section hmm_section(const HmmModel& hmm) {
  hmm.validate();
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(hmm.states()));
  w.u32(static_cast<std::uint32_t>(hmm.dim()));
  w.vec(hmm.initial);
  w.mat(hmm.trans);
  for (const auto& g : hmm.emissions) {
    w.vec(g.weights);
    w.mat(g.means);
    w.mat(g.variances);
  }
  return {kHmmTag, w.take()};
}

HmmModel hmm_from_section(const Section& s, std::size_t file_offset) {
  if (s.tag != kHmmTag) throw FormatError("expected an HMMM section", file_offset);
  ByteReader r(s.payload, file_offset + 12);
  HmmModel h;
  const std::uint32_t ns = r.u32();
  const std::uint32_t d = r.u32();
  if (ns == 0 || ns > s.payload.size()) r.fail("implausible state count");
  h.initial = r.vec();
  h.trans = r.mat();
  for (std::uint32_t i = 0; i < ns; ++i) {
    Gmm g;
    g.weights = r.vec();
    g.means = r.mat();
    g.variances = r.mat();
    h.emissions.push_back(std::move(g));
  }
  if (!r.done()) r.fail("trailing bytes in HMMM section");
  try {
    h.validate();
    if (h.dim() != static_cast<int>(d)) throw DimensionError("dimension header mismatch");
  } catch (const Error& e) {
    throw FormatError(std::string("invalid HMM: ") + e.what(), file_offset);
  }
  return h;
}

void save_hmm(const HmmModel& hmm, const std::filesystem::path& path) { write_container(path, {hmm_section(hmm)}); }

HmmModel load_hmm(const std::filesystem::path& path) {
  const auto sections = read_container(path);
  std::size_t offset = 8;
  for (const auto& s : sections) {
    if (s.tag == kHmmTag) return hmm_from_section(s, offset);
    offset += 12 + s.payload.size();
  }
  throw FormatError("no HMMM section in " + path.string(), 8);
}

void dump_hmm(std::ostream& os, const HmmModel& hmm) {
  const Eigen::IOFormat row(Eigen::FullPrecision, Eigen::DontAlignCols, " ", "\n", "  ", "");
  os << "states " << hmm.states() << " dim " << hmm.dim() << "\n";
  os << "initial\n" << hmm.initial.transpose().format(row) << "\n";
  os << "trans\n" << hmm.trans.format(row) << "\n";
  for (int s = 0; s < hmm.states(); ++s) {
    const Gmm& g = hmm.emissions[s];
    os << "state " << s << " components " << g.components() << "\n";
    os << " weights\n" << g.weights.transpose().format(row) << "\n";
    os << " means\n" << g.means.format(row) << "\n";
    os << " variances\n" << g.variances.format(row) << "\n";
  }
}

FeatureSequence reshape_time_major(const Eigen::VectorXd& v, int dim) {
  if (dim < 1 || v.size() % dim != 0 || v.size() == 0) {
    throw DimensionError("cannot lay " + std::to_string(v.size()) + " values out in rows of " + std::to_string(dim));
  }
  FeatureSequence s(v.size() / dim, dim);
  for (Eigen::Index t = 0; t < s.rows(); ++t) s.row(t) = v.segment(t * dim, dim).transpose();
  return s;
}

std::vector<double> pbn_da_hmm_scores(const std::vector<TappedClassModel>& models, const Eigen::VectorXd& x) {
  std::vector<double> scores;
  for (const auto& m : models) {
    double log_j = 0.0;
    Eigen::VectorXd flat;
    if (m.network.tap_index) {
      TapResult r;
      try {
        r = NetworkEvaluator(m.network).tap(x);
      } catch (const SamplingFailure&) {
        scores.push_back(kNegInf);
        continue;
      } catch (const ParameterError&) {
        scores.push_back(kNegInf);
        continue;
      }
      log_j = r.log_j;
      flat.resize(r.frames.size());
      for (Eigen::Index t = 0; t < r.frames.rows(); ++t) flat.segment(t * r.frames.cols(), r.frames.cols()) = r.frames.row(t);
    } else {
      flat = x;
    }
    scores.push_back(log_j + forward_log_likelihood(m.hmm, reshape_time_major(flat, m.hmm.dim())));
  }
  return scores;
}

Classification pbn_da_hmm_classify(const std::vector<TappedClassModel>& models, const Eigen::VectorXd& x) {
  const auto s = pbn_da_hmm_scores(models, x);
  Classification c;
  c.scores = Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size()));
  c.label = argmax_lowest(c.scores);
  return c;
}

}  // namespace pbn
