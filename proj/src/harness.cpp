#include "pbn/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "pbn/error.hpp"

namespace pbn {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  return f;
}

/// Reads a CSV with leading "# key=value" comments. Offsets in errors are byte positions.
struct CsvFile {
  std::map<std::string, std::string> meta;
  std::vector<std::string> comments;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> offsets;
};

CsvFile read_csv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read " + path.string());
  CsvFile c;
  std::string line;
  std::size_t pos = 0;
  while (std::getline(f, line)) {
    const std::size_t at = pos;
    pos += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::string body = line.substr(1);
      while (!body.empty() && body.front() == ' ') body.erase(body.begin());
      c.comments.push_back(body);
      if (const auto eq = body.find('='); eq != std::string::npos && body.find(' ') > eq) {
        c.meta[body.substr(0, eq)] = body.substr(eq + 1);
      }
      continue;
    }
    if (c.header.empty()) {
      c.header = split(line);
    } else {
      c.rows.push_back(split(line));
      c.offsets.push_back(at);
    }
  }
  if (c.header.empty()) throw FormatError("missing CSV header in " + path.string(), 0);
  return c;
}

double parse_double(const std::string& s, std::size_t offset) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw FormatError("bad number '" + s + "'", offset);
  return v;
}

int parse_int(const std::string& s, std::size_t offset) {
  const double v = parse_double(s, offset);
  if (v != std::floor(v) || std::abs(v) > 1e9) throw FormatError("bad integer '" + s + "'", offset);
  return static_cast<int>(v);
}

}  // namespace

void ScoreTable::validate() const {
  if (labels.size() != ids.size() || scores.rows() != static_cast<Eigen::Index>(ids.size())) {
    throw DimensionError("score table shape mismatch");
  }
  const int k = num_classes();
  if (k < 1) throw DimensionError("score table has no classes");
  for (int l : labels) {
    if (l < 0 || l >= k) throw ConfigError("label " + std::to_string(l) + " outside [0," + std::to_string(k) + ")");
  }
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    const double v = scores.data()[i];
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
      throw ConfigError("score table holds NaN or +inf");
    }
  }
}

void write_score_csv(const std::filesystem::path& path, const ScoreTable& t, const std::string& config_hash) {
  t.validate();
  auto f = open_out(path);
  f << "# config_hash=" << config_hash << "\n# source=" << t.source << "\nid,label";
  for (int k = 0; k < t.num_classes(); ++k) f << ",s" << k;
  f << '\n';
  for (int i = 0; i < t.events(); ++i) {
    f << t.ids[i] << ',' << t.labels[i];
    for (int k = 0; k < t.num_classes(); ++k) f << ',' << num(t.scores(i, k));
    f << '\n';
  }
}

ScoreTable read_score_csv(const std::filesystem::path& path) {
  const CsvFile c = read_csv(path);
  if (c.header.size() < 3 || c.header[0] != "id" || c.header[1] != "label") {
    throw FormatError("score CSV header must be id,label,scores...", 0);
  }
  const int k = static_cast<int>(c.header.size()) - 2;
  ScoreTable t;
  t.source = c.meta.count("source") ? c.meta.at("source") : "external";
  t.scores.resize(static_cast<Eigen::Index>(c.rows.size()), k);
  for (std::size_t i = 0; i < c.rows.size(); ++i) {
    const auto& r = c.rows[i];
    if (static_cast<int>(r.size()) != k + 2) throw FormatError("wrong column count", c.offsets[i]);
    t.ids.push_back(r[0]);
    t.labels.push_back(parse_int(r[1], c.offsets[i]));
    for (int j = 0; j < k; ++j) t.scores(static_cast<Eigen::Index>(i), j) = parse_double(r[j + 2], c.offsets[i]);
  }
  t.validate();
  return t;
}

EvalResult evaluate(const ScoreTable& t) {
  t.validate();
  const int k = t.num_classes();
  EvalResult r;
  r.events = t.events();
  r.confusion = Eigen::MatrixXi::Zero(k, k);
  r.failed_by_class = Eigen::VectorXi::Zero(k);
  for (int i = 0; i < t.events(); ++i) {
    int pred = -1;
    try {
      pred = argmax_lowest(t.scores.row(i).transpose());
    } catch (const ClassificationError&) {
      ++r.failed;
      ++r.failed_by_class(t.labels[i]);
    }
    r.predicted.push_back(pred);
    if (pred >= 0) ++r.confusion(t.labels[i], pred);
    if (pred != t.labels[i]) ++r.errors;
  }
  return r;
}

void write_confusion_csv(const std::filesystem::path& path, const EvalResult& r, const std::string& config_hash) {
  const auto k = r.confusion.rows();
  auto f = open_out(path);
  f << "# config_hash=" << config_hash << "\n# errors=" << r.errors << "\n# events=" << r.events << "\ntrue";
  for (Eigen::Index j = 0; j < k; ++j) f << ",pred" << j;
  f << ",failed\n";
  for (Eigen::Index i = 0; i < k; ++i) {
    f << i;
    for (Eigen::Index j = 0; j < k; ++j) f << ',' << r.confusion(i, j);
    f << ',' << r.failed_by_class(i) << '\n';
  }
}

std::vector<int> FoldSpec::train_indices() const {
  std::vector<int> out;
  for (const auto& c : train) out.insert(out.end(), c.begin(), c.end());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> FoldSpec::test_indices() const {
  std::vector<int> out;
  for (const auto& c : test) out.insert(out.end(), c.begin(), c.end());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<FoldSpec> make_folds(const std::vector<int>& labels, int k_folds, std::uint64_t seed) {
  if (k_folds < 1 || k_folds > 26) throw ConfigError("fold count must lie in [1,26]");
  if (labels.empty()) throw TooFewSamples("no samples");
  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::vector<int>> members(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw ConfigError("negative label");
    members[static_cast<std::size_t>(labels[i])].push_back(static_cast<int>(i));
  }
  for (int c = 0; c < k; ++c) {
    if (members[static_cast<std::size_t>(c)].size() < 4) {
      throw TooFewSamples("class " + std::to_string(c) + " has " +
                          std::to_string(members[static_cast<std::size_t>(c)].size()) + " samples, need 4");
    }
  }
  Rng rng(seed);
  std::vector<FoldSpec> folds;
  for (int f = 0; f < k_folds; ++f) {
    FoldSpec spec;
    spec.name = std::string(1, static_cast<char>('A' + f));
    spec.seed = seed;
    for (const auto& m : members) {
      std::vector<int> perm = m;
      std::shuffle(perm.begin(), perm.end(), rng);
      const auto n_test = static_cast<std::ptrdiff_t>(m.size() / 4);
      std::vector<int> test(perm.begin(), perm.begin() + n_test), train(perm.begin() + n_test, perm.end());
      std::sort(test.begin(), test.end());
      std::sort(train.begin(), train.end());
      spec.test.push_back(std::move(test));
      spec.train.push_back(std::move(train));
    }
    folds.push_back(std::move(spec));
  }
  return folds;
}

void save_folds(const std::filesystem::path& path, const std::vector<FoldSpec>& folds,
                const std::string& config_hash) {
  nlohmann::json j;
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  auto& arr = j["folds"] = nlohmann::json::array();
  for (const auto& f : folds) {
    arr.push_back({{"name", f.name}, {"seed", f.seed}, {"train", f.train}, {"test", f.test}});
  }
  auto out = open_out(path);
  out << j.dump(1) << '\n';
}

std::vector<FoldSpec> load_folds(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::vector<FoldSpec> folds;
  try {
    const auto j = nlohmann::json::parse(in);
    for (const auto& e : j.at("folds")) {
      FoldSpec f;
      f.name = e.at("name").get<std::string>();
      f.seed = e.value("seed", std::uint64_t{0});
      f.train = e.at("train").get<std::vector<std::vector<int>>>();
      f.test = e.at("test").get<std::vector<std::vector<int>>>();
      if (f.train.size() != f.test.size()) throw ConfigError("fold " + f.name + ": class count mismatch");
      folds.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("fold file " + path.string() + ": " + e.what());
  }
  return folds;
}

void check_fold(const FoldSpec& f, const std::vector<int>& labels) {
  std::set<int> seen;
  auto visit = [&](const std::vector<std::vector<int>>& lists) {
    for (std::size_t c = 0; c < lists.size(); ++c) {
      for (int i : lists[c]) {
        if (i < 0 || i >= static_cast<int>(labels.size())) {
          throw ConfigError("fold " + f.name + ": index " + std::to_string(i) + " out of range");
        }
        if (labels[static_cast<std::size_t>(i)] != static_cast<int>(c)) {
          throw ConfigError("fold " + f.name + ": sample " + std::to_string(i) + " listed under the wrong class");
        }
        if (!seen.insert(i).second) throw ConfigError("fold " + f.name + ": sample " + std::to_string(i) + " repeated");
      }
    }
  };
  visit(f.train);
  visit(f.test);
}

void LikelihoodCache::check() const {
  const int k = num_classes();
  if (k < 1 || core.rows() != events()) throw CacheMiss("likelihood cache is empty or misshapen");
  if (labels.size() != ids.size()) throw CacheMiss("likelihood cache labels missing");
  if (static_cast<int>(outputs.size()) != k || static_cast<int>(specs.size()) != k) {
    throw CacheMiss("likelihood cache lacks network outputs for some classes");
  }
  for (int m = 0; m < k; ++m) {
    if (outputs[m].rows() != events() || outputs[m].cols() != specs[m].num_classes) {
      throw CacheMiss("likelihood cache outputs of class " + std::to_string(m) + " are incomplete");
    }
  }
}

LikelihoodCache build_likelihood_cache(const std::vector<NetworkModel>& models,
                                       const std::vector<std::string>& ids, const Dataset& events) {
  if (ids.size() != events.size()) throw DimensionError("ids and events differ in length");
  LikelihoodCache c;
  c.ids = ids;
  const auto n = static_cast<Eigen::Index>(events.size());
  const auto k = static_cast<Eigen::Index>(models.size());
  for (const auto& e : events) c.labels.push_back(e.label);
  c.core = Eigen::MatrixXd::Constant(n, k, kNegInf);
  for (Eigen::Index m = 0; m < k; ++m) {
    const NetworkModel& net = models[static_cast<std::size_t>(m)];
    NetworkEvaluator ev(net);
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, net.output_dim());
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& x = events[static_cast<std::size_t>(i)].x;
      try {
        const auto terms = ev.log_likelihood_terms(x);
        double s = 0.0;
        for (double v : terms.log_j) s += v;
        for (double v : terms.log_jacobian) s += v;
        out.row(i) = ev.forward(x).output.transpose();
        c.core(i, m) = s;
      } catch (const SamplingFailure&) {
      } catch (const ParameterError&) {
      } catch (const DomainError&) {
      }
    }
    c.outputs.push_back(std::move(out));
    c.specs.push_back(net.output);
  }
  return c;
}

ScoreTable cache_scores(const LikelihoodCache& cache, double c, const std::string& source) {
  cache.check();
  if (!(c > 0.0)) throw ConfigError("confidence must be positive");
  ScoreTable t;
  t.ids = cache.ids;
  t.labels = cache.labels;
  t.source = source;
  t.scores = cache.core;
  for (int m = 0; m < cache.num_classes(); ++m) {
    OutputDensitySpec spec = cache.specs[m];
    spec.confidence = c;
    for (int i = 0; i < cache.events(); ++i) {
      if (std::isinf(cache.core(i, m))) continue;
      t.scores(i, m) += output_log_density(spec, cache.outputs[m].row(i).transpose());
    }
  }
  return t;
}

void write_cache_csv(const std::filesystem::path& path, const LikelihoodCache& cache, const std::string& config_hash) {
  cache.check();
  auto f = open_out(path);
  f << "# config_hash=" << config_hash << '\n';
  for (int m = 0; m < cache.num_classes(); ++m) {
    const auto& s = cache.specs[m];
    f << "# spec " << m << ' ' << output_kind_name(s.kind) << ' ' << s.class_index << ' ' << s.num_classes << ' '
      << num(s.confidence) << '\n';
  }
  f << "id,label,class,core";
  int width = 0;
  for (const auto& o : cache.outputs) width = std::max(width, static_cast<int>(o.cols()));
  for (int j = 0; j < width; ++j) f << ",y" << j;
  f << '\n';
  for (int i = 0; i < cache.events(); ++i) {
    for (int m = 0; m < cache.num_classes(); ++m) {
      f << cache.ids[i] << ',' << cache.labels[i] << ',' << m << ',' << num(cache.core(i, m));
      const auto& o = cache.outputs[m];
      for (int j = 0; j < width; ++j) f << ',' << (j < o.cols() ? num(o(i, j)) : std::string("0"));
      f << '\n';
    }
  }
}

LikelihoodCache read_cache_csv(const std::filesystem::path& path) {
  const CsvFile c = read_csv(path);
  LikelihoodCache cache;
  for (const auto& line : c.comments) {
    std::istringstream ss(line);
    std::string word, kind;
    ss >> word;
    if (word != "spec") continue;
    int m = 0;
    OutputDensitySpec s;
    ss >> m >> kind >> s.class_index >> s.num_classes >> s.confidence;
    if (!ss || m != static_cast<int>(cache.specs.size())) throw FormatError("bad spec comment in cache CSV", 0);
    s.kind = parse_output_kind(kind);
    cache.specs.push_back(s);
  }
  const int k = static_cast<int>(cache.specs.size());
  if (k == 0) throw CacheMiss("cache CSV " + path.string() + " has no output specs");
  if (c.header.size() < 4 || c.header[0] != "id" || c.header[3] != "core") {
    throw FormatError("cache CSV header must be id,label,class,core,y...", 0);
  }
  const int width = static_cast<int>(c.header.size()) - 4;
  if (c.rows.size() % static_cast<std::size_t>(k) != 0) throw CacheMiss("cache CSV has incomplete events");
  const auto n = static_cast<Eigen::Index>(c.rows.size() / static_cast<std::size_t>(k));
  cache.core.resize(n, k);
  for (int m = 0; m < k; ++m) cache.outputs.emplace_back(n, cache.specs[m].num_classes);
  for (std::size_t r = 0; r < c.rows.size(); ++r) {
    const auto& row = c.rows[r];
    const std::size_t at = c.offsets[r];
    if (static_cast<int>(row.size()) != width + 4) throw FormatError("wrong column count", at);
    const auto i = static_cast<Eigen::Index>(r / static_cast<std::size_t>(k));
    const int m = parse_int(row[2], at);
    if (m != static_cast<int>(r % static_cast<std::size_t>(k))) throw CacheMiss("cache CSV rows out of class order");
    if (m == 0) {
      cache.ids.push_back(row[0]);
      cache.labels.push_back(parse_int(row[1], at));
    } else if (row[0] != cache.ids.back()) {
      throw CacheMiss("cache CSV event " + row[0] + " lacks some classes");
    }
    cache.core(i, m) = parse_double(row[3], at);
    for (int j = 0; j < cache.outputs[m].cols(); ++j) {
      if (j >= width) throw CacheMiss("cache CSV lacks output columns");
      cache.outputs[m](i, j) = parse_double(row[4 + j], at);
    }
  }
  cache.check();
  return cache;
}

std::vector<SweepPoint> self_combination_sweep(const LikelihoodCache& cache, const std::vector<double>& grid) {
  cache.check();
  for (const auto& s : cache.specs) {
    if (s.kind != OutputKind::ted_indicator) throw CacheMiss("self-combination needs class-indicator outputs");
  }
  std::vector<SweepPoint> out;
  for (double c : grid) out.push_back({c, evaluate(cache_scores(cache, c)).errors});
  return out;
}

namespace {

/// Row of b for each row of a.
std::vector<int> align(const ScoreTable& a, const ScoreTable& b) {
  if (a.events() != b.events()) throw AlignmentError("tables hold different numbers of events");
  if (a.num_classes() != b.num_classes()) throw AlignmentError("tables have different class counts");
  std::map<std::string, int> where;
  for (int i = 0; i < b.events(); ++i) {
    if (!where.emplace(b.ids[i], i).second) throw AlignmentError("duplicate event id " + b.ids[i]);
  }
  std::vector<int> rows;
  std::set<std::string> seen;
  for (int i = 0; i < a.events(); ++i) {
    const auto it = where.find(a.ids[i]);
    if (it == where.end()) throw AlignmentError("event " + a.ids[i] + " missing from " + b.source);
    if (!seen.insert(a.ids[i]).second) throw AlignmentError("duplicate event id " + a.ids[i]);
    if (b.labels[it->second] != a.labels[i]) throw AlignmentError("labels disagree for event " + a.ids[i]);
    rows.push_back(it->second);
  }
  return rows;
}

}  // namespace

ScoreTable combine_scores(const ScoreTable& a, const ScoreTable& b, double factor) {
  a.validate();
  b.validate();
  if (!(factor >= 0.0) || std::isinf(factor)) throw ConfigError("combination factor must be finite and >= 0");
  const auto rows = align(a, b);
  ScoreTable t = a;
  t.source = a.source + "+" + b.source;
  if (factor == 0.0) return t;
  for (int i = 0; i < a.events(); ++i) t.scores.row(i) += factor * b.scores.row(rows[static_cast<std::size_t>(i)]);
  return t;
}

std::vector<SweepPoint> ensemble_sweep(const ScoreTable& a, const ScoreTable& b, const std::vector<double>& factors) {
  align(a, b);
  std::vector<SweepPoint> out;
  for (double f : factors) out.push_back({f, evaluate(combine_scores(a, b, f)).errors});
  return out;
}

void write_sweep_csv(const std::filesystem::path& path, const std::string& column,
                     const std::vector<SweepPoint>& points, const std::string& config_hash) {
  auto f = open_out(path);
  f << "# config_hash=" << config_hash << '\n' << column << ",errors\n";
  for (const auto& p : points) f << num(p.value) << ',' << p.errors << '\n';
}

bool strict_interior_minimum(const std::vector<SweepPoint>& points) {
  if (points.size() < 3) return false;
  std::size_t imin = 0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (points[i].errors < points[imin].errors) imin = i;
  }
  const int lo = points[imin].errors;
  if (imin == 0 || lo >= points.front().errors || lo >= points.back().errors) return false;
  for (std::size_t i = 1; i <= imin; ++i) {
    if (points[i].errors > points[i - 1].errors) return false;
  }
  for (std::size_t i = imin + 1; i < points.size(); ++i) {
    if (points[i].errors < points[i - 1].errors) return false;
  }
  return true;
}

std::pair<ScoreTable, ScoreTable> complementary_tables() {
  // Margins (true-class score minus the other score). Table a errs on events
  // 0-3, table b on events 4-7; the rest are right in both.
  const std::vector<double> ma = {-0.5, -1.0, -1.5, -2.0, 2.0, 2.0, 2.0, 2.0};
  const std::vector<double> mb = {2.0, 2.0, 2.0, 2.0, -0.25, -0.5, -0.75, -1.0};
  const int n = 20;
  ScoreTable a, b;
  a.source = "constructed-a";
  b.source = "constructed-b";
  a.scores = Eigen::MatrixXd::Zero(n, 2);
  b.scores = Eigen::MatrixXd::Zero(n, 2);
  for (int i = 0; i < n; ++i) {
    const int label = i % 2;
    const std::string id = "ev" + std::to_string(i);
    for (ScoreTable* t : {&a, &b}) {
      t->ids.push_back(id);
      t->labels.push_back(label);
    }
    const auto si = static_cast<std::size_t>(i);
    a.scores(i, label) = i < 8 ? ma[si] : 1.0;
    b.scores(i, label) = i < 8 ? mb[si] : 1.0;
  }
  return {a, b};
}

}  // namespace pbn
