#include "pbn/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

namespace pbn {

namespace {

using nlohmann::json;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr const char* kVersion = "0.1.0";

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  return f;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

FeatureConfig parse_features(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "exp1") return FeatureConfig::exp1();
    if (s == "exp2") return FeatureConfig::exp2();
    throw ConfigError("unknown feature preset '" + s + "'");
  }
  check_keys(j, {"fft_size", "shift", "band_count", "spacing", "sample_rate", "log_floor"}, "data.features");
  FeatureConfig f;
  read(j, "fft_size", f.fft_size);
  read(j, "shift", f.shift);
  read(j, "band_count", f.band_count);
  read(j, "sample_rate", f.sample_rate);
  read(j, "log_floor", f.log_floor);
  if (j.contains("spacing")) f.spacing = parse_band_spacing(j.at("spacing").get<std::string>());
  f.validate();
  return f;
}

LayerConfig parse_layer(const json& j, std::size_t i) {
  const std::string where = "network.layers[" + std::to_string(i) + "]";
  check_keys(j, {"units", "conv", "input_family", "activation"}, where);
  LayerConfig l;
  read(j, "units", l.units);
  if (j.contains("conv")) {
    const auto& c = j.at("conv");
    check_keys(c, {"kernel", "channels", "stride", "pad"}, where + ".conv");
    ConvConfig g;
    const auto k = c.at("kernel").get<std::vector<int>>();
    if (k.size() != 2) throw ConfigError(where + ".conv.kernel needs [time, freq]");
    g.kernel_time = k[0];
    g.kernel_freq = k[1];
    g.channels = c.at("channels").get<int>();
    if (c.contains("stride")) {
      const auto s = c.at("stride").get<std::vector<int>>();
      if (s.size() != 2) throw ConfigError(where + ".conv.stride needs [time, freq]");
      g.stride_time = s[0];
      g.stride_freq = s[1];
    }
    if (c.contains("pad")) {
      const auto p = c.at("pad").get<std::vector<int>>();
      if (p.size() != 2) throw ConfigError(where + ".conv.pad needs [time, freq]");
      g.pad_time = p[0];
      g.pad_freq = p[1];
    }
    l.conv = g;
  }
  if (j.contains("input_family")) l.input_family = parse_family(j.at("input_family").get<std::string>());
  if (j.contains("activation")) l.activation = parse_activation(j.at("activation").get<std::string>());
  return l;
}

std::vector<double> read_grid(const json& j, const char* key) {
  return j.contains(key) ? j.at(key).get<std::vector<double>>() : std::vector<double>{};
}

std::string brief(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ' ';
    s += brief(v[i]);
  }
  return s;
}

}  // namespace

std::vector<int> EventSet::labels() const {
  std::vector<int> out;
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

EventSet EventSet::subset(const std::vector<int>& indices) const {
  EventSet out;
  out.frames = frames;
  out.bands = bands;
  for (int i : indices) {
    if (i < 0 || i >= size()) throw DimensionError("event index " + std::to_string(i) + " out of range");
    out.ids.push_back(ids[static_cast<std::size_t>(i)]);
    out.samples.push_back(samples[static_cast<std::size_t>(i)]);
  }
  return out;
}

void SyntheticConfig::validate() const {
  if (bands < 6) throw ConfigError("synthetic data needs at least 6 bands");
  if (frames < bands) throw ConfigError("synthetic data needs at least as many frames as bands");
  if (train_per_class < 1 || test_per_class < 1) throw ConfigError("synthetic class sizes must be positive");
  if (!(noise > 0.0) || !(amplitude > 0.0)) throw ConfigError("synthetic noise and amplitude must be positive");
}

SyntheticSplit synthetic_sequences(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::normal_distribution<double> nd(0.0, cfg.noise);
  std::uniform_int_distribution<int> offset(0, cfg.frames - 1);
  const int sweep = cfg.bands - 2;  // bands 1 .. bands-2
  auto draw = [&](int label) {
    Eigen::MatrixXd m(cfg.frames, cfg.bands);
    for (int t = 0; t < cfg.frames; ++t)
      for (int f = 0; f < cfg.bands; ++f) m(t, f) = nd(rng);
    const int o = offset(rng);
    auto add = [&](int t, int f) { m((o + t) % cfg.frames, f) += cfg.amplitude; };
    for (int i = 0; i < sweep; ++i) {
      if (label == 0) add(i, 1 + i);
      if (label == 1) add(i, sweep - i);
    }
    if (label == 2) {
      for (int i = 0; i < sweep + 2; ++i) add(i, i % 2 ? cfg.bands - 3 : 2);
    }
    FeatureMap fm;
    fm.values = m;
    return fm.flatten();
  };
  SyntheticSplit s;
  for (EventSet* e : {&s.train, &s.test}) {
    e->frames = cfg.frames;
    e->bands = cfg.bands;
  }
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < cfg.train_per_class; ++i) {
      s.train.ids.push_back("train-" + std::to_string(c) + "-" + std::to_string(i));
      s.train.samples.push_back({draw(c), c});
    }
  }
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < cfg.test_per_class; ++i) {
      s.test.ids.push_back("test-" + std::to_string(c) + "-" + std::to_string(i));
      s.test.samples.push_back({draw(c), c});
    }
  }
  return s;
}

ScoreTable nearest_mean_scores(const EventSet& train, const EventSet& test, int classes) {
  if (train.bands < 1 || train.frames < 1) throw DimensionError("event set has no map shape");
  auto spectrum = [&](const Eigen::VectorXd& x) {
    return FeatureMap::unflatten(x, train.frames, train.bands).colwise().mean().transpose().eval();
  };
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(classes, train.bands);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(classes);
  for (const auto& s : train.samples) {
    if (s.label < 0 || s.label >= classes) throw ConfigError("label out of range");
    means.row(s.label) += spectrum(s.x).transpose();
    counts(s.label) += 1.0;
  }
  for (int c = 0; c < classes; ++c) {
    if (counts(c) == 0.0) throw TooFewSamples("class " + std::to_string(c) + " has no training events");
    means.row(c) /= counts(c);
  }
  double var = 0.0;
  for (const auto& s : train.samples) var += (spectrum(s.x).transpose() - means.row(s.label)).squaredNorm();
  var = std::max(var / (static_cast<double>(train.samples.size()) * train.bands), 1e-12);
  ScoreTable t;
  t.source = "nearest-mean";
  t.ids = test.ids;
  t.labels = test.labels();
  t.scores.resize(test.size(), classes);
  for (int i = 0; i < test.size(); ++i) {
    const Eigen::VectorXd a = spectrum(test.samples[static_cast<std::size_t>(i)].x);
    for (int c = 0; c < classes; ++c) t.scores(i, c) = -(a.transpose() - means.row(c)).squaredNorm() / (2 * var);
  }
  return t;
}

EventSet load_manifest(const std::filesystem::path& manifest, const FeatureConfig& features) {
  std::ifstream in(manifest);
  if (!in) throw Error("cannot read " + manifest.string());
  EventSet e;
  std::string line;
  bool header = true;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::istringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (header) {
      if (cells != std::vector<std::string>{"id", "label", "path"}) {
        throw ConfigError(manifest.string() + ": header must be id,label,path");
      }
      header = false;
      continue;
    }
    if (cells.size() != 3) throw ConfigError(manifest.string() + ":" + std::to_string(lineno) + ": expected 3 columns");
    const auto wav = read_wav(manifest.parent_path() / cells[2]);
    if (wav.sample_rate != features.sample_rate) {
      throw ConfigError(cells[2] + ": sample rate " + num(wav.sample_rate) + " differs from the feature config");
    }
    const FeatureMap m = extract(features, wav.samples, cells[2]);
    if (e.samples.empty()) {
      e.frames = m.frames();
      e.bands = m.bands();
    } else if (m.frames() != e.frames || m.bands() != e.bands) {
      throw DimensionError(cells[2] + ": map shape differs from the first event");
    }
    e.ids.push_back(cells[0]);
    e.samples.push_back({m.flatten(), std::stoi(cells[1])});
  }
  if (e.samples.empty()) throw TooFewSamples(manifest.string() + " lists no events");
  return e;
}

std::vector<LayerPlan> ArchitectureConfig::plan() const {
  if (time < 1 || freq < 1) throw ConfigError("network input shape must be positive");
  int t = time, f = freq, ch = 1, dim = time * freq;
  bool spatial = true;
  std::vector<LayerPlan> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerConfig& l = layers[i];
    LayerPlan p;
    p.input_family = l.input_family;
    p.activation = l.activation;
    if (l.conv) {
      if (!spatial) throw ConfigError("layer " + std::to_string(i) + ": convolution after a dense layer");
      const ConvConfig& c = *l.conv;
      ConvGeometry g{t, f, ch, c.kernel_time, c.kernel_freq, c.channels, c.stride_time, c.stride_freq,
                     c.pad_time, c.pad_freq};
      g.validate();
      p.conv = g;
      t = g.out_time();
      f = g.out_freq();
      ch = g.out_channels;
      dim = g.output_size();
      p.output_dim = dim;
    } else {
      if (l.units < 1) throw ConfigError("layer " + std::to_string(i) + ": dense layer needs units");
      spatial = false;
      dim = l.units;
      p.output_dim = dim;
    }
    out.push_back(p);
  }
  return out;
}

std::vector<int> ArchitectureConfig::dims() const {
  std::vector<int> d = {time * freq};
  for (const auto& p : plan()) d.push_back(p.output_dim);
  return d;
}

std::pair<int, int> ArchitectureConfig::tap_shape() const {
  if (!tap) return {time, freq};
  const auto p = plan();
  const LayerPlan& l = p.at(static_cast<std::size_t>(*tap));
  if (l.conv) return {l.conv->out_time(), l.conv->out_freq() * l.conv->out_channels};
  return {1, l.output_dim};
}

long long ArchitectureConfig::parameter_count() const {
  long long n = 0;
  int in = time * freq;
  for (const auto& p : plan()) {
    if (p.conv) {
      n += p.conv->kernel_size() + p.conv->out_channels;
    } else {
      n += static_cast<long long>(in) * p.output_dim + p.output_dim;
    }
    in = p.output_dim;
  }
  return n;
}

void ArchitectureConfig::validate(int classes) const {
  if (layers.empty()) throw ConfigError("network needs at least one layer");
  const auto p = plan();
  const auto d = dims();
  const int n = static_cast<int>(layers.size());
  if (gaussian_group < 0 || gaussian_group > n) throw ConfigError("gaussian group length out of range");
  for (int i = 0; i < n; ++i) {
    const bool grouped = i + 1 < gaussian_group;
    if (d[i + 1] > d[i] || (!grouped && d[i + 1] == d[i])) {
      throw DimensionError("layer " + std::to_string(i) + " maps " + std::to_string(d[i]) + " to " +
                           std::to_string(d[i + 1]) + " and is not dimension reducing");
    }
    if (i + 1 < n && domain_of(layers[i].activation) != domain_of(layers[i + 1].input_family)) {
      throw ConfigError("layer " + std::to_string(i + 1) + " input family does not match the preceding activation");
    }
    if (i < gaussian_group) {
      if (layers[i].activation != linear_activation) {
        throw ConfigError("gaussian group layer " + std::to_string(i) + " is not linear");
      }
      if (i > 0 && layers[i].input_family != Family::gaussian) {
        throw ConfigError("gaussian group layer " + std::to_string(i) + " needs a gaussian prior");
      }
    }
  }
  if (d.back() != classes) {
    throw DimensionError("last layer has " + std::to_string(d.back()) + " units for " + std::to_string(classes) +
                         " classes");
  }
  if (layers.back().activation != Family::trunc_exponential) {
    throw ConfigError("last layer needs a trunc_exponential activation for the class-indicator output");
  }
  if (tap) {
    if (*tap < 0 || *tap >= n) throw ConfigError("tap index out of range");
    if (gaussian_group > 1 && *tap < gaussian_group - 1) throw ConfigError("tap index lies inside the gaussian group");
  }
}

ExperimentConfig ExperimentConfig::parse(const std::string& text, const std::filesystem::path& base_dir) {
  ExperimentConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    check_keys(j, {"name", "seed", "classes", "data", "folds", "network", "train", "eval", "hmm", "self_combination",
                   "ensemble"},
               "config");
    read(j, "name", c.name);
    read(j, "seed", c.seed);
    read(j, "classes", c.classes);

    if (j.contains("data")) {
      const auto& d = j.at("data");
      check_keys(d, {"source", "frames", "bands", "train_per_class", "test_per_class", "noise", "amplitude", "seed",
                     "manifest", "features"},
                 "data");
      read(d, "source", c.data);
      auto& s = c.synthetic;
      read(d, "frames", s.frames);
      read(d, "bands", s.bands);
      read(d, "train_per_class", s.train_per_class);
      read(d, "test_per_class", s.test_per_class);
      read(d, "noise", s.noise);
      read(d, "amplitude", s.amplitude);
      read(d, "seed", s.seed);
      if (d.contains("manifest")) c.manifest = base_dir / d.at("manifest").get<std::string>();
      if (d.contains("features")) c.features = parse_features(d.at("features"));
    }
    if (j.contains("folds")) {
      const auto& f = j.at("folds");
      check_keys(f, {"mode", "count", "seed", "path"}, "folds");
      read(f, "mode", c.folds);
      read(f, "count", c.fold_count);
      read(f, "seed", c.fold_seed);
      if (f.contains("path")) c.fold_file = base_dir / f.at("path").get<std::string>();
    }
    if (j.contains("network")) {
      const auto& n = j.at("network");
      check_keys(n, {"input", "layers", "gaussian_group", "tap"}, "network");
      const auto in = n.at("input").get<std::vector<int>>();
      if (in.size() != 2) throw ConfigError("network.input needs [frames, bands]");
      c.network.time = in[0];
      c.network.freq = in[1];
      const auto& ls = n.at("layers");
      for (std::size_t i = 0; i < ls.size(); ++i) c.network.layers.push_back(parse_layer(ls[i], i));
      read(n, "gaussian_group", c.network.gaussian_group);
      if (n.contains("tap") && !n.at("tap").is_null()) c.network.tap = n.at("tap").get<int>();
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      check_keys(t, {"ce_scale", "confidence", "head", "step", "beta1", "beta2", "epsilon", "epochs", "batch_size",
                     "patience", "plateau_tol", "augment"},
                 "train");
      auto& d = c.train;
      read(t, "ce_scale", d.ce_scale);
      read(t, "confidence", d.train_confidence);
      if (t.contains("head")) {
        const auto h = t.at("head").get<std::string>();
        if (h == "k_way") d.head = CeHead::k_way;
        else if (h == "binary") d.head = CeHead::binary;
        else throw ConfigError("train.head must be k_way or binary");
      }
      read(t, "step", d.adam.step);
      read(t, "beta1", d.adam.beta1);
      read(t, "beta2", d.adam.beta2);
      read(t, "epsilon", d.adam.epsilon);
      read(t, "epochs", d.epochs);
      read(t, "batch_size", d.batch_size);
      read(t, "patience", d.patience);
      read(t, "plateau_tol", d.plateau_tol);
      if (t.contains("augment")) {
        const auto& a = t.at("augment");
        check_keys(a, {"max_time_shift", "max_freq_shift", "max_fractional_time", "max_fractional_freq"},
                   "train.augment");
        read(a, "max_time_shift", d.augment.max_time_shift);
        read(a, "max_freq_shift", d.augment.max_freq_shift);
        read(a, "max_fractional_time", d.augment.max_fractional_time);
        read(a, "max_fractional_freq", d.augment.max_fractional_freq);
      }
    }
    if (j.contains("eval")) {
      check_keys(j.at("eval"), {"confidence"}, "eval");
      read(j.at("eval"), "confidence", c.eval_confidence);
    }
    if (j.contains("hmm")) {
      const auto& h = j.at("hmm");
      check_keys(h, {"enabled", "states", "components", "iterations", "variance_floor", "topology",
                     "warmup_iterations", "kmeans_iterations", "trials"},
                 "hmm");
      read(h, "enabled", c.hmm);
      read(h, "states", c.hmm_train.states);
      read(h, "components", c.hmm_train.components);
      read(h, "iterations", c.hmm_train.iterations);
      read(h, "variance_floor", c.hmm_train.variance_floor);
      if (h.contains("topology")) c.hmm_train.topology = parse_topology(h.at("topology").get<std::string>());
      read(h, "warmup_iterations", c.hmm_train.warmup_iterations);
      read(h, "kmeans_iterations", c.hmm_train.kmeans_iterations);
      read(h, "trials", c.hmm_trials);
    }
    if (j.contains("self_combination")) {
      check_keys(j.at("self_combination"), {"grid"}, "self_combination");
      c.confidence_grid = read_grid(j.at("self_combination"), "grid");
    }
    if (j.contains("ensemble")) {
      const auto& e = j.at("ensemble");
      check_keys(e, {"external", "factors"}, "ensemble");
      if (e.contains("external")) {
        const auto ext = e.at("external").get<std::string>();
        c.external = ext == "nearest_mean" ? ext : (base_dir / ext).string();
      }
      c.factors = read_grid(e, "factors");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.train.augment.map_time = c.network.time;
  c.train.augment.map_freq = c.network.freq;
  c.hash = hex64(fnv1a64(j.dump()));
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.parent_path());
}

void ExperimentConfig::validate() const {
  if (classes < 2) throw ConfigError("need at least 2 classes");
  if (data == "synthetic") {
    synthetic.validate();
    if (classes != 3) throw ConfigError("synthetic data has 3 classes");
    if (network.time != synthetic.frames || network.freq != synthetic.bands) {
      throw DimensionError("network input does not match the synthetic map shape");
    }
  } else if (data == "manifest") {
    if (manifest.empty()) throw ConfigError("data.manifest is required for manifest data");
    features.validate();
    if (folds == "given") throw ConfigError("manifest data needs holdout or file folds");
  } else {
    throw ConfigError("data.source must be synthetic or manifest");
  }
  if (folds == "holdout") {
    if (fold_count < 1 || fold_count > 26) throw ConfigError("folds.count must lie in [1,26]");
  } else if (folds == "file") {
    if (fold_file.empty()) throw ConfigError("folds.path is required for file folds");
  } else if (folds != "given") {
    throw ConfigError("folds.mode must be given, holdout or file");
  }
  network.validate(classes);
  train.validate();
  if (!(eval_confidence > 0.0)) throw ConfigError("eval.confidence must be positive");
  if (hmm) {
    hmm_train.validate();
    if (hmm_trials < 1) throw ConfigError("hmm.trials must be positive");
  }
  for (double c : confidence_grid) {
    if (!(c > 0.0)) throw ConfigError("self-combination grid values must be positive");
  }
  for (double f : factors) {
    if (!(f >= 0.0) || std::isinf(f)) throw ConfigError("ensemble factors must be finite and >= 0");
  }
}

std::string experiment_plan(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "experiment " << cfg.name << " config_hash=" << cfg.hash << " seed=" << cfg.seed << '\n';
  if (cfg.data == "synthetic") {
    const auto& s = cfg.synthetic;
    os << "data: synthetic " << cfg.classes << " classes, " << s.frames << "x" << s.bands << " maps, "
       << s.train_per_class << " train + " << s.test_per_class << " test per class, seed " << s.seed << '\n';
  } else {
    const auto& f = cfg.features;
    os << "data: manifest " << cfg.manifest.string() << ", features fft " << f.fft_size << " shift " << f.shift << ", "
       << f.band_count << " " << band_spacing_name(f.spacing) << " bands at " << brief(f.sample_rate) << " Hz\n";
  }
  if (cfg.folds == "given") os << "folds: the generated train/test split\n";
  if (cfg.folds == "holdout") os << "folds: " << cfg.fold_count << " random 4:1 holdouts, seed " << cfg.fold_seed << '\n';
  if (cfg.folds == "file") os << "folds: " << cfg.fold_file.string() << '\n';
  const auto& n = cfg.network;
  const auto p = n.plan();
  const auto d = n.dims();
  os << "network: input " << n.time << "x" << n.freq << " (" << d[0] << ")\n";
  for (std::size_t i = 0; i < p.size(); ++i) {
    os << "  layer " << i << ": ";
    if (p[i].conv) {
      const auto& g = *p[i].conv;
      os << "conv " << g.out_channels << " x " << g.kernel_time << "x" << g.kernel_freq << " stride " << g.stride_time
         << "x" << g.stride_freq << " pad " << g.pad_time << "x" << g.pad_freq << " -> " << g.out_time() << "x"
         << g.out_freq() << "x" << g.out_channels;
    } else {
      os << "dense";
    }
    os << " (" << d[i] << " -> " << d[i + 1] << "), prior " << family_name(p[i].input_family) << ", activation "
       << activation_name(p[i].activation) << '\n';
  }
  os << "  gaussian group " << n.gaussian_group;
  if (n.tap) {
    const auto [tt, tf] = n.tap_shape();
    os << ", tap after layer " << *n.tap << " (" << tt << " frames x " << tf << ")";
  }
  os << ", " << n.parameter_count() << " parameters per class\n";
  const auto& t = cfg.train;
  os << "train: per class, ce_scale " << brief(t.ce_scale) << ", confidence " << brief(t.train_confidence) << ", step "
     << brief(t.adam.step) << ", epochs " << t.epochs << ", batch " << t.batch_size << ", shifts +-"
     << t.augment.max_time_shift << " time +-" << t.augment.max_freq_shift << " freq\n";
  os << "eval: confidence " << brief(cfg.eval_confidence) << '\n';
  if (cfg.hmm) {
    const auto& h = cfg.hmm_train;
    os << "hmm: " << h.states << " states x " << h.components << " components, floor " << brief(h.variance_floor) << ", "
       << topology_name(h.topology) << ", " << h.iterations << " iterations, " << cfg.hmm_trials << " trial(s)\n";
  }
  if (!cfg.confidence_grid.empty()) os << "self-combination grid: " << join(cfg.confidence_grid) << '\n';
  os << "ensemble: " << (cfg.hmm ? "pbn-da-hmm" : "pbn-da") << " + f * " << cfg.external;
  if (!cfg.factors.empty()) os << ", factors " << join(cfg.factors);
  os << '\n';
  return os.str();
}

const FoldSpec& ExperimentData::fold(const std::string& name) const {
  for (const auto& f : folds) {
    if (f.name == name) return f;
  }
  throw ConfigError("no fold named " + name);
}

ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  EventSet& all = d.events;
  std::vector<FoldSpec>& folds = d.folds;
  if (cfg.data == "synthetic") {
    const auto split = synthetic_sequences(cfg.synthetic);
    all = split.train;
    for (int i = 0; i < split.test.size(); ++i) {
      all.ids.push_back(split.test.ids[static_cast<std::size_t>(i)]);
      all.samples.push_back(split.test.samples[static_cast<std::size_t>(i)]);
    }
    if (cfg.folds == "given") {
      FoldSpec f;
      f.name = "A";
      f.seed = cfg.synthetic.seed;
      f.train.resize(static_cast<std::size_t>(cfg.classes));
      f.test.resize(static_cast<std::size_t>(cfg.classes));
      for (int i = 0; i < all.size(); ++i) {
        auto& lists = i < split.train.size() ? f.train : f.test;
        lists[static_cast<std::size_t>(all.samples[static_cast<std::size_t>(i)].label)].push_back(i);
      }
      folds.push_back(std::move(f));
    }
  } else {
    all = load_manifest(cfg.manifest, cfg.features);
    if (all.frames != cfg.network.time || all.bands != cfg.network.freq) {
      throw DimensionError("feature maps are " + std::to_string(all.frames) + "x" + std::to_string(all.bands) +
                           ", network expects " + std::to_string(cfg.network.time) + "x" +
                           std::to_string(cfg.network.freq));
    }
  }
  for (int l : all.labels()) {
    if (l < 0 || l >= cfg.classes) throw ConfigError("event label " + std::to_string(l) + " out of range");
  }
  if (cfg.folds == "holdout") folds = make_folds(all.labels(), cfg.fold_count, cfg.fold_seed);
  if (cfg.folds == "file") folds = load_folds(cfg.fold_file);
  for (const auto& f : folds) check_fold(f, all.labels());
  return d;
}

NetworkModel train_class_network(const ExperimentConfig& cfg, const EventSet& train, int m, Rng& rng,
                                 std::vector<EpochRecord>* history) {
  DaLossConfig t = cfg.train;
  t.class_index = m;
  if (t.augment.max_time_shift || t.augment.max_freq_shift || t.augment.max_fractional_time > 0.0 ||
      t.augment.max_fractional_freq > 0.0) {
    t.augment.map_time = train.frames;
    t.augment.map_freq = train.bands;
  }
  OutputDensitySpec out{OutputKind::ted_indicator, m, cfg.classes, t.train_confidence};
  NetworkModel init = initialize_network(cfg.network.time * cfg.network.freq, cfg.network.plan(), out, rng,
                                         cfg.network.gaussian_group, cfg.network.tap);
  TrainResult r = train_pbn_da(std::move(init), train.samples, t, rng);
  if (history) *history = std::move(r.history);
  return std::move(r.model);
}

HmmModel train_class_hmm(const ExperimentConfig& cfg, const NetworkModel& net, const EventSet& train, int m,
                         Rng& rng) {
  std::vector<FeatureSequence> seqs;
  NetworkEvaluator ev(net);
  for (const auto& s : train.samples) {
    if (s.label != m) continue;
    if (!net.tap_index) {
      seqs.push_back(reshape_time_major(s.x, train.bands));
      continue;
    }
    try {
      seqs.push_back(ev.tap(s.x).frames);
    } catch (const SamplingFailure&) {
    } catch (const ParameterError&) {
    }
  }
  if (seqs.empty()) throw AllFailed("no tapped training sequence for class " + std::to_string(m));
  const HmmModel init = initialize_hmm(seqs, cfg.hmm_train, rng);
  return baum_welch(init, seqs, cfg.hmm_train.iterations, cfg.hmm_train.variance_floor, rng).model;
}

ScoreTable hmm_score_table(const std::vector<TappedClassModel>& models, const EventSet& test) {
  ScoreTable t;
  t.source = "pbn-da-hmm";
  t.ids = test.ids;
  t.labels = test.labels();
  t.scores.resize(test.size(), static_cast<Eigen::Index>(models.size()));
  for (int i = 0; i < test.size(); ++i) {
    const auto s = pbn_da_hmm_scores(models, test.samples[static_cast<std::size_t>(i)].x);
    for (std::size_t m = 0; m < s.size(); ++m) t.scores(i, static_cast<Eigen::Index>(m)) = s[m];
  }
  return t;
}

int FoldOutcome::errors_of(const std::string& method) const {
  for (const auto& m : methods) {
    if (m.method == method) return m.errors;
  }
  throw ConfigError("no results for method " + method);
}

namespace {

template <class F>
auto staged(const char* stage, F&& fn) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

/// Rows of `table` for the given events, in that order.
ScoreTable select_events(const ScoreTable& table, const EventSet& events) {
  std::map<std::string, int> where;
  for (int i = 0; i < table.events(); ++i) where.emplace(table.ids[i], i);
  ScoreTable out;
  out.source = table.source;
  out.scores.resize(events.size(), table.num_classes());
  for (int i = 0; i < events.size(); ++i) {
    const auto it = where.find(events.ids[static_cast<std::size_t>(i)]);
    if (it == where.end()) throw AlignmentError("external scores lack event " + events.ids[static_cast<std::size_t>(i)]);
    out.ids.push_back(it->first);
    out.labels.push_back(table.labels[it->second]);
    out.scores.row(i) = table.scores.row(it->second);
  }
  return out;
}

void write_manifest(const std::filesystem::path& out_dir, const ExperimentConfig& cfg) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(out_dir)) {
    if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  json j;
  j["name"] = cfg.name;
  j["config_hash"] = cfg.hash;
  j["seed"] = cfg.seed;
  j["version"] = kVersion;
  j["threads"] = 1;
  auto& fs = j["files"] = json::object();
  for (const auto& p : files) {
    std::ifstream in(p, std::ios::binary);
    const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    fs[std::filesystem::relative(p, out_dir).generic_string()] = hex64(fnv1a64(bytes.data(), bytes.size()));
  }
  auto out = open_out(out_dir / "manifest.json");
  out << j.dump(2) << '\n';
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                const RunOptions& opts) {
  auto log = [&](const char* stage, const std::string& msg) {
    if (opts.log) *opts.log << "[" << stage << "] " << msg << '\n';
  };
  staged("config", [&] {
    cfg.validate();
    return 0;
  });
  ExperimentResult result;
  result.config_hash = cfg.hash;
  const std::string plan = staged("config", [&] { return experiment_plan(cfg); });
  if (opts.dry_run) {
    if (opts.log) *opts.log << plan;
    return result;
  }
  const std::string& hash = cfg.hash;

  const ExperimentData data = staged("data", [&] { return load_experiment_data(cfg); });
  const EventSet& all = data.events;
  const std::vector<FoldSpec>& folds = data.folds;
  log("data", std::to_string(all.size()) + " events, " + std::to_string(folds.size()) + " fold(s)");

  std::filesystem::create_directories(out_dir);
  {
    auto f = open_out(out_dir / "plan.txt");
    f << plan;
  }
  save_folds(out_dir / "folds.json", folds, hash);

  std::ostringstream summary;
  summary << "# config_hash=" << hash << "\nfold,method,errors,events\n";
  for (std::size_t fi = 0; fi < folds.size(); ++fi) {
    const FoldSpec& fold = folds[fi];
    const auto dir = out_dir / ("fold_" + fold.name);
    const EventSet train = all.subset(fold.train_indices());
    const EventSet test = all.subset(fold.test_indices());
    std::filesystem::create_directories(dir);
    FoldOutcome outcome;
    outcome.fold = fold.name;
    const std::uint64_t fold_seed = cfg.seed * 1000003ULL + fi * 7919ULL;

    std::vector<NetworkModel> models = staged("train", [&] {
      std::vector<NetworkModel> ms;
      for (int m = 0; m < cfg.classes; ++m) {
        Rng rng(fold_seed + static_cast<std::uint64_t>(m));
        std::vector<EpochRecord> history;
        ms.push_back(train_class_network(cfg, train, m, rng, &history));
        write_history_csv(dir / ("history_class" + std::to_string(m) + ".csv"), history, hash);
        save_network(ms.back(), dir / ("network_class" + std::to_string(m) + ".pbn"));
        log("train", "fold " + fold.name + " class " + std::to_string(m) + ": " + std::to_string(history.size()) +
                         " epochs, final training errors " +
                         std::to_string(history.empty() ? -1 : history.back().errors));
      }
      return ms;
    });

    const ScoreTable da = staged("eval", [&] {
      const LikelihoodCache cache = build_likelihood_cache(models, test.ids, test.samples);
      write_cache_csv(dir / "cache_pbn_da.csv", cache, hash);
      ScoreTable t = cache_scores(cache, cfg.eval_confidence, "pbn-da");
      write_score_csv(dir / "scores_pbn_da.csv", t, hash);
      const EvalResult r = evaluate(t);
      write_confusion_csv(dir / "confusion_pbn_da.csv", r, hash);
      outcome.methods.push_back({"pbn-da", r.errors, r.events});
      if (!cfg.confidence_grid.empty()) {
        outcome.self_combination = self_combination_sweep(cache, cfg.confidence_grid);
        write_sweep_csv(dir / "self_combination.csv", "confidence", outcome.self_combination, hash);
      }
      return t;
    });
    log("eval", "fold " + fold.name + " pbn-da errors " + std::to_string(outcome.errors_of("pbn-da")) + "/" +
                    std::to_string(test.size()));

    std::vector<ScoreTable> hmm_tables;
    if (cfg.hmm) {
      staged("hmm", [&] {
        for (int trial = 0; trial < cfg.hmm_trials; ++trial) {
          std::vector<TappedClassModel> tapped;
          for (int m = 0; m < cfg.classes; ++m) {
            Rng rng(fold_seed + 104729ULL * static_cast<std::uint64_t>(trial + 1) + static_cast<std::uint64_t>(m));
            HmmModel h = train_class_hmm(cfg, models[static_cast<std::size_t>(m)], train, m, rng);
            save_hmm(h, dir / ("hmm_class" + std::to_string(m) + "_trial" + std::to_string(trial) + ".pbn"));
            tapped.push_back({models[static_cast<std::size_t>(m)], std::move(h)});
          }
          ScoreTable t = hmm_score_table(tapped, test);
          const std::string tag = "pbn-da-hmm" + (cfg.hmm_trials > 1 ? "-t" + std::to_string(trial) : std::string());
          t.source = tag;
          write_score_csv(dir / ("scores_pbn_da_hmm_trial" + std::to_string(trial) + ".csv"), t, hash);
          const EvalResult r = evaluate(t);
          write_confusion_csv(dir / ("confusion_pbn_da_hmm_trial" + std::to_string(trial) + ".csv"), r, hash);
          outcome.methods.push_back({tag, r.errors, r.events});
          log("hmm", "fold " + fold.name + " trial " + std::to_string(trial) + " pbn-da-hmm errors " +
                         std::to_string(r.errors) + "/" + std::to_string(r.events));
          hmm_tables.push_back(std::move(t));
        }
        return 0;
      });
    }

    const ScoreTable ext = staged("external", [&] {
      ScoreTable t = cfg.external == "nearest_mean" ? nearest_mean_scores(train, test, cfg.classes)
                                                    : select_events(read_score_csv(cfg.external), test);
      write_score_csv(dir / "scores_external.csv", t, hash);
      const EvalResult r = evaluate(t);
      write_confusion_csv(dir / "confusion_external.csv", r, hash);
      outcome.methods.push_back({"external", r.errors, r.events});
      return t;
    });

    if (!cfg.factors.empty()) {
      staged("ensemble", [&] {
        const std::vector<ScoreTable> bases = hmm_tables.empty() ? std::vector<ScoreTable>{da} : hmm_tables;
        for (std::size_t t = 0; t < bases.size(); ++t) {
          outcome.ensemble.push_back(ensemble_sweep(bases[t], ext, cfg.factors));
          write_sweep_csv(dir / ("ensemble_trial" + std::to_string(t) + ".csv"), "factor", outcome.ensemble.back(),
                          hash);
        }
        return 0;
      });
    }
    for (const auto& m : outcome.methods) {
      summary << fold.name << ',' << m.method << ',' << m.errors << ',' << m.events << '\n';
    }
    result.folds.push_back(std::move(outcome));
  }
  {
    auto f = open_out(out_dir / "summary.csv");
    f << summary.str();
  }
  staged("manifest", [&] {
    write_manifest(out_dir, cfg);
    return 0;
  });
  return result;
}

int Demo2dResult::total(int Demo2dSeed::*field) const {
  int n = 0;
  for (const auto& s : seeds) n += s.*field;
  return n;
}

Demo2dResult demo2d(const Demo2dConfig& cfg, const std::filesystem::path& out_dir) {
  if (cfg.seeds < 1 || cfg.train_per_class < 1 || cfg.test_per_class < 1 || cfg.grid < 2) {
    throw ConfigError("demo2d sizes must be positive");
  }
  std::filesystem::create_directories(out_dir);
  Demo2dResult result;
  std::ostringstream summary;
  summary << "seed,da_train_errors,ml_test_errors,da_test_errors,test_events\n";
  for (int s = 0; s < cfg.seeds; ++s) {
    const std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(s);
    Rng rng(seed);
    // Long axis vertical, classes separated horizontally.
    std::normal_distribution<double> across(0.0, 0.3), along(0.0, 1.5);
    auto cloud = [&](int n) {
      Dataset d;
      for (int i = 0; i < n; ++i) {
        for (int c = 0; c < 2; ++c) d.push_back({Eigen::Vector2d((c ? 1.0 : -1.0) + across(rng), along(rng)), c});
      }
      return d;
    };
    const Dataset train = cloud(cfg.train_per_class), test = cloud(cfg.test_per_class);

    Demo2dSeed out;
    out.seed = seed;
    out.test_events = static_cast<int>(test.size());
    std::vector<NetworkModel> nets[2];  // [0] without alignment, [1] with
    for (int variant = 0; variant < 2; ++variant) {
      for (int m = 0; m < 2; ++m) {
        DaLossConfig t;
        t.class_index = m;
        t.head = CeHead::binary;
        t.ce_scale = variant ? cfg.ce_scale : 0.0;
        t.train_confidence = cfg.confidence;
        t.adam.step = cfg.step;
        t.epochs = cfg.epochs;
        Rng r(seed * 31 + static_cast<std::uint64_t>(2 * variant + m));
        auto init = initialize_network(2, {{1, Family::gaussian, Family::trunc_exponential, {}}},
                                       {OutputKind::ted_indicator, 0, 1, cfg.confidence}, r);
        auto res = train_pbn_da(std::move(init), train, t, r);
        if (res.stop_reason == "diverged") {
          throw TrainingDiverged("demo2d seed " + std::to_string(seed) + " class " + std::to_string(m));
        }
        if (variant == 1) out.da_train_errors += da_loss(res.model, train, t).errors;
        nets[variant].push_back(std::move(res.model));
      }
    }
    auto score = [](const NetworkModel& net, const Eigen::VectorXd& x) {
      try {
        return log_likelihood(net, x);
      } catch (const SamplingFailure&) {
        return kNegInf;
      }
    };
    for (int variant = 0; variant < 2; ++variant) {
      ScoreTable t;
      t.source = variant ? "da" : "ml";
      t.scores.resize(static_cast<Eigen::Index>(test.size()), 2);
      for (std::size_t i = 0; i < test.size(); ++i) {
        t.ids.push_back(std::to_string(i));
        t.labels.push_back(test[i].label);
        for (int m = 0; m < 2; ++m) t.scores(static_cast<Eigen::Index>(i), m) = score(nets[variant][m], test[i].x);
      }
      (variant ? out.da_test_errors : out.ml_test_errors) = evaluate(t).errors;
    }

    const std::string tag = "seed" + std::to_string(seed);
    {
      auto f = open_out(out_dir / ("data_" + tag + ".csv"));
      f << "x,y,label,split\n";
      for (const auto* d : {&train, &test}) {
        for (const auto& e : *d) {
          f << num(e.x(0)) << ',' << num(e.x(1)) << ',' << e.label << ',' << (d == &train ? "train" : "test") << '\n';
        }
      }
    }
    {
      Eigen::Vector2d lo = train.front().x, hi = lo;
      for (const auto& e : train) {
        lo = lo.cwiseMin(e.x);
        hi = hi.cwiseMax(e.x);
      }
      lo.array() -= 1.0;
      hi.array() += 1.0;
      auto f = open_out(out_dir / ("grid_" + tag + ".csv"));
      f << "x,y,ll_ml_class0,ll_ml_class1,ll_da_class0,ll_da_class1\n";
      for (int i = 0; i < cfg.grid; ++i) {
        for (int j = 0; j < cfg.grid; ++j) {
          const Eigen::Vector2d p(lo(0) + (hi(0) - lo(0)) * i / (cfg.grid - 1),
                                  lo(1) + (hi(1) - lo(1)) * j / (cfg.grid - 1));
          f << num(p(0)) << ',' << num(p(1));
          for (int variant = 0; variant < 2; ++variant)
            for (int m = 0; m < 2; ++m) f << ',' << num(score(nets[variant][m], p));
          f << '\n';
        }
      }
    }
    summary << seed << ',' << out.da_train_errors << ',' << out.ml_test_errors << ',' << out.da_test_errors << ','
            << out.test_events << '\n';
    result.seeds.push_back(out);
  }
  summary << "total," << result.total(&Demo2dSeed::da_train_errors) << ',' << result.total(&Demo2dSeed::ml_test_errors)
          << ',' << result.total(&Demo2dSeed::da_test_errors) << ',' << result.total(&Demo2dSeed::test_events) << '\n';
  auto f = open_out(out_dir / "summary.csv");
  f << summary.str();
  return result;
}

}  // namespace pbn
