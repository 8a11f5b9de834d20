#include "pbn/features.hpp"

#include <fftw3.h>

#include <cmath>
#include <cstdio>
#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "pbn/binary_io.hpp"
#include "pbn/error.hpp"

namespace pbn {
namespace {

constexpr char kFeatureMagic[4] = {'P', 'B', 'N', 'F'};
constexpr std::uint32_t kFeatureVersion = 1;

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_config(ByteWriter& w, const FeatureConfig& c) {
  w.i32(c.fft_size);
  w.i32(c.shift);
  w.i32(c.band_count);
  w.u32(static_cast<std::uint32_t>(c.spacing));
  w.u32(static_cast<std::uint32_t>(c.window));
  w.f64(c.sample_rate);
  w.f64(c.log_floor);
}

FeatureConfig read_config(ByteReader& r) {
  FeatureConfig c;
  const std::size_t at = r.offset();
  c.fft_size = r.i32();
  c.shift = r.i32();
  c.band_count = r.i32();
  const std::uint32_t spacing = r.u32();
  const std::uint32_t window = r.u32();
  if (spacing > 1) r.fail("invalid band spacing tag");
  if (window > 0) r.fail("invalid window tag");
  c.spacing = static_cast<BandSpacing>(spacing);
  c.window = static_cast<WindowKind>(window);
  c.sample_rate = r.f64();
  c.log_floor = r.f64();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid feature config: ") + e.what(), at);
  }
  return c;
}

nlohmann::json config_json(const FeatureConfig& c) {
  return {{"fft_size", c.fft_size},       {"shift", c.shift},
          {"band_count", c.band_count},   {"band_spacing", band_spacing_name(c.spacing)},
          {"window", "hanning"},          {"sample_rate", c.sample_rate},
          {"log_floor", c.log_floor}};
}

FeatureConfig config_from_json(const nlohmann::json& j) {
  FeatureConfig c;
  c.fft_size = j.at("fft_size").get<int>();
  c.shift = j.at("shift").get<int>();
  c.band_count = j.at("band_count").get<int>();
  c.spacing = parse_band_spacing(j.at("band_spacing").get<std::string>());
  c.sample_rate = j.at("sample_rate").get<double>();
  c.log_floor = j.at("log_floor").get<double>();
  c.validate();
  return c;
}

}  // namespace

std::string_view band_spacing_name(BandSpacing b) { return b == BandSpacing::mel ? "mel" : "linear"; }

BandSpacing parse_band_spacing(std::string_view name) {
  if (name == "mel") return BandSpacing::mel;
  if (name == "linear") return BandSpacing::linear;
  throw ConfigError("unknown band spacing '" + std::string(name) + "'");
}

void FeatureConfig::validate() const {
  if (fft_size < 2 || shift < 1) throw ConfigError("fft_size and shift must be positive");
  if (shift > fft_size) throw ConfigError("shift must not exceed fft_size");
  if (band_count < 1 || band_count > fft_size / 2) throw ConfigError("band_count must be in [1, fft_size/2]");
  if (!(sample_rate > 0.0)) throw ConfigError("sample_rate must be positive");
  if (!(log_floor > 0.0)) throw ConfigError("log_floor must be positive");
}

FeatureConfig FeatureConfig::exp1() {
  FeatureConfig c;
  c.fft_size = 768;
  c.shift = 256;
  c.band_count = 48;
  c.spacing = BandSpacing::mel;
  // 624 frames of 256 samples span 10 s at this rate.
  c.sample_rate = 15974.4;
  return c;
}

FeatureConfig FeatureConfig::exp2() {
  FeatureConfig c;
  c.fft_size = 384;
  c.shift = 128;
  c.band_count = 40;
  c.spacing = BandSpacing::linear;
  c.sample_rate = 250.0;
  return c;
}

Eigen::VectorXd FeatureMap::flatten() const {
  Eigen::VectorXd v(values.size());
  for (Eigen::Index t = 0; t < values.rows(); ++t) v.segment(t * values.cols(), values.cols()) = values.row(t);
  return v;
}

Eigen::MatrixXd FeatureMap::unflatten(const Eigen::VectorXd& v, int frames, int bands) {
  if (v.size() != static_cast<Eigen::Index>(frames) * bands) throw DimensionError("flattened map size mismatch");
  Eigen::MatrixXd m(frames, bands);
  for (int t = 0; t < frames; ++t) m.row(t) = v.segment(static_cast<Eigen::Index>(t) * bands, bands);
  return m;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Eigen::VectorXd band_centers(const FeatureConfig& c) {
  c.validate();
  const double nyq = c.sample_rate / 2.0;
  Eigen::VectorXd centers(c.band_count);
  for (int b = 0; b < c.band_count; ++b) {
    if (c.spacing == BandSpacing::linear) {
      centers(b) = (b + 1) * nyq / (c.band_count + 1);
    } else {
      const double top = hz_to_mel(nyq);
      centers(b) = mel_to_hz((b + 1) * top / (c.band_count + 1));
    }
  }
  return centers;
}

Eigen::MatrixXd band_matrix(const FeatureConfig& c) {
  c.validate();
  const int bins = c.bins();
  const double df = c.sample_rate / c.fft_size;
  const double nyq = c.sample_rate / 2.0;
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(c.band_count, bins);
  const Eigen::VectorXd centers = band_centers(c);
  for (int b = 0; b < c.band_count; ++b) {
    double lo, hi;
    if (c.spacing == BandSpacing::linear) {
      const double half = nyq / (c.band_count + 1);
      lo = centers(b) - half;
      hi = centers(b) + half;
    } else {
      const double top = hz_to_mel(nyq);
      lo = mel_to_hz(b * top / (c.band_count + 1));
      hi = mel_to_hz((b + 2) * top / (c.band_count + 1));
    }
    const double ctr = centers(b);
    for (int k = 0; k < bins; ++k) {
      const double f = k * df;
      if (f <= lo || f >= hi) continue;
      if (c.spacing == BandSpacing::linear) {
        m(b, k) = 0.5 * (1.0 + std::cos(std::numbers::pi * (f - ctr) / (hi - ctr)));
      } else {
        // Unit-area triangle in Hz.
        const double peak = 2.0 / (hi - lo);
        m(b, k) = f <= ctr ? peak * (f - lo) / (ctr - lo) : peak * (hi - f) / (hi - ctr);
      }
    }
    if (m.row(b).sum() <= 0.0) {
      throw ConfigError("band " + std::to_string(b) + " covers no FFT bin; use fewer bands or a longer FFT");
    }
  }
  return m;
}

int frame_count(const FeatureConfig& c, std::size_t samples) {
  return static_cast<int>(std::lround(static_cast<double>(samples) / c.shift));
}

FeatureMap extract(const FeatureConfig& c, const std::vector<double>& wave, std::string source) {
  c.validate();
  if (wave.size() < static_cast<std::size_t>(c.fft_size)) {
    throw TooShort("waveform has " + std::to_string(wave.size()) + " samples, need at least " +
                   std::to_string(c.fft_size));
  }
  const int frames = frame_count(c, wave.size());
  const int n = c.fft_size;
  const Eigen::MatrixXd bands = band_matrix(c);
  std::vector<double> window(n);
  for (int i = 0; i < n; ++i) window[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * i / n));

  double* in = fftw_alloc_real(n);
  fftw_complex* out = fftw_alloc_complex(c.bins());
  fftw_plan plan = fftw_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE);
  Eigen::MatrixXd energy(frames, c.band_count);
  Eigen::VectorXd power(c.bins());
  for (int t = 0; t < frames; ++t) {
    const std::size_t start = static_cast<std::size_t>(t) * c.shift;
    for (int i = 0; i < n; ++i) {
      const std::size_t j = start + i;
      in[i] = j < wave.size() ? wave[j] * window[i] : 0.0;
    }
    fftw_execute(plan);
    for (int k = 0; k < c.bins(); ++k) power(k) = out[k][0] * out[k][0] + out[k][1] * out[k][1];
    energy.row(t) = (bands * power).transpose();
  }
  fftw_destroy_plan(plan);
  fftw_free(out);
  fftw_free(in);

  const double peak = energy.maxCoeff();
  const double floor = c.log_floor * (peak > 0.0 ? peak : 1.0);
  FeatureMap map;
  map.values = (energy.array() + floor).log().matrix();
  map.config = c;
  map.source = std::move(source);
  return map;
}

// ---------------------------------------------------------------------------
// WAV

Waveform read_wav(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  ByteReader r(bytes);
  char tag[4];
  r.raw(tag, 4);
  if (std::memcmp(tag, "RIFF", 4) != 0) throw FormatError("not a RIFF file", 0);
  r.u32();
  r.raw(tag, 4);
  if (std::memcmp(tag, "WAVE", 4) != 0) throw FormatError("not a WAVE file", 8);
  int format = 0, channels = 0, bits = 0;
  double rate = 0.0;
  bool have_fmt = false;
  while (!r.done()) {
    r.raw(tag, 4);
    const std::size_t at = r.offset();
    const std::uint32_t len = r.u32();
    std::vector<std::uint8_t> body(len);
    r.raw(body.data(), len);
    if (len % 2 == 1 && !r.done()) r.u8();  // chunks are word aligned
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      ByteReader f(body, at + 4);
      format = f.u8() | (f.u8() << 8);
      channels = f.u8() | (f.u8() << 8);
      rate = f.u32();
      f.u32();
      f.u8();
      f.u8();
      bits = f.u8() | (f.u8() << 8);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw FormatError("data chunk before fmt chunk", at);
      if (channels != 1) throw FormatError("only mono WAV is supported", at);
      Waveform w;
      w.sample_rate = rate;
      if (format == 1 && bits == 16) {
        w.samples.resize(len / 2);
        for (std::size_t i = 0; i < w.samples.size(); ++i) {
          const auto v = static_cast<std::int16_t>(body[2 * i] | (body[2 * i + 1] << 8));
          w.samples[i] = v / 32768.0;
        }
      } else if (format == 3 && bits == 32) {
        w.samples.resize(len / 4);
        for (std::size_t i = 0; i < w.samples.size(); ++i) {
          float v;
          std::memcpy(&v, body.data() + 4 * i, 4);
          w.samples[i] = v;
        }
      } else {
        throw FormatError("unsupported WAV encoding (format " + std::to_string(format) + ", " +
                              std::to_string(bits) + " bits)",
                          at);
      }
      return w;
    }
  }
  throw FormatError("no data chunk", bytes.size());
}

void write_wav(const std::filesystem::path& path, const Waveform& w) {
  ByteWriter b;
  const auto data_len = static_cast<std::uint32_t>(w.samples.size() * 2);
  b.raw("RIFF", 4);
  b.u32(36 + data_len);
  b.raw("WAVE", 4);
  b.raw("fmt ", 4);
  b.u32(16);
  const std::uint16_t fmt_fields[2] = {1, 1};
  b.raw(fmt_fields, 4);
  const auto rate = static_cast<std::uint32_t>(std::lround(w.sample_rate));
  b.u32(rate);
  b.u32(rate * 2);
  const std::uint16_t align_bits[2] = {2, 16};
  b.raw(align_bits, 4);
  b.raw("data", 4);
  b.u32(data_len);
  for (double s : w.samples) {
    const auto v = static_cast<std::int16_t>(std::lround(std::clamp(s, -1.0, 32767.0 / 32768.0) * 32768.0));
    b.raw(&v, 2);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  f.write(reinterpret_cast<const char*>(b.bytes().data()), static_cast<std::streamsize>(b.bytes().size()));
}

// ---------------------------------------------------------------------------
// PBNF

std::vector<std::uint8_t> encode_features(const std::vector<FeatureMap>& maps) {
  ByteWriter w;
  w.raw(kFeatureMagic, 4);
  w.u32(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(maps.size()));
  for (const auto& m : maps) {
    w.u32(static_cast<std::uint32_t>(m.frames()));
    w.u32(static_cast<std::uint32_t>(m.bands()));
    write_config(w, m.config);
    w.u32(static_cast<std::uint32_t>(m.source.size()));
    w.raw(m.source.data(), m.source.size());
    const Eigen::VectorXd v = m.flatten();
    w.raw(v.data(), sizeof(double) * static_cast<std::size_t>(v.size()));
  }
  return w.take();
}

std::vector<FeatureMap> decode_features(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kFeatureMagic, 4) != 0) throw FormatError("bad magic, expected PBNF", 0);
  if (const auto v = r.u32(); v != kFeatureVersion) {
    throw FormatError("unsupported feature file version " + std::to_string(v), 4);
  }
  const std::uint32_t count = r.u32();
  std::vector<FeatureMap> maps;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t frames = r.u32(), bands = r.u32();
    if (static_cast<std::uint64_t>(frames) * bands > bytes.size()) r.fail("map dimensions exceed file size");
    FeatureMap m;
    m.config = read_config(r);
    const std::uint32_t slen = r.u32();
    if (slen > bytes.size()) r.fail("source id length exceeds file size");
    m.source.resize(slen);
    r.raw(m.source.data(), slen);
    Eigen::VectorXd v(static_cast<Eigen::Index>(frames) * bands);
    r.raw(v.data(), sizeof(double) * static_cast<std::size_t>(v.size()));
    m.values = FeatureMap::unflatten(v, static_cast<int>(frames), static_cast<int>(bands));
    maps.push_back(std::move(m));
  }
  if (!r.done()) r.fail("trailing bytes after last map");
  return maps;
}

void write_features(const std::filesystem::path& path, const std::vector<FeatureMap>& maps) {
  const auto bytes = encode_features(maps);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<FeatureMap> read_features(const std::filesystem::path& path) { return decode_features(slurp(path)); }

// ---------------------------------------------------------------------------
// CSV

void write_feature_csv(const std::filesystem::path& path, const FeatureMap& map) {
  std::ofstream f(path);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  char buf[32];
  for (Eigen::Index t = 0; t < map.values.rows(); ++t) {
    for (Eigen::Index b = 0; b < map.values.cols(); ++b) {
      std::snprintf(buf, sizeof buf, "%.17g", map.values(t, b));
      f << (b ? "," : "") << buf;
    }
    f << "\n";
  }
  nlohmann::json j = {{"frames", map.frames()}, {"bands", map.bands()}, {"source", map.source},
                      {"config", config_json(map.config)}};
  std::ofstream(path.string() + ".json") << j.dump(2) << "\n";
}

FeatureMap read_feature_csv(const std::filesystem::path& path) {
  FeatureMap m;
  int frames = -1, bands = -1;
  const auto sidecar = std::filesystem::path(path.string() + ".json");
  if (std::filesystem::exists(sidecar)) {
    try {
      std::ifstream jf(sidecar);
      const auto j = nlohmann::json::parse(jf);
      m.config = config_from_json(j.at("config"));
      m.source = j.value("source", std::string());
      frames = j.at("frames").get<int>();
      bands = j.at("bands").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("invalid sidecar manifest: ") + e.what(), 0);
    }
  }
  const auto bytes = slurp(path);
  const std::string text(bytes.begin(), bytes.end());
  std::vector<std::vector<double>> rows;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) {
      std::vector<double> row;
      std::size_t cpos = 0;
      while (cpos <= line.size()) {
        std::size_t comma = line.find(',', cpos);
        if (comma == std::string::npos) comma = line.size();
        const std::string cell = line.substr(cpos, comma - cpos);
        char* stop = nullptr;
        const double v = std::strtod(cell.c_str(), &stop);
        if (cell.empty() || *stop != '\0' || !std::isfinite(v)) {
          throw FormatError("invalid number '" + cell + "'", pos + cpos);
        }
        row.push_back(v);
        cpos = comma + 1;
      }
      if (!rows.empty() && row.size() != rows.front().size()) throw FormatError("ragged CSV row", pos);
      rows.push_back(std::move(row));
    }
    pos = end + 1;
  }
  if (rows.empty()) throw FormatError("empty CSV", 0);
  m.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (std::size_t b = 0; b < rows[t].size(); ++b) m.values(t, b) = rows[t][b];
  if (frames >= 0 && (frames != m.frames() || bands != m.bands())) {
    throw FormatError("CSV shape disagrees with its manifest", 0);
  }
  return m;
}

}  // namespace pbn
