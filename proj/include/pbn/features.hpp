#pragma once

// Log band-energy feature maps: Hanning-windowed short-time spectra pooled
// into MEL or linear bands, plus WAV input and feature file I/O.

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string_view>
#include <string>
#include <vector>

namespace pbn {

enum class BandSpacing { mel, linear };
enum class WindowKind { hanning };

std::string_view band_spacing_name(BandSpacing b);
BandSpacing parse_band_spacing(std::string_view name);

struct FeatureConfig {
  int fft_size = 384;
  int shift = 128;
  int band_count = 40;
  BandSpacing spacing = BandSpacing::linear;
  WindowKind window = WindowKind::hanning;
  double sample_rate = 16000.0;
  /// Energies are floored at log_floor times the largest energy in the map.
  double log_floor = 1e-12;

  void validate() const;
  int bins() const { return fft_size / 2 + 1; }

  /// 768-point frames, shift 256, 48 MEL bands.
  static FeatureConfig exp1();
  /// 384-point frames, shift 128, 40 linear Hanning bands.
  static FeatureConfig exp2();
  bool operator==(const FeatureConfig&) const = default;
};

struct FeatureMap {
  Eigen::MatrixXd values;  // time x band
  FeatureConfig config;
  std::string source;

  int frames() const { return static_cast<int>(values.rows()); }
  int bands() const { return static_cast<int>(values.cols()); }
  /// Time-major flattening: index = t * bands + band.
  Eigen::VectorXd flatten() const;
  static Eigen::MatrixXd unflatten(const Eigen::VectorXd& v, int frames, int bands);
};

/// bands x bins weights, rows ordered by center frequency.
Eigen::MatrixXd band_matrix(const FeatureConfig& config);
/// Center frequency (Hz) of each band.
Eigen::VectorXd band_centers(const FeatureConfig& config);
int frame_count(const FeatureConfig& config, std::size_t samples);
FeatureMap extract(const FeatureConfig& config, const std::vector<double>& waveform,
                   std::string source = {});

double hz_to_mel(double hz);
double mel_to_hz(double mel);

struct Waveform {
  std::vector<double> samples;  // mono, in [-1, 1]
  double sample_rate = 0.0;
};

/// Mono 16-bit PCM or 32-bit float WAV.
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& w);  // 16-bit PCM

/// "PBNF" container holding one or more maps.
void write_features(const std::filesystem::path& path, const std::vector<FeatureMap>& maps);
std::vector<FeatureMap> read_features(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_features(const std::vector<FeatureMap>& maps);
std::vector<FeatureMap> decode_features(const std::vector<std::uint8_t>& bytes);

/// Headerless CSV (one frame per row) plus a JSON sidecar "<path>.json"
/// carrying the configuration and source id.
void write_feature_csv(const std::filesystem::path& path, const FeatureMap& map);
FeatureMap read_feature_csv(const std::filesystem::path& path);

}  // namespace pbn
