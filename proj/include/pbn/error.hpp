#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pbn {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A value lies outside the support of a density.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A natural parameter is not admissible for its family.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// A mean value lies outside the image of an activation function.
class RangeError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ModeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// The saddle-point system W'λ(Wh) = z has no solution (or the solver gave up).
class SamplingFailure : public Error {
 public:
  SamplingFailure(const std::string& what, double residual, int layer = -1)
      : Error(what), residual_(residual), layer_(layer) {}

  double residual() const { return residual_; }
  /// Index of the failing layer in a network, -1 when raised by a bare layer.
  int layer() const { return layer_; }
  SamplingFailure at_layer(int layer) const {
    return SamplingFailure(what(), residual_, layer);
  }

 private:
  double residual_;
  int layer_;
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class ClassificationError : public Error {
 public:
  using Error::Error;
};

/// A loss or gradient was requested on a batch with no samples.
class EmptyBatch : public Error {
 public:
  using Error::Error;
};

/// Every sample of the trained class failed to produce a likelihood.
class AllFailed : public Error {
 public:
  using Error::Error;
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

/// Waveform shorter than one analysis frame.
class TooShort : public Error {
 public:
  using Error::Error;
};

class TooFewSamples : public Error {
 public:
  using Error::Error;
};

/// Two score tables do not describe the same events.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

/// A sweep needs cached likelihood components that are not available.
class CacheMiss : public Error {
 public:
  using Error::Error;
};

}  // namespace pbn
