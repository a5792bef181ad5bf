#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ccmcd {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Configuration and input problems (bad sizes, bad flags, bad files).
class ConfigError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class IoError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Raised when a value violates the geometry of a constant-curvature manifold
/// (off-manifold point, non-tangent vector, antipodal log-map, undefined
/// projection, curvature mismatch).
class GeometryError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public GeometryError {
 public:
  ConvergenceError(const std::string& what, std::vector<double> last_iterate,
                   std::size_t iterations)
      : GeometryError(what),
        last_iterate_(std::move(last_iterate)),
        iterations_(iterations) {}

  const std::vector<double>& last_iterate() const noexcept { return last_iterate_; }
  std::size_t iterations() const noexcept { return iterations_; }

 private:
  std::vector<double> last_iterate_;
  std::size_t iterations_;
};

class DegeneracyError : public GeometryError {
 public:
  using GeometryError::GeometryError;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

/// AUC and Mann-Whitney U are undefined when a regime has no run lengths.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

}  // namespace ccmcd
