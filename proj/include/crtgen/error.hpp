#pragma once

#include <stdexcept>
#include <string>

namespace crtgen {

/// Malformed or inconsistent input data (bad CSV, broken record invariants).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration (unknown mode strings, impossible design probabilities).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FitFailure { RankDeficient, NonConvergence, Separation, EmptyFit };

inline const char* to_string(FitFailure f) {
  switch (f) {
    case FitFailure::RankDeficient: return "rank deficient design";
    case FitFailure::NonConvergence: return "did not converge";
    case FitFailure::Separation: return "perfect separation";
    case FitFailure::EmptyFit: return "no observations to fit";
  }
  return "unknown";
}

/// A regression model could not be fitted.
class FitError : public std::runtime_error {
 public:
  FitError(FitFailure kind, const std::string& what)
      : std::runtime_error(what + ": " + to_string(kind)), kind_(kind) {}
  FitFailure kind() const noexcept { return kind_; }

 private:
  FitFailure kind_;
};

/// An estimator is undefined on the given data (empty arm, no S=0 clusters,
/// positivity violation).
class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace crtgen
