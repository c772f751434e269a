#pragma once

#include <stdexcept>
#include <string>

namespace reflora {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input failed the symmetry or positivity check of an SPD matrix.
class NonSpdInput : public Error {
 public:
  using Error::Error;
};

/// Eigenvalue ratio lambda_min / lambda_max fell below the inversion guard.
class IllConditioned : public Error {
 public:
  using Error::Error;
};

/// A factor lost full column rank where refactoring needs it.
class RankDeficient : public Error {
 public:
  using Error::Error;
};

/// Learning rate outside the domain of the requested closed form.
class InvalidEta : public Error {
 public:
  using Error::Error;
};

/// A factor with zero Frobenius norm was passed to a scalar refactoring.
class ZeroFactor : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration: bad dimensions, unknown names, inconsistent runs.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace reflora
