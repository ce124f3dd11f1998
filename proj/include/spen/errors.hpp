#ifndef SPEN_ERRORS_HPP
#define SPEN_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace spen {

// Base class for all library errors. Subclasses map to CLI exit codes:
// ConfigError -> 1 (validation), everything else -> 2 (runtime).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or operand-dimension mismatch, names the offending operands.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& msg) : Error("dimension error: " + msg) {}
};

// Invalid configuration value (unknown key, out-of-range hyperparameter, ...).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("configuration error: " + msg) {}
};

// A caller broke an API contract (non-scalar backward root, simplex violation, ...).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error("contract error: " + msg) {}
};

// Non-finite values or other numeric failures surfaced by validation.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error("numeric error: " + msg) {}
};

// Malformed file contents (PGM, SPNT, dataset manifests).
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error("format error: " + msg) {}
};

// Filesystem-level failure (missing file, short write).
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

// Internal consistency failure (checkpoint/recompute divergence).
class InternalError : public Error {
 public:
  explicit InternalError(const std::string& msg) : Error("internal error: " + msg) {}
};

}  // namespace spen

#endif
