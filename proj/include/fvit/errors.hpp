#pragma once

#include <stdexcept>
#include <string>

namespace fvit {

// Base for all library errors. Subclasses tag the failure category so tests
// and callers can distinguish shape bugs from bad configs or corrupt files.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched or invalid tensor shapes.
class DimError : public Error {
 public:
  explicit DimError(const std::string& msg) : Error(msg) {}
};

// Out-of-range or duplicate selection indices.
class IndexError : public Error {
 public:
  explicit IndexError(const std::string& msg) : Error(msg) {}
};

// Invalid model / run configuration.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Malformed input file (dataset, checkpoint, image).
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Violated API contract (non-scalar loss, empty dataset, ...).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Attention invoked on an empty token set.
class EmptySelectionError : public ContractError {
 public:
  explicit EmptySelectionError(const std::string& msg) : ContractError(msg) {}
};

}  // namespace fvit
