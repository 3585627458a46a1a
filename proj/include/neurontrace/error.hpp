#pragma once

#include <stdexcept>
#include <string>

namespace neurontrace {

// Invalid configuration, shapes or arguments. The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Filesystem / format failures. Messages always name the offending path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN or Inf showed up where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke a documented precondition (e.g. asked for the contribution
// of a neuron outside the activated set).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// The computation is well-defined but the result carries no information,
// e.g. a provenance trace with an empty activated set.
class DegenerateResult : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace neurontrace
