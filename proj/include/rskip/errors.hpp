#pragma once

#include <stdexcept>
#include <string>

namespace rskip {

/// Shapes that cannot be combined (mismatched extents, bad broadcast, wrong width).
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid construction / model / training configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed on-disk data (dataset batches, checkpoints).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Class label outside [0, classes).
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// A closed-form ratio would divide by an exactly-zero gain.
class SingularRatioError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace rskip
