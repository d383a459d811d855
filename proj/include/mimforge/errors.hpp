#pragma once

#include <stdexcept>
#include <string>

namespace mimforge {

/// Shapes that do not conform for an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Precondition violated by an argument value (ranges, indices, modes).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Autodiff misuse: non-scalar or detached loss, replayed graph.
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A loss or gradient went non-finite during training.
class NumericAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or mismatched binary file (EVAC / EVAD / EVAT).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid run configuration (unknown key, out-of-range value).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace mimforge
