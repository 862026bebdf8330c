#pragma once

#include <stdexcept>
#include <string>

namespace dupl {

// Invalid shapes, thresholds or settings supplied by the caller.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A forward value became NaN/Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse, e.g. backward() on a consumed graph.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input data (labels out of range, corrupt files).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dupl
