#pragma once

#include <stdexcept>
#include <string>

namespace mixformer {

// Error families. Each maps to a stable CLI exit code (see cli::run).

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct LookupError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MetricError : std::domain_error {
  using std::domain_error::domain_error;
};

enum class ExitCode : int { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4 };

}  // namespace mixformer
