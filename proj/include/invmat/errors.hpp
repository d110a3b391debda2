#pragma once
#include <stdexcept>
#include <string>

namespace invmat {

// Error taxonomy maps onto CLI exit codes: usage=1, validation=2, numerical=3.
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};

struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& m) : std::runtime_error(m) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& m) : std::runtime_error(m) {}
};

struct IoError : ValidationError {
  explicit IoError(const std::string& m) : ValidationError(m) {}
};

}  // namespace invmat
