#pragma once

#include <stdexcept>
#include <string>

namespace cslab {

// Raised for malformed configuration, schema violations and bad arguments
// detected before any work starts. The CLI maps it to exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

// Raised for failures that happen while doing work (I/O, numerical trouble,
// corrupt files). The CLI maps it to exit code 1.
class RuntimeError : public std::runtime_error {
 public:
  explicit RuntimeError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace cslab
