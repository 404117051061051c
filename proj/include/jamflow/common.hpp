#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

// The core library is compiled twice: once with 32-bit scalars for training
// and once with JAMFLOW_DOUBLE for gradient checks. The inline namespace keeps
// both variants linkable into the same binary.
#ifdef JAMFLOW_DOUBLE
#define JAMFLOW_PRECISION f64
#else
#define JAMFLOW_PRECISION f32
#endif

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

#ifdef JAMFLOW_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b);
  ShapeError(const std::string& op, const std::string& what);
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
