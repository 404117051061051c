#include "jamflow/common.hpp"

#include <sstream>

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : Error(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b)) {}

ShapeError::ShapeError(const std::string& op, const std::string& what) : Error(op + ": " + what) {}

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
