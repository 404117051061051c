#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "jamflow/tensor.hpp"

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

// Rotary angles for a stream of `seq_len` tokens whose positions are rescaled
// onto a shared reference length:
//
//   angle(p, d) = (p / seq_len) * ref_len * freq(d),  freq(d) = base^(-2d / head_dim)
//
// Two streams built with the same ref_len (the longer of the two lengths) give
// identical angles to tokens that sit at the same normalized time p / seq_len.
// Angles are evaluated in double precision as (p * ref_len / seq_len) * freq(d);
// p * ref_len is an exact integer, so equal rationals give equal doubles.
struct RopeTable {
  std::size_t seq_len = 0;
  std::size_t ref_len = 0;
  std::size_t head_dim = 0;
  double base = 10000.0;
  std::vector<double> angles;  // seq_len x head_dim/2
  std::vector<Scalar> cos;
  std::vector<Scalar> sin;

  std::size_t pairs() const { return head_dim / 2; }
  double angle(std::size_t p, std::size_t d) const { return angles[p * pairs() + d]; }
  std::span<const double> angles_at(std::size_t p) const {
    return std::span<const double>(angles).subspan(p * pairs(), pairs());
  }
};

double rope_frequency(std::size_t d, std::size_t head_dim, double base);

RopeTable build_rope_table(std::size_t seq_len, std::size_t ref_len, std::size_t head_dim, double base = 10000.0);

// Rotates each (2d, 2d+1) pair of x[p, h, :] by angle(p, d). x: [L, heads, head_dim].
Tensor apply_rope(const Tensor& x, const RopeTable& table);
std::pair<Tensor, Tensor> apply_rope(const Tensor& q, const Tensor& k, const RopeTable& table);

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
