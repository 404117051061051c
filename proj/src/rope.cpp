#include "jamflow/rope.hpp"

#include <cmath>

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

double rope_frequency(std::size_t d, std::size_t head_dim, double base) {
  return std::pow(base, -2.0 * static_cast<double>(d) / static_cast<double>(head_dim));
}

RopeTable build_rope_table(std::size_t seq_len, std::size_t ref_len, std::size_t head_dim, double base) {
  if (seq_len < 1) throw ShapeError("build_rope_table", "sequence length must be >= 1");
  if (ref_len < 1) throw ShapeError("build_rope_table", "reference length must be >= 1");
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw ShapeError("build_rope_table", "head_dim must be even and positive, got " + std::to_string(head_dim));
  }
  if (!(base > 0)) throw ShapeError("build_rope_table", "base must be positive");

  RopeTable table;
  table.seq_len = seq_len;
  table.ref_len = ref_len;
  table.head_dim = head_dim;
  table.base = base;
  const std::size_t pairs = head_dim / 2;
  table.angles.resize(seq_len * pairs);
  table.cos.resize(seq_len * pairs);
  table.sin.resize(seq_len * pairs);
  for (std::size_t p = 0; p < seq_len; ++p) {
    const double scaled = static_cast<double>(p * ref_len) / static_cast<double>(seq_len);
    for (std::size_t d = 0; d < pairs; ++d) {
      const double phi = scaled * rope_frequency(d, head_dim, base);
      table.angles[p * pairs + d] = phi;
      table.cos[p * pairs + d] = static_cast<Scalar>(std::cos(phi));
      table.sin[p * pairs + d] = static_cast<Scalar>(std::sin(phi));
    }
  }
  return table;
}

Tensor apply_rope(const Tensor& x, const RopeTable& table) {
  if (x.rank() != 3 || x.dim(0) != table.seq_len || x.dim(2) != table.head_dim) {
    throw ShapeError("apply_rope", x.shape(), {table.seq_len, 0, table.head_dim});
  }
  const std::size_t L = x.dim(0), heads = x.dim(1), hd = x.dim(2), pairs = hd / 2;
  auto src = x.data();
  std::vector<Scalar> out(src.size());
  for (std::size_t p = 0; p < L; ++p) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = (p * heads + h) * hd;
      for (std::size_t d = 0; d < pairs; ++d) {
        const Scalar c = table.cos[p * pairs + d];
        const Scalar s = table.sin[p * pairs + d];
        const Scalar x0 = src[base + 2 * d];
        const Scalar x1 = src[base + 2 * d + 1];
        out[base + 2 * d] = x0 * c - x1 * s;
        out[base + 2 * d + 1] = x0 * s + x1 * c;
      }
    }
  }
  // The table outlives the tape in practice, but copy the trig values so the
  // closure never dangles.
  return make_result("apply_rope", x.shape(), std::move(out), {x},
                     [x, cs = table.cos, sn = table.sin, L, heads, hd, pairs](Tape& tape, const TensorImpl&,
                                                                               std::span<const Scalar> g) {
                       auto gx = tape.grad_slot(x);
                       for (std::size_t p = 0; p < L; ++p) {
                         for (std::size_t h = 0; h < heads; ++h) {
                           const std::size_t base = (p * heads + h) * hd;
                           for (std::size_t d = 0; d < pairs; ++d) {
                             const Scalar c = cs[p * pairs + d];
                             const Scalar s = sn[p * pairs + d];
                             const Scalar g0 = g[base + 2 * d];
                             const Scalar g1 = g[base + 2 * d + 1];
                             gx[base + 2 * d] += g0 * c + g1 * s;
                             gx[base + 2 * d + 1] += -g0 * s + g1 * c;
                           }
                         }
                       }
                     });
}

std::pair<Tensor, Tensor> apply_rope(const Tensor& q, const Tensor& k, const RopeTable& table) {
  return {apply_rope(q, table), apply_rope(k, table)};
}

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
