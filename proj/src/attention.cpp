#include "jamflow/attention.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "jamflow/init.hpp"

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

namespace {

using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Strided = Eigen::Map<Mat, 0, Eigen::OuterStride<>>;
using StridedC = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return -floor_div(-a, b); }

}  // namespace

std::string to_string(MaskMode mode) { return mode == MaskMode::motion_query ? "motion_query" : "audio_query"; }

JointMask build_joint_mask(MaskMode mode, std::int64_t self_len, std::int64_t other_len,
                           std::optional<std::int64_t> window) {
  if (self_len < 1) throw ShapeError("build_joint_mask", "self sequence must be non-empty");
  if (other_len < 0) throw ShapeError("build_joint_mask", "other sequence length must be >= 0");
  if (mode == MaskMode::motion_query && !window) throw ShapeError("build_joint_mask", "motion_query mode needs a window");
  if (window && *window < 0) throw ShapeError("build_joint_mask", "window must be >= 0, got " + std::to_string(*window));

  JointMask m;
  m.mode = mode;
  m.self_len = static_cast<std::size_t>(self_len);
  m.other_len = static_cast<std::size_t>(other_len);
  m.window = static_cast<std::size_t>(window.value_or(0));
  const std::int64_t keys = self_len + other_len;
  m.allow.assign(static_cast<std::size_t>(self_len * keys), 0);

  for (std::int64_t i = 0; i < self_len; ++i) {
    std::uint8_t* row = m.allow.data() + i * keys;
    if (mode == MaskMode::motion_query) {
      const std::int64_t w = *window;
      for (std::int64_t j = std::max<std::int64_t>(0, i - w); j <= std::min(self_len - 1, i + w); ++j) row[j] = 1;
      if (other_len > 0) {
        const std::int64_t lo = std::max<std::int64_t>(0, floor_div((i - w) * other_len, self_len));
        const std::int64_t hi = std::min(other_len - 1, ceil_div((i + w + 1) * other_len, self_len) - 1);
        for (std::int64_t j = lo; j <= hi; ++j) row[self_len + j] = 1;
      }
    } else {
      for (std::int64_t j = 0; j < self_len; ++j) row[j] = 1;
      if (other_len > 0) row[self_len + floor_div(i * other_len, self_len)] = 1;
    }
  }
  return m;
}

Tensor sdpa(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::uint8_t> mask) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) throw ShapeError("sdpa", q.shape(), k.shape());
  if (k.shape() != v.shape() || q.dim(1) != k.dim(1) || q.dim(2) != k.dim(2)) throw ShapeError("sdpa", q.shape(), k.shape());
  const auto Lq = static_cast<Eigen::Index>(q.dim(0));
  const auto Lk = static_cast<Eigen::Index>(k.dim(0));
  const auto H = static_cast<Eigen::Index>(q.dim(1));
  const auto D = static_cast<Eigen::Index>(q.dim(2));
  if (Lk == 0) throw ShapeError("sdpa", "no keys");
  if (!mask.empty() && mask.size() != static_cast<std::size_t>(Lq * Lk)) {
    throw ShapeError("sdpa", "mask holds " + std::to_string(mask.size()) + " entries, expected " +
                                 std::to_string(Lq) + "x" + std::to_string(Lk));
  }
  for (Eigen::Index i = 0; !mask.empty() && i < Lq; ++i) {
    auto row = mask.subspan(static_cast<std::size_t>(i * Lk), static_cast<std::size_t>(Lk));
    if (std::none_of(row.begin(), row.end(), [](std::uint8_t a) { return a != 0; })) {
      throw ShapeError("sdpa", "query row " + std::to_string(i) + " has no allowed key");
    }
  }
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(D));
  const Eigen::OuterStride<> stride(H * D);

  std::vector<Scalar> out(static_cast<std::size_t>(Lq * H * D));
  std::vector<Scalar> probs(static_cast<std::size_t>(H * Lq * Lk));
  Mat scores(Lq, Lk);
  for (Eigen::Index h = 0; h < H; ++h) {
    StridedC qh(q.data().data() + h * D, Lq, D, stride);
    StridedC kh(k.data().data() + h * D, Lk, D, stride);
    StridedC vh(v.data().data() + h * D, Lk, D, stride);
    scores.noalias() = qh * kh.transpose();
    Eigen::Map<Mat> ph(probs.data() + h * Lq * Lk, Lq, Lk);
    for (Eigen::Index i = 0; i < Lq; ++i) {
      const std::uint8_t* allow = mask.empty() ? nullptr : mask.data() + i * Lk;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Eigen::Index j = 0; j < Lk; ++j)
        if (!allow || allow[j]) mx = std::max(mx, scores(i, j) * scale);
      Scalar total = 0;
      for (Eigen::Index j = 0; j < Lk; ++j) {
        const Scalar e = (!allow || allow[j]) ? std::exp(scores(i, j) * scale - mx) : Scalar(0);
        ph(i, j) = e;
        total += e;
      }
      ph.row(i) /= total;
    }
    Strided(out.data() + h * D, Lq, D, stride).noalias() = ph * vh;
  }

  return make_result(
      "sdpa", q.shape(), std::move(out), {q, k, v},
      [q, k, v, probs = std::move(probs), Lq, Lk, H, D, scale](Tape& tape, const TensorImpl&, std::span<const Scalar> g) {
        const Eigen::OuterStride<> stride(H * D);
        Scalar* gq = q.requires_grad() ? tape.grad_slot(q).data() : nullptr;
        Scalar* gk = k.requires_grad() ? tape.grad_slot(k).data() : nullptr;
        Scalar* gv = v.requires_grad() ? tape.grad_slot(v).data() : nullptr;
        Mat dp(Lq, Lk);
        for (Eigen::Index h = 0; h < H; ++h) {
          StridedC qh(q.data().data() + h * D, Lq, D, stride);
          StridedC kh(k.data().data() + h * D, Lk, D, stride);
          StridedC vh(v.data().data() + h * D, Lk, D, stride);
          StridedC gh(g.data() + h * D, Lq, D, stride);
          Eigen::Map<const Mat> ph(probs.data() + h * Lq * Lk, Lq, Lk);
          if (gv) Strided(gv + h * D, Lk, D, stride).noalias() += ph.transpose() * gh;
          if (!gq && !gk) continue;
          dp.noalias() = gh * vh.transpose();
          for (Eigen::Index i = 0; i < Lq; ++i) {
            const Scalar dot = dp.row(i).dot(ph.row(i));
            dp.row(i) = (ph.row(i).array() * (dp.row(i).array() - dot)).matrix() * scale;
          }
          if (gq) Strided(gq + h * D, Lq, D, stride).noalias() += dp * kh;
          if (gk) Strided(gk + h * D, Lk, D, stride).noalias() += dp.transpose() * qh;
        }
      });
}

AttentionParams make_attention_params(std::size_t hidden, std::size_t heads, std::size_t head_dim, CounterRng rng,
                                      const std::string& prefix) {
  AttentionParams p;
  p.heads = heads;
  p.head_dim = head_dim;
  const std::size_t inner = heads * head_dim;
  p.wq = init_uniform({hidden, inner}, hidden, rng.derive("wq"), prefix + "wq");
  p.bq = init_uniform({inner}, hidden, rng.derive("bq"), prefix + "bq");
  p.wk = init_uniform({hidden, inner}, hidden, rng.derive("wk"), prefix + "wk");
  p.bk = init_uniform({inner}, hidden, rng.derive("bk"), prefix + "bk");
  p.wv = init_uniform({hidden, inner}, hidden, rng.derive("wv"), prefix + "wv");
  p.bv = init_uniform({inner}, hidden, rng.derive("bv"), prefix + "bv");
  p.wo = init_uniform({inner, hidden}, inner, rng.derive("wo"), prefix + "wo");
  p.bo = init_uniform({hidden}, inner, rng.derive("bo"), prefix + "bo");
  return p;
}

namespace {

struct Projected {
  Tensor q, k, v;
};

Projected project(const AttentionBranch& b) {
  const AttentionParams& p = *b.params;
  if (b.x.rank() != 2 || b.x.dim(1) != p.hidden()) {
    throw ShapeError("joint_attention", b.x.shape(), {0, p.hidden()});
  }
  const std::size_t L = b.x.dim(0);
  Projected r;
  r.q = reshape(linear(b.x, p.wq, p.bq), {L, p.heads, p.head_dim});
  r.k = reshape(linear(b.x, p.wk, p.bk), {L, p.heads, p.head_dim});
  r.v = reshape(linear(b.x, p.wv, p.bv), {L, p.heads, p.head_dim});
  if (b.rope) std::tie(r.q, r.k) = apply_rope(r.q, r.k, *b.rope);
  return r;
}

Tensor attend(const AttentionBranch& self, const Projected& s, const Projected& other, std::size_t other_len,
              QueryPooling pooling) {
  const AttentionParams& p = *self.params;
  const std::size_t L = self.x.dim(0);
  Tensor out;
  if (!self.joint) {
    std::span<const std::uint8_t> allow;
    if (self.mask) {
      if (self.mask->other_len > 0) {
        throw ShapeError("joint_attention", "mask references other-modality keys but joint attention is off");
      }
      if (self.mask->self_len != L) throw ShapeError("joint_attention", "mask length does not match sequence");
      allow = self.mask->allow;
    }
    out = sdpa(s.q, s.k, s.v, allow);
  } else {
    if (self.mask && (self.mask->self_len != L || self.mask->other_len != other_len)) {
      throw ShapeError("joint_attention", "mask " + std::to_string(self.mask->self_len) + "x" +
                                              std::to_string(self.mask->other_len) + " does not match lengths " +
                                              std::to_string(L) + "x" + std::to_string(other_len));
    }
    Tensor k = concat({s.k, other.k}, 0);
    Tensor v = concat({s.v, other.v}, 0);
    if (pooling == QueryPooling::own) {
      out = sdpa(s.q, k, v, self.mask ? std::span<const std::uint8_t>(self.mask->allow) : std::span<const std::uint8_t>{});
    } else {
      // Rows for the other branch's queries are discarded after attention, so
      // they may attend freely.
      const std::size_t keys = L + other_len;
      std::vector<std::uint8_t> pooled;
      if (self.mask) {
        pooled.assign(keys * keys, 1);
        std::copy(self.mask->allow.begin(), self.mask->allow.end(), pooled.begin());
      }
      Tensor q = concat({s.q, other.q}, 0);
      out = slice(sdpa(q, k, v, pooled), 0, 0, L);
    }
  }
  return linear(reshape(out, {L, p.heads * p.head_dim}), p.wo, p.bo);
}

}  // namespace

std::pair<Tensor, Tensor> joint_attention(const AttentionBranch& b1, const AttentionBranch& b2, QueryPooling pooling) {
  if (!b1.params || !b2.params) throw ShapeError("joint_attention", "missing attention parameters");
  if ((b1.joint || b2.joint) &&
      (b1.params->heads != b2.params->heads || b1.params->head_dim != b2.params->head_dim)) {
    throw ShapeError("joint_attention", "joint pooling needs matching heads and head_dim");
  }
  Projected p1 = project(b1);
  Projected p2 = project(b2);
  Tensor o1 = attend(b1, p1, p2, b2.x.dim(0), pooling);
  Tensor o2 = attend(b2, p2, p1, b1.x.dim(0), pooling);
  return {o1, o2};
}

Tensor self_attention(const AttentionParams& p, const Tensor& x, const RopeTable* rope, const JointMask* mask) {
  AttentionBranch b{&p, x, rope, mask, false};
  Projected pr = project(b);
  return attend(b, pr, pr, 0, QueryPooling::own);
}

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
