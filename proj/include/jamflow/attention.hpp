#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "jamflow/rope.hpp"
#include "jamflow/tensor.hpp"

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

enum class MaskMode { motion_query, audio_query };

std::string to_string(MaskMode mode);

// Attention permissions for one branch over its key pool [self keys; other keys].
//
// motion_query: self key j allowed iff |i - j| <= window; other (audio) key j
//   allowed iff j lies in [floor((i - w) * Lo / Ls), ceil((i + w + 1) * Lo / Ls) - 1],
//   i.e. the audio frames covering the same local time window.
// audio_query: every self (audio) key allowed; exactly one other (motion) key,
//   floor(i * Lo / Ls), the motion frame at the same timestamp.
struct JointMask {
  MaskMode mode = MaskMode::audio_query;
  std::size_t self_len = 0;
  std::size_t other_len = 0;
  std::size_t window = 0;
  std::vector<std::uint8_t> allow;  // self_len x (self_len + other_len)

  std::size_t keys() const { return self_len + other_len; }
  bool allowed(std::size_t query, std::size_t key) const { return allow[query * keys() + key] != 0; }
  std::span<const std::uint8_t> row(std::size_t query) const {
    return std::span<const std::uint8_t>(allow).subspan(query * keys(), keys());
  }
};

JointMask build_joint_mask(MaskMode mode, std::int64_t self_len, std::int64_t other_len,
                           std::optional<std::int64_t> window = std::nullopt);

// Scaled dot-product attention. q: [Lq, heads, d]; k, v: [Lk, heads, d];
// mask (optional): Lq x Lk, nonzero = allowed, shared by all heads. Masked
// keys receive exactly zero weight. A row with no allowed key is an error.
Tensor sdpa(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::uint8_t> mask = {});

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // w*: [hidden, heads*head_dim] (wo transposed)
  std::size_t heads = 0;
  std::size_t head_dim = 0;

  std::size_t hidden() const { return wq.defined() ? wq.dim(0) : 0; }
};

AttentionParams make_attention_params(std::size_t hidden, std::size_t heads, std::size_t head_dim, CounterRng rng,
                                      const std::string& prefix = {});

// Literal pooling concatenates the other branch's queries too and trims the
// extra rows afterwards. Own pooling only evaluates this branch's queries; the
// two produce the same output.
enum class QueryPooling { own, literal };

struct AttentionBranch {
  const AttentionParams* params = nullptr;
  Tensor x;                          // [L, hidden]
  const RopeTable* rope = nullptr;   // optional
  const JointMask* mask = nullptr;   // optional
  bool joint = false;                // pool the other branch's keys/values
};

std::pair<Tensor, Tensor> joint_attention(const AttentionBranch& b1, const AttentionBranch& b2,
                                          QueryPooling pooling = QueryPooling::own);

// Standalone multi-head attention for one branch (mask must be self-only).
Tensor self_attention(const AttentionParams& p, const Tensor& x, const RopeTable* rope = nullptr,
                      const JointMask* mask = nullptr);

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
