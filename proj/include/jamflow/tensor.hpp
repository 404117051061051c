#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "jamflow/common.hpp"
#include "jamflow/rng.hpp"

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

class Tape;
struct TensorImpl;

// Called during backward with the gradient flowing into `out`.
using BackwardFn = std::function<void(Tape&, const TensorImpl& out, std::span<const Scalar> out_grad)>;

struct TensorImpl {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;  // only used for interior nodes while a tape runs backward
  bool requires_grad = false;
  bool is_leaf = true;
  BackwardFn backward;
  std::string name;
};

// Dense row-major tensor handle. Copies share storage; values are never
// mutated after construction except through mutable_data(), which is reserved
// for optimizers and checkpoint loading.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, Scalar value);
  static Tensor from(Shape shape, std::vector<Scalar> values);
  static Tensor scalar(Scalar value);
  // Leaf that accumulates gradients when recorded ops consume it.
  static Tensor parameter(Shape shape, std::vector<Scalar> values, std::string name = {});
  static Tensor randn(Shape shape, CounterRng rng, Scalar stddev = 1);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  std::span<const Scalar> data() const;
  std::span<Scalar> mutable_data();
  Scalar item() const;
  Scalar at(std::initializer_list<std::size_t> index) const;
  bool requires_grad() const;
  const std::string& name() const;

  // Same values, no gradient history.
  Tensor detach() const;
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& shared() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Leaf gradients produced by one backward pass.
class GradientMap {
 public:
  // Zeros when `t` was unreachable from the loss.
  std::vector<Scalar> get(const Tensor& t) const;
  bool contains(const Tensor& t) const;
  std::vector<Scalar>& slot(const TensorImpl* impl, std::size_t numel);
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<const TensorImpl*, std::vector<Scalar>> grads_;
};

// Define-by-run recording. Nodes are appended in creation order, which is a
// topological order by construction.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<TensorImpl> node);
  std::size_t size() const { return nodes_.size(); }

  // Runs reverse-mode accumulation from a scalar loss. Can be called once per
  // recording; call reset() before reusing the tape.
  GradientMap backward(const Tensor& loss);
  void reset();

  // Adds `g` into the gradient slot of `input` (no-op when it needs no grad).
  void accumulate(const Tensor& input, std::span<const Scalar> g);
  // Zero-initialized on first use.
  std::span<Scalar> grad_slot(const Tensor& input);

 private:
  std::vector<std::shared_ptr<TensorImpl>> nodes_;
  GradientMap leaf_grads_;
  bool consumed_ = false;
};

// RAII guard that routes recorded ops on this thread to `tape`.
class Recording {
 public:
  explicit Recording(Tape& tape);
  ~Recording();
  Recording(const Recording&) = delete;
  Recording& operator=(const Recording&) = delete;

 private:
  Tape* previous_;
};

Tape* current_tape();

// When on, every op verifies its output is finite and throws NumericError.
void set_checked_mode(bool on);
bool checked_mode();

class CheckedMode {
 public:
  explicit CheckedMode(bool on = true) : previous_(checked_mode()) { set_checked_mode(on); }
  ~CheckedMode() { set_checked_mode(previous_); }

 private:
  bool previous_;
};

// Builds an op result and records it when a tape is active and any input
// requires grad. Exposed so that modules can define fused ops.
Tensor make_result(const char* op, Shape shape, std::vector<Scalar> values,
                   const std::vector<Tensor>& inputs, BackwardFn backward);

// Elementwise ops. `b` may match `a` exactly or match a trailing suffix of
// a's shape, in which case it is broadcast over the leading axes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, Scalar s);
Tensor add_scalar(const Tensor& a, Scalar s);

// 2-D matrix product [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& a, Shape shape);

Tensor softmax(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor layer_norm(const Tensor& a, Scalar eps = Scalar(1e-6));

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// rows[i] = table[indices[i]]
Tensor gather_rows(const Tensor& table, std::span<const int> indices);

// x[.., in] * w[in, out] + b[out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
