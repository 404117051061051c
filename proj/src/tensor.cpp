#include "jamflow/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

namespace {

using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const Mat>;
using Map = Eigen::Map<Mat>;

thread_local Tape* g_tape = nullptr;
thread_local bool g_checked = false;

void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) throw ShapeError(op, "undefined tensor argument");
}

// Size of the broadcast block when b matches a trailing suffix of a.
std::size_t trailing_block(const char* op, const Tensor& a, const Tensor& b) {
  require_defined(op, a);
  require_defined(op, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() > sa.size() || !std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) {
    throw ShapeError(op, sa, sb);
  }
  return b.numel();
}

}  // namespace

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0); }

Tensor Tensor::full(Shape shape, Scalar value) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<Scalar> values) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor", "shape " + shape_str(shape) + " does not hold " +
                                   std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(Scalar value) { return from({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<Scalar> values, std::string name) {
  Tensor t = from(std::move(shape), std::move(values));
  t.impl_->requires_grad = true;
  t.impl_->name = std::move(name);
  return t;
}

Tensor Tensor::randn(Shape shape, CounterRng rng, Scalar stddev) {
  std::vector<Scalar> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Scalar>(rng.normal()) * stddev;
  return from(std::move(shape), std::move(v));
}

const Shape& Tensor::shape() const {
  static const Shape empty;
  return impl_ ? impl_->shape : empty;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("dim", "axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const Scalar> Tensor::data() const {
  if (!impl_) return {};
  return impl_->data;
}

std::span<Scalar> Tensor::mutable_data() {
  if (!impl_) return {};
  return impl_->data;
}

Scalar Tensor::item() const {
  if (numel() != 1) throw ShapeError("item", "tensor " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

Scalar Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("at", "index rank does not match " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= impl_->shape[axis]) throw ShapeError("at", "index out of range for " + shape_str(shape()));
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

const std::string& Tensor::name() const {
  static const std::string empty;
  return impl_ ? impl_->name : empty;
}

Tensor Tensor::detach() const { return from(shape(), impl_ ? impl_->data : std::vector<Scalar>{}); }

Tensor Tensor::clone() const {
  Tensor t = detach();
  if (impl_) {
    t.impl_->requires_grad = impl_->is_leaf && impl_->requires_grad;
    t.impl_->name = impl_->name;
  }
  return t;
}

// ---------------------------------------------------------------------------

std::vector<Scalar> GradientMap::get(const Tensor& t) const {
  auto it = grads_.find(t.impl());
  if (it == grads_.end()) return std::vector<Scalar>(t.numel(), 0);
  return it->second;
}

bool GradientMap::contains(const Tensor& t) const { return grads_.count(t.impl()) != 0; }

std::vector<Scalar>& GradientMap::slot(const TensorImpl* impl, std::size_t numel) {
  auto& g = grads_[impl];
  if (g.empty()) g.assign(numel, 0);
  return g;
}

void Tape::record(std::shared_ptr<TensorImpl> node) { nodes_.push_back(std::move(node)); }

std::span<Scalar> Tape::grad_slot(const Tensor& input) {
  TensorImpl* impl = input.impl();
  if (impl->is_leaf) return leaf_grads_.slot(impl, impl->data.size());
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0);
  return impl->grad;
}

void Tape::accumulate(const Tensor& input, std::span<const Scalar> g) {
  if (!input.requires_grad()) return;
  auto slot = grad_slot(input);
  for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
}

GradientMap Tape::backward(const Tensor& loss) {
  if (consumed_) throw Error("backward: tape already consumed; call reset() before a second backward");
  if (loss.numel() != 1) throw ShapeError("backward", "loss must be a scalar, got " + shape_str(loss.shape()));
  consumed_ = true;
  if (!loss.requires_grad()) return std::move(leaf_grads_);

  grad_slot(loss)[0] = 1;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    TensorImpl& node = **it;
    if (node.grad.empty() || !node.backward) continue;
    std::vector<Scalar> g = std::move(node.grad);
    node.grad.clear();
    node.backward(*this, node, g);
  }
  return std::move(leaf_grads_);
}

void Tape::reset() {
  nodes_.clear();
  leaf_grads_ = GradientMap{};
  consumed_ = false;
}

Recording::Recording(Tape& tape) : previous_(g_tape) { g_tape = &tape; }
Recording::~Recording() { g_tape = previous_; }

Tape* current_tape() { return g_tape; }

void set_checked_mode(bool on) { g_checked = on; }
bool checked_mode() { return g_checked; }

Tensor make_result(const char* op, Shape shape, std::vector<Scalar> values, const std::vector<Tensor>& inputs,
                   BackwardFn backward) {
  if (g_checked) {
    for (Scalar v : values) {
      if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
    }
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  if (g_tape) {
    bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (needs) {
      impl->requires_grad = true;
      impl->is_leaf = false;
      impl->backward = std::move(backward);
      g_tape->record(impl);
    }
  }
  return Tensor(std::move(impl));
}

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t block = trailing_block("add", a, b);
  auto da = a.data();
  auto db = b.data();
  std::vector<Scalar> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i % block];
  return make_result("add", a.shape(), std::move(out), {a, b},
                     [a, b, block](Tape& tape, const TensorImpl&, std::span<const Scalar> g) {
                       tape.accumulate(a, g);
                       if (b.requires_grad()) {
                         auto gb = tape.grad_slot(b);
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i % block] += g[i];
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const std::size_t block = trailing_block("sub", a, b);
  auto da = a.data();
  auto db = b.data();
  std::vector<Scalar> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i % block];
  return make_result("sub", a.shape(), std::move(out), {a, b},
                     [a, b, block](Tape& tape, const TensorImpl&, std::span<const Scalar> g) {
                       tape.accumulate(a, g);
                       if (b.requires_grad()) {
                         auto gb = tape.grad_slot(b);
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i % block] -= g[i];
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t block = trailing_block("mul", a, b);
  auto da = a.data();
  auto db = b.data();
  std::vector<Scalar> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i % block];
  return make_result("mul", a.shape(), std::move(out), {a, b},
                     [a, b, block](Tape& tape, const TensorImpl&, std::span<const Scalar> g) {
                       auto va = a.data();
                       auto vb = b.data();
                       if (a.requires_grad()) {
                         auto ga = tape.grad_slot(a);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i % block];
                       }
                       if (b.requires_grad()) {
                         auto gb = tape.grad_slot(b);
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i % block] += g[i] * va[i];
                       }
                     });
}

Tensor scalar_mul(const Tensor& a, Scalar s) {
  require_defined("scalar_mul", a);
  std::vector<Scalar> out(a.data().begin(), a.data().end());
  for (auto& x : out) x *= s;
  return make_result("scalar_mul", a.shape(), std::move(out), {a},
                     [a, s](Tape& tape, const TensorImpl&, std::span<const Scalar> g) {
                       auto ga = tape.grad_slot(a);
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
                     });
}

Tensor add_scalar(const Tensor& a, Scalar s) {
  require_defined("add_scalar", a);
  std::vector<Scalar> out(a.data().begin(), a.data().end());
  for (auto& x : out) x += s;
  return make_result("add_scalar", a.shape(), std::move(out), {a},
                     [a](Tape& tape, const TensorImpl&, std::span<const Scalar> g) { tape.accumulate(a, g); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined("matmul", a);
  require_defined("matmul", b);
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<Scalar> out(static_cast<std::size_t>(m * n));
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  return make_result("matmul", {a.dim(0), b.dim(1)}, std::move(out), {a, b},
                     [a, b, m, k, n](Tape& tape, const TensorImpl&, std::span<const Scalar> g) {
                       MapC gm(g.data(), m, n);
                       if (a.requires_grad()) {
                         Map(tape.grad_slot(a).data(), m, k).noalias() += gm * MapC(b.data().data(), k, n).transpose();
                       }
                       if (b.requires_grad()) {
                         Map(tape.grad_slot(b).data(), k, n).noalias() += MapC(a.data().data(), m, k).transpose() * gm;
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_defined("transpose", a);
  if (a.rank() != 2) throw ShapeError("transpose", "expected rank 2, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto da = a.data();
  std::vector<Scalar> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = da[i * c + j];
  return make_result("transpose", {c, r}, std::move(out), {a},
                     [a, r, c](Tape& tape, const TensorImpl&, std::span<const Scalar> g) {
                       auto ga = tape.grad_slot(a);
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  for (const auto& p : parts) require_defined("concat", p);
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat", "axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw ShapeError("concat", first, s);
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_row = out_shape[axis] * inner;

  std::vector<Scalar> out(outer * out_row);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t row = p.dim(axis) * inner;
    auto src = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * row), row, out.begin() + static_cast<std::ptrdiff_t>(o * out_row + offset));
    offset += row;
  }
  return make_result("concat", std::move(out_shape), std::move(out), parts,
                     [parts, offsets, outer, out_row, inner, axis](Tape& tape, const TensorImpl&, std::span<const Scalar> g) {
                       for (std::size_t i = 0; i < parts.size(); ++i) {
                         if (!parts[i].requires_grad()) continue;
                         auto gp = tape.grad_slot(parts[i]);
                         const std::size_t row = parts[i].dim(axis) * inner;
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t j = 0; j < row; ++j) gp[o * row + j] += g[o * out_row + offsets[i] + j];
                       }
                     });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  require_defined("slice", a);
  const Shape& s = a.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) {
    throw ShapeError("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                                  std::to_string(axis) + " of " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t in_row = s[axis] * inner;
  const std::size_t out_row = (end - begin) * inner;
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  auto src = a.data();
  std::vector<Scalar> out(outer * out_row);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * in_row + begin * inner), out_row,
                out.begin() + static_cast<std::ptrdiff_t>(o * out_row));
  return make_result("slice", std::move(out_shape), std::move(out), {a},
                     [a, outer, in_row, out_row, begin, inner](Tape& tape, const TensorImpl&, std::span<const Scalar> g) {
                       auto ga = tape.grad_slot(a);
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t j = 0; j < out_row; ++j) ga[o * in_row + begin * inner + j] += g[o * out_row + j];
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined("reshape", a);
  if (shape_numel(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape);
  std::vector<Scalar> out(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {a},
                     [a](Tape& tape, const TensorImpl&, std::span<const Scalar> g) { tape.accumulate(a, g); });
}

Tensor softmax(const Tensor& a) {
  require_defined("softmax", a);
  if (a.rank() == 0) throw ShapeError("softmax", "expected rank >= 1");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / std::max<std::size_t>(n, 1);
  auto x = a.data();
  std::vector<Scalar> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* xr = x.data() + r * n;
    Scalar* yr = y.data() + r * n;
    Scalar mx = *std::max_element(xr, xr + n);
    Scalar total = 0;
    for (std::size_t j = 0; j < n; ++j) total += yr[j] = std::exp(xr[j] - mx);
    for (std::size_t j = 0; j < n; ++j) yr[j] /= total;
  }
  return make_result("softmax", a.shape(), y, {a},
                     [a, y, n, rows](Tape& tape, const TensorImpl&, std::span<const Scalar> g) {
                       auto ga = tape.grad_slot(a);
                       for (std::size_t r = 0; r < rows; ++r) {
                         Scalar dot = 0;
                         for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
                         for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
                       }
                     });
}

Tensor gelu(const Tensor& a) {
  require_defined("gelu", a);
  auto x = a.data();
  std::vector<Scalar> y(x.size());
  const Scalar inv_sqrt2 = Scalar(0.7071067811865476);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = Scalar(0.5) * x[i] * (1 + std::erf(x[i] * inv_sqrt2));
  return make_result("gelu", a.shape(), std::move(y), {a},
                     [a, inv_sqrt2](Tape& tape, const TensorImpl&, std::span<const Scalar> g) {
                       auto x = a.data();
                       auto ga = tape.grad_slot(a);
                       const Scalar inv_sqrt_2pi = Scalar(0.3989422804014327);
                       for (std::size_t i = 0; i < x.size(); ++i) {
                         Scalar cdf = Scalar(0.5) * (1 + std::erf(x[i] * inv_sqrt2));
                         Scalar pdf = inv_sqrt_2pi * std::exp(Scalar(-0.5) * x[i] * x[i]);
                         ga[i] += g[i] * (cdf + x[i] * pdf);
                       }
                     });
}

Tensor silu(const Tensor& a) {
  require_defined("silu", a);
  auto x = a.data();
  std::vector<Scalar> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / (1 + std::exp(-x[i]));
  return make_result("silu", a.shape(), std::move(y), {a}, [a](Tape& tape, const TensorImpl&, std::span<const Scalar> g) {
    auto x = a.data();
    auto ga = tape.grad_slot(a);
    for (std::size_t i = 0; i < x.size(); ++i) {
      Scalar s = 1 / (1 + std::exp(-x[i]));
      ga[i] += g[i] * s * (1 + x[i] * (1 - s));
    }
  });
}

Tensor layer_norm(const Tensor& a, Scalar eps) {
  require_defined("layer_norm", a);
  if (a.rank() == 0) throw ShapeError("layer_norm", "expected rank >= 1");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / std::max<std::size_t>(n, 1);
  auto x = a.data();
  std::vector<Scalar> y(x.size());
  std::vector<Scalar> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* xr = x.data() + r * n;
    Scalar mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= Scalar(n);
    Scalar var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= Scalar(n);
    rstd[r] = 1 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = (xr[j] - mu) * rstd[r];
  }
  return make_result("layer_norm", a.shape(), y, {a},
                     [a, y, rstd, n, rows](Tape& tape, const TensorImpl&, std::span<const Scalar> g) {
                       auto ga = tape.grad_slot(a);
                       for (std::size_t r = 0; r < rows; ++r) {
                         Scalar mg = 0, mgy = 0;
                         for (std::size_t j = 0; j < n; ++j) {
                           mg += g[r * n + j];
                           mgy += g[r * n + j] * y[r * n + j];
                         }
                         mg /= Scalar(n);
                         mgy /= Scalar(n);
                         for (std::size_t j = 0; j < n; ++j)
                           ga[r * n + j] += rstd[r] * (g[r * n + j] - mg - y[r * n + j] * mgy);
                       }
                     });
}

Tensor sum(const Tensor& a) {
  require_defined("sum", a);
  Scalar total = 0;
  for (Scalar v : a.data()) total += v;
  return make_result("sum", {}, {total}, {a}, [a](Tape& tape, const TensorImpl&, std::span<const Scalar> g) {
    auto ga = tape.grad_slot(a);
    for (auto& v : ga) v += g[0];
  });
}

Tensor mean(const Tensor& a) {
  require_defined("mean", a);
  if (a.numel() == 0) throw ShapeError("mean", "empty tensor");
  return scalar_mul(sum(a), Scalar(1) / Scalar(a.numel()));
}

Tensor gather_rows(const Tensor& table, std::span<const int> indices) {
  require_defined("gather_rows", table);
  if (table.rank() != 2) throw ShapeError("gather_rows", "table must be rank 2, got " + shape_str(table.shape()));
  const std::size_t rows = table.dim(0), width = table.dim(1);
  std::vector<int> idx(indices.begin(), indices.end());
  std::vector<Scalar> out(idx.size() * width);
  auto src = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= rows) {
      throw ShapeError("gather_rows", "index " + std::to_string(idx[i]) + " out of range for " + shape_str(table.shape()));
    }
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx[i] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  return make_result("gather_rows", {idx.size(), width}, std::move(out), {table},
                     [table, idx, width](Tape& tape, const TensorImpl&, std::span<const Scalar> g) {
                       auto gt = tape.grad_slot(table);
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t j = 0; j < width; ++j) gt[idx[i] * width + j] += g[i * width + j];
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_defined("linear", x);
  if (x.rank() == 1) {
    Tensor y = linear(reshape(x, {1, x.dim(0)}), w, b);
    return reshape(y, {y.dim(1)});
  }
  Tensor y = matmul(x, w);
  return b.defined() ? add(y, b) : y;
}

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
