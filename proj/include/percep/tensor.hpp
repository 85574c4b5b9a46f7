// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode autodiff on an explicit tape.
// The scalar type is a template parameter: float is the working precision,
// double is used by the finite-difference gradient checks.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "percep/errors.hpp"

namespace percep {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

inline void check_shape_valid(const Shape& s) {
  if (s.empty()) throw ShapeMismatch("tensor rank must be >= 1");
  for (int64_t d : s) {
    if (d <= 0) throw ShapeMismatch("tensor extents must be positive, got " + shape_str(s));
  }
}

template <typename S>
struct TensorData {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // allocated lazily during backward
  bool requires_grad = false;
};

template <typename S>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape) {
    check_shape_valid(shape);
    TensorT t;
    t.d_ = std::make_shared<TensorData<S>>();
    t.d_->values.assign(static_cast<size_t>(shape_numel(shape)), S(0));
    t.d_->shape = std::move(shape);
    return t;
  }

  static TensorT full(Shape shape, S value) {
    TensorT t = zeros(std::move(shape));
    std::fill(t.d_->values.begin(), t.d_->values.end(), value);
    return t;
  }

  static TensorT from_values(Shape shape, std::vector<S> values) {
    check_shape_valid(shape);
    if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
      throw ShapeMismatch("value count " + std::to_string(values.size()) +
                          " does not fill shape " + shape_str(shape));
    }
    TensorT t;
    t.d_ = std::make_shared<TensorData<S>>();
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    return t;
  }

  static TensorT scalar(S value) { return from_values({1}, {value}); }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int64_t dim(int axis) const { return d_->shape[static_cast<size_t>(axis)]; }
  int64_t numel() const { return static_cast<int64_t>(d_->values.size()); }

  std::span<S> values() { return {d_->values.data(), d_->values.size()}; }
  std::span<const S> values() const { return {d_->values.data(), d_->values.size()}; }
  S* data() { return d_->values.data(); }
  const S* data() const { return d_->values.data(); }

  S value() const {
    if (numel() != 1) throw ShapeMismatch("value() needs a scalar, got " + shape_str(shape()));
    return d_->values[0];
  }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    d_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return d_ && !d_->grad.empty(); }

  std::span<const S> grad() const {
    if (!has_grad()) throw Error("gradient not present; run backward first");
    return {d_->grad.data(), d_->grad.size()};
  }

  // Allocates (zero-filled) on first use; backward accumulates into this.
  std::span<S> grad_buffer() {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), S(0));
    return {d_->grad.data(), d_->grad.size()};
  }

  void clear_grad() {
    if (d_) d_->grad.clear();
  }

  TensorT clone() const {
    TensorT t;
    t.d_ = std::make_shared<TensorData<S>>();
    t.d_->shape = d_->shape;
    t.d_->values = d_->values;
    t.d_->requires_grad = d_->requires_grad;
    return t;
  }

  // Identity of the underlying storage node (fan-out detection, tests).
  const void* node_id() const { return d_.get(); }

 private:
  std::shared_ptr<TensorData<S>> d_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// ---------------------------------------------------------------------------
// Tape

template <typename S>
class TapeT {
 public:
  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  // Activates a tape for the current thread while in scope.
  class Scope {
   public:
    explicit Scope(TapeT& t) : prev_(active_) { active_ = &t; }
    ~Scope() { active_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    TapeT* prev_;
  };

  static TapeT* active() noexcept { return active_; }

  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
  size_t size() const noexcept { return steps_.size(); }
  void clear() { steps_.clear(); }

  // Reverse accumulation over the recorded ops. The tape must contain the
  // recording that produced `loss`.
  void backward(TensorT<S> loss) {
    if (steps_.empty()) throw Error("backward on an empty tape");
    if (loss.numel() != 1) {
      throw NonScalarLoss("loss must be scalar, got " + shape_str(loss.shape()));
    }
    loss.grad_buffer()[0] += S(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> steps_;
  static thread_local TapeT* active_;
};

template <typename S>
thread_local TapeT<S>* TapeT<S>::active_ = nullptr;

using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

// ---------------------------------------------------------------------------
// Shared helpers

template <typename S>
inline void ensure_all_finite(std::span<const S> vals, const char* what) {
  for (S v : vals) {
    if (!std::isfinite(v)) throw NonFiniteValue(std::string(what) + " produced a non-finite value");
  }
}

template <typename S>
inline void ensure_grad_finite(TensorT<S> t, const char* what) {
  for (S v : t.grad()) {
    if (!std::isfinite(v)) {
      throw NonFiniteGradient(std::string(what) + " backward produced a non-finite gradient");
    }
  }
}

// Records `step` when grads can flow; marks the result as grad-carrying.
template <typename S, typename F>
inline void maybe_record(std::initializer_list<const TensorT<S>*> inputs, TensorT<S>& out, F&& step) {
  TapeT<S>* tape = TapeT<S>::active();
  if (!tape) return;
  bool any = false;
  for (const TensorT<S>* t : inputs) any = any || (t->defined() && t->requires_grad());
  if (!any) return;
  out.set_requires_grad(true);
  tape->record(std::forward<F>(step));
}

// ---------------------------------------------------------------------------
// Raw GEMM kernels (row-major, accumulate into C)

// C[m,n] += A[m,k] * B[k,n]
template <typename S>
inline void gemm_nn_acc(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const S av = arow[p];
      const S* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T
template <typename S>
inline void gemm_nt_acc(const S* a, const S* b, S* c, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * n;
    S* crow = c + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const S* brow = b + p * n;
      S acc = S(0);
      for (int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename S>
inline void gemm_tn_acc(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    const S* brow = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const S av = arow[p];
      S* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise binary ops. The right operand may share the left shape, be a
// single-element scalar, or match a trailing suffix of the left shape (a
// bias row, a per-chunk positional table). Nothing wider is supported.

enum class Broadcast { same, scalar, suffix };

inline Broadcast classify_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::same;
  if (shape_numel(b) == 1) return Broadcast::scalar;
  if (b.size() < a.size() && std::equal(b.begin(), b.end(), a.end() - static_cast<long>(b.size()))) {
    return Broadcast::suffix;
  }
  throw ShapeMismatch(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                      " are not compatible");
}

namespace detail {

template <typename S, typename Fwd, typename BwdA, typename BwdB>
TensorT<S> binary_op(TensorT<S> a, TensorT<S> b, const char* name, Fwd fwd,
                     BwdA dfda, BwdB dfdb) {
  const Broadcast kind = classify_broadcast(a.shape(), b.shape(), name);
  const int64_t n = a.numel();
  const int64_t bn = b.numel();
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  {
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (int64_t i = 0; i < n; ++i) {
      const S bv = (kind == Broadcast::same) ? pb[i]
                   : (kind == Broadcast::scalar) ? pb[0]
                                                 : pb[i % bn];
      po[i] = fwd(pa[i], bv);
    }
  }
  ensure_all_finite<S>(out.values(), name);
  maybe_record<S>({&a, &b}, out, [a, b, out, kind, name, dfda, dfdb]() mutable {
    if (!out.has_grad()) return;
    const std::span<const S> go = out.grad();
    const S* pa = a.data();
    const S* pb = b.data();
    const int64_t n = a.numel();
    const int64_t bn = b.numel();
    if (a.requires_grad()) {
      std::span<S> ga = a.grad_buffer();
      for (int64_t i = 0; i < n; ++i) {
        const S bv = (kind == Broadcast::same) ? pb[i]
                     : (kind == Broadcast::scalar) ? pb[0]
                                                   : pb[i % bn];
        ga[i] += go[i] * dfda(pa[i], bv);
      }
      ensure_grad_finite(a, name);
    }
    if (b.requires_grad()) {
      std::span<S> gb = b.grad_buffer();
      for (int64_t i = 0; i < n; ++i) {
        const S bv = (kind == Broadcast::same) ? pb[i]
                     : (kind == Broadcast::scalar) ? pb[0]
                                                   : pb[i % bn];
        const int64_t bi = (kind == Broadcast::same) ? i : (kind == Broadcast::scalar) ? 0 : i % bn;
        gb[bi] += go[i] * dfdb(pa[i], bv);
      }
      ensure_grad_finite(b, name);
    }
  });
  return out;
}

}  // namespace detail

template <typename S>
TensorT<S> add(TensorT<S> a, TensorT<S> b) {
  return detail::binary_op(
      a, b, "add", [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
      [](S, S) { return S(1); });
}

template <typename S>
TensorT<S> sub(TensorT<S> a, TensorT<S> b) {
  return detail::binary_op(
      a, b, "sub", [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
      [](S, S) { return S(-1); });
}

template <typename S>
TensorT<S> mul(TensorT<S> a, TensorT<S> b) {
  return detail::binary_op(
      a, b, "mul", [](S x, S y) { return x * y; }, [](S, S y) { return y; },
      [](S x, S) { return x; });
}

template <typename S>
TensorT<S> div(TensorT<S> a, TensorT<S> b) {
  return detail::binary_op(
      a, b, "div", [](S x, S y) { return x / y; }, [](S, S y) { return S(1) / y; },
      [](S x, S y) { return -x / (y * y); });
}

// out = x * c, constant factor
template <typename S>
TensorT<S> scale(TensorT<S> x, S c) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] * c;
  ensure_all_finite<S>(out.values(), "scale");
  maybe_record<S>({&x}, out, [x, out, c]() mutable {
    if (!out.has_grad()) return;
    std::span<const S> go = out.grad();
    std::span<S> gx = x.grad_buffer();
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * c;
    ensure_grad_finite(x, "scale");
  });
  return out;
}

template <typename S>
TensorT<S> add_const(TensorT<S> x, S c) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] + c;
  ensure_all_finite<S>(out.values(), "add_const");
  maybe_record<S>({&x}, out, [x, out]() mutable {
    if (!out.has_grad()) return;
    std::span<const S> go = out.grad();
    std::span<S> gx = x.grad_buffer();
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    ensure_grad_finite(x, "add_const");
  });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

template <typename S>
TensorT<S> relu(TensorT<S> x) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] > S(0) ? px[i] : S(0);
  ensure_all_finite<S>(out.values(), "relu");
  maybe_record<S>({&x}, out, [x, out]() mutable {
    if (!out.has_grad()) return;
    std::span<const S> go = out.grad();
    std::span<S> gx = x.grad_buffer();
    const S* px = x.data();
    for (size_t i = 0; i < go.size(); ++i) gx[i] += px[i] > S(0) ? go[i] : S(0);
    ensure_grad_finite(x, "relu");
  });
  return out;
}

// Slopes: either a single shared value or one per channel along the last axis.
template <typename S>
TensorT<S> prelu(TensorT<S> x, TensorT<S> slopes) {
  const int64_t f = x.shape().back();
  const bool shared = slopes.numel() == 1;
  if (!shared && (slopes.rank() != 1 || slopes.dim(0) != f)) {
    throw ShapeMismatch("prelu: slopes " + shape_str(slopes.shape()) + " do not match last axis of " +
                        shape_str(x.shape()));
  }
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* px = x.data();
  const S* pa = slopes.data();
  S* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) {
    const S a = shared ? pa[0] : pa[i % f];
    po[i] = px[i] >= S(0) ? px[i] : a * px[i];
  }
  ensure_all_finite<S>(out.values(), "prelu");
  maybe_record<S>({&x, &slopes}, out, [x, slopes, out, f, shared]() mutable {
    if (!out.has_grad()) return;
    std::span<const S> go = out.grad();
    const S* px = x.data();
    const S* pa = slopes.data();
    if (x.requires_grad()) {
      std::span<S> gx = x.grad_buffer();
      for (int64_t i = 0; i < x.numel(); ++i) {
        const S a = shared ? pa[0] : pa[i % f];
        gx[i] += px[i] >= S(0) ? go[i] : a * go[i];
      }
      ensure_grad_finite(x, "prelu");
    }
    if (slopes.requires_grad()) {
      std::span<S> ga = slopes.grad_buffer();
      for (int64_t i = 0; i < x.numel(); ++i) {
        if (px[i] < S(0)) ga[shared ? 0 : i % f] += px[i] * go[i];
      }
      ensure_grad_finite(slopes, "prelu");
    }
  });
  return out;
}

template <typename S>
TensorT<S> clamp(TensorT<S> x, S lo, S hi) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) po[i] = std::min(hi, std::max(lo, px[i]));
  ensure_all_finite<S>(out.values(), "clamp");
  maybe_record<S>({&x}, out, [x, out, lo, hi]() mutable {
    if (!out.has_grad()) return;
    std::span<const S> go = out.grad();
    std::span<S> gx = x.grad_buffer();
    const S* px = x.data();
    for (size_t i = 0; i < go.size(); ++i) {
      if (px[i] > lo && px[i] < hi) gx[i] += go[i];
    }
    ensure_grad_finite(x, "clamp");
  });
  return out;
}

template <typename S>
TensorT<S> log_op(TensorT<S> x) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) po[i] = std::log(px[i]);
  ensure_all_finite<S>(out.values(), "log");
  maybe_record<S>({&x}, out, [x, out]() mutable {
    if (!out.has_grad()) return;
    std::span<const S> go = out.grad();
    std::span<S> gx = x.grad_buffer();
    const S* px = x.data();
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] / px[i];
    ensure_grad_finite(x, "log");
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
TensorT<S> sum(TensorT<S> x) {
  S acc = S(0);
  for (S v : x.values()) acc += v;
  TensorT<S> out = TensorT<S>::scalar(acc);
  ensure_all_finite<S>(out.values(), "sum");
  maybe_record<S>({&x}, out, [x, out]() mutable {
    if (!out.has_grad()) return;
    const S g = out.grad()[0];
    std::span<S> gx = x.grad_buffer();
    for (auto& v : gx) v += g;
    ensure_grad_finite(x, "sum");
  });
  return out;
}

template <typename S>
TensorT<S> mean(TensorT<S> x) {
  return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

// ---------------------------------------------------------------------------
// Data movement

template <typename S>
TensorT<S> reshape(TensorT<S> x, Shape shape) {
  check_shape_valid(shape);
  if (shape_numel(shape) != x.numel()) {
    throw ShapeMismatch("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  TensorT<S> out = TensorT<S>::from_values(std::move(shape),
                                           std::vector<S>(x.values().begin(), x.values().end()));
  maybe_record<S>({&x}, out, [x, out]() mutable {
    if (!out.has_grad()) return;
    std::span<const S> go = out.grad();
    std::span<S> gx = x.grad_buffer();
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    ensure_grad_finite(x, "reshape");
  });
  return out;
}

namespace detail {

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// out[idx] = in[perm(idx)] index mapping for permute.
template <typename S, typename Fn>
void permute_walk(const Shape& out_shape, const std::vector<int64_t>& in_strides_permuted, Fn&& f) {
  const int rank = static_cast<int>(out_shape.size());
  std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
  const int64_t total = shape_numel(out_shape);
  int64_t in_off = 0;
  for (int64_t o = 0; o < total; ++o) {
    f(o, in_off);
    for (int ax = rank - 1; ax >= 0; --ax) {
      idx[static_cast<size_t>(ax)]++;
      in_off += in_strides_permuted[static_cast<size_t>(ax)];
      if (idx[static_cast<size_t>(ax)] < out_shape[static_cast<size_t>(ax)]) break;
      in_off -= in_strides_permuted[static_cast<size_t>(ax)] * out_shape[static_cast<size_t>(ax)];
      idx[static_cast<size_t>(ax)] = 0;
    }
  }
}

}  // namespace detail

template <typename S>
TensorT<S> permute(TensorT<S> x, std::vector<int> axes) {
  const int rank = x.rank();
  if (static_cast<int>(axes.size()) != rank) {
    throw ShapeMismatch("permute: axes count " + std::to_string(axes.size()) + " vs rank " +
                        std::to_string(rank));
  }
  std::vector<bool> seen(static_cast<size_t>(rank), false);
  for (int a : axes) {
    if (a < 0 || a >= rank || seen[static_cast<size_t>(a)]) {
      throw ShapeMismatch("permute: invalid axes for rank " + std::to_string(rank));
    }
    seen[static_cast<size_t>(a)] = true;
  }
  Shape out_shape(static_cast<size_t>(rank));
  const auto in_strides = detail::row_major_strides(x.shape());
  std::vector<int64_t> perm_strides(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    out_shape[static_cast<size_t>(i)] = x.dim(axes[static_cast<size_t>(i)]);
    perm_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(axes[static_cast<size_t>(i)])];
  }
  TensorT<S> out = TensorT<S>::zeros(out_shape);
  {
    const S* px = x.data();
    S* po = out.data();
    detail::permute_walk<S>(out_shape, perm_strides, [&](int64_t o, int64_t i) { po[o] = px[i]; });
  }
  maybe_record<S>({&x}, out, [x, out, out_shape, perm_strides]() mutable {
    if (!out.has_grad()) return;
    std::span<const S> go = out.grad();
    std::span<S> gx = x.grad_buffer();
    detail::permute_walk<S>(out_shape, perm_strides, [&](int64_t o, int64_t i) { gx[i] += go[o]; });
    ensure_grad_finite(x, "permute");
  });
  return out;
}

// Contiguous slice along the leading axis.
template <typename S>
TensorT<S> slice0(TensorT<S> x, int64_t start, int64_t len) {
  if (start < 0 || len < 1 || start + len > x.dim(0)) {
    throw ShapeMismatch("slice0: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                        ") outside axis of extent " + std::to_string(x.dim(0)));
  }
  Shape out_shape = x.shape();
  out_shape[0] = len;
  const int64_t row = x.numel() / x.dim(0);
  TensorT<S> out = TensorT<S>::from_values(
      out_shape, std::vector<S>(x.values().begin() + start * row, x.values().begin() + (start + len) * row));
  maybe_record<S>({&x}, out, [x, out, start, row]() mutable {
    if (!out.has_grad()) return;
    std::span<const S> go = out.grad();
    std::span<S> gx = x.grad_buffer();
    for (size_t i = 0; i < go.size(); ++i) gx[static_cast<size_t>(start * row) + i] += go[i];
    ensure_grad_finite(x, "slice0");
  });
  return out;
}

// Stacks equally shaped tensors along a new leading axis.
template <typename S>
TensorT<S> stack0(std::vector<TensorT<S>> parts) {
  if (parts.empty()) throw ShapeMismatch("stack0: empty input");
  const Shape& base = parts[0].shape();
  for (const auto& p : parts) {
    if (p.shape() != base) {
      throw ShapeMismatch("stack0: mismatched part shapes " + shape_str(base) + " vs " +
                          shape_str(p.shape()));
    }
  }
  Shape out_shape;
  out_shape.push_back(static_cast<int64_t>(parts.size()));
  out_shape.insert(out_shape.end(), base.begin(), base.end());
  TensorT<S> out = TensorT<S>::zeros(out_shape);
  const int64_t row = parts[0].numel();
  for (size_t p = 0; p < parts.size(); ++p) {
    std::copy(parts[p].values().begin(), parts[p].values().end(), out.data() + static_cast<int64_t>(p) * row);
  }
  TapeT<S>* tape = TapeT<S>::active();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    out.set_requires_grad(true);
    tape->record([parts, out, row]() mutable {
      if (!out.has_grad()) return;
      std::span<const S> go = out.grad();
      for (size_t p = 0; p < parts.size(); ++p) {
        if (!parts[p].requires_grad()) continue;
        TensorT<S> t = parts[p];
        std::span<S> g = t.grad_buffer();
        const S* src = go.data() + static_cast<int64_t>(p) * row;
        for (int64_t i = 0; i < row; ++i) g[static_cast<size_t>(i)] += src[i];
        ensure_grad_finite(t, "stack0");
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix multiply: rank 2 or 3 operands; rank-3 batch extents must agree or
// broadcast from 1; a rank-2 operand is shared across the batch.

template <typename S>
TensorT<S> matmul(TensorT<S> a, TensorT<S> b) {
  const int ra = a.rank(), rb = b.rank();
  if ((ra != 2 && ra != 3) || (rb != 2 && rb != 3)) {
    throw ShapeMismatch("matmul: ranks must be 2 or 3, got " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  }
  const int64_t m = a.dim(ra - 2), ka = a.dim(ra - 1);
  const int64_t kb = b.dim(rb - 2), n = b.dim(rb - 1);
  if (ka != kb) {
    throw ShapeMismatch("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  }
  const int64_t ba = (ra == 3) ? a.dim(0) : 0;
  const int64_t bb = (rb == 3) ? b.dim(0) : 0;
  int64_t batch = std::max<int64_t>({ba, bb, 0});
  if (ba > 1 && bb > 1 && ba != bb) {
    throw ShapeMismatch("matmul: batch extents disagree, " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  }
  const bool batched = (ra == 3 || rb == 3);
  if (!batched) batch = 1;
  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  TensorT<S> out = TensorT<S>::zeros(out_shape);
  const int64_t sa = (ba > 1) ? m * ka : 0;  // per-batch operand strides (0 = shared)
  const int64_t sb = (bb > 1) ? ka * n : 0;
  for (int64_t bi = 0; bi < batch; ++bi) {
    gemm_nn_acc(a.data() + bi * sa, b.data() + bi * sb, out.data() + bi * m * n, m, ka, n);
  }
  ensure_all_finite<S>(out.values(), "matmul");
  maybe_record<S>({&a, &b}, out, [a, b, out, batch, m, n, ka, sa, sb]() mutable {
    if (!out.has_grad()) return;
    const S* go = out.grad().data();
    if (a.requires_grad()) {
      S* ga = a.grad_buffer().data();
      for (int64_t bi = 0; bi < batch; ++bi) {
        gemm_nt_acc(go + bi * m * n, b.data() + bi * sb, ga + bi * sa, m, n, ka);
      }
      ensure_grad_finite(a, "matmul");
    }
    if (b.requires_grad()) {
      S* gb = b.grad_buffer().data();
      for (int64_t bi = 0; bi < batch; ++bi) {
        gemm_tn_acc(a.data() + bi * sa, go + bi * m * n, gb + bi * sb, m, ka, n);
      }
      ensure_grad_finite(b, "matmul");
    }
  });
  return out;
}

// y = x @ w + bias;  x: [rows, in] or [batch, rows, in], w: [in, out],
// bias: [out] or undefined.
template <typename S>
TensorT<S> linear(TensorT<S> x, TensorT<S> w, TensorT<S> bias) {
  if (w.rank() != 2) throw ShapeMismatch("linear: weight must be rank 2, got " + shape_str(w.shape()));
  const int64_t in = w.dim(0), out_f = w.dim(1);
  if (x.shape().back() != in) {
    throw ShapeMismatch("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f)) {
    throw ShapeMismatch("linear: bias " + shape_str(bias.shape()) + " vs weight " + shape_str(w.shape()));
  }
  const int64_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  TensorT<S> out = TensorT<S>::zeros(out_shape);
  gemm_nn_acc(x.data(), w.data(), out.data(), rows, in, out_f);
  if (bias.defined()) {
    S* po = out.data();
    const S* pb = bias.data();
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t j = 0; j < out_f; ++j) po[r * out_f + j] += pb[j];
    }
  }
  ensure_all_finite<S>(out.values(), "linear");
  maybe_record<S>({&x, &w, &bias}, out, [x, w, bias, out, rows, in, out_f]() mutable {
    if (!out.has_grad()) return;
    const S* go = out.grad().data();
    if (x.requires_grad()) {
      gemm_nt_acc(go, w.data(), x.grad_buffer().data(), rows, out_f, in);
      ensure_grad_finite(x, "linear");
    }
    if (w.requires_grad()) {
      gemm_tn_acc(x.data(), go, w.grad_buffer().data(), rows, in, out_f);
      ensure_grad_finite(w, "linear");
    }
    if (bias.defined() && bias.requires_grad()) {
      std::span<S> gb = bias.grad_buffer();
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < out_f; ++j) gb[static_cast<size_t>(j)] += go[r * out_f + j];
      }
      ensure_grad_finite(bias, "linear");
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// 1-D convolution (cross-correlation convention) and its transpose.
// x: [ch_in, T], w: [ch_out, ch_in, K], bias: [ch_out] or undefined.

template <typename S>
TensorT<S> conv1d(TensorT<S> x, TensorT<S> w, TensorT<S> bias, int64_t stride,
                  int64_t padding) {
  if (stride < 1 || padding < 0) {
    throw InvalidConfig("conv1d: stride must be >= 1 and padding >= 0");
  }
  if (x.rank() != 2 || w.rank() != 3) {
    throw ShapeMismatch("conv1d: expected x [ch,T] and w [out,in,K], got " + shape_str(x.shape()) +
                        " and " + shape_str(w.shape()));
  }
  const int64_t ci = x.dim(0), t_in = x.dim(1);
  const int64_t co = w.dim(0), k = w.dim(2);
  if (w.dim(1) != ci) {
    throw ShapeMismatch("conv1d: input channels " + shape_str(x.shape()) + " vs weight " +
                        shape_str(w.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co)) {
    throw ShapeMismatch("conv1d: bias " + shape_str(bias.shape()) + " vs weight " + shape_str(w.shape()));
  }
  if (t_in + 2 * padding < k) {
    throw ShapeMismatch("conv1d: input length " + std::to_string(t_in) + " too short for kernel " +
                        std::to_string(k) + " with padding " + std::to_string(padding));
  }
  const int64_t t_out = (t_in + 2 * padding - k) / stride + 1;
  TensorT<S> out = TensorT<S>::zeros({co, t_out});
  {
    S* po = out.data();
    const S* px = x.data();
    const S* pw = w.data();
    for (int64_t o = 0; o < co; ++o) {
      const S b = bias.defined() ? bias.data()[o] : S(0);
      for (int64_t t = 0; t < t_out; ++t) {
        S acc = b;
        const int64_t base = t * stride - padding;
        for (int64_t i = 0; i < ci; ++i) {
          const S* xrow = px + i * t_in;
          const S* wrow = pw + (o * ci + i) * k;
          const int64_t k0 = std::max<int64_t>(0, -base);
          const int64_t k1 = std::min<int64_t>(k, t_in - base);
          for (int64_t kk = k0; kk < k1; ++kk) acc += xrow[base + kk] * wrow[kk];
        }
        po[o * t_out + t] = acc;
      }
    }
  }
  ensure_all_finite<S>(out.values(), "conv1d");
  maybe_record<S>({&x, &w, &bias}, out, [x, w, bias, out, ci, t_in, co, k, t_out, stride, padding]() mutable {
    if (!out.has_grad()) return;
    const S* go = out.grad().data();
    if (x.requires_grad()) {
      S* gx = x.grad_buffer().data();
      const S* pw = w.data();
      for (int64_t o = 0; o < co; ++o) {
        for (int64_t t = 0; t < t_out; ++t) {
          const S g = go[o * t_out + t];
          const int64_t base = t * stride - padding;
          for (int64_t i = 0; i < ci; ++i) {
            const S* wrow = pw + (o * ci + i) * k;
            const int64_t k0 = std::max<int64_t>(0, -base);
            const int64_t k1 = std::min<int64_t>(k, t_in - base);
            for (int64_t kk = k0; kk < k1; ++kk) gx[i * t_in + base + kk] += g * wrow[kk];
          }
        }
      }
      ensure_grad_finite(x, "conv1d");
    }
    if (w.requires_grad()) {
      S* gw = w.grad_buffer().data();
      const S* px = x.data();
      for (int64_t o = 0; o < co; ++o) {
        for (int64_t t = 0; t < t_out; ++t) {
          const S g = go[o * t_out + t];
          const int64_t base = t * stride - padding;
          for (int64_t i = 0; i < ci; ++i) {
            const S* xrow = px + i * t_in;
            const int64_t k0 = std::max<int64_t>(0, -base);
            const int64_t k1 = std::min<int64_t>(k, t_in - base);
            for (int64_t kk = k0; kk < k1; ++kk) gw[(o * ci + i) * k + kk] += g * xrow[base + kk];
          }
        }
      }
      ensure_grad_finite(w, "conv1d");
    }
    if (bias.defined() && bias.requires_grad()) {
      std::span<S> gb = bias.grad_buffer();
      for (int64_t o = 0; o < co; ++o) {
        S acc = S(0);
        for (int64_t t = 0; t < t_out; ++t) acc += go[o * t_out + t];
        gb[static_cast<size_t>(o)] += acc;
      }
      ensure_grad_finite(bias, "conv1d");
    }
  });
  return out;
}

// x: [ch_in, T], w: [ch_in, ch_out, K], bias: [ch_out] or undefined.
// Output length (T-1)*stride + K; adjoint of conv1d with zero padding.
template <typename S>
TensorT<S> conv1d_transpose(TensorT<S> x, TensorT<S> w, TensorT<S> bias,
                            int64_t stride) {
  if (stride < 1) throw InvalidConfig("conv1d_transpose: stride must be >= 1");
  if (x.rank() != 2 || w.rank() != 3) {
    throw ShapeMismatch("conv1d_transpose: expected x [ch,T] and w [in,out,K], got " +
                        shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  const int64_t ci = x.dim(0), t_in = x.dim(1);
  const int64_t co = w.dim(1), k = w.dim(2);
  if (w.dim(0) != ci) {
    throw ShapeMismatch("conv1d_transpose: input channels " + shape_str(x.shape()) + " vs weight " +
                        shape_str(w.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co)) {
    throw ShapeMismatch("conv1d_transpose: bias " + shape_str(bias.shape()) + " vs weight " +
                        shape_str(w.shape()));
  }
  const int64_t t_out = (t_in - 1) * stride + k;
  TensorT<S> out = TensorT<S>::zeros({co, t_out});
  {
    S* po = out.data();
    const S* px = x.data();
    const S* pw = w.data();
    if (bias.defined()) {
      for (int64_t o = 0; o < co; ++o) {
        const S b = bias.data()[o];
        for (int64_t t = 0; t < t_out; ++t) po[o * t_out + t] = b;
      }
    }
    for (int64_t i = 0; i < ci; ++i) {
      for (int64_t t = 0; t < t_in; ++t) {
        const S xv = px[i * t_in + t];
        for (int64_t o = 0; o < co; ++o) {
          const S* wrow = pw + (i * co + o) * k;
          S* orow = po + o * t_out + t * stride;
          for (int64_t kk = 0; kk < k; ++kk) orow[kk] += xv * wrow[kk];
        }
      }
    }
  }
  ensure_all_finite<S>(out.values(), "conv1d_transpose");
  maybe_record<S>({&x, &w, &bias}, out, [x, w, bias, out, ci, t_in, co, k, t_out, stride]() mutable {
    if (!out.has_grad()) return;
    const S* go = out.grad().data();
    if (x.requires_grad()) {
      S* gx = x.grad_buffer().data();
      const S* pw = w.data();
      for (int64_t i = 0; i < ci; ++i) {
        for (int64_t t = 0; t < t_in; ++t) {
          S acc = S(0);
          for (int64_t o = 0; o < co; ++o) {
            const S* wrow = pw + (i * co + o) * k;
            const S* grow = go + o * t_out + t * stride;
            for (int64_t kk = 0; kk < k; ++kk) acc += grow[kk] * wrow[kk];
          }
          gx[i * t_in + t] += acc;
        }
      }
      ensure_grad_finite(x, "conv1d_transpose");
    }
    if (w.requires_grad()) {
      S* gw = w.grad_buffer().data();
      const S* px = x.data();
      for (int64_t i = 0; i < ci; ++i) {
        for (int64_t t = 0; t < t_in; ++t) {
          const S xv = px[i * t_in + t];
          for (int64_t o = 0; o < co; ++o) {
            const S* grow = go + o * t_out + t * stride;
            S* wrow = gw + (i * co + o) * k;
            for (int64_t kk = 0; kk < k; ++kk) wrow[kk] += xv * grow[kk];
          }
        }
      }
      ensure_grad_finite(w, "conv1d_transpose");
    }
    if (bias.defined() && bias.requires_grad()) {
      std::span<S> gb = bias.grad_buffer();
      for (int64_t o = 0; o < co; ++o) {
        S acc = S(0);
        for (int64_t t = 0; t < t_out; ++t) acc += go[o * t_out + t];
        gb[static_cast<size_t>(o)] += acc;
      }
      ensure_grad_finite(bias, "conv1d_transpose");
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis, then affine gamma/beta.

template <typename S>
TensorT<S> layer_norm(TensorT<S> x, TensorT<S> gamma, TensorT<S> beta, S eps) {
  if (eps <= S(0)) throw InvalidConfig("layer_norm: eps must be positive");
  const int64_t f = x.shape().back();
  if (gamma.rank() != 1 || gamma.dim(0) != f || beta.rank() != 1 || beta.dim(0) != f) {
    throw ShapeMismatch("layer_norm: gamma/beta must be [" + std::to_string(f) + "], got " +
                        shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  const int64_t rows = x.numel() / f;
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  // Saved per-row statistics; the backward recomputes x-hat from these.
  auto stats = std::make_shared<std::vector<S>>(static_cast<size_t>(rows) * 2);
  {
    const S* px = x.data();
    const S* pg = gamma.data();
    const S* pb = beta.data();
    S* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
      const S* xr = px + r * f;
      S mu = S(0);
      for (int64_t j = 0; j < f; ++j) mu += xr[j];
      mu /= static_cast<S>(f);
      S var = S(0);
      for (int64_t j = 0; j < f; ++j) {
        const S d = xr[j] - mu;
        var += d * d;
      }
      var /= static_cast<S>(f);
      const S inv = S(1) / std::sqrt(var + eps);
      (*stats)[static_cast<size_t>(r * 2)] = mu;
      (*stats)[static_cast<size_t>(r * 2 + 1)] = inv;
      S* orow = po + r * f;
      for (int64_t j = 0; j < f; ++j) orow[j] = pg[j] * (xr[j] - mu) * inv + pb[j];
    }
  }
  ensure_all_finite<S>(out.values(), "layer_norm");
  maybe_record<S>({&x, &gamma, &beta}, out, [x, gamma, beta, out, stats, rows, f]() mutable {
    if (!out.has_grad()) return;
    const S* go = out.grad().data();
    const S* px = x.data();
    const S* pg = gamma.data();
    S* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
    S* gg = gamma.requires_grad() ? gamma.grad_buffer().data() : nullptr;
    S* gb = beta.requires_grad() ? beta.grad_buffer().data() : nullptr;
    for (int64_t r = 0; r < rows; ++r) {
      const S mu = (*stats)[static_cast<size_t>(r * 2)];
      const S inv = (*stats)[static_cast<size_t>(r * 2 + 1)];
      const S* xr = px + r * f;
      const S* gr = go + r * f;
      S m1 = S(0), m2 = S(0);
      for (int64_t j = 0; j < f; ++j) {
        const S xhat = (xr[j] - mu) * inv;
        const S h = pg[j] * gr[j];
        m1 += h;
        m2 += h * xhat;
        if (gg) gg[j] += gr[j] * xhat;
        if (gb) gb[j] += gr[j];
      }
      if (gx) {
        m1 /= static_cast<S>(f);
        m2 /= static_cast<S>(f);
        S* gxr = gx + r * f;
        for (int64_t j = 0; j < f; ++j) {
          const S xhat = (xr[j] - mu) * inv;
          gxr[j] += inv * (pg[j] * gr[j] - m1 - xhat * m2);
        }
      }
    }
    if (x.requires_grad()) ensure_grad_finite(x, "layer_norm");
    if (gamma.requires_grad()) ensure_grad_finite(gamma, "layer_norm");
    if (beta.requires_grad()) ensure_grad_finite(beta, "layer_norm");
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax along an axis.

template <typename S>
TensorT<S> softmax(TensorT<S> x, int axis) {
  const int rank = x.rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeMismatch("softmax: axis out of range for " + shape_str(x.shape()));
  }
  const int64_t ax = x.dim(axis);
  int64_t inner = 1;
  for (int i = axis + 1; i < rank; ++i) inner *= x.dim(i);
  const int64_t outer = x.numel() / (ax * inner);
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  {
    const S* px = x.data();
    S* po = out.data();
    for (int64_t u = 0; u < outer; ++u) {
      for (int64_t v = 0; v < inner; ++v) {
        const int64_t base = u * ax * inner + v;
        S mx = px[base];
        for (int64_t j = 1; j < ax; ++j) mx = std::max(mx, px[base + j * inner]);
        S denom = S(0);
        for (int64_t j = 0; j < ax; ++j) {
          const S e = std::exp(px[base + j * inner] - mx);
          po[base + j * inner] = e;
          denom += e;
        }
        for (int64_t j = 0; j < ax; ++j) po[base + j * inner] /= denom;
      }
    }
  }
  ensure_all_finite<S>(out.values(), "softmax");
  maybe_record<S>({&x}, out, [x, out, outer, inner, ax]() mutable {
    if (!out.has_grad()) return;
    const S* go = out.grad().data();
    const S* po = out.data();
    S* gx = x.grad_buffer().data();
    for (int64_t u = 0; u < outer; ++u) {
      for (int64_t v = 0; v < inner; ++v) {
        const int64_t base = u * ax * inner + v;
        S dotp = S(0);
        for (int64_t j = 0; j < ax; ++j) dotp += go[base + j * inner] * po[base + j * inner];
        for (int64_t j = 0; j < ax; ++j) {
          const int64_t off = base + j * inner;
          gx[off] += po[off] * (go[off] - dotp);
        }
      }
    }
    ensure_grad_finite(x, "softmax");
  });
  return out;
}

}  // namespace percep
