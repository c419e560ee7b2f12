#pragma once

// Dense row-major tensors with a reverse-mode gradient tape.
//
// Every op that touches a tensor with requires_grad() records a backward
// closure on the thread's active Tape. backward(loss) zeroes intermediate
// gradients, seeds d(loss)/d(loss) = 1 and replays the tape in reverse, so
// leaf gradients accumulate across calls until the caller zeroes them.
// Tape::reset() drops every recorded closure; nothing is retained implicitly.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "poemkit/errors.hpp"

namespace poemkit {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

// ---------------------------------------------------------------------------
// Tape

class Tape {
 public:
  void record(std::function<void()> backward, std::function<void()> clear) {
    entries_.push_back({std::move(backward), std::move(clear)});
  }

  void reset() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

  void clear_intermediate_grads() {
    for (auto& e : entries_) e.clear();
  }

  void replay_backward() {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
  }

 private:
  struct Entry {
    std::function<void()> backward;
    std::function<void()> clear;
  };
  std::vector<Entry> entries_;
};

namespace detail {
inline Tape*& active_tape_slot() {
  thread_local Tape default_tape;
  thread_local Tape* active = &default_tape;
  return active;
}
inline bool& grad_mode_slot() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline Tape& active_tape() { return *detail::active_tape_slot(); }
inline bool grad_enabled() { return detail::grad_mode_slot(); }

/// Routes recording to a private tape for the lifetime of the scope.
class TapeScope {
 public:
  TapeScope() : previous_(detail::active_tape_slot()) { detail::active_tape_slot() = &tape_; }
  ~TapeScope() { detail::active_tape_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  Tape& tape() { return tape_; }

 private:
  Tape tape_;
  Tape* previous_;
};

/// Disables recording (inference, finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_slot()) { detail::grad_mode_slot() = false; }
  ~NoGradGuard() { detail::grad_mode_slot() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool has_grad = false;

  void ensure_grad() {
    if (!has_grad) {
      grad.assign(data.size(), T{0});
      has_grad = true;
    }
  }
  void clear_grad() {
    grad.clear();
    has_grad = false;
  }
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T{0}, requires_grad);
  }
  static BasicTensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T{1}, requires_grad);
  }
  static BasicTensor scalar(T value, bool requires_grad = false) {
    return BasicTensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  /// Extent along `axis`; negative axes count from the back.
  std::size_t dim(int axis) const { return impl_->shape[normalize_axis(axis)]; }

  std::size_t normalize_axis(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                       shape_str(shape()));
    }
    return static_cast<std::size_t>(a);
  }

  std::span<const T> data() const { return impl_->data; }
  /// In-place access, meant for optimizers and finite differences on leaves.
  std::span<T> mutable_data() { return impl_->data; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  T at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeError("at(): index rank mismatch");
    std::size_t flat = 0;
    std::size_t i = 0;
    for (std::size_t v : index) {
      if (v >= impl_->shape[i]) throw ShapeError("at(): index out of range");
      flat = flat * impl_->shape[i] + v;
      ++i;
    }
    return impl_->data[flat];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!impl_->leaf) throw Error("set_requires_grad on a non-leaf tensor");
    impl_->requires_grad = on;
  }
  bool is_leaf() const { return impl_->leaf; }

  bool has_grad() const { return impl_->has_grad; }
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad() { impl_->clear_grad(); }

  /// Gradient as a fresh constant tensor (zeros when never materialized).
  BasicTensor grad_tensor() const {
    if (!impl_->has_grad) return zeros(shape());
    return BasicTensor(shape(), impl_->grad);
  }

  /// Leaf copy of the values, detached from the tape.
  BasicTensor detach() const { return BasicTensor(shape(), impl_->data); }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

// ---------------------------------------------------------------------------
// Op plumbing

namespace detail {

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T>
bool any_requires_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

/// Gradient buffer of an input, or nullptr when it does not track gradients.
template <typename T>
std::vector<T>* grad_sink(const ImplPtr<T>& impl) {
  if (!impl->requires_grad) return nullptr;
  impl->ensure_grad();
  return &impl->grad;
}

/// Wraps `data` into the op result. If `track`, the closure `backward`
/// (called with the output gradient) is recorded on the active tape.
template <typename T, typename Backward>
BasicTensor<T> finish(Shape shape, std::vector<T> data, bool track, Backward&& backward) {
  BasicTensor<T> out(std::move(shape), std::move(data));
  if (track) {
    auto impl = out.impl();
    impl->requires_grad = true;
    impl->leaf = false;
    std::weak_ptr<TensorImpl<T>> weak = impl;
    active_tape().record(
        [impl, fn = std::forward<Backward>(backward)]() {
          if (impl->has_grad) fn(impl->grad);
        },
        [weak]() {
          if (auto p = weak.lock()) p->clear_grad();
        });
  }
  return out;
}

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
    out[i] = ea == 1 ? eb : ea;
  }
  return out;
}

/// For each flat index of `out`, the flat index of the broadcast source `in`.
inline std::vector<std::size_t> broadcast_map(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t ax = in.size() - 1 - k;
    const std::size_t oax = r - 1 - k;
    stride[oax] = in[ax] == 1 ? 0 : s;
    s *= in[ax];
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = offset;
    for (std::size_t ax = r; ax-- > 0;) {
      ++counter[ax];
      offset += stride[ax];
      if (counter[ax] < out[ax]) break;
      offset -= stride[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  return map;
}

/// Elementwise binary op with numpy broadcasting. `f(x, y)` is the value,
/// `dfx(x, y, z)` / `dfy(x, y, z)` the partials given the result z.
template <typename T, typename F, typename DX, typename DY>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* name, F f, DX dfx,
                      DY dfy) {
  const bool same = a.shape() == b.shape();
  Shape out_shape = same ? a.shape() : broadcast_shapes(a.shape(), b.shape(), name);
  const std::size_t n = shape_numel(out_shape);
  std::vector<std::size_t> ma;
  std::vector<std::size_t> mb;
  if (!same) {
    ma = broadcast_map(a.shape(), out_shape);
    mb = broadcast_map(b.shape(), out_shape);
  }
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<T> out(n);
  if (same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[i], bd[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[ma[i]], bd[mb[i]]);
  }
  const bool track = any_requires_grad<T>({&a, &b});
  std::vector<T> result_copy;
  if (track) result_copy = out;
  return finish<T>(std::move(out_shape), std::move(out), track,
                   [ai = a.impl(), bi = b.impl(), ma = std::move(ma), mb = std::move(mb),
                    z = std::move(result_copy), same, dfx, dfy](const std::vector<T>& g) {
                     auto* ga = grad_sink(ai);
                     auto* gb = grad_sink(bi);
                     const auto& x = ai->data;
                     const auto& y = bi->data;
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       const std::size_t ia = same ? i : ma[i];
                       const std::size_t ib = same ? i : mb[i];
                       if (ga) (*ga)[ia] += g[i] * dfx(x[ia], y[ib], z[i]);
                       if (gb) (*gb)[ib] += g[i] * dfy(x[ia], y[ib], z[i]);
                     }
                   });
}

/// Elementwise unary op; `df(x, y)` is the derivative given input and output.
template <typename T, typename F, typename DF>
BasicTensor<T> unary(const BasicTensor<T>& a, F f, DF df) {
  const auto ad = a.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = f(ad[i]);
  const bool track = any_requires_grad<T>({&a});
  std::vector<T> result_copy;
  if (track) result_copy = out;
  return finish<T>(a.shape(), std::move(out), track,
                   [ai = a.impl(), y = std::move(result_copy), df](const std::vector<T>& g) {
                     auto* ga = grad_sink(ai);
                     if (!ga) return;
                     for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * df(ai->data[i], y[i]);
                   });
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
inline void split_axis(const Shape& shape, std::size_t axis, std::size_t& outer, std::size_t& n,
                       std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T{1}; },
      [](T, T, T) { return T{1}; });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T{1}; },
      [](T, T, T) { return T{-1}; });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T{1} / y; },
      [](T, T y, T z) { return -z / y; });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
BasicTensor<T> shift(const BasicTensor<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x + s; }, [](T, T) { return T{1}; });
}

template <typename T>
BasicTensor<T> neg(const BasicTensor<T>& a) {
  return scale(a, T{-1});
}

template <typename T>
BasicTensor<T> square(const BasicTensor<T>& a) {
  return detail::unary(a, [](T x) { return x * x; }, [](T x, T) { return T{2} * x; });
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& a) {
  return detail::unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

template <typename T>
BasicTensor<T> sqrt(const BasicTensor<T>& a) {
  return detail::unary(a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T{0.5} / y; });
}

template <typename T>
BasicTensor<T> sin(const BasicTensor<T>& a) {
  return detail::unary(a, [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); });
}

template <typename T>
BasicTensor<T> cos(const BasicTensor<T>& a) {
  return detail::unary(a, [](T x) { return std::cos(x); }, [](T x, T) { return -std::sin(x); });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  return detail::unary(
      a, [](T x) { return x > T{0} ? x : T{0}; }, [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

/// max(x, 0)^2, the quadratic hinge.
template <typename T>
BasicTensor<T> hinge_sq(const BasicTensor<T>& a) {
  return detail::unary(
      a, [](T x) { return x > T{0} ? x * x : T{0}; }, [](T x, T) { return x > T{0} ? T{2} * x : T{0}; });
}

template <typename T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) { return add(a, b); }
template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) { return sub(a, b); }
template <typename T>
BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) { return mul(a, b); }
template <typename T>
BasicTensor<T> operator/(const BasicTensor<T>& a, const BasicTensor<T>& b) { return div(a, b); }
template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a) { return neg(a); }
template <typename T>
BasicTensor<T> operator*(const BasicTensor<T>& a, T s) { return scale(a, s); }
template <typename T>
BasicTensor<T> operator*(T s, const BasicTensor<T>& a) { return scale(a, s); }
template <typename T>
BasicTensor<T> operator+(const BasicTensor<T>& a, T s) { return shift(a, s); }
template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a, T s) { return shift(a, -s); }

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  const auto d = a.data();
  T total{0};
  for (T v : d) total += v;
  const bool track = detail::any_requires_grad<T>({&a});
  return detail::finish<T>(Shape{}, std::vector<T>{total}, track, [ai = a.impl()](const std::vector<T>& g) {
    auto* ga = detail::grad_sink(ai);
    if (!ga) return;
    for (auto& v : *ga) v += g[0];
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a, int axis, bool keepdim = false) {
  const std::size_t ax = a.normalize_axis(axis);
  std::size_t outer = 0, n = 0, inner = 0;
  detail::split_axis(a.shape(), ax, outer, n, inner);
  const auto d = a.data();
  std::vector<T> out(outer * inner, T{0});
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < n; ++j) {
      const T* src = d.data() + (o * n + j) * inner;
      T* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  Shape s = a.shape();
  if (keepdim) {
    s[ax] = 1;
  } else {
    s.erase(s.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  const bool track = detail::any_requires_grad<T>({&a});
  return detail::finish<T>(std::move(s), std::move(out), track,
                           [ai = a.impl(), outer, n, inner](const std::vector<T>& g) {
                             auto* ga = detail::grad_sink(ai);
                             if (!ga) return;
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t j = 0; j < n; ++j)
                                 for (std::size_t i = 0; i < inner; ++i)
                                   (*ga)[(o * n + j) * inner + i] += g[o * inner + i];
                           });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.numel()));
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a, int axis, bool keepdim = false) {
  const T n = static_cast<T>(a.dim(axis));
  return scale(sum(a, axis, keepdim), T{1} / n);
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  const bool track = detail::any_requires_grad<T>({&a});
  return detail::finish<T>(std::move(shape), std::move(out), track, [ai = a.impl()](const std::vector<T>& g) {
    auto* ga = detail::grad_sink(ai);
    if (!ga) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
}

/// General axis permutation: out.shape[i] = a.shape[perm[i]].
template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r) throw ShapeError("permute: rank mismatch for " + shape_str(a.shape()));
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[perm[i]];
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * a.shape()[i];
  const std::size_t n = a.numel();
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> counter(r, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += counter[i] * in_stride[perm[i]];
    map[flat] = src;
    for (std::size_t ax = r; ax-- > 0;) {
      if (++counter[ax] < out_shape[ax]) break;
      counter[ax] = 0;
    }
  }
  const auto d = a.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = d[map[i]];
  const bool track = detail::any_requires_grad<T>({&a});
  return detail::finish<T>(std::move(out_shape), std::move(out), track,
                           [ai = a.impl(), map = std::move(map)](const std::vector<T>& g) {
                             auto* ga = detail::grad_sink(ai);
                             if (!ga) return;
                             for (std::size_t i = 0; i < g.size(); ++i) (*ga)[map[i]] += g[i];
                           });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a, int axis0 = -2, int axis1 = -1) {
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[a.normalize_axis(axis0)], perm[a.normalize_axis(axis1)]);
  return permute(a, perm);
}

/// Elements [begin, end) along `axis`.
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& a, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = a.normalize_axis(axis);
  if (begin > end || end > a.shape()[ax]) {
    throw ShapeError("slice: [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(ax) + " of " + shape_str(a.shape()));
  }
  std::size_t outer = 0, n = 0, inner = 0;
  detail::split_axis(a.shape(), ax, outer, n, inner);
  const std::size_t m = end - begin;
  std::vector<T> out(outer * m * inner);
  const auto d = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(d.data() + (o * n + begin) * inner, m * inner, out.data() + o * m * inner);
  Shape s = a.shape();
  s[ax] = m;
  const bool track = detail::any_requires_grad<T>({&a});
  return detail::finish<T>(std::move(s), std::move(out), track,
                           [ai = a.impl(), outer, n, inner, m, begin](const std::vector<T>& g) {
                             auto* ga = detail::grad_sink(ai);
                             if (!ga) return;
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t i = 0; i < m * inner; ++i)
                                 (*ga)[(o * n + begin) * inner + i] += g[o * m * inner + i];
                           });
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = parts.front().normalize_axis(axis);
  Shape s = parts.front().shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != s.size()) throw ShapeError("concat: rank mismatch " + shape_str(p.shape()));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && p.shape()[i] != s[i]) {
        throw ShapeError("concat: " + shape_str(p.shape()) + " vs " + shape_str(s));
      }
    }
    total += p.shape()[ax];
  }
  s[ax] = total;
  std::size_t outer = 0, n = 0, inner = 0;
  detail::split_axis(s, ax, outer, n, inner);
  std::vector<T> out(shape_numel(s));
  std::size_t offset = 0;
  std::vector<std::pair<detail::ImplPtr<T>, std::size_t>> spans;
  bool track = false;
  for (const auto& p : parts) {
    const std::size_t m = p.shape()[ax];
    const auto d = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(d.data() + o * m * inner, m * inner, out.data() + (o * n + offset) * inner);
    spans.emplace_back(p.impl(), offset);
    track = track || detail::any_requires_grad<T>({&p});
    offset += m;
  }
  return detail::finish<T>(std::move(s), std::move(out), track,
                           [spans = std::move(spans), outer, n, inner](const std::vector<T>& g) {
                             for (const auto& [impl, off] : spans) {
                               auto* gp = detail::grad_sink(impl);
                               if (!gp) continue;
                               const std::size_t m = gp->size() / (outer * inner);
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t i = 0; i < m * inner; ++i)
                                   (*gp)[o * m * inner + i] += g[(o * n + off) * inner + i];
                             }
                           });
}

/// Row gather along axis 0: out[idx..., rest...] = values[indices[idx...], rest...].
/// Differentiable with respect to `values` (scatter-add).
template <typename T>
BasicTensor<T> gather(const BasicTensor<T>& values, std::span<const std::size_t> indices, Shape index_shape) {
  if (values.rank() < 1) throw ShapeError("gather: values must have rank >= 1");
  if (shape_numel(index_shape) != indices.size()) throw ShapeError("gather: index shape mismatch");
  const std::size_t rows = values.shape()[0];
  const std::size_t row = values.numel() / std::max<std::size_t>(rows, 1);
  for (auto i : indices) {
    if (i >= rows) {
      throw ShapeError("gather: index " + std::to_string(i) + " out of range for " +
                       shape_str(values.shape()));
    }
  }
  Shape s = std::move(index_shape);
  s.insert(s.end(), values.shape().begin() + 1, values.shape().end());
  std::vector<T> out(indices.size() * row);
  const auto d = values.data();
  for (std::size_t k = 0; k < indices.size(); ++k)
    std::copy_n(d.data() + indices[k] * row, row, out.data() + k * row);
  const bool track = detail::any_requires_grad<T>({&values});
  std::vector<std::size_t> idx;
  if (track) idx.assign(indices.begin(), indices.end());
  return detail::finish<T>(std::move(s), std::move(out), track,
                           [vi = values.impl(), idx = std::move(idx), row](const std::vector<T>& g) {
                             auto* gv = detail::grad_sink(vi);
                             if (!gv) return;
                             for (std::size_t k = 0; k < idx.size(); ++k)
                               for (std::size_t c = 0; c < row; ++c) (*gv)[idx[k] * row + c] += g[k * row + c];
                           });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product [.., m, k] x [.., k, n] -> [.., m, n] with
/// broadcasting over the leading extents.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = detail::broadcast_shapes(batch_a, batch_b, "matmul");
  } catch (const ShapeError&) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const auto map_a = detail::broadcast_map(batch_a, batch);
  const auto map_b = detail::broadcast_map(batch_b, batch);
  const std::size_t nb = shape_numel(batch);
  std::vector<T> out(nb * m * n, T{0});
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t bt = 0; bt < nb; ++bt) {
    const T* A = ad.data() + map_a[bt] * m * k;
    const T* B = bd.data() + map_b[bt] * k * n;
    T* C = out.data() + bt * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const T av = A[i * k + p];
        const T* brow = B + p * n;
        T* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
  }
  Shape s = batch;
  s.push_back(m);
  s.push_back(n);
  const bool track = detail::any_requires_grad<T>({&a, &b});
  return detail::finish<T>(
      std::move(s), std::move(out), track,
      [ai = a.impl(), bi = b.impl(), map_a, map_b, nb, m, k, n](const std::vector<T>& g) {
        auto* ga = detail::grad_sink(ai);
        auto* gb = detail::grad_sink(bi);
        for (std::size_t bt = 0; bt < nb; ++bt) {
          const T* A = ai->data.data() + map_a[bt] * m * k;
          const T* B = bi->data.data() + map_b[bt] * k * n;
          const T* G = g.data() + bt * m * n;
          if (ga) {
            T* dA = ga->data() + map_a[bt] * m * k;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                T acc{0};
                for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
                dA[i * k + p] += acc;
              }
          }
          if (gb) {
            T* dB = gb->data() + map_b[bt] * k * n;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                const T av = A[i * k + p];
                for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += av * G[i * n + j];
              }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalizations

/// Max-subtracted softmax along `axis`.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis) {
  const std::size_t ax = x.normalize_axis(axis);
  std::size_t outer = 0, n = 0, inner = 0;
  detail::split_axis(x.shape(), ax, outer, n, inner);
  const auto d = x.data();
  std::vector<T> y(d.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, d[base + j * inner]);
      T total{0};
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(d[base + j * inner] - mx);
        y[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] /= total;
    }
  const bool track = detail::any_requires_grad<T>({&x});
  std::vector<T> yc;
  if (track) yc = y;
  return detail::finish<T>(x.shape(), std::move(y), track,
                           [xi = x.impl(), yc = std::move(yc), outer, n, inner](const std::vector<T>& g) {
                             auto* gx = detail::grad_sink(xi);
                             if (!gx) return;
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t i = 0; i < inner; ++i) {
                                 const std::size_t base = o * n * inner + i;
                                 T dot{0};
                                 for (std::size_t j = 0; j < n; ++j)
                                   dot += g[base + j * inner] * yc[base + j * inner];
                                 for (std::size_t j = 0; j < n; ++j) {
                                   const std::size_t q = base + j * inner;
                                   (*gx)[q] += yc[q] * (g[q] - dot);
                                 }
                               }
                           });
}

/// Layer normalization over the last axis without affine parameters.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, T eps = T(1e-5)) {
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  const auto d = x.data();
  std::vector<T> y(d.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = d.data() + r * n;
    T mu{0};
    for (std::size_t j = 0; j < n; ++j) mu += src[j];
    mu /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (src[j] - mu) * (src[j] - mu);
    var /= static_cast<T>(n);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = (src[j] - mu) * is;
  }
  const bool track = detail::any_requires_grad<T>({&x});
  std::vector<T> yc;
  if (track) yc = y;
  return detail::finish<T>(
      x.shape(), std::move(y), track,
      [xi = x.impl(), yc = std::move(yc), inv_std = std::move(inv_std), n, rows](const std::vector<T>& g) {
        auto* gx = detail::grad_sink(xi);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gy = g.data() + r * n;
          const T* yy = yc.data() + r * n;
          T mg{0}, mgy{0};
          for (std::size_t j = 0; j < n; ++j) {
            mg += gy[j];
            mgy += gy[j] * yy[j];
          }
          mg /= static_cast<T>(n);
          mgy /= static_cast<T>(n);
          for (std::size_t j = 0; j < n; ++j) (*gx)[r * n + j] += inv_std[r] * (gy[j] - mg - yy[j] * mgy);
        }
      });
}

// ---------------------------------------------------------------------------
// Sampling

template <typename T>
struct SampleResult {
  BasicTensor<T> values;             // [K, C]
  std::vector<std::uint8_t> outside;  // 1 where the coordinate left the grid
};

/// Bilinear interpolation of grid [H, W, C] at coords [K, 2] given as
/// (x = column, y = row) in cell units. Coordinates outside [0, W-1] x
/// [0, H-1] yield zeros and an out-of-view flag. Differentiable with respect
/// to both the grid and the coordinates.
template <typename T>
SampleResult<T> bilinear_sample(const BasicTensor<T>& grid, const BasicTensor<T>& coords) {
  if (grid.rank() != 3) throw ShapeError("bilinear_sample: grid must be [H,W,C], got " + shape_str(grid.shape()));
  if (coords.rank() != 2 || coords.dim(1) != 2) {
    throw ShapeError("bilinear_sample: coords must be [K,2], got " + shape_str(coords.shape()));
  }
  const std::size_t H = grid.dim(0), W = grid.dim(1), C = grid.dim(2), K = coords.dim(0);
  struct Cell {
    std::size_t x0, x1, y0, y1;
    T fx, fy;
    bool inside;
  };
  std::vector<Cell> cells(K);
  std::vector<std::uint8_t> outside(K, 0);
  const auto cd = coords.data();
  const auto gd = grid.data();
  std::vector<T> out(K * C, T{0});
  auto corner = [](T v, std::size_t extent, std::size_t& lo, std::size_t& hi, T& frac) {
    if (extent == 1) {
      lo = hi = 0;
      frac = T{0};
      return;
    }
    lo = std::min(static_cast<std::size_t>(std::floor(v)), extent - 2);
    hi = lo + 1;
    frac = v - static_cast<T>(lo);
  };
  for (std::size_t k = 0; k < K; ++k) {
    const T x = cd[2 * k], y = cd[2 * k + 1];
    Cell c{};
    c.inside = std::isfinite(x) && std::isfinite(y) && x >= T{0} && y >= T{0} &&
               x <= static_cast<T>(W - 1) && y <= static_cast<T>(H - 1);
    if (!c.inside) {
      outside[k] = 1;
      cells[k] = c;
      continue;
    }
    corner(x, W, c.x0, c.x1, c.fx);
    corner(y, H, c.y0, c.y1, c.fy);
    cells[k] = c;
    const T w00 = (T{1} - c.fx) * (T{1} - c.fy), w01 = c.fx * (T{1} - c.fy);
    const T w10 = (T{1} - c.fx) * c.fy, w11 = c.fx * c.fy;
    const T* g00 = gd.data() + (c.y0 * W + c.x0) * C;
    const T* g01 = gd.data() + (c.y0 * W + c.x1) * C;
    const T* g10 = gd.data() + (c.y1 * W + c.x0) * C;
    const T* g11 = gd.data() + (c.y1 * W + c.x1) * C;
    T* o = out.data() + k * C;
    for (std::size_t ch = 0; ch < C; ++ch) o[ch] = w00 * g00[ch] + w01 * g01[ch] + w10 * g10[ch] + w11 * g11[ch];
  }
  const bool track = detail::any_requires_grad<T>({&grid, &coords});
  auto values = detail::finish<T>(
      Shape{K, C}, std::move(out), track,
      [gi = grid.impl(), ci = coords.impl(), cells = std::move(cells), W, C](const std::vector<T>& g) {
        auto* gg = detail::grad_sink(gi);
        auto* gc = detail::grad_sink(ci);
        const auto& gd = gi->data;
        for (std::size_t k = 0; k < cells.size(); ++k) {
          const Cell& c = cells[k];
          if (!c.inside) continue;
          const T* go = g.data() + k * C;
          const std::size_t i00 = (c.y0 * W + c.x0) * C, i01 = (c.y0 * W + c.x1) * C;
          const std::size_t i10 = (c.y1 * W + c.x0) * C, i11 = (c.y1 * W + c.x1) * C;
          if (gg) {
            const T w00 = (T{1} - c.fx) * (T{1} - c.fy), w01 = c.fx * (T{1} - c.fy);
            const T w10 = (T{1} - c.fx) * c.fy, w11 = c.fx * c.fy;
            for (std::size_t ch = 0; ch < C; ++ch) {
              (*gg)[i00 + ch] += w00 * go[ch];
              (*gg)[i01 + ch] += w01 * go[ch];
              (*gg)[i10 + ch] += w10 * go[ch];
              (*gg)[i11 + ch] += w11 * go[ch];
            }
          }
          if (gc) {
            T dx{0}, dy{0};
            for (std::size_t ch = 0; ch < C; ++ch) {
              const T v00 = gd[i00 + ch], v01 = gd[i01 + ch], v10 = gd[i10 + ch], v11 = gd[i11 + ch];
              dx += go[ch] * ((T{1} - c.fy) * (v01 - v00) + c.fy * (v11 - v10));
              dy += go[ch] * ((T{1} - c.fx) * (v10 - v00) + c.fx * (v11 - v01));
            }
            if (c.x0 != c.x1) (*gc)[2 * k] += dx;
            if (c.y0 != c.y1) (*gc)[2 * k + 1] += dy;
          }
        }
      });
  return {std::move(values), std::move(outside)};
}

// ---------------------------------------------------------------------------
// Backward

/// Materializes d(loss)/d(leaf) on every requires_grad leaf reachable through
/// the active tape. Leaf gradients accumulate across calls.
template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw Error("backward: loss does not depend on any tracked tensor");
  auto impl = loss.impl();
  if (impl->leaf) {
    impl->ensure_grad();
    impl->grad[0] += T{1};
    return;
  }
  Tape& tape = active_tape();
  tape.clear_intermediate_grads();
  impl->ensure_grad();
  impl->grad[0] = T{1};
  tape.replay_backward();
}

/// Largest |analytic - numeric| / max(1, |numeric|) over every coordinate of
/// every input, using central differences with step `eps`. `fn` must map the
/// inputs to a scalar. Inputs' data and gradients are restored on return.
template <typename T>
double gradcheck(const std::function<BasicTensor<T>(const std::vector<BasicTensor<T>>&)>& fn,
                 std::vector<BasicTensor<T>>& inputs, double eps = 1e-5) {
  TapeScope scope;
  std::vector<std::vector<T>> saved_grad(inputs.size());
  std::vector<bool> had_grad(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    had_grad[i] = inputs[i].has_grad();
    if (had_grad[i]) saved_grad[i].assign(inputs[i].grad().begin(), inputs[i].grad().end());
    inputs[i].zero_grad();
    inputs[i].set_requires_grad(true);
  }
  backward(fn(inputs));
  std::vector<std::vector<T>> analytic(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    analytic[i] = inputs[i].has_grad() ? std::vector<T>(inputs[i].grad().begin(), inputs[i].grad().end())
                                       : std::vector<T>(inputs[i].numel(), T{0});
  }
  scope.tape().reset();
  double worst = 0.0;
  {
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      auto data = inputs[i].mutable_data();
      for (std::size_t j = 0; j < data.size(); ++j) {
        const T orig = data[j];
        data[j] = orig + static_cast<T>(eps);
        const double fp = static_cast<double>(fn(inputs).item());
        data[j] = orig - static_cast<T>(eps);
        const double fm = static_cast<double>(fn(inputs).item());
        data[j] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double err = std::abs(static_cast<double>(analytic[i][j]) - numeric) / std::max(1.0, std::abs(numeric));
        worst = std::max(worst, err);
      }
    }
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    inputs[i].zero_grad();
    if (had_grad[i]) {
      inputs[i].impl()->ensure_grad();
      inputs[i].impl()->grad = saved_grad[i];
    }
  }
  return worst;
}

}  // namespace poemkit
