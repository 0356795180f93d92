#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// The engine is templated on the scalar type: training runs on float, the
// verification oracles instantiate the identical code paths on double.
// Operations record themselves on the thread's active tape (if any); replaying
// the tape in reverse visits nodes in reverse topological order because the
// recording order is the execution order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "rtdp/errors.hpp"
#include "rtdp/rng.hpp"

namespace rtdp {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty means "never touched", i.e. zero
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape s) {
    TensorT t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = std::move(s);
    t.d_->value.assign(static_cast<size_t>(shape_numel(t.d_->shape)), T(0));
    return t;
  }

  static TensorT full(Shape s, T v) {
    TensorT t = zeros(std::move(s));
    std::fill(t.d_->value.begin(), t.d_->value.end(), v);
    return t;
  }

  static TensorT from_vector(Shape s, std::vector<T> v) {
    if (shape_numel(s) != static_cast<int64_t>(v.size()))
      throw shape_error("from_vector: shape " + shape_str(s) + " does not hold " +
                        std::to_string(v.size()) + " elements");
    TensorT t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = std::move(s);
    t.d_->value = std::move(v);
    return t;
  }

  static TensorT scalar(T v) { return from_vector({1}, {v}); }

  static TensorT randn(Shape s, Rng& rng, T stddev) {
    TensorT t = zeros(std::move(s));
    for (T& x : t.d_->value) x = static_cast<T>(rng.normal(0.0, static_cast<double>(stddev)));
    return t;
  }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int64_t dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(d_->value.size()); }

  std::vector<T>& value() { return d_->value; }
  const std::vector<T>& value() const { return d_->value; }
  T item() const {
    if (numel() != 1) throw contract_error("item: tensor is not scalar, shape " + shape_str(shape()));
    return d_->value[0];
  }

  bool has_grad() const { return !d_->grad.empty(); }
  std::vector<T>& grad_buffer() { return d_->grad; }
  const std::vector<T>& grad_buffer() const { return d_->grad; }
  // Gradient with zero-fill semantics: parameters never reached by backward
  // report a zero gradient.
  std::vector<T> grad_or_zeros() const {
    if (d_->grad.empty()) return std::vector<T>(d_->value.size(), T(0));
    return d_->grad;
  }
  void ensure_grad() { d_->ensure_grad(); }
  void zero_grad() { d_->grad.clear(); }

  bool requires_grad() const { return d_->requires_grad; }
  TensorT& set_requires_grad(bool b) {
    d_->requires_grad = b;
    return *this;
  }

  const std::shared_ptr<TensorData<T>>& ptr() const { return d_; }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

template <typename T>
class TapeT {
 public:
  void push(std::shared_ptr<TensorData<T>> out, std::function<void()> fn) {
    entries_.push_back({std::move(out), std::move(fn)});
  }

  size_t size() const { return entries_.size(); }

  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse. Gradients
  // of intermediates are rebuilt from scratch on every call, so repeated
  // calls accumulate into leaf (parameter) gradients only.
  void backward(const TensorT<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw contract_error("backward: loss must be a scalar tensor");
    for (auto& e : entries_) e.out->grad.clear();
    loss.ptr()->grad.assign(1, T(1));
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->out->grad.empty()) it->fn();
    }
  }

  static TapeT*& active() {
    thread_local TapeT* t = nullptr;
    return t;
  }

  // RAII activation of a tape on the current thread.
  class Scope {
   public:
    explicit Scope(TapeT& t) : prev_(active()) { active() = &t; }
    ~Scope() { active() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    TapeT* prev_;
  };

 private:
  struct Entry {
    std::shared_ptr<TensorData<T>> out;
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
};

namespace detail {

template <typename T>
void record(const TensorT<T>& out, std::function<void()> fn) {
  if (!out.requires_grad()) return;
  if (auto* tape = TapeT<T>::active()) tape->push(out.ptr(), std::move(fn));
}

template <typename T>
bool any_requires(std::initializer_list<const TensorT<T>*> xs) {
  for (auto* x : xs)
    if ((*x).requires_grad()) return true;
  return false;
}

}  // namespace detail

// ----------------------------------------------------------------------------
// primitives
// ----------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw shape_error("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0) == k ? b.dim(1) : 0;
  TensorT<T> out = TensorT<T>::zeros({m, n});
  {
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* pc = out.value().data();
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t p = 0; p < k; ++p) {
        const T aip = pa[i * k + p];
        if (aip == T(0)) continue;
        const T* brow = pb + p * n;
        T* crow = pc + i * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }
  out.set_requires_grad(detail::any_requires<T>({&a, &b}));
  detail::record(out, [ad = a.ptr(), bd = b.ptr(), od = out.ptr(), m, k, n]() {
    const T* dc = od->grad.data();
    if (ad->requires_grad) {
      ad->ensure_grad();
      T* da = ad->grad.data();
      const T* pb = bd->value.data();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
          T s = 0;
          const T* dcrow = dc + i * n;
          const T* brow = pb + p * n;
          for (int64_t j = 0; j < n; ++j) s += dcrow[j] * brow[j];
          da[i * k + p] += s;
        }
    }
    if (bd->requires_grad) {
      bd->ensure_grad();
      T* db = bd->grad.data();
      const T* pa = ad->value.data();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
          const T aip = pa[i * k + p];
          if (aip == T(0)) continue;
          const T* dcrow = dc + i * n;
          T* dbrow = db + p * n;
          for (int64_t j = 0; j < n; ++j) dbrow[j] += aip * dcrow[j];
        }
    }
  });
  return out;
}

template <typename T>
TensorT<T> transpose2d(const TensorT<T>& x) {
  if (x.rank() != 2) throw shape_error("transpose2d: need rank 2, got " + shape_str(x.shape()));
  const int64_t m = x.dim(0), n = x.dim(1);
  TensorT<T> out = TensorT<T>::zeros({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.value()[j * m + i] = x.value()[i * n + j];
  out.set_requires_grad(x.requires_grad());
  detail::record(out, [xd = x.ptr(), od = out.ptr(), m, n]() {
    if (!xd->requires_grad) return;
    xd->ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) xd->grad[i * n + j] += od->grad[j * m + i];
  });
  return out;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw shape_error("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] + b.value()[i];
  out.set_requires_grad(detail::any_requires<T>({&a, &b}));
  detail::record(out, [ad = a.ptr(), bd = b.ptr(), od = out.ptr()]() {
    const auto& g = od->grad;
    if (ad->requires_grad) {
      ad->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) ad->grad[i] += g[i];
    }
    if (bd->requires_grad) {
      bd->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) bd->grad[i] += g[i];
    }
  });
  return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw shape_error("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] * b.value()[i];
  out.set_requires_grad(detail::any_requires<T>({&a, &b}));
  detail::record(out, [ad = a.ptr(), bd = b.ptr(), od = out.ptr()]() {
    const auto& g = od->grad;
    if (ad->requires_grad) {
      ad->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) ad->grad[i] += g[i] * bd->value[i];
    }
    if (bd->requires_grad) {
      bd->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) bd->grad[i] += g[i] * ad->value[i];
    }
  });
  return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, T c) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out.value()[i] = x.value()[i] * c;
  out.set_requires_grad(x.requires_grad());
  detail::record(out, [xd = x.ptr(), od = out.ptr(), c]() {
    if (!xd->requires_grad) return;
    xd->ensure_grad();
    for (size_t i = 0; i < od->grad.size(); ++i) xd->grad[i] += od->grad[i] * c;
  });
  return out;
}

// out[i,j] = x[i,j] + r[j]; used for bias rows and additive attention masks.
template <typename T>
TensorT<T> add_row(const TensorT<T>& x, const TensorT<T>& r) {
  if (x.rank() != 2 || r.rank() != 1 || r.dim(0) != x.dim(1))
    throw shape_error("add_row: " + shape_str(x.shape()) + " with row " + shape_str(r.shape()));
  const int64_t m = x.dim(0), n = x.dim(1);
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.value()[i * n + j] = x.value()[i * n + j] + r.value()[j];
  out.set_requires_grad(detail::any_requires<T>({&x, &r}));
  detail::record(out, [xd = x.ptr(), rd = r.ptr(), od = out.ptr(), m, n]() {
    if (xd->requires_grad) {
      xd->ensure_grad();
      for (size_t i = 0; i < od->grad.size(); ++i) xd->grad[i] += od->grad[i];
    }
    if (rd->requires_grad) {
      rd->ensure_grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) rd->grad[j] += od->grad[i * n + j];
    }
  });
  return out;
}

// Exact erf formulation; keeps gradient checks free of approximation slack.
template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double v = static_cast<double>(x.value()[i]);
    out.value()[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
  out.set_requires_grad(x.requires_grad());
  detail::record(out, [xd = x.ptr(), od = out.ptr()]() {
    if (!xd->requires_grad) return;
    xd->ensure_grad();
    for (size_t i = 0; i < od->grad.size(); ++i) {
      const double v = static_cast<double>(xd->value[i]);
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      xd->grad[i] += od->grad[i] * static_cast<T>(cdf + v * pdf);
    }
  });
  return out;
}

// Row-wise layer normalization with learnable gain and bias.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias,
                      T eps = T(1e-5)) {
  if (x.rank() != 2 || gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != x.dim(1) ||
      bias.dim(0) != x.dim(1))
    throw shape_error("layer_norm: " + shape_str(x.shape()) + " gain " + shape_str(gain.shape()) +
                      " bias " + shape_str(bias.shape()));
  const int64_t m = x.dim(0), n = x.dim(1);
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  for (int64_t i = 0; i < m; ++i) {
    const T* row = x.value().data() + i * n;
    T mu = 0;
    for (int64_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var = 0;
    for (int64_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    const T inv = T(1) / std::sqrt(var + eps);
    T* orow = out.value().data() + i * n;
    for (int64_t j = 0; j < n; ++j)
      orow[j] = gain.value()[j] * (row[j] - mu) * inv + bias.value()[j];
  }
  out.set_requires_grad(detail::any_requires<T>({&x, &gain, &bias}));
  detail::record(out, [xd = x.ptr(), gd = gain.ptr(), bd = bias.ptr(), od = out.ptr(), m, n, eps]() {
    for (int64_t i = 0; i < m; ++i) {
      const T* row = xd->value.data() + i * n;
      const T* dout = od->grad.data() + i * n;
      T mu = 0;
      for (int64_t j = 0; j < n; ++j) mu += row[j];
      mu /= static_cast<T>(n);
      T var = 0;
      for (int64_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<T>(n);
      const T inv = T(1) / std::sqrt(var + eps);
      if (gd->requires_grad) gd->ensure_grad();
      if (bd->requires_grad) bd->ensure_grad();
      if (gd->requires_grad || bd->requires_grad) {
        for (int64_t j = 0; j < n; ++j) {
          const T xhat = (row[j] - mu) * inv;
          if (gd->requires_grad) gd->grad[j] += dout[j] * xhat;
          if (bd->requires_grad) bd->grad[j] += dout[j];
        }
      }
      if (xd->requires_grad) {
        xd->ensure_grad();
        T mean_dxhat = 0, mean_dxhat_xhat = 0;
        for (int64_t j = 0; j < n; ++j) {
          const T xhat = (row[j] - mu) * inv;
          const T dxhat = dout[j] * gd->value[j];
          mean_dxhat += dxhat;
          mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat /= static_cast<T>(n);
        mean_dxhat_xhat /= static_cast<T>(n);
        T* dx = xd->grad.data() + i * n;
        for (int64_t j = 0; j < n; ++j) {
          const T xhat = (row[j] - mu) * inv;
          const T dxhat = dout[j] * gd->value[j];
          dx[j] += (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv;
        }
      }
    }
  });
  return out;
}

// Max-subtracted softmax along any axis.
template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
  if (axis < 0 || axis >= x.rank())
    throw contract_error("softmax: axis " + std::to_string(axis) + " invalid for " +
                         shape_str(x.shape()));
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  const int64_t len = x.dim(axis);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * len * inner + in;
      T mx = x.value()[base];
      for (int64_t l = 1; l < len; ++l) mx = std::max(mx, x.value()[base + l * inner]);
      T denom = 0;
      for (int64_t l = 0; l < len; ++l) {
        const T e = std::exp(x.value()[base + l * inner] - mx);
        out.value()[base + l * inner] = e;
        denom += e;
      }
      for (int64_t l = 0; l < len; ++l) out.value()[base + l * inner] /= denom;
    }
  out.set_requires_grad(x.requires_grad());
  detail::record(out, [xd = x.ptr(), od = out.ptr(), outer, len, inner]() {
    if (!xd->requires_grad) return;
    xd->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = o * len * inner + in;
        T dot = 0;
        for (int64_t l = 0; l < len; ++l)
          dot += od->grad[base + l * inner] * od->value[base + l * inner];
        for (int64_t l = 0; l < len; ++l) {
          const T y = od->value[base + l * inner];
          xd->grad[base + l * inner] += y * (od->grad[base + l * inner] - dot);
        }
      }
  });
  return out;
}

// Identity forward; the backward contribution through this node is exactly
// zero (no tape entry is recorded and the output is detached).
template <typename T>
TensorT<T> stop_gradient(const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::from_vector(x.shape(), x.value());
  out.set_requires_grad(false);
  return out;
}

template <typename T>
TensorT<T> embedding_gather(const TensorT<T>& table, std::span<const int32_t> ids) {
  if (table.rank() != 2) throw shape_error("embedding_gather: table must be rank 2");
  const int64_t v = table.dim(0), d = table.dim(1);
  for (int32_t id : ids)
    if (id < 0 || id >= v)
      throw index_error("embedding_gather: id " + std::to_string(id) + " outside table of " +
                        std::to_string(v) + " rows");
  TensorT<T> out = TensorT<T>::zeros({static_cast<int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.value().data() + static_cast<int64_t>(ids[i]) * d, d,
                out.value().data() + static_cast<int64_t>(i) * d);
  out.set_requires_grad(table.requires_grad());
  detail::record(out, [td = table.ptr(), od = out.ptr(),
                       idv = std::vector<int32_t>(ids.begin(), ids.end()), d]() {
    if (!td->requires_grad) return;
    td->ensure_grad();
    for (size_t i = 0; i < idv.size(); ++i) {
      T* dst = td->grad.data() + static_cast<int64_t>(idv[i]) * d;
      const T* src = od->grad.data() + static_cast<int64_t>(i) * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return out;
}

template <typename T>
TensorT<T> gather_rows(const TensorT<T>& x, std::span<const int32_t> idx) {
  if (x.rank() != 2) throw shape_error("gather_rows: need rank 2");
  const int64_t m = x.dim(0), n = x.dim(1);
  for (int32_t i : idx)
    if (i < 0 || i >= m)
      throw index_error("gather_rows: row " + std::to_string(i) + " outside " + shape_str(x.shape()));
  TensorT<T> out = TensorT<T>::zeros({static_cast<int64_t>(idx.size()), n});
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(x.value().data() + static_cast<int64_t>(idx[i]) * n, n,
                out.value().data() + static_cast<int64_t>(i) * n);
  out.set_requires_grad(x.requires_grad());
  detail::record(out, [xd = x.ptr(), od = out.ptr(),
                       idv = std::vector<int32_t>(idx.begin(), idx.end()), n]() {
    if (!xd->requires_grad) return;
    xd->ensure_grad();
    for (size_t i = 0; i < idv.size(); ++i) {
      T* dst = xd->grad.data() + static_cast<int64_t>(idv[i]) * n;
      const T* src = od->grad.data() + static_cast<int64_t>(i) * n;
      for (int64_t j = 0; j < n; ++j) dst[j] += src[j];
    }
  });
  return out;
}

// out[t] = m[rows[t], cols[t]], reshaped to [out_rows x out_cols]. Index
// tables are shared pointers because attention reuses the same tables for
// every batch row and head.
template <typename T>
TensorT<T> gather2d(const TensorT<T>& m, std::shared_ptr<const std::vector<int32_t>> rows,
                    std::shared_ptr<const std::vector<int32_t>> cols, int64_t out_rows,
                    int64_t out_cols) {
  if (m.rank() != 2) throw shape_error("gather2d: need rank 2");
  const int64_t nr = m.dim(0), nc = m.dim(1);
  const size_t total = static_cast<size_t>(out_rows * out_cols);
  if (rows->size() != total || cols->size() != total)
    throw shape_error("gather2d: index tables do not match output shape");
  TensorT<T> out = TensorT<T>::zeros({out_rows, out_cols});
  for (size_t t = 0; t < total; ++t) {
    const int64_t r = (*rows)[t], c = (*cols)[t];
    if (r < 0 || r >= nr || c < 0 || c >= nc)
      throw index_error("gather2d: index (" + std::to_string(r) + "," + std::to_string(c) +
                        ") outside " + shape_str(m.shape()));
    out.value()[t] = m.value()[r * nc + c];
  }
  out.set_requires_grad(m.requires_grad());
  detail::record(out, [md = m.ptr(), od = out.ptr(), rows, cols, nc]() {
    if (!md->requires_grad) return;
    md->ensure_grad();
    for (size_t t = 0; t < od->grad.size(); ++t)
      md->grad[(*rows)[t] * nc + (*cols)[t]] += od->grad[t];
  });
  return out;
}

// Same-padded 1-D convolution over the row (token) axis.
// x: [L x c_in], w: [K x c_in x c_out], b: [c_out].
template <typename T>
TensorT<T> conv1d_same(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  if (x.rank() != 2 || w.rank() != 3 || b.rank() != 1)
    throw shape_error("conv1d_same: bad ranks");
  const int64_t len = x.dim(0), cin = x.dim(1), kk = w.dim(0), cout = w.dim(2);
  if (w.dim(1) != cin || b.dim(0) != cout || kk % 2 == 0)
    throw shape_error("conv1d_same: kernel " + shape_str(w.shape()) + " against input " +
                      shape_str(x.shape()) + " (kernel size must be odd)");
  const int64_t half = kk / 2;
  TensorT<T> out = TensorT<T>::zeros({len, cout});
  for (int64_t l = 0; l < len; ++l) {
    T* orow = out.value().data() + l * cout;
    for (int64_t o = 0; o < cout; ++o) orow[o] = b.value()[o];
    for (int64_t t = 0; t < kk; ++t) {
      const int64_t src = l + t - half;
      if (src < 0 || src >= len) continue;
      const T* xrow = x.value().data() + src * cin;
      const T* wslab = w.value().data() + t * cin * cout;
      for (int64_t i = 0; i < cin; ++i) {
        const T xv = xrow[i];
        if (xv == T(0)) continue;
        const T* wrow = wslab + i * cout;
        for (int64_t o = 0; o < cout; ++o) orow[o] += xv * wrow[o];
      }
    }
  }
  out.set_requires_grad(detail::any_requires<T>({&x, &w, &b}));
  detail::record(out, [xd = x.ptr(), wd = w.ptr(), bd = b.ptr(), od = out.ptr(), len, cin, kk,
                       cout, half]() {
    if (bd->requires_grad) {
      bd->ensure_grad();
      for (int64_t l = 0; l < len; ++l)
        for (int64_t o = 0; o < cout; ++o) bd->grad[o] += od->grad[l * cout + o];
    }
    if (xd->requires_grad) xd->ensure_grad();
    if (wd->requires_grad) wd->ensure_grad();
    for (int64_t l = 0; l < len; ++l) {
      const T* dout = od->grad.data() + l * cout;
      for (int64_t t = 0; t < kk; ++t) {
        const int64_t src = l + t - half;
        if (src < 0 || src >= len) continue;
        const T* wslab = wd->value.data() + t * cin * cout;
        const T* xrow = xd->value.data() + src * cin;
        for (int64_t i = 0; i < cin; ++i) {
          if (xd->requires_grad) {
            T s = 0;
            const T* wrow = wslab + i * cout;
            for (int64_t o = 0; o < cout; ++o) s += wrow[o] * dout[o];
            xd->grad[src * cin + i] += s;
          }
          if (wd->requires_grad) {
            const T xv = xrow[i];
            if (xv == T(0)) continue;
            T* dwrow = wd->grad.data() + (t * cin + i) * cout;
            for (int64_t o = 0; o < cout; ++o) dwrow[o] += xv * dout[o];
          }
        }
      }
    }
  });
  return out;
}

template <typename T>
TensorT<T> slice(const TensorT<T>& x, int64_t r0, int64_t rc, int64_t c0, int64_t cc) {
  if (x.rank() != 2) throw shape_error("slice: need rank 2");
  const int64_t m = x.dim(0), n = x.dim(1);
  if (r0 < 0 || rc < 0 || r0 + rc > m || c0 < 0 || cc < 0 || c0 + cc > n)
    throw shape_error("slice: window out of range for " + shape_str(x.shape()));
  TensorT<T> out = TensorT<T>::zeros({rc, cc});
  for (int64_t i = 0; i < rc; ++i)
    std::copy_n(x.value().data() + (r0 + i) * n + c0, cc, out.value().data() + i * cc);
  out.set_requires_grad(x.requires_grad());
  detail::record(out, [xd = x.ptr(), od = out.ptr(), r0, rc, c0, cc, n]() {
    if (!xd->requires_grad) return;
    xd->ensure_grad();
    for (int64_t i = 0; i < rc; ++i)
      for (int64_t j = 0; j < cc; ++j) xd->grad[(r0 + i) * n + c0 + j] += od->grad[i * cc + j];
  });
  return out;
}

template <typename T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw contract_error("concat_rows: no parts");
  const int64_t n = parts[0].dim(1);
  int64_t m = 0;
  bool req = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != n) throw shape_error("concat_rows: column mismatch");
    m += p.dim(0);
    req = req || p.requires_grad();
  }
  TensorT<T> out = TensorT<T>::zeros({m, n});
  int64_t row = 0;
  for (const auto& p : parts) {
    std::copy(p.value().begin(), p.value().end(), out.value().begin() + row * n);
    row += p.dim(0);
  }
  out.set_requires_grad(req);
  if (req) {
    std::vector<std::shared_ptr<TensorData<T>>> pds;
    pds.reserve(parts.size());
    for (const auto& p : parts) pds.push_back(p.ptr());
    detail::record(out, [pds = std::move(pds), od = out.ptr(), n]() {
      int64_t row = 0;
      for (auto& pd : pds) {
        const int64_t rows = pd->shape[0];
        if (pd->requires_grad) {
          pd->ensure_grad();
          for (int64_t i = 0; i < rows * n; ++i) pd->grad[i] += od->grad[row * n + i];
        }
        row += rows;
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw contract_error("concat_cols: no parts");
  const int64_t m = parts[0].dim(0);
  int64_t n = 0;
  bool req = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m) throw shape_error("concat_cols: row mismatch");
    n += p.dim(1);
    req = req || p.requires_grad();
  }
  TensorT<T> out = TensorT<T>::zeros({m, n});
  int64_t col = 0;
  for (const auto& p : parts) {
    const int64_t pc = p.dim(1);
    for (int64_t i = 0; i < m; ++i)
      std::copy_n(p.value().data() + i * pc, pc, out.value().data() + i * n + col);
    col += pc;
  }
  out.set_requires_grad(req);
  if (req) {
    std::vector<std::shared_ptr<TensorData<T>>> pds;
    pds.reserve(parts.size());
    for (const auto& p : parts) pds.push_back(p.ptr());
    detail::record(out, [pds = std::move(pds), od = out.ptr(), m, n]() {
      int64_t col = 0;
      for (auto& pd : pds) {
        const int64_t pc = pd->shape[1];
        if (pd->requires_grad) {
          pd->ensure_grad();
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < pc; ++j) pd->grad[i * pc + j] += od->grad[i * n + col + j];
        }
        col += pc;
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
  T s = 0;
  for (const T v : x.value()) s += v;
  TensorT<T> out = TensorT<T>::scalar(s);
  out.set_requires_grad(x.requires_grad());
  detail::record(out, [xd = x.ptr(), od = out.ptr()]() {
    if (!xd->requires_grad) return;
    xd->ensure_grad();
    const T g = od->grad[0];
    for (auto& v : xd->grad) v += g;
  });
  return out;
}

// Mean cross-entropy over rows; fused log-softmax for stability.
template <typename T>
TensorT<T> cross_entropy_mean(const TensorT<T>& logits, std::span<const int32_t> targets) {
  if (logits.rank() != 2) throw shape_error("cross_entropy_mean: logits must be rank 2");
  const int64_t n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != n)
    throw shape_error("cross_entropy_mean: " + std::to_string(targets.size()) + " targets for " +
                      std::to_string(n) + " rows");
  if (n == 0) throw contract_error("cross_entropy_mean: no rows to average over");
  for (int32_t t : targets)
    if (t < 0 || t >= v) throw index_error("cross_entropy_mean: target " + std::to_string(t));
  T total = 0;
  for (int64_t i = 0; i < n; ++i) {
    const T* row = logits.value().data() + i * v;
    T mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    T denom = 0;
    for (int64_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
    total += mx + std::log(denom) - row[targets[i]];
  }
  TensorT<T> out = TensorT<T>::scalar(total / static_cast<T>(n));
  out.set_requires_grad(logits.requires_grad());
  detail::record(out, [ld = logits.ptr(), od = out.ptr(),
                       tv = std::vector<int32_t>(targets.begin(), targets.end()), n, v]() {
    if (!ld->requires_grad) return;
    ld->ensure_grad();
    const T g = od->grad[0] / static_cast<T>(n);
    for (int64_t i = 0; i < n; ++i) {
      const T* row = ld->value.data() + i * v;
      T mx = row[0];
      for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      T denom = 0;
      for (int64_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
      T* drow = ld->grad.data() + i * v;
      for (int64_t j = 0; j < v; ++j) {
        const T p = std::exp(row[j] - mx) / denom;
        drow[j] += g * (p - (j == tv[i] ? T(1) : T(0)));
      }
    }
  });
  return out;
}

// Mean sigmoid binary cross-entropy over included positions.
// logits may be [N] or [N x 1]; labels in {0,1}; include marks positions that
// contribute to the mean.
template <typename T>
TensorT<T> bce_with_logits_mean(const TensorT<T>& logits, std::span<const T> labels,
                                std::span<const uint8_t> include) {
  const int64_t n = logits.numel();
  if (static_cast<int64_t>(labels.size()) != n || static_cast<int64_t>(include.size()) != n)
    throw shape_error("bce_with_logits_mean: label/include size mismatch");
  int64_t count = 0;
  for (uint8_t b : include) count += b ? 1 : 0;
  if (count == 0) throw contract_error("bce_with_logits_mean: every position is excluded");
  T total = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (!include[i]) continue;
    const T z = logits.value()[i], y = labels[i];
    total += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  TensorT<T> out = TensorT<T>::scalar(total / static_cast<T>(count));
  out.set_requires_grad(logits.requires_grad());
  detail::record(out, [ld = logits.ptr(), od = out.ptr(),
                       lv = std::vector<T>(labels.begin(), labels.end()),
                       iv = std::vector<uint8_t>(include.begin(), include.end()), count]() {
    if (!ld->requires_grad) return;
    ld->ensure_grad();
    const T g = od->grad[0] / static_cast<T>(count);
    for (size_t i = 0; i < lv.size(); ++i) {
      if (!iv[i]) continue;
      const T z = ld->value[i];
      const T sig = T(1) / (T(1) + std::exp(-z));
      ld->grad[i] += g * (sig - lv[i]);
    }
  });
  return out;
}

// ----------------------------------------------------------------------------
// parameters
// ----------------------------------------------------------------------------

template <typename T>
struct ParameterT {
  std::string name;
  TensorT<T> tensor;
  bool decay_exempt = false;  // biases and normalization gains
};

template <typename T>
class ParameterStoreT {
 public:
  TensorT<T>& add(const std::string& name, TensorT<T> tensor, bool decay_exempt = false) {
    if (index_.count(name)) throw contract_error("parameter name registered twice: " + name);
    tensor.set_requires_grad(true);
    index_[name] = items_.size();
    items_.push_back(ParameterT<T>{name, std::move(tensor), decay_exempt});
    return items_.back().tensor;
  }

  ParameterT<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second];
  }
  const ParameterT<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second];
  }

  size_t size() const { return items_.size(); }
  ParameterT<T>& operator[](size_t i) { return items_[i]; }
  const ParameterT<T>& operator[](size_t i) const { return items_[i]; }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  void zero_grad() {
    for (auto& p : items_) p.tensor.zero_grad();
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(items_.size());
    for (const auto& p : items_) out.push_back(p.name);
    return out;
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& p : items_) n += p.tensor.numel();
    return n;
  }

 private:
  std::vector<ParameterT<T>> items_;
  std::unordered_map<std::string, size_t> index_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using Parameter = ParameterT<float>;
using ParameterStore = ParameterStoreT<float>;

}  // namespace rtdp
