#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "seibw/common.hpp"

namespace seibw {

// Dense row-major tensor. Storage is always contiguous and owned; reshapes
// copy. Ops never run in place unless their name ends in '_'.
template <class T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(count(shape_), T(0)) {}

  TensorT(std::vector<std::size_t> shape, T fill)
      : shape_(std::move(shape)), data_(count(shape_), fill) {}

  static TensorT from_data(std::vector<std::size_t> shape, std::vector<T> data) {
    SEIBW_CHECK_DIM(count(shape) == data.size(), "from_data: shape does not match data length");
    TensorT t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  TensorT reshaped(std::vector<std::size_t> shape) const {
    SEIBW_CHECK_DIM(count(shape) == numel(), "reshaped: element count mismatch");
    TensorT t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  void fill_(T v) { std::fill(data_.begin(), data_.end(), v); }

  void add_(const TensorT& o) {
    SEIBW_CHECK_DIM(same_shape(o), "add_: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  }

  void sub_(const TensorT& o) {
    SEIBW_CHECK_DIM(same_shape(o), "sub_: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
  }

  void scale_(T a) {
    for (auto& v : data_) v *= a;
  }

  // this += a * x
  void axpy_(T a, const TensorT& x) {
    SEIBW_CHECK_DIM(same_shape(x), "axpy_: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += a * x.data_[i];
  }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const auto& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class U>
  TensorT<U> cast() const {
    TensorT<U> t(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) t[i] = static_cast<U>(data_[i]);
    return t;
  }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    SEIBW_CHECK_DIM(idx.size() == shape_.size(), "at: index rank mismatch");
    std::size_t off = 0;
    std::size_t d = 0;
    for (auto i : idx) {
      SEIBW_CHECK_DIM(i < shape_[d], "at: index out of range");
      off = off * shape_[d] + i;
      ++d;
    }
    return off;
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  TensorT<T> r = a;
  r.add_(b);
  return r;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  TensorT<T> r = a;
  r.sub_(b);
  return r;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  SEIBW_CHECK_DIM(a.same_shape(b), "mul: shape mismatch");
  TensorT<T> r = a;
  for (std::size_t i = 0; i < r.numel(); ++i) r[i] *= b[i];
  return r;
}

// Copy of entry t (1-based) along the leading axis of seq.
template <class T>
TensorT<T> slice_step(const TensorT<T>& seq, std::size_t t) {
  SEIBW_CHECK_DIM(seq.rank() >= 2, "slice_step: leading time axis required");
  SEIBW_CHECK_DIM(t >= 1 && t <= seq.dim(0), "slice_step: step out of range");
  std::vector<std::size_t> shape(seq.shape().begin() + 1, seq.shape().end());
  TensorT<T> out(shape);
  const std::size_t n = out.numel();
  std::copy(seq.data() + (t - 1) * n, seq.data() + t * n, out.data());
  return out;
}

template <class T>
void set_step(TensorT<T>& seq, std::size_t t, const TensorT<T>& x) {
  SEIBW_CHECK_DIM(seq.rank() >= 2 && t >= 1 && t <= seq.dim(0), "set_step: step out of range");
  const std::size_t n = seq.numel() / seq.dim(0);
  SEIBW_CHECK_DIM(x.numel() == n, "set_step: slice size mismatch");
  std::copy(x.data(), x.data() + n, seq.data() + (t - 1) * n);
}

// --- reductions; fixed iteration order, double accumulators ---

template <class T>
double sum(const TensorT<T>& a);

template <class T>
double mean(const TensorT<T>& a);

template <class T>
double max_abs(const TensorT<T>& a);

template <class T>
double dot(const TensorT<T>& a, const TensorT<T>& b);

// --- linear algebra / nn primitives ---

// a[m,k] * b[k,n] -> [m,n]
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);

// Cross-correlation with zero padding.
// x[B,C,H,W], k[O,C,kh,kw] -> [B,O,H',W'], H' = (H+2p-kh)/s + 1.
template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& k, std::size_t stride,
                  std::size_t padding);

// Gradient of conv2d w.r.t. x: gy[B,O,H',W'], k[O,C,kh,kw] -> [B,C,H,W].
template <class T>
TensorT<T> conv2d_backward_input(const TensorT<T>& gy, const TensorT<T>& k,
                                 const std::vector<std::size_t>& x_shape, std::size_t stride,
                                 std::size_t padding);

// Gradient of conv2d w.r.t. k: x[B,C,H,W], gy[B,O,H',W'] -> [O,C,kh,kw].
template <class T>
TensorT<T> conv2d_backward_weight(const TensorT<T>& x, const TensorT<T>& gy,
                                  const std::vector<std::size_t>& k_shape, std::size_t stride,
                                  std::size_t padding);

// Window means, no padding: x[B,C,H,W] -> [B,C,(H-wh)/s+1,(W-ww)/s+1].
template <class T>
TensorT<T> avg_pool2d(const TensorT<T>& x, std::size_t window, std::size_t stride);

template <class T>
TensorT<T> avg_pool2d_backward(const TensorT<T>& gy, const std::vector<std::size_t>& x_shape,
                               std::size_t window, std::size_t stride);

// Max-shifted softmax over the last axis.
template <class T>
TensorT<T> softmax(const TensorT<T>& x);

template <class T>
TensorT<T> log_softmax(const TensorT<T>& x);

// Argmax over the last axis, one result per leading-row.
template <class T>
std::vector<std::size_t> argmax_rows(const TensorT<T>& x);

}  // namespace seibw
