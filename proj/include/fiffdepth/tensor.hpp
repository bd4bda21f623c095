// fiffdepth/tensor.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fiffdepth/errors.hpp"

namespace fiffdepth {

/// Channel-major rank-3 tensor (channels x height x width), row-major within
/// each channel. Value type; copies are deep.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(int channels, int height, int width, T fill = T(0))
      : c_(channels), h_(height), w_(width) {
    if (channels < 0 || height < 0 || width < 0)
      throw ShapeError("negative tensor extent");
    data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
  }

  int channels() const noexcept { return c_; }
  int height() const noexcept { return h_; }
  int width() const noexcept { return w_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h_) * w_; }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* channel(int c) noexcept { return data_.data() + c * plane(); }
  const T* channel(int c) const noexcept { return data_.data() + c * plane(); }

  T& operator()(int c, int y, int x) noexcept {
    return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x];
  }
  const T& operator()(int c, int y, int x) const noexcept {
    return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x];
  }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  bool same_shape(const Tensor& o) const noexcept {
    return c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }
  std::string shape_string() const {
    std::ostringstream os;
    os << c_ << "x" << h_ << "x" << w_;
    return os.str();
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(c_, h_, w_);
    std::transform(data_.begin(), data_.end(), out.data(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  int c_ = 0, h_ = 0, w_ = 0;
  std::vector<T> data_;
};

/// Latent-space tensor; every diffusion state (x0, x_t, d0, d-1, b0, v, eps)
/// lives in this type.
template <class T>
using Latent = Tensor<T>;

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() +
                     " vs " + b.shape_string());
}

/// out = alpha * a + beta * b, elementwise.
template <class T>
Tensor<T> axpby(T alpha, const Tensor<T>& a, T beta, const Tensor<T>& b) {
  require_same_shape(a, b, "axpby");
  Tensor<T> out(a.channels(), a.height(), a.width());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = alpha * a[i] + beta * b[i];
  return out;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <class T>
double l2_norm(const Tensor<T>& a) {
  double s = 0;
  for (T v : a.values()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

}  // namespace fiffdepth
