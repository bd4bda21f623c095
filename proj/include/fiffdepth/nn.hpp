// fiffdepth/nn.hpp

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

// Forward/backward kernels for the layers of the denoiser. Each backward
// accumulates (+=) into parameter gradients and returns or writes the input
// gradient. Weights are raw pointers into the flat parameter buffer.

#pragma once

#include <Eigen/Core>
#include <cmath>
#include <vector>

#include "fiffdepth/tensor.hpp"

namespace fiffdepth::nn {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// im2col buffer. All GEMM operands sit in aligned storage.
template <class T>
using Scratch = std::vector<T, Eigen::aligned_allocator<T>>;

namespace detail {

template <class T>
RowMat<T>& aligned_copy(int slot, const T* src, Eigen::Index rows, Eigen::Index cols) {
  thread_local RowMat<T> buf[3];
  buf[slot] = ConstMatMap<T>(src, rows, cols);
  return buf[slot];
}

}  // namespace detail

/// Rows: (ci, ky, kx); columns: output pixel. Zero padding k/2.
template <class T>
void im2col(const Tensor<T>& in, int k, Scratch<T>& col) {
  const int C = in.channels(), H = in.height(), W = in.width(), p = k / 2;
  const std::size_t hw = in.plane();
  col.resize(static_cast<std::size_t>(C) * k * k * hw);
  for (int c = 0; c < C; ++c) {
    const T* src = in.channel(c);
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw;
        const int dy = ky - p, dx = kx - p;
        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
        const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
        std::fill(dst, dst + static_cast<std::size_t>(y0) * W, T(0));
        for (int y = y0; y < y1; ++y) {
          const T* s = src + static_cast<std::size_t>(y + dy) * W + dx;
          T* d = dst + static_cast<std::size_t>(y) * W;
          std::fill(d, d + x0, T(0));
          std::copy(s + x0, s + x1, d + x0);
          std::fill(d + x1, d + W, T(0));
        }
        std::fill(dst + static_cast<std::size_t>(y1) * W, dst + hw, T(0));
      }
    }
  }
}

template <class T>
void col2im_add(const Scratch<T>& col, int k, Tensor<T>& grad_in) {
  const int C = grad_in.channels(), H = grad_in.height(), W = grad_in.width(),
            p = k / 2;
  const std::size_t hw = grad_in.plane();
  for (int c = 0; c < C; ++c) {
    T* dst = grad_in.channel(c);
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw;
        const int dy = ky - p, dx = kx - p;
        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
        for (int y = std::max(0, -dy); y < std::min(H, H - dy); ++y) {
          T* d = dst + static_cast<std::size_t>(y + dy) * W + dx;
          const T* s = src + static_cast<std::size_t>(y) * W;
          for (int x = x0; x < x1; ++x) d[x] += s[x];
        }
      }
    }
  }
}

/// Same-padded stride-1 convolution. weight: (cout, cin, k, k); bias: (cout).
template <class T>
Tensor<T> conv2d(const Tensor<T>& in, const T* weight, const T* bias, int cout, int k,
                 Scratch<T>& scratch) {
  const int cin = in.channels();
  const auto hw = static_cast<Eigen::Index>(in.plane());
  im2col(in, k, scratch);
  Tensor<T> out(cout, in.height(), in.width());
  const auto& w = detail::aligned_copy(0, weight, cout, cin * k * k);
  ConstMatMap<T> col(scratch.data(), cin * k * k, hw);
  thread_local RowMat<T> o;
  o.noalias() = w * col;
  for (int c = 0; c < cout; ++c) o.row(c).array() += bias[c];
  MatMap<T>(out.data(), cout, hw) = o;
  return out;
}

template <class T>
Tensor<T> conv2d_backward(const Tensor<T>& in, const Tensor<T>& grad_out,
                          const T* weight, T* grad_weight, T* grad_bias, int k,
                          Scratch<T>& scratch, bool need_input_grad = true) {
  const int cin = in.channels(), cout = grad_out.channels();
  const auto hw = static_cast<Eigen::Index>(in.plane());
  im2col(in, k, scratch);
  ConstMatMap<T> col(scratch.data(), cin * k * k, hw);
  const auto& go = detail::aligned_copy(1, grad_out.data(), cout, hw);
  thread_local RowMat<T> gw;
  gw.noalias() = go * col.transpose();
  MatMap<T>(grad_weight, cout, cin * k * k) += gw;
  for (int c = 0; c < cout; ++c) grad_bias[c] += go.row(c).sum();
  Tensor<T> grad_in(cin, in.height(), in.width());
  if (!need_input_grad) return grad_in;
  const auto& w = detail::aligned_copy(0, weight, cout, cin * k * k);
  MatMap<T> gcol(scratch.data(), cin * k * k, hw);
  gcol.noalias() = w.transpose() * go;
  col2im_add(scratch, k, grad_in);
  return grad_in;
}

/// Saved statistics of one GroupNorm application.
template <class T>
struct GroupNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;  // per group
};

template <class T>
Tensor<T> group_norm(const Tensor<T>& in, int groups, const T* gain, const T* shift,
                     GroupNormCache<T>& cache, T eps = T(1e-5)) {
  const int C = in.channels();
  const int per = C / groups;
  const std::size_t hw = in.plane();
  const std::size_t n = per * hw;
  cache.xhat = Tensor<T>(C, in.height(), in.width());
  cache.inv_std.assign(groups, T(0));
  Tensor<T> out(C, in.height(), in.width());
  for (int g = 0; g < groups; ++g) {
    const T* x = in.channel(g * per);
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = x[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const T inv = static_cast<T>(1.0 / std::sqrt(var + eps));
    cache.inv_std[g] = inv;
    T* xh = cache.xhat.channel(g * per);
    const T m = static_cast<T>(mean);
    for (std::size_t i = 0; i < n; ++i) xh[i] = (x[i] - m) * inv;
    for (int c = g * per; c < (g + 1) * per; ++c) {
      const T* xc = cache.xhat.channel(c);
      T* oc = out.channel(c);
      for (std::size_t i = 0; i < hw; ++i) oc[i] = gain[c] * xc[i] + shift[c];
    }
  }
  return out;
}

template <class T>
Tensor<T> group_norm_backward(const Tensor<T>& grad_out, int groups, const T* gain,
                              const GroupNormCache<T>& cache, T* grad_gain,
                              T* grad_shift) {
  const int C = grad_out.channels();
  const int per = C / groups;
  const std::size_t hw = grad_out.plane();
  Tensor<T> grad_in(C, grad_out.height(), grad_out.width());
  for (int c = 0; c < C; ++c) {
    const T* go = grad_out.channel(c);
    const T* xh = cache.xhat.channel(c);
    double sg = 0, sb = 0;
    for (std::size_t i = 0; i < hw; ++i) {
      sg += static_cast<double>(go[i]) * xh[i];
      sb += go[i];
    }
    grad_gain[c] += static_cast<T>(sg);
    grad_shift[c] += static_cast<T>(sb);
  }
  for (int g = 0; g < groups; ++g) {
    const double n = static_cast<double>(per * hw);
    double mean_dxh = 0, mean_dxh_xh = 0;
    for (int c = g * per; c < (g + 1) * per; ++c) {
      const T* go = grad_out.channel(c);
      const T* xh = cache.xhat.channel(c);
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = static_cast<double>(go[i]) * gain[c];
        mean_dxh += d;
        mean_dxh_xh += d * xh[i];
      }
    }
    mean_dxh /= n;
    mean_dxh_xh /= n;
    const T inv = cache.inv_std[g];
    const T a = static_cast<T>(mean_dxh), b = static_cast<T>(mean_dxh_xh);
    for (int c = g * per; c < (g + 1) * per; ++c) {
      const T* go = grad_out.channel(c);
      const T* xh = cache.xhat.channel(c);
      T* gi = grad_in.channel(c);
      for (std::size_t i = 0; i < hw; ++i)
        gi[i] = inv * (go[i] * gain[c] - a - xh[i] * b);
    }
  }
  return grad_in;
}

template <class T>
T silu(T x) {
  return x / (T(1) + std::exp(-x));
}

template <class T>
T silu_grad(T x) {
  const T s = T(1) / (T(1) + std::exp(-x));
  return s * (T(1) + x * (T(1) - s));
}

template <class T>
Tensor<T> silu(const Tensor<T>& in) {
  Tensor<T> out(in.channels(), in.height(), in.width());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = silu(in[i]);
  return out;
}

/// grad wrt pre-activation given the pre-activation and grad of the output.
template <class T>
Tensor<T> silu_backward(const Tensor<T>& pre, const Tensor<T>& grad_out) {
  Tensor<T> g(pre.channels(), pre.height(), pre.width());
  for (std::size_t i = 0; i < pre.size(); ++i) g[i] = grad_out[i] * silu_grad(pre[i]);
  return g;
}

template <class T>
Tensor<T> avg_pool2(const Tensor<T>& in) {
  const int H = in.height() / 2, W = in.width() / 2;
  Tensor<T> out(in.channels(), H, W);
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        out(c, y, x) = T(0.25) * (in(c, 2 * y, 2 * x) + in(c, 2 * y, 2 * x + 1) +
                                  in(c, 2 * y + 1, 2 * x) + in(c, 2 * y + 1, 2 * x + 1));
  return out;
}

template <class T>
Tensor<T> avg_pool2_backward(const Tensor<T>& grad_out) {
  Tensor<T> g(grad_out.channels(), grad_out.height() * 2, grad_out.width() * 2);
  for (int c = 0; c < g.channels(); ++c)
    for (int y = 0; y < g.height(); ++y)
      for (int x = 0; x < g.width(); ++x) g(c, y, x) = T(0.25) * grad_out(c, y / 2, x / 2);
  return g;
}

template <class T>
Tensor<T> upsample2(const Tensor<T>& in) {
  Tensor<T> out(in.channels(), in.height() * 2, in.width() * 2);
  for (int c = 0; c < out.channels(); ++c)
    for (int y = 0; y < out.height(); ++y)
      for (int x = 0; x < out.width(); ++x) out(c, y, x) = in(c, y / 2, x / 2);
  return out;
}

template <class T>
Tensor<T> upsample2_backward(const Tensor<T>& grad_out) {
  Tensor<T> g(grad_out.channels(), grad_out.height() / 2, grad_out.width() / 2);
  for (int c = 0; c < grad_out.channels(); ++c)
    for (int y = 0; y < grad_out.height(); ++y)
      for (int x = 0; x < grad_out.width(); ++x) g(c, y / 2, x / 2) += grad_out(c, y, x);
  return g;
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.height() != b.height() || a.width() != b.width())
    throw ShapeError("concat_channels: spatial mismatch");
  Tensor<T> out(a.channels() + b.channels(), a.height(), a.width());
  std::copy(a.data(), a.data() + a.size(), out.data());
  std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
  return out;
}

/// Splits a gradient of concat(a, b) back into its two parts.
template <class T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& g, int first) {
  Tensor<T> a(first, g.height(), g.width());
  Tensor<T> b(g.channels() - first, g.height(), g.width());
  std::copy(g.data(), g.data() + a.size(), a.data());
  std::copy(g.data() + a.size(), g.data() + g.size(), b.data());
  return {std::move(a), std::move(b)};
}

/// y = W x + b with W (out, in).
template <class T>
std::vector<T> linear(std::span<const T> x, const T* weight, const T* bias, int out) {
  const int in = static_cast<int>(x.size());
  std::vector<T> y(out);
  for (int o = 0; o < out; ++o) {
    T s = bias[o];
    const T* w = weight + static_cast<std::size_t>(o) * in;
    for (int i = 0; i < in; ++i) s += w[i] * x[i];
    y[o] = s;
  }
  return y;
}

template <class T>
std::vector<T> linear_backward(std::span<const T> x, std::span<const T> grad_y,
                               const T* weight, T* grad_weight, T* grad_bias) {
  const int in = static_cast<int>(x.size()), out = static_cast<int>(grad_y.size());
  std::vector<T> gx(in, T(0));
  for (int o = 0; o < out; ++o) {
    const T g = grad_y[o];
    grad_bias[o] += g;
    const T* w = weight + static_cast<std::size_t>(o) * in;
    T* gw = grad_weight + static_cast<std::size_t>(o) * in;
    for (int i = 0; i < in; ++i) {
      gw[i] += g * x[i];
      gx[i] += g * w[i];
    }
  }
  return gx;
}

}  // namespace fiffdepth::nn
