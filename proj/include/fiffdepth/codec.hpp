// fiffdepth/codec.hpp

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

// Exactly invertible pixel <-> latent mapping. Identity mode passes tensors
// through; orthonormal-patch mode folds s x s spatial blocks into channels and
// mixes channels with a seeded orthonormal matrix, so decoding is exact up to
// rounding.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <deque>
#include <random>
#include <string>
#include <vector>

#include "fiffdepth/tensor.hpp"

namespace fiffdepth {

/// Normalized RGB, 3 x H x W, nominally in [-1, 1].
struct PixelImage {
  Tensor<float> data;
  int height() const noexcept { return data.height(); }
  int width() const noexcept { return data.width(); }
};

/// Single-channel depth with a validity mask (1 = valid).
struct DepthMap {
  Tensor<double> data;  // 1 x H x W
  std::vector<std::uint8_t> valid;

  DepthMap() = default;
  DepthMap(int h, int w, double fill = 0.0)
      : data(1, h, w, fill), valid(static_cast<std::size_t>(h) * w, 1) {}

  int height() const noexcept { return data.height(); }
  int width() const noexcept { return data.width(); }
  std::size_t size() const noexcept { return data.size(); }
  double& at(int y, int x) noexcept { return data(0, y, x); }
  double at(int y, int x) const noexcept { return data(0, y, x); }
  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), 1));
  }
};

enum class CodecMode { identity, orthonormal_patch };

inline std::string to_string(CodecMode m) {
  return m == CodecMode::identity ? "identity" : "orthonormal-patch";
}

inline CodecMode codec_mode_from_string(const std::string& s) {
  if (s == "identity") return CodecMode::identity;
  if (s == "orthonormal-patch" || s == "orthonormal") return CodecMode::orthonormal_patch;
  throw ConfigError("codec.mode", "unknown codec mode '" + s + "'");
}

struct CodecConfig {
  CodecMode mode = CodecMode::identity;
  int patch_size = 1;
  std::uint64_t seed = 0;  // orthonormal mixing matrix seed

  void validate() const {
    if (patch_size < 1) throw ConfigError("codec.patch_size", "must be positive");
    if (mode == CodecMode::identity && patch_size != 1)
      throw ConfigError("codec.patch_size", "must be 1 in identity mode");
  }
  int latent_channels(int pixel_channels = 3) const {
    return pixel_channels * patch_size * patch_size;
  }
  friend bool operator==(const CodecConfig&, const CodecConfig&) = default;
};

/// Robust percentile normalization of valid depth to [-1, 1] with invalid
/// pixels filled from the nearest valid pixel. Output is 1 x H x W.
inline Tensor<double> normalize_depth(const DepthMap& d, double low_pct = 0.02,
                                      double high_pct = 0.98);

class Codec {
 public:
  explicit Codec(CodecConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.mode == CodecMode::orthonormal_patch) {
      const int n = cfg_.latent_channels();
      std::mt19937_64 rng(cfg_.seed);
      std::normal_distribution<double> normal(0.0, 1.0);
      Eigen::MatrixXd g(n, n);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) g(r, c) = normal(rng);
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
      Eigen::MatrixXd q = qr.householderQ();
      const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
      for (int c = 0; c < n; ++c)
        if (r(c, c) < 0) q.col(c) = -q.col(c);
      mix_ = q;
    }
  }

  const CodecConfig& config() const noexcept { return cfg_; }
  const Eigen::MatrixXd& mixing_matrix() const noexcept { return mix_; }

  template <class T>
  Latent<T> encode_image(const PixelImage& img) const {
    return encode_tensor<T>(img.data);
  }

  template <class T>
  PixelImage decode_image(const Latent<T>& z) const {
    return PixelImage{decode_tensor(z)};
  }

  template <class T>
  Latent<T> encode_depth(const DepthMap& d) const {
    const auto n = normalize_depth(d);
    Tensor<float> rgb(3, n.height(), n.width());
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < n.size(); ++i) rgb.channel(c)[i] = static_cast<float>(n[i]);
    if (cfg_.mode == CodecMode::identity) {
      // identity mode: no float round trip
      Latent<T> z(3, n.height(), n.width());
      for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < n.size(); ++i) z.channel(c)[i] = static_cast<T>(n[i]);
      return z;
    }
    return encode_tensor<T>(rgb);
  }

  /// Channel mean of the decoded image; full valid mask; normalized units.
  template <class T>
  DepthMap decode_depth(const Latent<T>& z) const {
    const auto img = decode_tensor_as<double>(z);
    if (img.channels() != 3) throw ShapeError("decode_depth: expected 3 pixel channels");
    DepthMap d(img.height(), img.width());
    for (std::size_t i = 0; i < img.plane(); ++i)
      d.data[i] = (img.channel(0)[i] + img.channel(1)[i] + img.channel(2)[i]) / 3.0;
    return d;
  }

  template <class T, class S>
  Latent<T> encode_tensor(const Tensor<S>& x) const {
    const int s = cfg_.patch_size;
    if (x.height() % s || x.width() % s)
      throw ShapeError("codec: image " + x.shape_string() + " not divisible by patch size " +
                       std::to_string(s));
    if (cfg_.mode == CodecMode::identity) return x.template cast<T>();
    const int C = x.channels(), h = x.height() / s, w = x.width() / s, n = C * s * s;
    if (mix_.rows() != n)
      throw ShapeError("codec: mixing matrix built for " + std::to_string(mix_.rows()) +
                       " channels, input needs " + std::to_string(n));
    Eigen::MatrixXd folded(n, static_cast<Eigen::Index>(h) * w);
    for (int c = 0; c < C; ++c)
      for (int dy = 0; dy < s; ++dy)
        for (int dx = 0; dx < s; ++dx)
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
              folded((c * s + dy) * s + dx, y * w + xx) = x(c, y * s + dy, xx * s + dx);
    const Eigen::MatrixXd mixed = mix_ * folded;
    Latent<T> z(n, h, w);
    for (int r = 0; r < n; ++r)
      for (int i = 0; i < h * w; ++i) z.channel(r)[i] = static_cast<T>(mixed(r, i));
    return z;
  }

  template <class T>
  Tensor<float> decode_tensor(const Latent<T>& z) const {
    return decode_tensor_as<double>(z).template cast<float>();
  }

  template <class S, class T>
  Tensor<S> decode_tensor_as(const Latent<T>& z) const {
    if (cfg_.mode == CodecMode::identity) return z.template cast<S>();
    const int s = cfg_.patch_size, n = z.channels();
    if (n != mix_.rows() || n % (s * s))
      throw ShapeError("codec: latent " + z.shape_string() + " incompatible with codec config");
    const int C = n / (s * s), h = z.height(), w = z.width();
    Eigen::MatrixXd mixed(n, static_cast<Eigen::Index>(h) * w);
    for (int r = 0; r < n; ++r)
      for (int i = 0; i < h * w; ++i) mixed(r, i) = z.channel(r)[i];
    const Eigen::MatrixXd folded = mix_.transpose() * mixed;
    Tensor<S> x(C, h * s, w * s);
    for (int c = 0; c < C; ++c)
      for (int dy = 0; dy < s; ++dy)
        for (int dx = 0; dx < s; ++dx)
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
              x(c, y * s + dy, xx * s + dx) = static_cast<S>(folded((c * s + dy) * s + dx, y * w + xx));
    return x;
  }

 private:
  CodecConfig cfg_;
  Eigen::MatrixXd mix_;
};

template <class T>
Latent<T> encode_image(const PixelImage& img, const CodecConfig& cfg) {
  return Codec(cfg).encode_image<T>(img);
}
template <class T>
PixelImage decode_image(const Latent<T>& z, const CodecConfig& cfg) {
  return Codec(cfg).decode_image(z);
}
template <class T>
Latent<T> encode_depth(const DepthMap& d, const CodecConfig& cfg) {
  return Codec(cfg).encode_depth<T>(d);
}
template <class T>
DepthMap decode_depth(const Latent<T>& z, const CodecConfig& cfg) {
  return Codec(cfg).decode_depth(z);
}

/// Linear-interpolation percentile of an unsorted sample, q in [0, 1].
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw DegenerateInputError("percentile of empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double f = pos - static_cast<double>(lo);
  return v[lo] + (v[hi] - v[lo]) * f;
}

/// Replaces invalid pixels by the value of the nearest valid pixel
/// (4-neighbour breadth-first order).
inline Tensor<double> fill_invalid_nearest(const DepthMap& d) {
  const int H = d.height(), W = d.width();
  Tensor<double> out = d.data;
  std::vector<std::uint8_t> done(d.valid);
  std::deque<int> q;
  for (int i = 0; i < H * W; ++i)
    if (done[i]) q.push_back(i);
  if (q.empty()) throw DegenerateInputError("depth map has no valid pixels");
  while (!q.empty()) {
    const int i = q.front();
    q.pop_front();
    const int y = i / W, x = i % W;
    const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
    for (const auto& p : nb) {
      if (p[0] < 0 || p[0] >= H || p[1] < 0 || p[1] >= W) continue;
      const int j = p[0] * W + p[1];
      if (done[j]) continue;
      done[j] = 1;
      out[j] = out[i];
      q.push_back(j);
    }
  }
  return out;
}

inline Tensor<double> normalize_depth(const DepthMap& d, double low_pct, double high_pct) {
  if (d.valid.size() != d.size()) throw ShapeError("depth map mask size mismatch");
  std::vector<double> vals;
  vals.reserve(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!d.valid[i]) continue;
    if (!std::isfinite(d.data[i])) throw DegenerateInputError("non-finite valid depth");
    vals.push_back(d.data[i]);
  }
  if (vals.empty()) throw DegenerateInputError("depth map has no valid pixels");
  const double lo = percentile(vals, low_pct), hi = percentile(vals, high_pct);
  const double spread = hi - lo;
  if (!(spread > 1e-12 * std::max(1.0, std::max(std::abs(lo), std::abs(hi)))))
    throw DegenerateInputError("degenerate depth: percentile spread is zero");
  auto filled = fill_invalid_nearest(d);
  for (std::size_t i = 0; i < filled.size(); ++i)
    filled[i] = std::clamp(2.0 * (filled[i] - lo) / spread - 1.0, -1.0, 1.0);
  return filled;
}

}  // namespace fiffdepth
