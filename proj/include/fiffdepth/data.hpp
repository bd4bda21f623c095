// fiffdepth/data.hpp

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

// Procedural layered scenes with exact depth. Synthetic samples carry their
// depth; "real" samples are rendered the same way, then degraded (colour
// jitter, blur, sensor noise) and supervised by a coarse teacher depth. Their
// true depth is kept aside for evaluation only.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fiffdepth/codec.hpp"

namespace fiffdepth {

enum class Domain { synthetic, real };

inline std::string to_string(Domain d) { return d == Domain::synthetic ? "synthetic" : "real"; }

inline Domain domain_from_string(const std::string& s) {
  if (s == "synthetic") return Domain::synthetic;
  if (s == "real") return Domain::real;
  throw IoError("unknown domain '" + s + "'");
}

enum class Corruption { none, real_shift };

struct SceneGenConfig {
  int image_size = 64;
  int min_primitives = 3;
  int max_primitives = 12;
  double texture_strength = 0.1;
  Corruption corruption = Corruption::real_shift;  // applied to the real domain only
  double noise_sigma = 0.02;                       // on [0, 1] intensities
  int blur_radius = 0;
  double color_jitter = 0.3;
  double illumination = 0.5;                       // log-amplitude of a smooth gain field
  double teacher_coarseness = 8.0;
  double teacher_noise = 0.02;  // relative to the depth range
  std::uint64_t seed = 0;

  void validate(int patch_size = 1) const {
    if (image_size <= 0) throw ConfigError("scene.image_size", "must be positive");
    if (image_size % patch_size)
      throw ConfigError("scene.image_size", "must be divisible by the codec patch size");
    if (min_primitives < 1 || max_primitives < min_primitives)
      throw ConfigError("scene.min_primitives", "need 1 <= min_primitives <= max_primitives");
    if (texture_strength < 0) throw ConfigError("scene.texture_strength", "must be >= 0");
    if (noise_sigma < 0) throw ConfigError("scene.noise_sigma", "must be >= 0");
    if (blur_radius < 0) throw ConfigError("scene.blur_radius", "must be >= 0");
    if (color_jitter < 0 || color_jitter >= 1) throw ConfigError("scene.color_jitter", "must be in [0, 1)");
    if (illumination < 0) throw ConfigError("scene.illumination", "must be >= 0");
    if (teacher_coarseness < 1) throw ConfigError("scene.teacher_coarseness", "must be >= 1");
    if (teacher_noise < 0) throw ConfigError("scene.teacher_noise", "must be >= 0");
  }

  /// Canonical text form; the dataset config hash is computed over it.
  std::string canonical() const {
    std::ostringstream os;
    os << std::setprecision(17) << "image_size=" << image_size << "\nmin_primitives=" << min_primitives
       << "\nmax_primitives=" << max_primitives << "\ntexture_strength=" << texture_strength
       << "\ncorruption=" << (corruption == Corruption::none ? "none" : "real-shift")
       << "\nnoise_sigma=" << noise_sigma << "\nblur_radius=" << blur_radius
       << "\ncolor_jitter=" << color_jitter << "\nillumination=" << illumination << "\nteacher_coarseness=" << teacher_coarseness
       << "\nteacher_noise=" << teacher_noise << "\nseed=" << seed << "\n";
    return os.str();
  }
};

enum class PrimitiveKind { rectangle, ellipse, bar };

/// A fronto-parallel layer at constant depth.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::rectangle;
  double depth = 1.0;
  double cx = 0, cy = 0, rx = 1, ry = 1;  // centre and half-extents in pixels
  double chroma[3] = {1, 1, 1};
  double tex_fx = 0, tex_fy = 0, tex_phase = 0;

  bool covers(int x, int y) const {
    const double px = x + 0.5, py = y + 0.5;
    if (kind == PrimitiveKind::ellipse) {
      const double u = (px - cx) / rx, v = (py - cy) / ry;
      return u * u + v * v <= 1.0;
    }
    return std::abs(px - cx) <= rx && std::abs(py - cy) <= ry;
  }
};

/// Scene description, kept so tests can check rendered depth against it.
struct SceneLayout {
  double bg_depth_top = 9.0, bg_depth_bottom = 6.5, bg_tilt = 0;
  double bg_chroma[3] = {1, 1, 1};
  std::vector<Primitive> primitives;  // sorted far to near

  double background_depth(int x, int y, int size) const {
    const double fy = (y + 0.5) / size, fx = (x + 0.5) / size - 0.5;
    return bg_depth_top + (bg_depth_bottom - bg_depth_top) * fy + bg_tilt * fx;
  }
};

struct SceneSample {
  std::string id;
  Domain domain = Domain::synthetic;
  PixelImage rgb;
  std::optional<DepthMap> depth_gt;       // synthetic only
  std::optional<DepthMap> teacher_depth;  // real only
  std::optional<DepthMap> hidden_depth;   // real only; evaluation, never training
  SceneLayout layout;

  /// Depth usable for evaluation regardless of domain.
  const DepthMap* eval_depth() const {
    if (depth_gt) return &*depth_gt;
    if (hidden_depth) return &*hidden_depth;
    return nullptr;
  }
};

/// Intensity falloff with distance; the cue that makes depth readable from RGB.
inline double depth_shading(double depth) { return 0.85 * std::exp(-(depth - 1.0) / 4.0); }

inline double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

inline float quantize_8bit(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::round(c * 255.0) / 255.0 * 2.0 - 1.0);
}

namespace detail {

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                std::uint64_t c = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(c)};
  return std::mt19937_64(seq);
}

inline void random_chroma(std::mt19937_64& rng, double (&out)[3]) {
  std::uniform_real_distribution<double> u(0.75, 1.25);
  double s = 0;
  for (double& c : out) s += (c = u(rng));
  for (double& c : out) c *= 3.0 / s;
}

inline SceneLayout random_layout(const SceneGenConfig& cfg, std::mt19937_64& rng) {
  const double S = cfg.image_size;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
  SceneLayout l;
  l.bg_depth_top = uni(8.5, 10.0);
  l.bg_depth_bottom = uni(6.0, 7.5);
  l.bg_tilt = uni(-0.5, 0.5);
  random_chroma(rng, l.bg_chroma);
  const int n = std::uniform_int_distribution<int>(cfg.min_primitives, cfg.max_primitives)(rng);
  std::vector<double> depths;
  while (static_cast<int>(depths.size()) < n) {
    const double d = round_to_float(uni(1.5, 5.5));
    if (std::all_of(depths.begin(), depths.end(), [&](double o) { return std::abs(o - d) > 0.05; }))
      depths.push_back(d);
  }
  for (double d : depths) {
    Primitive p;
    p.depth = d;
    const double r = u01(rng);
    p.kind = r < 0.45 ? PrimitiveKind::rectangle : (r < 0.8 ? PrimitiveKind::ellipse : PrimitiveKind::bar);
    p.cx = uni(0, S);
    p.cy = uni(0, S);
    if (p.kind == PrimitiveKind::bar) {
      const double thick = u01(rng) < 0.5 ? 0.5 : 1.0;  // 1 or 2 px wide
      const double len = uni(0.25, 0.8) * S * 0.5;
      if (u01(rng) < 0.5) {
        p.rx = len, p.ry = thick;
      } else {
        p.rx = thick, p.ry = len;
      }
    } else {
      p.rx = uni(0.08, 0.3) * S;
      p.ry = uni(0.08, 0.3) * S;
    }
    random_chroma(rng, p.chroma);
    p.tex_fx = uni(-0.8, 0.8);
    p.tex_fy = uni(-0.8, 0.8);
    p.tex_phase = uni(0, 6.283185307179586);
    l.primitives.push_back(p);
  }
  std::sort(l.primitives.begin(), l.primitives.end(),
            [](const Primitive& a, const Primitive& b) { return a.depth > b.depth; });
  return l;
}

/// Renders depth and [0, 1] linear intensities (3 x S x S).
inline void render(const SceneLayout& l, const SceneGenConfig& cfg, DepthMap& depth,
                   Tensor<double>& intensity) {
  const int S = cfg.image_size;
  depth = DepthMap(S, S);
  intensity = Tensor<double>(3, S, S);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double d = round_to_float(l.background_depth(x, y, S));
      depth.at(y, x) = d;
      for (int c = 0; c < 3; ++c) intensity(c, y, x) = l.bg_chroma[c] * depth_shading(d);
    }
  for (const auto& p : l.primitives) {
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        if (!p.covers(x, y)) continue;
        depth.at(y, x) = p.depth;
        const double tex = 1.0 + cfg.texture_strength * std::sin(p.tex_fx * x + p.tex_fy * y + p.tex_phase);
        for (int c = 0; c < 3; ++c) intensity(c, y, x) = p.chroma[c] * depth_shading(p.depth) * tex;
      }
  }
}

inline Tensor<double> box_blur(const Tensor<double>& in, int radius) {
  if (radius <= 0) return in;
  const int C = in.channels(), H = in.height(), W = in.width();
  Tensor<double> tmp(C, H, W), out(C, H, W);
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double s = 0;
        int n = 0;
        for (int k = std::max(0, x - radius); k <= std::min(W - 1, x + radius); ++k, ++n) s += in(c, y, k);
        tmp(c, y, x) = s / n;
      }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double s = 0;
        int n = 0;
        for (int k = std::max(0, y - radius); k <= std::min(H - 1, y + radius); ++k, ++n) s += tmp(c, k, x);
        out(c, y, x) = s / n;
      }
  }
  return out;
}

/// Bilinear resampling of a coarse grid (gh x gw) onto H x W pixel centres.
inline Tensor<double> upsample_bilinear(const Tensor<double>& g, int H, int W) {
  Tensor<double> out(g.channels(), H, W);
  const int gh = g.height(), gw = g.width();
  for (int c = 0; c < g.channels(); ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double fy = std::clamp((y + 0.5) * gh / H - 0.5, 0.0, gh - 1.0);
        const double fx = std::clamp((x + 0.5) * gw / W - 0.5, 0.0, gw - 1.0);
        const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
        const int y1 = std::min(y0 + 1, gh - 1), x1 = std::min(x0 + 1, gw - 1);
        const double ay = fy - y0, ax = fx - x0;
        out(c, y, x) = (1 - ay) * ((1 - ax) * g(c, y0, x0) + ax * g(c, y0, x1)) +
                       ay * ((1 - ax) * g(c, y1, x0) + ax * g(c, y1, x1));
      }
  return out;
}

}  // namespace detail

/// Coarse, smooth depth standing in for a generalist teacher: block-average
/// downsampling by the coarseness factor, bilinear upsampling, a box blur of
/// half the factor, and low-frequency additive noise. Preserves global
/// ordering and removes thin structures. coarseness = 1 with zero noise is
/// the identity.
inline DepthMap teacher_pseudolabel(const DepthMap& truth, double coarseness, double noise = 0.0,
                                    std::uint64_t noise_seed = 0) {
  if (!(coarseness >= 1)) throw RangeError("teacher_pseudolabel: coarseness must be >= 1");
  const int H = truth.height(), W = truth.width();
  const int k = std::max(1, static_cast<int>(std::lround(coarseness)));
  Tensor<double> result = truth.data;
  if (k > 1) {
    const int gh = (H + k - 1) / k, gw = (W + k - 1) / k;
    Tensor<double> grid(1, gh, gw);
    for (int by = 0; by < gh; ++by)
      for (int bx = 0; bx < gw; ++bx) {
        double s = 0;
        int n = 0;
        for (int y = by * k; y < std::min(H, (by + 1) * k); ++y)
          for (int x = bx * k; x < std::min(W, (bx + 1) * k); ++x, ++n) s += truth.at(y, x);
        grid(0, by, bx) = s / n;
      }
    result = detail::box_blur(detail::upsample_bilinear(grid, H, W), k / 2);
  }
  if (noise > 0) {
    auto rng = detail::make_rng(noise_seed, 0x7eac4e7);
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor<double> grid(1, 4, 4);
    for (auto& v : grid.values()) v = normal(rng);
    const auto field = detail::upsample_bilinear(grid, H, W);
    double lo = result[0], hi = result[0];
    for (double v : result.values()) lo = std::min(lo, v), hi = std::max(hi, v);
    const double amp = noise * (hi - lo);
    for (std::size_t i = 0; i < result.size(); ++i) result[i] += amp * field[i];
  }
  DepthMap out(H, W);
  for (std::size_t i = 0; i < result.size(); ++i) out.data[i] = round_to_float(result[i]);
  out.valid = truth.valid;
  return out;
}

/// Colour jitter, uneven illumination, blur and additive noise on [0, 1]
/// intensities.
inline Tensor<double> apply_real_shift(const Tensor<double>& img, const SceneGenConfig& cfg,
                                       std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double global = 1.0 + cfg.color_jitter * u(rng);
  double gain[3], offset[3];
  for (int c = 0; c < 3; ++c) {
    gain[c] = global * (1.0 + 0.5 * cfg.color_jitter * u(rng));
    offset[c] = 0.25 * cfg.color_jitter * u(rng);
  }
  Tensor<double> out = img;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < out.plane(); ++i) out.channel(c)[i] = out.channel(c)[i] * gain[c] + offset[c];
  if (cfg.illumination > 0) {
    Tensor<double> grid(1, 3, 3);
    for (auto& v : grid.values()) v = u(rng);
    const auto field = detail::upsample_bilinear(grid, out.height(), out.width());
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < out.plane(); ++i) out.channel(c)[i] *= std::exp(cfg.illumination * field[i]);
  }
  out = detail::box_blur(out, cfg.blur_radius);
  std::normal_distribution<double> normal(0.0, cfg.noise_sigma > 0 ? cfg.noise_sigma : 1.0);
  if (cfg.noise_sigma > 0)
    for (auto& v : out.values()) v += normal(rng);
  return out;
}

inline std::string sample_id(Domain d, int index) {
  std::ostringstream os;
  os << (d == Domain::synthetic ? "syn_" : "real_") << std::setw(6) << std::setfill('0') << index;
  return os.str();
}

/// Deterministic in (cfg, domain, index). Scenes whose depth has no
/// percentile spread are resampled.
inline SceneSample gen_scene(const SceneGenConfig& cfg, int index, Domain domain = Domain::synthetic) {
  cfg.validate();
  SceneSample s;
  s.id = sample_id(domain, index);
  s.domain = domain;
  const auto dom = static_cast<std::uint64_t>(domain == Domain::synthetic ? 1 : 2);
  DepthMap depth;
  Tensor<double> intensity;
  for (std::uint64_t attempt = 0;; ++attempt) {
    auto rng = detail::make_rng(cfg.seed, static_cast<std::uint64_t>(index), dom, attempt);
    s.layout = detail::random_layout(cfg, rng);
    detail::render(s.layout, cfg, depth, intensity);
    try {
      normalize_depth(depth);
    } catch (const DegenerateInputError&) {
      if (attempt > 64) throw;
      continue;
    }
    if (domain == Domain::real && cfg.corruption == Corruption::real_shift)
      intensity = apply_real_shift(intensity, cfg, rng);
    break;
  }
  s.rgb.data = Tensor<float>(3, cfg.image_size, cfg.image_size);
  for (std::size_t i = 0; i < intensity.size(); ++i) s.rgb.data[i] = quantize_8bit(intensity[i]);
  if (domain == Domain::synthetic) {
    s.depth_gt = std::move(depth);
  } else {
    s.teacher_depth = teacher_pseudolabel(depth, cfg.teacher_coarseness, cfg.teacher_noise,
                                          cfg.seed * 1000003ULL + static_cast<std::uint64_t>(index));
    s.hidden_depth = std::move(depth);
  }
  return s;
}

/// Spearman rank correlation (average ranks for ties).
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](auto i, auto j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) ma += ra[i], mb += rb[i];
  ma /= n, mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace fiffdepth
