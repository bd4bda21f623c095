// fiffdepth/evalkit.hpp

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

// Affine-invariant depth evaluation, a gradient-based sharpness proxy and
// the single-pass vs iterative-rollout timing harness.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "fiffdepth/dataset.hpp"
#include "fiffdepth/objective.hpp"

namespace fiffdepth {

/// Floor applied to aligned predictions before ratio metrics.
inline constexpr double kDepthFloor = 1e-6;

enum class AlignSpace { depth, disparity };

struct AffineFit {
  double scale = 1, shift = 0;
  bool degenerate = false;  // constant prediction: scale undefined, set to 0
};

namespace detail {

inline void require_same_grid(const DepthMap& a, const DepthMap& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width() || a.valid.size() != a.size() ||
      b.valid.size() != b.size())
    throw ShapeError(std::string(what) + ": depth map shape mismatch");
}

inline bool both_valid(const DepthMap& a, const DepthMap& b, std::size_t i) {
  return a.valid[i] && b.valid[i];
}

}  // namespace detail

/// Least-squares (s, b) minimizing sum (s * pred + b - gt)^2 over pixels
/// valid in both maps.
inline AffineFit align_affine(const DepthMap& pred, const DepthMap& gt) {
  detail::require_same_grid(pred, gt, "align_affine");
  double n = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (detail::both_valid(pred, gt, i)) n += 1, sp += pred.data[i], sg += gt.data[i];
  if (n < 2) throw DegenerateInputError("align_affine: fewer than 2 valid pixels");
  const double mp = sp / n, mg = sg / n;
  double spp = 0, spg = 0, sgg = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (detail::both_valid(pred, gt, i)) {
      const double dp = pred.data[i] - mp, dg = gt.data[i] - mg;
      spp += dp * dp, spg += dp * dg, sgg += dg * dg;
    }
  if (!(sgg > 0)) throw DegenerateInputError("align_affine: constant ground truth");
  AffineFit fit;
  if (!(spp > 1e-300) || spp <= 1e-24 * sgg) {
    fit.scale = 0;
    fit.shift = mg;
    fit.degenerate = true;
    return fit;
  }
  fit.scale = spg / spp;
  fit.shift = mg - fit.scale * mp;
  return fit;
}

/// s * pred + b on every pixel; mask copied from pred.
inline DepthMap apply_affine(const DepthMap& pred, const AffineFit& fit) {
  DepthMap out = pred;
  for (auto& v : out.data.values()) v = fit.scale * v + fit.shift;
  return out;
}

/// Aligns pred to gt in the given space and returns depth-valued output.
/// Disparity alignment fits pred to 1/gt and inverts the result.
inline DepthMap align_prediction(const DepthMap& pred, const DepthMap& gt,
                                 AlignSpace space = AlignSpace::depth, AffineFit* fit_out = nullptr) {
  if (space == AlignSpace::depth) {
    const auto fit = align_affine(pred, gt);
    if (fit_out) *fit_out = fit;
    return apply_affine(pred, fit);
  }
  DepthMap disp = gt;
  for (std::size_t i = 0; i < disp.size(); ++i) disp.data[i] = 1.0 / std::max(gt.data[i], kDepthFloor);
  const auto fit = align_affine(pred, disp);
  if (fit_out) *fit_out = fit;
  auto out = apply_affine(pred, fit);
  for (auto& v : out.data.values()) v = 1.0 / std::max(v, kDepthFloor);
  return out;
}

namespace detail {

template <class F>
double mean_over_valid(const DepthMap& pred, const DepthMap& gt, const char* what, F&& f) {
  require_same_grid(pred, gt, what);
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!both_valid(pred, gt, i)) continue;
    if (!(gt.data[i] > 0)) throw RangeError(std::string(what) + ": ground truth must be positive");
    s += f(std::max(pred.data[i], kDepthFloor), gt.data[i]);
    ++n;
  }
  if (n == 0) throw DegenerateInputError(std::string(what) + ": no valid pixels");
  return s / static_cast<double>(n);
}

}  // namespace detail

/// mean |pred - gt| / gt over valid pixels.
inline double abs_rel(const DepthMap& pred_aligned, const DepthMap& gt) {
  return detail::mean_over_valid(pred_aligned, gt, "abs_rel",
                                 [](double p, double g) { return std::abs(p - g) / g; });
}

/// Fraction of valid pixels with max(pred/gt, gt/pred) < 1.25.
inline double delta1(const DepthMap& pred_aligned, const DepthMap& gt) {
  return detail::mean_over_valid(pred_aligned, gt, "delta1", [](double p, double g) {
    return std::max(p / g, g / p) < 1.25 ? 1.0 : 0.0;
  });
}

/// Mean of |dx R| + |dy R| terms for R = pred - gt with forward differences;
/// a difference term counts when both of its pixels are valid.
inline double gradient_error(const DepthMap& pred_aligned, const DepthMap& gt) {
  detail::require_same_grid(pred_aligned, gt, "gradient_error");
  const int H = gt.height(), W = gt.width();
  require_gm_shape(H, W);
  auto ok = [&](int y, int x) { return detail::both_valid(pred_aligned, gt, static_cast<std::size_t>(y) * W + x); };
  auto R = [&](int y, int x) { return pred_aligned.at(y, x) - gt.at(y, x); };
  double s = 0;
  std::size_t n = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (!ok(y, x)) continue;
      if (x + 1 < W && ok(y, x + 1)) s += std::abs(R(y, x + 1) - R(y, x)), ++n;
      if (y + 1 < H && ok(y + 1, x)) s += std::abs(R(y + 1, x) - R(y, x)), ++n;
    }
  if (n == 0) throw DegenerateInputError("gradient_error: no valid difference terms");
  return s / static_cast<double>(n);
}

struct ImageMetrics {
  std::string id;
  double abs_rel = 0, delta1 = 0, gradient_error = 0;
  bool degenerate_alignment = false;
};

struct EvalReport {
  std::vector<ImageMetrics> images;
  double abs_rel = 0, delta1 = 0, gradient_error = 0;
  std::size_t count = 0, skipped = 0, degenerate_alignments = 0;
  double wall_ms_total = 0, wall_ms_per_image = 0;
  AlignSpace space = AlignSpace::depth;

  void aggregate() {
    count = images.size();
    abs_rel = delta1 = gradient_error = 0;
    degenerate_alignments = 0;
    for (const auto& m : images) {
      abs_rel += m.abs_rel, delta1 += m.delta1, gradient_error += m.gradient_error;
      degenerate_alignments += m.degenerate_alignment ? 1 : 0;
    }
    if (count) {
      const double n = static_cast<double>(count);
      abs_rel /= n, delta1 /= n, gradient_error /= n;
      wall_ms_per_image = wall_ms_total / n;
    }
  }

  /// UTF-8 key=value lines.
  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "count=" << count << "\nskipped=" << skipped << "\nabs_rel=" << abs_rel << "\ndelta1=" << delta1
       << "\ngradient_error=" << gradient_error
       << "\ngradient_error_note=sharpness proxy: mean |grad(pred - gt)| after alignment"
       << "\nalign_space=" << (space == AlignSpace::depth ? "depth" : "disparity")
       << "\ndepth_floor=" << kDepthFloor << "\ndegenerate_alignments=" << degenerate_alignments
       << "\nwall_ms_total=" << wall_ms_total << "\nwall_ms_per_image=" << wall_ms_per_image << "\n";
    return os.str();
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(17) << "id,abs_rel,delta1,gradient_error,degenerate_alignment\n";
    for (const auto& m : images)
      os << m.id << ',' << m.abs_rel << ',' << m.delta1 << ',' << m.gradient_error << ','
         << (m.degenerate_alignment ? 1 : 0) << '\n';
    return os.str();
  }
};

struct EvalOptions {
  AlignSpace space = AlignSpace::depth;
  std::optional<Domain> domain;  // restrict to one domain
};

/// Per sample: encode RGB, predict d0, decode, align to the evaluation depth
/// and score. Samples without any ground truth are skipped and counted.
template <class T>
EvalReport evaluate(const DenoiserParams<T>& params, const std::vector<SceneSample>& samples,
                    const Codec& codec, const EvalOptions& opt = {}) {
  EvalReport rep;
  rep.space = opt.space;
  const auto start = std::chrono::steady_clock::now();
  std::size_t considered = 0;
  for (const auto& s : samples) {
    if (opt.domain && s.domain != *opt.domain) continue;
    ++considered;
    const DepthMap* gt = s.eval_depth();
    if (!gt) {
      ++rep.skipped;
      continue;
    }
    const auto z = codec.encode_image<T>(s.rgb);
    const auto pred = codec.decode_depth(predict_d0(params, z));
    AffineFit fit;
    const auto aligned = align_prediction(pred, *gt, opt.space, &fit);
    rep.images.push_back({s.id, abs_rel(aligned, *gt), delta1(aligned, *gt), gradient_error(aligned, *gt),
                          fit.degenerate});
  }
  if (considered == 0) throw DegenerateInputError("evaluate: empty dataset");
  if (rep.images.empty()) throw DegenerateInputError("evaluate: no sample carries ground truth");
  rep.wall_ms_total = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  rep.aggregate();
  return rep;
}

// ---------------------------------------------------------------------------
// Timing.

/// K descending timesteps from T to 1 (just T when K = 1).
inline std::vector<int> rollout_timesteps(int T, int K) {
  if (K < 1) throw RangeError("rollout: K must be >= 1");
  std::vector<int> ts(K);
  for (int k = 0; k < K; ++k)
    ts[k] = K == 1 ? T : static_cast<int>(std::lround(T - static_cast<double>(k) * (T - 1) / (K - 1)));
  return ts;
}

/// Deterministic K-step rollout: the input latent plays x_T; at each step the
/// network's v prediction gives (b0, eps) estimates and the state moves to the
/// next timestep without fresh noise. Returns the final b0 estimate.
template <class T>
Latent<T> iterative_rollout(const DenoiserParams<T>& params, const Latent<T>& z,
                            const NoiseSchedule& sched, int K) {
  const auto ts = rollout_timesteps(sched.T, K);
  Latent<T> x = z, b0;
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const auto v = forward(params, x, t);
    b0 = recover_b0(x, v, t, sched);
    if (k + 1 == ts.size()) break;
    const auto eps = recover_eps(x, v, t, sched);
    x = add_noise(b0, eps, ts[k + 1], sched);
  }
  return b0;
}

struct TimingReport {
  int image_size = 0, latent_size = 0, K = 0, repeats = 0;
  double single_pass_ms = 0, rollout_ms = 0;
  bool low_confidence = false;  // fewer than 2 repeats

  double speedup() const { return single_pass_ms > 0 ? rollout_ms / single_pass_ms : 0.0; }

  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(9) << "image_size=" << image_size << "\nlatent_size=" << latent_size
       << "\nK=" << K << "\nrepeats=" << repeats << "\nsingle_pass_ms=" << single_pass_ms
       << "\nrollout_ms=" << rollout_ms << "\nspeedup=" << speedup()
       << "\nlow_confidence=" << (low_confidence ? 1 : 0) << "\n";
    return os.str();
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Median wall-clock of predict_d0 vs a K-step rollout on the same latent,
/// interleaved, after one warm-up run of each.
template <class T>
TimingReport timing_bench(const DenoiserParams<T>& params, const NoiseSchedule& sched,
                          const CodecConfig& codec, int image_size, int K, int repeats,
                          std::uint64_t seed = 0) {
  if (repeats < 1) throw RangeError("timing_bench: repeats must be >= 1");
  const int ls = image_size / codec.patch_size;
  Latent<T> z(params.arch.in_channels, ls, ls);
  auto rng = detail::make_rng(seed, 0x71e);
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& v : z.values()) v = static_cast<T>(u(rng));
  using clock = std::chrono::steady_clock;
  auto time_ms = [](auto&& f) {
    const auto a = clock::now();
    f();
    return std::chrono::duration<double, std::milli>(clock::now() - a).count();
  };
  volatile T sink = 0;
  sink = sink + predict_d0(params, z)[0];
  sink = sink + iterative_rollout(params, z, sched, K)[0];
  std::vector<double> single, roll;
  for (int r = 0; r < repeats; ++r) {
    single.push_back(time_ms([&] { sink = sink + predict_d0(params, z)[0]; }));
    roll.push_back(time_ms([&] { sink = sink + iterative_rollout(params, z, sched, K)[0]; }));
  }
  TimingReport rep;
  rep.image_size = image_size;
  rep.latent_size = ls;
  rep.K = K;
  rep.repeats = repeats;
  rep.single_pass_ms = median(single);
  rep.rollout_ms = median(roll);
  rep.low_confidence = repeats < 2;
  return rep;
}

}  // namespace fiffdepth
