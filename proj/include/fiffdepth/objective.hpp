// fiffdepth/objective.hpp

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

// Training objectives: the diffusion pretraining loss, trajectory keeping on
// blended image/depth latents, and the latent-space MAE / gradient-matching
// depth losses applied at t = 0 (synthetic ground truth) and t = -1 (teacher
// pseudo-labels on the real domain).

#pragma once

#include <cmath>
#include <random>
#include <type_traits>
#include <vector>

#include "fiffdepth/denoiser.hpp"
#include "fiffdepth/schedule.hpp"

namespace fiffdepth {

struct LossWeights {
  double gamma = 0.5;
  double lambda_mae = 1.0;
  double lambda_gm = 0.5;
  double lambda_k = 0.2;

  void validate() const {
    if (!std::isfinite(gamma) || gamma < 0 || gamma > 1)
      throw ConfigError("train.gamma", "must lie in [0, 1]");
    if (!std::isfinite(lambda_mae) || lambda_mae < 0)
      throw ConfigError("train.lambda_mae", "must be finite and nonnegative");
    if (!std::isfinite(lambda_gm) || lambda_gm < 0)
      throw ConfigError("train.lambda_gm", "must be finite and nonnegative");
    if (!std::isfinite(lambda_k) || lambda_k < 0)
      throw ConfigError("train.lambda_k", "must be finite and nonnegative");
  }
};

/// Per-term batch means. The *_tm1 slots hold the teacher-supervised terms;
/// they refer to d0 instead of d-1 when teacher supervision is moved to t = 0.
struct LossBreakdown {
  double l_mae_t0 = 0, l_gm_t0 = 0, l_mae_tm1 = 0, l_gm_tm1 = 0, l_k = 0, l_final = 0;
};

inline double weighted_total(const LossBreakdown& b, const LossWeights& w) {
  return w.lambda_mae * (b.l_mae_t0 + b.l_mae_tm1) + w.lambda_gm * (b.l_gm_t0 + b.l_gm_tm1) +
         w.lambda_k * b.l_k;
}

// ---------------------------------------------------------------------------
// Depth losses. Argument order follows L(d, d*) with d the target and d* the
// prediction; gradients are taken with respect to the prediction.

template <class T>
double mae_loss(const Latent<T>& d, const Latent<T>& d_star) {
  require_same_shape(d, d_star, "mae_loss");
  if (d.empty()) throw ShapeError("mae_loss: empty latent");
  double s = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    s += std::abs(static_cast<double>(d[i]) - static_cast<double>(d_star[i]));
  return s / static_cast<double>(d.size());
}

/// grad += scale * dL_MAE / d(d_star)
template <class T>
void mae_loss_grad(const Latent<T>& d, const Latent<T>& d_star, double scale, Latent<T>& grad) {
  const double k = scale / static_cast<double>(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double r = static_cast<double>(d_star[i]) - static_cast<double>(d[i]);
    grad[i] += static_cast<T>(r > 0 ? k : (r < 0 ? -k : 0.0));
  }
}

inline void require_gm_shape(int h, int w) {
  if (h < 2 || w < 2) throw ShapeError("gm_loss: spatial dimensions must be at least 2");
}

/// Number of forward-difference terms summed by gm_loss.
inline std::size_t gm_term_count(int c, int h, int w) {
  return static_cast<std::size_t>(c) * h * (w - 1) + static_cast<std::size_t>(c) * (h - 1) * w;
}

/// Single-scale gradient matching on R = d - d_star: forward differences
/// along x and y within each channel, normalized by the number of terms.
template <class T>
double gm_loss(const Latent<T>& d, const Latent<T>& d_star) {
  require_same_shape(d, d_star, "gm_loss");
  const int C = d.channels(), H = d.height(), W = d.width();
  require_gm_shape(H, W);
  auto R = [&](int c, int y, int x) {
    return static_cast<double>(d(c, y, x)) - static_cast<double>(d_star(c, y, x));
  };
  double s = 0;
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (x + 1 < W) s += std::abs(R(c, y, x + 1) - R(c, y, x));
        if (y + 1 < H) s += std::abs(R(c, y + 1, x) - R(c, y, x));
      }
  return s / static_cast<double>(gm_term_count(C, H, W));
}

template <class T>
void gm_loss_grad(const Latent<T>& d, const Latent<T>& d_star, double scale, Latent<T>& grad) {
  const int C = d.channels(), H = d.height(), W = d.width();
  require_gm_shape(H, W);
  const double k = scale / static_cast<double>(gm_term_count(C, H, W));
  auto R = [&](int c, int y, int x) {
    return static_cast<double>(d(c, y, x)) - static_cast<double>(d_star(c, y, x));
  };
  auto sgn = [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); };
  // dR/d(d_star) = -1
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (x + 1 < W) {
          const double g = k * sgn(R(c, y, x + 1) - R(c, y, x));
          grad(c, y, x + 1) -= static_cast<T>(g);
          grad(c, y, x) += static_cast<T>(g);
        }
        if (y + 1 < H) {
          const double g = k * sgn(R(c, y + 1, x) - R(c, y, x));
          grad(c, y + 1, x) -= static_cast<T>(g);
          grad(c, y, x) += static_cast<T>(g);
        }
      }
}

template <class T>
double mean_squared(const Latent<T>& a, const Latent<T>& b) {
  require_same_shape(a, b, "mean_squared");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double r = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += r * r;
  }
  return s / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Trajectory operations.

/// b0 = gamma x0 + (1 - gamma) d0
template <class T>
Latent<T> blend_latent(const Latent<T>& x0, const Latent<T>& d0, double gamma) {
  if (!(gamma >= 0 && gamma <= 1)) throw RangeError("blend_latent: gamma outside [0, 1]");
  require_same_shape(x0, d0, "blend_latent");
  if (gamma == 1) return x0;
  if (gamma == 0) return d0;
  return axpby(static_cast<T>(gamma), x0, static_cast<T>(1 - gamma), d0);
}

/// d0 = net(x0, t = 0)
template <class T>
Latent<T> predict_d0(const DenoiserParams<T>& params, const Latent<T>& x0,
                     ForwardTrace<T>* trace = nullptr) {
  return forward(params, x0, 0, trace);
}

/// d-1 = net(d0, t = -1)
template <class T>
Latent<T> predict_d_minus1(const DenoiserParams<T>& params, const Latent<T>& d0,
                           ForwardTrace<T>* trace = nullptr) {
  return forward(params, d0, -1, trace);
}

/// mean (eps - net(x_t, t))^2. When grads is non-null, accumulates
/// scale * dL/dparams.
template <class T>
double simple_loss(const DenoiserParams<T>& params, const Latent<T>& x0, const Latent<T>& eps,
                   int t, const NoiseSchedule& sched, std::type_identity_t<std::vector<T>>* grads = nullptr,
                   double scale = 1.0) {
  sched.check(t);
  const auto xt = add_noise(x0, eps, t, sched);
  ForwardTrace<T> tr;
  const auto pred = forward(params, xt, t, grads ? &tr : nullptr);
  const double loss = mean_squared(eps, pred);
  if (grads) {
    Latent<T> g(pred.channels(), pred.height(), pred.width());
    const double k = 2.0 * scale / static_cast<double>(pred.size());
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] = static_cast<T>(k * (static_cast<double>(pred[i]) - static_cast<double>(eps[i])));
    backward(params, tr, g, *grads, false);
  }
  return loss;
}

/// Builds b0, b_t and v_t for the trajectory-keeping target.
template <class T>
struct TrajectoryTarget {
  Latent<T> b_t, v_t;
};

template <class T>
TrajectoryTarget<T> trajectory_target(const Latent<T>& x0, const Latent<T>& d0_gt,
                                      double gamma, int t, const Latent<T>& eps,
                                      const NoiseSchedule& sched) {
  sched.check(t);
  const auto b0 = blend_latent(x0, d0_gt, gamma);
  return {add_noise(b0, eps, t, sched), v_target(b0, eps, t, sched)};
}

/// L_k with an arbitrary predictor f(latent, t).
template <class T, class Predictor>
double trajectory_keep_loss(const Predictor& f, const Latent<T>& x0, const Latent<T>& d0_gt,
                            double gamma, int t, const Latent<T>& eps,
                            const NoiseSchedule& sched) {
  const auto tgt = trajectory_target(x0, d0_gt, gamma, t, eps, sched);
  return mean_squared(tgt.v_t, f(tgt.b_t, t));
}

template <class T>
double trajectory_keep_loss(const DenoiserParams<T>& params, const Latent<T>& x0,
                            const Latent<T>& d0_gt, double gamma, int t, const Latent<T>& eps,
                            const NoiseSchedule& sched, std::type_identity_t<std::vector<T>>* grads = nullptr,
                            double scale = 1.0) {
  const auto tgt = trajectory_target(x0, d0_gt, gamma, t, eps, sched);
  ForwardTrace<T> tr;
  const auto pred = forward(params, tgt.b_t, t, grads ? &tr : nullptr);
  const double loss = mean_squared(tgt.v_t, pred);
  if (grads) {
    Latent<T> g(pred.channels(), pred.height(), pred.width());
    const double k = 2.0 * scale / static_cast<double>(pred.size());
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] = static_cast<T>(k * (static_cast<double>(pred[i]) - static_cast<double>(tgt.v_t[i])));
    backward(params, tr, g, *grads, false);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Full objective.

/// Half synthetic (RGB latent + ground-truth depth latent), half real (RGB
/// latent + teacher pseudo-label latent).
template <class T>
struct TrainBatch {
  std::vector<Latent<T>> syn_rgb, syn_depth, real_rgb, real_teacher;
};

enum class TeacherMode { at_d_minus1, at_d0, none };

struct ObjectiveOptions {
  TeacherMode teacher = TeacherMode::at_d_minus1;
  bool detach_d0 = false;  // stop gradients from the t = -1 step reaching d0
};

namespace detail {

/// lambda_mae * MAE + lambda_gm * GM of (target, pred); fills grad with the
/// weighted gradient wrt pred, scaled by `scale`.
template <class T>
std::pair<double, double> depth_terms(const Latent<T>& target, const Latent<T>& pred,
                                      const LossWeights& w, double scale, Latent<T>* grad) {
  const double mae = mae_loss(target, pred), gm = gm_loss(target, pred);
  if (grad) {
    *grad = Latent<T>(pred.channels(), pred.height(), pred.width());
    if (w.lambda_mae != 0) mae_loss_grad(target, pred, scale * w.lambda_mae, *grad);
    if (w.lambda_gm != 0) gm_loss_grad(target, pred, scale * w.lambda_gm, *grad);
  }
  return {mae, gm};
}

}  // namespace detail

/// Evaluates the weighted objective on a batch; accumulates d(l_final)/dparams
/// into grads when non-null. Timesteps and noise for trajectory keeping are
/// drawn from rng, one (t, eps) per synthetic sample, in sample order, whether
/// or not lambda_k is zero, so the random stream does not depend on weights.
template <class T>
LossBreakdown final_loss(const DenoiserParams<T>& params, const TrainBatch<T>& batch,
                         const LossWeights& w, const NoiseSchedule& sched, std::mt19937_64& rng,
                         std::type_identity_t<std::vector<T>>* grads = nullptr, const ObjectiveOptions& opt = {}) {
  w.validate();
  const std::size_t ns = batch.syn_rgb.size(), nr = batch.real_rgb.size();
  if (batch.syn_depth.size() != ns || batch.real_teacher.size() != nr)
    throw ShapeError("final_loss: batch halves have mismatched member counts");
  if (ns == 0) throw ShapeError("final_loss: empty synthetic half");
  if (nr == 0 && opt.teacher != TeacherMode::none) throw ShapeError("final_loss: empty real half");
  if (grads && grads->size() != params.size()) grads->assign(params.size(), T(0));

  LossBreakdown out;
  const bool depth_active = w.lambda_mae != 0 || w.lambda_gm != 0;
  std::uniform_int_distribution<int> pick_t(1, sched.T);
  std::normal_distribution<double> normal(0.0, 1.0);

  for (std::size_t i = 0; i < ns; ++i) {
    const auto& x0 = batch.syn_rgb[i];
    const auto& dgt = batch.syn_depth[i];
    require_same_shape(x0, dgt, "final_loss");
    const int t = pick_t(rng);
    Latent<T> eps(x0.channels(), x0.height(), x0.width());
    for (auto& e : eps.values()) e = static_cast<T>(normal(rng));

    if (depth_active) {
      ForwardTrace<T> tr;
      const auto d0 = predict_d0(params, x0, grads ? &tr : nullptr);
      Latent<T> g;
      const auto [mae, gm] = detail::depth_terms(dgt, d0, w, 1.0 / ns, grads ? &g : nullptr);
      out.l_mae_t0 += mae / ns;
      out.l_gm_t0 += gm / ns;
      if (grads) backward(params, tr, g, *grads, false);
    }
    if (w.lambda_k != 0)
      out.l_k += trajectory_keep_loss(params, x0, dgt, w.gamma, t, eps, sched, grads,
                                      w.lambda_k / ns) / ns;
  }

  if (opt.teacher != TeacherMode::none && depth_active) {
    for (std::size_t i = 0; i < nr; ++i) {
      const auto& x0 = batch.real_rgb[i];
      const auto& teacher = batch.real_teacher[i];
      require_same_shape(x0, teacher, "final_loss");
      ForwardTrace<T> tr0, tr1;
      const auto d0 = predict_d0(params, x0, grads ? &tr0 : nullptr);
      Latent<T> g;
      if (opt.teacher == TeacherMode::at_d0) {
        const auto [mae, gm] = detail::depth_terms(teacher, d0, w, 1.0 / nr, grads ? &g : nullptr);
        out.l_mae_tm1 += mae / nr;
        out.l_gm_tm1 += gm / nr;
        if (grads) backward(params, tr0, g, *grads, false);
        continue;
      }
      const auto dm1 = predict_d_minus1(params, d0, grads ? &tr1 : nullptr);
      const auto [mae, gm] = detail::depth_terms(teacher, dm1, w, 1.0 / nr, grads ? &g : nullptr);
      out.l_mae_tm1 += mae / nr;
      out.l_gm_tm1 += gm / nr;
      if (grads) {
        const auto g0 = backward(params, tr1, g, *grads, !opt.detach_d0);
        if (!opt.detach_d0) backward(params, tr0, g0, *grads, false);
      }
    }
  }
  out.l_final = weighted_total(out, w);
  return out;
}

}  // namespace fiffdepth
