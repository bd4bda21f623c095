// fiffdepth/schedule.hpp

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

#include <cmath>
#include <string>
#include <vector>

#include "fiffdepth/tensor.hpp"

namespace fiffdepth {

/// DDPM noise schedule. Timesteps are 1-based: betas[t-1] is beta_t.
struct NoiseSchedule {
  int T = 0;
  double beta_start = 0, beta_end = 0;
  std::vector<double> betas;
  std::vector<double> alpha_bars;

  double alpha_bar(int t) const {
    check(t);
    return alpha_bars[t - 1];
  }
  double beta(int t) const {
    check(t);
    return betas[t - 1];
  }
  void check(int t) const {
    if (t < 1 || t > T)
      throw RangeError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  }
};

/// Linearly spaced betas from beta_start to beta_end (both inclusive) and
/// their running product of (1 - beta).
inline NoiseSchedule make_linear_schedule(int T, double beta_start = 1e-4,
                                          double beta_end = 0.02) {
  if (T < 1) throw RangeError("schedule: T must be positive");
  if (!(beta_start > 0 && beta_start < 1 && beta_end > 0 && beta_end < 1))
    throw RangeError("schedule: beta endpoints must lie in (0, 1)");
  if (beta_start > beta_end) throw RangeError("schedule: beta_start > beta_end");
  NoiseSchedule s{T, beta_start, beta_end, std::vector<double>(T), std::vector<double>(T)};
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    s.betas[i] = beta_start + (beta_end - beta_start) * frac;
    prod *= 1.0 - s.betas[i];
    s.alpha_bars[i] = prod;
  }
  return s;
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <class T>
Latent<T> add_noise(const Latent<T>& x0, const Latent<T>& eps, int t,
                    const NoiseSchedule& sched) {
  require_same_shape(x0, eps, "add_noise");
  const double ab = sched.alpha_bar(t);
  return axpby(static_cast<T>(std::sqrt(ab)), x0, static_cast<T>(std::sqrt(1 - ab)), eps);
}

/// v_t = sqrt(abar_t) eps - sqrt(1 - abar_t) b0
template <class T>
Latent<T> v_target(const Latent<T>& b0, const Latent<T>& eps, int t,
                   const NoiseSchedule& sched) {
  require_same_shape(b0, eps, "v_target");
  const double ab = sched.alpha_bar(t);
  return axpby(static_cast<T>(std::sqrt(ab)), eps, static_cast<T>(-std::sqrt(1 - ab)), b0);
}

/// Inverse of the v-parameterization: b0 = sqrt(abar_t) x_t - sqrt(1 - abar_t) v.
template <class T>
Latent<T> recover_b0(const Latent<T>& x_t, const Latent<T>& v, int t,
                     const NoiseSchedule& sched) {
  require_same_shape(x_t, v, "recover_b0");
  const double ab = sched.alpha_bar(t);
  return axpby(static_cast<T>(std::sqrt(ab)), x_t, static_cast<T>(-std::sqrt(1 - ab)), v);
}

/// eps = sqrt(1 - abar_t) x_t + sqrt(abar_t) v.
template <class T>
Latent<T> recover_eps(const Latent<T>& x_t, const Latent<T>& v, int t,
                      const NoiseSchedule& sched) {
  require_same_shape(x_t, v, "recover_eps");
  const double ab = sched.alpha_bar(t);
  return axpby(static_cast<T>(std::sqrt(1 - ab)), x_t, static_cast<T>(std::sqrt(ab)), v);
}

}  // namespace fiffdepth
