// fiffdepth/denoiser.hpp

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

// Time-conditioned convolutional encoder-decoder used both as the diffusion
// denoiser and, at t = 0 and t = -1, as the feed-forward depth predictor.
//
// Per level i the encoder block maps its input to widths[i] channels:
//   conv3x3 -> GroupNorm -> + time projection -> SiLU -> conv3x3 -> GroupNorm -> SiLU
// Levels are separated by 2x2 average pooling. Decoder blocks take the
// nearest-upsampled coarser output concatenated with the encoder skip. A final
// zero-initialized conv3x3 maps back to the latent channel count.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "fiffdepth/nn.hpp"
#include "fiffdepth/tensor.hpp"

namespace fiffdepth {

struct ArchDescriptor {
  int in_channels = 3;
  int height = 64;  // nominal input size; forward accepts any size divisible
  int width = 64;   // by 2^(levels-1)
  std::vector<int> widths = {32, 64, 128};
  int embed_dim = 64;
  int norm_groups = 4;
  int num_timesteps = 1000;  // forward accepts t in [-1, num_timesteps]

  int levels() const noexcept { return static_cast<int>(widths.size()); }

  void validate() const {
    if (widths.size() < 2) throw ConfigError("arch.widths", "need at least 2 levels");
    if (in_channels <= 0) throw ConfigError("arch.in_channels", "must be positive");
    if (embed_dim <= 0 || embed_dim % 2) throw ConfigError("arch.embed_dim", "must be positive and even");
    if (norm_groups <= 0) throw ConfigError("arch.norm_groups", "must be positive");
    if (num_timesteps < 1) throw ConfigError("arch.num_timesteps", "must be positive");
    for (int w : widths) {
      if (w <= 0) throw ConfigError("arch.widths", "widths must be positive");
      if (w % norm_groups) throw ConfigError("arch.widths", "widths must be divisible by norm_groups");
    }
    const int div = 1 << (levels() - 1);
    if (height <= 0 || width <= 0 || height % div || width % div)
      throw ConfigError("arch.height", "input size must be divisible by 2^(levels-1)");
  }

  friend bool operator==(const ArchDescriptor&, const ArchDescriptor&) = default;
};

struct ParamSpec {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

namespace detail {

struct BlockLayout {
  std::size_t conv1_w, conv1_b, gn1_g, gn1_b, tp_w, tp_b, conv2_w, conv2_b, gn2_g, gn2_b;
  int cin, cout;
};

struct Layout {
  std::vector<ParamSpec> specs;
  std::size_t temb_w = 0, temb_b = 0, out_w = 0, out_b = 0;
  std::vector<BlockLayout> enc, dec;  // dec[i] is the decoder block at level i
  std::size_t total = 0;
};

inline std::size_t add_spec(Layout& l, std::string name, std::vector<int> shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  l.specs.push_back({std::move(name), std::move(shape), l.total, n});
  const std::size_t off = l.total;
  l.total += n;
  return off;
}

inline BlockLayout add_block(Layout& l, const std::string& p, int cin, int cout, int e) {
  BlockLayout b{};
  b.cin = cin;
  b.cout = cout;
  b.conv1_w = add_spec(l, p + ".conv1.weight", {cout, cin, 3, 3});
  b.conv1_b = add_spec(l, p + ".conv1.bias", {cout});
  b.gn1_g = add_spec(l, p + ".norm1.gain", {cout});
  b.gn1_b = add_spec(l, p + ".norm1.shift", {cout});
  b.tp_w = add_spec(l, p + ".time_proj.weight", {cout, e});
  b.tp_b = add_spec(l, p + ".time_proj.bias", {cout});
  b.conv2_w = add_spec(l, p + ".conv2.weight", {cout, cout, 3, 3});
  b.conv2_b = add_spec(l, p + ".conv2.bias", {cout});
  b.gn2_g = add_spec(l, p + ".norm2.gain", {cout});
  b.gn2_b = add_spec(l, p + ".norm2.shift", {cout});
  return b;
}

inline Layout make_layout(const ArchDescriptor& a) {
  Layout l;
  const int e = a.embed_dim, L = a.levels();
  l.temb_w = add_spec(l, "time_mlp.weight", {e, e});
  l.temb_b = add_spec(l, "time_mlp.bias", {e});
  for (int i = 0; i < L; ++i) {
    const int cin = i == 0 ? a.in_channels : a.widths[i - 1];
    l.enc.push_back(add_block(l, "enc" + std::to_string(i), cin, a.widths[i], e));
  }
  l.dec.resize(L - 1);
  for (int i = L - 2; i >= 0; --i)
    l.dec[i] = add_block(l, "dec" + std::to_string(i), a.widths[i + 1] + a.widths[i],
                         a.widths[i], e);
  l.out_w = add_spec(l, "out.weight", {a.in_channels, a.widths[0], 3, 3});
  l.out_b = add_spec(l, "out.bias", {a.in_channels});
  return l;
}

}  // namespace detail

/// Named parameter tensors of the denoiser, stored in one flat buffer so the
/// optimizer and gradient code can treat them as a single vector.
template <class T>
struct DenoiserParams {
  ArchDescriptor arch;
  std::vector<ParamSpec> specs;
  std::vector<T> values;

  std::size_t size() const noexcept { return values.size(); }

  const ParamSpec& spec(const std::string& name) const {
    for (const auto& s : specs)
      if (s.name == name) return s;
    throw Error("no parameter named " + name);
  }
  std::span<T> tensor(const std::string& name) {
    const auto& s = spec(name);
    return std::span<T>(values).subspan(s.offset, s.size);
  }
  std::span<const T> tensor(const std::string& name) const {
    const auto& s = spec(name);
    return std::span<const T>(values).subspan(s.offset, s.size);
  }

  template <class U>
  DenoiserParams<U> cast() const {
    DenoiserParams<U> p{arch, specs, {}};
    p.values.assign(values.begin(), values.end());
    return p;
  }

  friend bool operator==(const DenoiserParams& a, const DenoiserParams& b) {
    return a.arch == b.arch && a.values == b.values;
  }
};

inline std::size_t parameter_count(const ArchDescriptor& arch) {
  arch.validate();
  return detail::make_layout(arch).total;
}

/// Deterministic fan-in scaled normal initialization. Norm gains start at 1,
/// biases at 0, the output conv at 0 unless zero_output is false (used by
/// gradient checks, which need a non-degenerate output layer).
template <class T>
DenoiserParams<T> init_params(const ArchDescriptor& arch, std::uint64_t seed,
                              bool zero_output = true) {
  arch.validate();
  const auto layout = detail::make_layout(arch);
  DenoiserParams<T> p{arch, layout.specs, std::vector<T>(layout.total, T(0))};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& s : p.specs) {
    const bool is_weight = s.name.ends_with(".weight");
    const bool is_gain = s.name.ends_with(".gain");
    const bool is_out = s.name.starts_with("out.");
    T* v = p.values.data() + s.offset;
    if (is_gain) {
      std::fill(v, v + s.size, T(1));
    } else if (is_weight && (!is_out || !zero_output)) {
      std::size_t fan_in = 1;
      for (std::size_t d = 1; d < s.shape.size(); ++d) fan_in *= s.shape[d];
      const double stdev = std::sqrt(1.0 / static_cast<double>(fan_in));
      for (std::size_t i = 0; i < s.size; ++i) v[i] = static_cast<T>(normal(rng) * stdev);
    }
  }
  return p;
}

/// Sinusoidal embedding, defined for every integer t including -1.
template <class T>
std::vector<T> timestep_embedding(int t, int dim) {
  const int half = dim / 2;
  std::vector<T> e(dim);
  for (int k = 0; k < half; ++k) {
    const double f = std::exp(-std::log(10000.0) * k / half);
    e[k] = static_cast<T>(std::sin(t * f));
    e[half + k] = static_cast<T>(std::cos(t * f));
  }
  return e;
}

template <class T>
struct BlockTrace {
  Tensor<T> x, pre1, act1, pre2;
  nn::GroupNormCache<T> gn1, gn2;
};

/// Activations saved by forward for the backward pass.
template <class T>
struct ForwardTrace {
  int t = 0;
  std::vector<T> emb, hidden_pre, hidden;
  std::vector<BlockTrace<T>> enc, dec;
  Tensor<T> out_in;
};

namespace detail {

template <class T>
Tensor<T> block_forward(const std::vector<T>& w, const BlockLayout& b, int groups,
                        const Tensor<T>& x, std::span<const T> hidden,
                        BlockTrace<T>& tr, nn::Scratch<T>& scratch) {
  const T* P = w.data();
  tr.x = x;
  auto a = nn::conv2d(x, P + b.conv1_w, P + b.conv1_b, b.cout, 3, scratch);
  auto n = nn::group_norm(a, groups, P + b.gn1_g, P + b.gn1_b, tr.gn1);
  const auto tp = nn::linear(hidden, P + b.tp_w, P + b.tp_b, b.cout);
  for (int c = 0; c < b.cout; ++c) {
    T* ch = n.channel(c);
    for (std::size_t i = 0; i < n.plane(); ++i) ch[i] += tp[c];
  }
  tr.pre1 = std::move(n);
  tr.act1 = nn::silu(tr.pre1);
  auto a2 = nn::conv2d(tr.act1, P + b.conv2_w, P + b.conv2_b, b.cout, 3, scratch);
  tr.pre2 = nn::group_norm(a2, groups, P + b.gn2_g, P + b.gn2_b, tr.gn2);
  return nn::silu(tr.pre2);
}

template <class T>
Tensor<T> block_backward(const std::vector<T>& w, std::vector<T>& g,
                         const BlockLayout& b, int groups, const BlockTrace<T>& tr,
                         const Tensor<T>& grad_out, std::span<const T> hidden,
                         std::vector<T>& grad_hidden, nn::Scratch<T>& scratch,
                         bool need_input_grad) {
  const T* P = w.data();
  T* G = g.data();
  auto d_pre2 = nn::silu_backward(tr.pre2, grad_out);
  auto d_a2 = nn::group_norm_backward(d_pre2, groups, P + b.gn2_g, tr.gn2, G + b.gn2_g,
                                      G + b.gn2_b);
  auto d_act1 = nn::conv2d_backward(tr.act1, d_a2, P + b.conv2_w, G + b.conv2_w,
                                    G + b.conv2_b, 3, scratch);
  auto d_pre1 = nn::silu_backward(tr.pre1, d_act1);
  std::vector<T> d_tp(b.cout, T(0));
  for (int c = 0; c < b.cout; ++c) {
    const T* ch = d_pre1.channel(c);
    double s = 0;
    for (std::size_t i = 0; i < d_pre1.plane(); ++i) s += ch[i];
    d_tp[c] = static_cast<T>(s);
  }
  const auto dh = nn::linear_backward<T>(hidden, d_tp, P + b.tp_w, G + b.tp_w, G + b.tp_b);
  for (std::size_t i = 0; i < dh.size(); ++i) grad_hidden[i] += dh[i];
  auto d_a = nn::group_norm_backward(d_pre1, groups, P + b.gn1_g, tr.gn1, G + b.gn1_g,
                                     G + b.gn1_b);
  return nn::conv2d_backward(tr.x, d_a, P + b.conv1_w, G + b.conv1_w, G + b.conv1_b, 3,
                             scratch, need_input_grad);
}

template <class T>
nn::Scratch<T>& scratch_buffer() {
  thread_local nn::Scratch<T> buf;
  return buf;
}

template <class T>
void check_forward_args(const DenoiserParams<T>& params, const Latent<T>& z, int t) {
  const auto& a = params.arch;
  if (t < -1 || t > a.num_timesteps)
    throw RangeError("denoiser: timestep " + std::to_string(t) + " outside [-1, " +
                     std::to_string(a.num_timesteps) + "]");
  const int div = 1 << (a.levels() - 1);
  if (z.channels() != a.in_channels || z.height() == 0 || z.width() == 0 ||
      z.height() % div || z.width() % div)
    throw ShapeError("denoiser: input " + z.shape_string() + " incompatible with " +
                     std::to_string(a.in_channels) + " channels / level divisor " +
                     std::to_string(div));
}

}  // namespace detail

/// Runs the network. When trace is non-null, saves what backward needs.
template <class T>
Latent<T> forward(const DenoiserParams<T>& params, const Latent<T>& z, int t,
                  ForwardTrace<T>* trace = nullptr) {
  detail::check_forward_args(params, z, t);
  const auto& arch = params.arch;
  const auto layout = detail::make_layout(arch);
  const int L = arch.levels(), E = arch.embed_dim, groups = arch.norm_groups;
  const T* P = params.values.data();
  auto& scratch = detail::scratch_buffer<T>();

  ForwardTrace<T> local;
  ForwardTrace<T>& tr = trace ? *trace : local;
  tr.t = t;
  tr.emb = timestep_embedding<T>(t, E);
  tr.hidden_pre = nn::linear<T>(tr.emb, P + layout.temb_w, P + layout.temb_b, E);
  tr.hidden.resize(E);
  for (int i = 0; i < E; ++i) tr.hidden[i] = nn::silu(tr.hidden_pre[i]);
  tr.enc.assign(L, {});
  tr.dec.assign(L - 1, {});

  std::vector<Tensor<T>> skips(L);
  for (int i = 0; i < L; ++i) {
    Tensor<T> in = i == 0 ? z : nn::avg_pool2(skips[i - 1]);
    skips[i] = detail::block_forward(params.values, layout.enc[i], groups, in,
                                     std::span<const T>(tr.hidden), tr.enc[i], scratch);
    if (!trace && i > 0) {
      // without a trace the encoder input copies are not needed
      tr.enc[i - 1] = {};
    }
  }
  Tensor<T> y = skips[L - 1];
  for (int i = L - 2; i >= 0; --i) {
    auto c = nn::concat_channels(nn::upsample2(y), skips[i]);
    y = detail::block_forward(params.values, layout.dec[i], groups, c,
                              std::span<const T>(tr.hidden), tr.dec[i], scratch);
    if (!trace) tr.dec[i] = {};
  }
  auto out = nn::conv2d(y, P + layout.out_w, P + layout.out_b, arch.in_channels, 3, scratch);
  if (trace) tr.out_in = std::move(y);
  return out;
}

/// Accumulates d(loss)/d(params) into grads given d(loss)/d(output); returns
/// d(loss)/d(input) (all zeros when need_input_grad is false).
template <class T>
Latent<T> backward(const DenoiserParams<T>& params, const ForwardTrace<T>& tr,
                   const Latent<T>& grad_out, std::vector<T>& grads,
                   bool need_input_grad = true) {
  const auto& arch = params.arch;
  if (grads.size() != params.size()) grads.assign(params.size(), T(0));
  const auto layout = detail::make_layout(arch);
  const int L = arch.levels(), E = arch.embed_dim, groups = arch.norm_groups;
  const T* P = params.values.data();
  T* G = grads.data();
  auto& scratch = detail::scratch_buffer<T>();
  std::vector<T> grad_hidden(E, T(0));
  const std::span<const T> hidden(tr.hidden);

  auto gy = nn::conv2d_backward(tr.out_in, grad_out, P + layout.out_w, G + layout.out_w,
                                G + layout.out_b, 3, scratch);
  std::vector<Tensor<T>> skip_grads(L);
  for (int i = 0; i < L - 1; ++i) {
    auto gc = detail::block_backward(params.values, grads, layout.dec[i], groups, tr.dec[i],
                                     gy, hidden, grad_hidden, scratch, true);
    auto [g_up, g_skip] = nn::split_channels(gc, arch.widths[i + 1]);
    skip_grads[i] = std::move(g_skip);
    gy = nn::upsample2_backward(g_up);
  }
  skip_grads[L - 1] = std::move(gy);
  Latent<T> grad_z;
  for (int i = L - 1; i >= 0; --i) {
    const bool need = i > 0 || need_input_grad;
    auto gx = detail::block_backward(params.values, grads, layout.enc[i], groups, tr.enc[i],
                                     skip_grads[i], hidden, grad_hidden, scratch, need);
    if (i > 0) {
      auto gp = nn::avg_pool2_backward(gx);
      auto& s = skip_grads[i - 1];
      for (std::size_t k = 0; k < s.size(); ++k) s[k] += gp[k];
    } else {
      grad_z = std::move(gx);
    }
  }
  std::vector<T> d_hpre(E);
  for (int i = 0; i < E; ++i) d_hpre[i] = grad_hidden[i] * nn::silu_grad(tr.hidden_pre[i]);
  nn::linear_backward<T>(tr.emb, d_hpre, P + layout.temb_w, G + layout.temb_w,
                         G + layout.temb_b);
  return grad_z;
}

}  // namespace fiffdepth
