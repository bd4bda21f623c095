// fiffdepth/config.hpp

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

// Run configuration: every generator, codec, schedule, architecture and
// training knob under a dotted key, read from a `key = value` text file and
// overridable from the command line.

#pragma once

#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fiffdepth/data.hpp"
#include "fiffdepth/evalkit.hpp"
#include "fiffdepth/trainer.hpp"

namespace fiffdepth {

struct DataSizes {
  int n_synthetic = 2000;
  int n_real = 2000;
  int n_heldout = 64;  // per domain, generated after the training indices
};

struct BenchSettings {
  std::vector<int> sizes = {64, 256};
  int K = 20;
  int repeats = 20;
};

struct AblateSettings {
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::vector<std::string> presets = {"full", "no_traj_keep", "image_only_traj", "teacher_at_d0",
                                      "no_teacher"};
};

struct RunConfig {
  SceneGenConfig scene;
  DataSizes data;
  TrainConfig train;
  CodecConfig codec;
  AlignSpace align_space = AlignSpace::depth;
  BenchSettings bench;
  AblateSettings ablate;
  int workers = 1;

  RunConfig() {
    train.arch.widths = {8, 16, 32};
    train.arch.embed_dim = 32;
    train.batch_size = 8;
    train.learning_rate = 1e-3;
  }

  /// Fills the derived architecture fields and validates everything.
  void finalize() {
    train.codec = codec;
    train.arch.in_channels = codec.latent_channels();
    train.arch.height = train.arch.width = scene.image_size / std::max(1, codec.patch_size);
    train.arch.num_timesteps = train.schedule_T;
    codec.validate();
    scene.validate(codec.patch_size);
    train.validate();
    if (data.n_synthetic < 0 || data.n_real < 0 || data.n_heldout < 0)
      throw ConfigError("data.n_synthetic", "sample counts must be >= 0");
    if (bench.K < 1) throw ConfigError("bench.K", "must be >= 1");
    if (bench.repeats < 1) throw ConfigError("bench.repeats", "must be >= 1");
    if (workers < 1) throw ConfigError("run.workers", "must be >= 1");
    if (ablate.seeds.empty()) throw ConfigError("ablate.seeds", "need at least one seed");
    for (const auto& p : ablate.presets) apply_preset(p, AblationFlags{});
  }

  /// Ablation flags for a named preset.
  static AblationFlags apply_preset(const std::string& name, AblationFlags f) {
    if (name == "full") return f;
    if (name == "no_traj_keep") f.no_traj_keep = true;
    else if (name == "image_only_traj") f.image_only_traj = true;
    else if (name == "teacher_at_d0") f.teacher_at_d0 = true;
    else if (name == "no_teacher") f.no_teacher = true;
    else if (name == "from_scratch") f.from_scratch = true;
    else throw ConfigError("ablate.presets", "unknown preset '" + name + "'");
    return f;
  }

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  /// Every key with its effective value, one `key = value` line each.
  std::string to_text() const {
    std::ostringstream os;
    for (const auto& k : keys()) os << k << " = " << get(k) << "\n";
    return os.str();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  N out{};
  is >> out;
  if (!is || !(is >> std::ws).eof()) throw ConfigError(key, "cannot parse '" + v + "' as a number");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "expected true/false, got '" + v + "'");
}

template <class N>
std::vector<N> parse_list(const std::string& key, const std::string& v) {
  std::vector<N> out;
  std::istringstream is(v);
  for (std::string tok; std::getline(is, tok, ',');) {
    tok = trim(tok);
    if constexpr (std::is_same_v<N, std::string>)
      out.push_back(tok);
    else
      out.push_back(parse_number<N>(key, tok));
  }
  if (out.empty()) throw ConfigError(key, "empty list");
  return out;
}

template <class N>
std::string format(const N& v) {
  std::ostringstream os;
  if constexpr (std::is_same_v<N, bool>)
    os << (v ? "true" : "false");
  else
    os << std::setprecision(17) << v;
  return os.str();
}

template <class N>
std::string format_list(const std::vector<N>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format(v[i]);
  return s;
}

struct ConfigField {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define FIFFDEPTH_NUM(KEY, MEMBER)                                                            \
  ConfigField {                                                                               \
    KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = parse_number<decltype(c.MEMBER)>(KEY, v); }, \
        [](const RunConfig& c) { return format(c.MEMBER); }                                  \
  }
#define FIFFDEPTH_BOOL(KEY, MEMBER)                                                       \
  ConfigField {                                                                           \
    KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = parse_bool(KEY, v); },       \
        [](const RunConfig& c) { return format(c.MEMBER); }                              \
  }

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      FIFFDEPTH_NUM("scene.image_size", scene.image_size),
      FIFFDEPTH_NUM("scene.min_primitives", scene.min_primitives),
      FIFFDEPTH_NUM("scene.max_primitives", scene.max_primitives),
      FIFFDEPTH_NUM("scene.texture_strength", scene.texture_strength),
      {"scene.corruption",
       [](RunConfig& c, const std::string& v) {
         if (v == "none") c.scene.corruption = Corruption::none;
         else if (v == "real-shift") c.scene.corruption = Corruption::real_shift;
         else throw ConfigError("scene.corruption", "expected none or real-shift, got '" + v + "'");
       },
       [](const RunConfig& c) { return std::string(c.scene.corruption == Corruption::none ? "none" : "real-shift"); }},
      FIFFDEPTH_NUM("scene.noise_sigma", scene.noise_sigma),
      FIFFDEPTH_NUM("scene.blur_radius", scene.blur_radius),
      FIFFDEPTH_NUM("scene.color_jitter", scene.color_jitter),
      FIFFDEPTH_NUM("scene.illumination", scene.illumination),
      FIFFDEPTH_NUM("scene.teacher_coarseness", scene.teacher_coarseness),
      FIFFDEPTH_NUM("scene.teacher_noise", scene.teacher_noise),
      FIFFDEPTH_NUM("scene.seed", scene.seed),
      FIFFDEPTH_NUM("data.n_synthetic", data.n_synthetic),
      FIFFDEPTH_NUM("data.n_real", data.n_real),
      FIFFDEPTH_NUM("data.n_heldout", data.n_heldout),
      FIFFDEPTH_NUM("train.gamma", train.weights.gamma),
      FIFFDEPTH_NUM("train.lambda_mae", train.weights.lambda_mae),
      FIFFDEPTH_NUM("train.lambda_gm", train.weights.lambda_gm),
      FIFFDEPTH_NUM("train.lambda_k", train.weights.lambda_k),
      FIFFDEPTH_NUM("train.batch_size", train.batch_size),
      FIFFDEPTH_NUM("train.iterations", train.iterations),
      FIFFDEPTH_NUM("train.pretrain_iterations", train.pretrain_iterations),
      FIFFDEPTH_NUM("train.learning_rate", train.learning_rate),
      FIFFDEPTH_NUM("train.adam_beta1", train.adam_beta1),
      FIFFDEPTH_NUM("train.adam_beta2", train.adam_beta2),
      FIFFDEPTH_NUM("train.adam_eps", train.adam_eps),
      FIFFDEPTH_NUM("train.seed", train.seed),
      FIFFDEPTH_BOOL("train.detach_d0", train.detach_d0),
      FIFFDEPTH_NUM("train.checkpoint_interval", train.checkpoint_interval),
      FIFFDEPTH_BOOL("ablation.no_traj_keep", train.ablation.no_traj_keep),
      FIFFDEPTH_BOOL("ablation.image_only_traj", train.ablation.image_only_traj),
      FIFFDEPTH_BOOL("ablation.teacher_at_d0", train.ablation.teacher_at_d0),
      FIFFDEPTH_BOOL("ablation.no_teacher", train.ablation.no_teacher),
      FIFFDEPTH_BOOL("ablation.from_scratch", train.ablation.from_scratch),
      FIFFDEPTH_NUM("schedule.T", train.schedule_T),
      FIFFDEPTH_NUM("schedule.beta_start", train.beta_start),
      FIFFDEPTH_NUM("schedule.beta_end", train.beta_end),
      {"arch.widths",
       [](RunConfig& c, const std::string& v) { c.train.arch.widths = parse_list<int>("arch.widths", v); },
       [](const RunConfig& c) { return format_list(c.train.arch.widths); }},
      FIFFDEPTH_NUM("arch.embed_dim", train.arch.embed_dim),
      FIFFDEPTH_NUM("arch.norm_groups", train.arch.norm_groups),
      {"codec.mode",
       [](RunConfig& c, const std::string& v) { c.codec.mode = codec_mode_from_string(v); },
       [](const RunConfig& c) { return to_string(c.codec.mode); }},
      FIFFDEPTH_NUM("codec.patch_size", codec.patch_size),
      FIFFDEPTH_NUM("codec.seed", codec.seed),
      {"eval.align_space",
       [](RunConfig& c, const std::string& v) {
         if (v == "depth") c.align_space = AlignSpace::depth;
         else if (v == "disparity") c.align_space = AlignSpace::disparity;
         else throw ConfigError("eval.align_space", "expected depth or disparity, got '" + v + "'");
       },
       [](const RunConfig& c) { return std::string(c.align_space == AlignSpace::depth ? "depth" : "disparity"); }},
      {"bench.sizes",
       [](RunConfig& c, const std::string& v) { c.bench.sizes = parse_list<int>("bench.sizes", v); },
       [](const RunConfig& c) { return format_list(c.bench.sizes); }},
      FIFFDEPTH_NUM("bench.K", bench.K),
      FIFFDEPTH_NUM("bench.repeats", bench.repeats),
      {"ablate.seeds",
       [](RunConfig& c, const std::string& v) { c.ablate.seeds = parse_list<std::uint64_t>("ablate.seeds", v); },
       [](const RunConfig& c) { return format_list(c.ablate.seeds); }},
      {"ablate.presets",
       [](RunConfig& c, const std::string& v) { c.ablate.presets = parse_list<std::string>("ablate.presets", v); },
       [](const RunConfig& c) { return format_list(c.ablate.presets); }},
      FIFFDEPTH_NUM("run.workers", workers),
  };
  return fields;
}

#undef FIFFDEPTH_NUM
#undef FIFFDEPTH_BOOL

inline const ConfigField& find_field(const std::string& key) {
  for (const auto& f : config_fields())
    if (f.key == key) return f;
  throw ConfigError(key, "unknown key");
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  detail::find_field(key).set(*this, detail::trim(value));
}

inline std::string RunConfig::get(const std::string& key) const { return detail::find_field(key).get(*this); }

inline const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& f : detail::config_fields()) out.push_back(f.key);
    return out;
  }();
  return k;
}

/// Applies `key = value` lines; blank lines and `#` comments are ignored.
inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& origin = "config") {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("", origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    c.set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

inline RunConfig load_run_config(const std::string& path) {
  RunConfig c;
  if (path.empty()) return c;
  std::ifstream f(path);
  if (!f) throw ConfigError("", "cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  apply_config_text(c, ss.str(), path);
  return c;
}

/// Applies `--key value` / `--key=value` pairs.
inline void apply_overrides(RunConfig& c, const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string a = args[i];
    if (!a.starts_with("--")) throw ConfigError("", "unexpected argument '" + a + "'");
    a = a.substr(2);
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      c.set(a.substr(0, eq), a.substr(eq + 1));
      continue;
    }
    if (i + 1 >= args.size()) throw ConfigError(a, "missing value");
    c.set(a, args[++i]);
  }
}

}  // namespace fiffdepth
