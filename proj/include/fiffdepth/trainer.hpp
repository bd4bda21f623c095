// fiffdepth/trainer.hpp

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

// Two-phase training: diffusion pretraining of the denoiser (epsilon
// prediction on image latents), then depth fine-tuning with the weighted
// objective. Also the checkpoint archive.

#pragma once

#include <cstring>
#include <functional>
#include <iomanip>
#include <ostream>

#include "fiffdepth/dataset.hpp"
#include "fiffdepth/digest.hpp"
#include "fiffdepth/objective.hpp"

namespace fiffdepth {

struct AblationFlags {
  bool no_traj_keep = false;     // lambda_k := 0
  bool image_only_traj = false;  // gamma := 1
  bool teacher_at_d0 = false;    // teacher terms on d0 instead of d-1
  bool no_teacher = false;       // drop the real half and its terms
  bool from_scratch = false;     // skip diffusion pretraining

  void validate() const {
    if (teacher_at_d0 && no_teacher)
      throw ConfigError("ablation.teacher_at_d0", "cannot be combined with ablation.no_teacher");
  }
  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

struct TrainConfig {
  LossWeights weights;
  int batch_size = 32;
  int iterations = 2000;
  int pretrain_iterations = 1000;
  double learning_rate = 3e-4;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  std::uint64_t seed = 0;
  AblationFlags ablation;
  bool detach_d0 = false;
  int schedule_T = 1000;
  double beta_start = 1e-4, beta_end = 0.02;
  ArchDescriptor arch;
  CodecConfig codec;
  int checkpoint_interval = 0;  // 0: final checkpoint only

  void validate() const {
    weights.validate();
    ablation.validate();
    arch.validate();
    codec.validate();
    if (batch_size <= 0 || batch_size % 2) throw ConfigError("train.batch_size", "must be even and positive");
    if (iterations < 0) throw ConfigError("train.iterations", "must be >= 0");
    if (pretrain_iterations < 0) throw ConfigError("train.pretrain_iterations", "must be >= 0");
    if (!(learning_rate > 0)) throw ConfigError("train.learning_rate", "must be positive");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1)) throw ConfigError("train.adam_beta1", "must be in [0, 1)");
    if (!(adam_beta2 >= 0 && adam_beta2 < 1)) throw ConfigError("train.adam_beta2", "must be in [0, 1)");
    if (!(adam_eps > 0)) throw ConfigError("train.adam_eps", "must be positive");
    if (schedule_T < 1) throw ConfigError("schedule.T", "must be positive");
    if (arch.num_timesteps != schedule_T)
      throw ConfigError("arch.num_timesteps", "must equal schedule.T");
    if (checkpoint_interval < 0) throw ConfigError("train.checkpoint_interval", "must be >= 0");
  }

  /// Loss weights after applying the ablation switches.
  LossWeights effective_weights() const {
    LossWeights w = weights;
    if (ablation.no_traj_keep) w.lambda_k = 0;
    if (ablation.image_only_traj) w.gamma = 1;
    return w;
  }

  ObjectiveOptions objective_options() const {
    ObjectiveOptions o;
    o.teacher = ablation.no_teacher ? TeacherMode::none
                                    : (ablation.teacher_at_d0 ? TeacherMode::at_d0 : TeacherMode::at_d_minus1);
    o.detach_d0 = detach_d0;
    return o;
  }

  NoiseSchedule schedule() const { return make_linear_schedule(schedule_T, beta_start, beta_end); }

  std::string canonical() const {
    std::ostringstream os;
    os << std::setprecision(17) << "gamma=" << weights.gamma << "\nlambda_mae=" << weights.lambda_mae
       << "\nlambda_gm=" << weights.lambda_gm << "\nlambda_k=" << weights.lambda_k
       << "\nbatch_size=" << batch_size << "\niterations=" << iterations
       << "\npretrain_iterations=" << pretrain_iterations << "\nlearning_rate=" << learning_rate
       << "\nadam=" << adam_beta1 << "," << adam_beta2 << "," << adam_eps << "\nseed=" << seed
       << "\nablation=" << ablation.no_traj_keep << ablation.image_only_traj << ablation.teacher_at_d0
       << ablation.no_teacher << ablation.from_scratch << "\ndetach_d0=" << detach_d0
       << "\nschedule=" << schedule_T << "," << beta_start << "," << beta_end << "\narch=" << arch.in_channels
       << "," << arch.height << "," << arch.width << "," << arch.embed_dim << "," << arch.norm_groups << ",";
    for (int w : arch.widths) os << w << ";";
    os << "\ncodec=" << to_string(codec.mode) << "," << codec.patch_size << "," << codec.seed << "\n";
    return os.str();
  }
};

template <class T>
struct AdamState {
  std::vector<T> m, v;
  std::int64_t step = 0;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One bias-corrected Adam update. A zero gradient on a fresh state leaves
/// parameters unchanged.
template <class T>
void adam_update(std::vector<T>& params, const std::vector<T>& grads, AdamState<T>& st, double lr,
                 double b1, double b2, double eps) {
  if (st.m.size() != params.size()) st.m.assign(params.size(), T(0));
  if (st.v.size() != params.size()) st.v.assign(params.size(), T(0));
  ++st.step;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  const T tb1 = static_cast<T>(b1), tb2 = static_cast<T>(b2);
  const T step = static_cast<T>(lr / c1), ic2 = static_cast<T>(1.0 / c2), te = static_cast<T>(eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    st.m[i] = tb1 * st.m[i] + (T(1) - tb1) * g;
    st.v[i] = tb2 * st.v[i] + (T(1) - tb2) * g * g;
    params[i] -= step * st.m[i] / (std::sqrt(st.v[i] * ic2) + te);
  }
}

enum class Phase { init, pretrain, finetune };

inline std::string to_string(Phase p) {
  return p == Phase::init ? "init" : (p == Phase::pretrain ? "A" : "B");
}
inline Phase phase_from_string(const std::string& s) {
  if (s == "init") return Phase::init;
  if (s == "A") return Phase::pretrain;
  if (s == "B") return Phase::finetune;
  throw IoError("unknown checkpoint phase '" + s + "'");
}

template <class T>
struct Checkpoint {
  DenoiserParams<T> params;
  CodecConfig codec;
  int schedule_T = 1000;
  double beta_start = 1e-4, beta_end = 0.02;
  AdamState<T> optimizer;
  std::int64_t iteration = 0;
  Phase phase = Phase::init;
  std::string config_hash;

  NoiseSchedule schedule() const { return make_linear_schedule(schedule_T, beta_start, beta_end); }
};

template <class T>
Checkpoint<T> initial_checkpoint(const TrainConfig& cfg) {
  cfg.validate();
  Checkpoint<T> c;
  c.params = init_params<T>(cfg.arch, cfg.seed);
  c.codec = cfg.codec;
  c.schedule_T = cfg.schedule_T;
  c.beta_start = cfg.beta_start;
  c.beta_end = cfg.beta_end;
  c.config_hash = config_hash(cfg.canonical());
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoint archive:
//   "FFDCKPT\0" | u32 format version | u64 manifest length | manifest text |
//   u32 tensor count | per tensor: u32 name length, name, u8 dtype (0 f32,
//   1 f64), u8 rank, u32 dims[rank], u64 byte count, raw little-endian data |
//   32-byte SHA-256 of everything before it.

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'F', 'F', 'D', 'C', 'K', 'P', 'T', '\0'};

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    if constexpr (std::endian::native == std::endian::big)
      bytes.insert(bytes.end(), std::make_reverse_iterator(p + sizeof(U)), std::make_reverse_iterator(p));
    else
      bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> b, std::string ctx) : b_(b), ctx_(std::move(ctx)) {}
  template <class U>
  U get() {
    need(sizeof(U));
    U v;
    std::uint8_t tmp[sizeof(U)];
    std::memcpy(tmp, b_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(tmp, tmp + sizeof(U));
    std::memcpy(&v, tmp, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw IoError(ctx_ + ": unexpected end of archive");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
  std::string ctx_;
};

template <class T>
void put_tensor(ByteWriter& w, const std::string& name, const std::vector<int>& shape, const T* data,
                std::size_t n) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
  w.put_bytes(name.data(), name.size());
  w.put<std::uint8_t>(std::is_same_v<T, double> ? 1 : 0);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
  for (int d : shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  w.put<std::uint64_t>(n * sizeof(T));
  for (std::size_t i = 0; i < n; ++i) w.put<T>(data[i]);
}

inline std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace detail

template <class T>
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint<T>& c,
                                               std::uint32_t version = kCheckpointVersion) {
  const auto& a = c.params.arch;
  std::ostringstream man;
  man << std::setprecision(17) << "format_version=" << version << "\nphase=" << to_string(c.phase)
      << "\niteration=" << c.iteration << "\nconfig_hash=" << c.config_hash
      << "\ncodec_mode=" << to_string(c.codec.mode) << "\ncodec_patch_size=" << c.codec.patch_size
      << "\ncodec_seed=" << c.codec.seed << "\nschedule_T=" << c.schedule_T
      << "\nschedule_beta_start=" << c.beta_start << "\nschedule_beta_end=" << c.beta_end
      << "\narch_in_channels=" << a.in_channels << "\narch_height=" << a.height << "\narch_width=" << a.width
      << "\narch_widths=";
  for (std::size_t i = 0; i < a.widths.size(); ++i) man << (i ? "," : "") << a.widths[i];
  man << "\narch_embed_dim=" << a.embed_dim << "\narch_norm_groups=" << a.norm_groups
      << "\narch_num_timesteps=" << a.num_timesteps << "\nadam_step=" << c.optimizer.step << "\n";
  const std::string text = man.str();

  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put<std::uint32_t>(version);
  w.put<std::uint64_t>(text.size());
  w.put_bytes(text.data(), text.size());
  const bool has_opt = c.optimizer.m.size() == c.params.size();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.params.specs.size() * (has_opt ? 3 : 1)));
  for (const auto& s : c.params.specs)
    detail::put_tensor(w, s.name, s.shape, c.params.values.data() + s.offset, s.size);
  if (has_opt) {
    for (const auto& s : c.params.specs)
      detail::put_tensor(w, "adam.m." + s.name, s.shape, c.optimizer.m.data() + s.offset, s.size);
    for (const auto& s : c.params.specs)
      detail::put_tensor(w, "adam.v." + s.name, s.shape, c.optimizer.v.data() + s.offset, s.size);
  }
  const auto digest = sha256(w.bytes);
  w.put_bytes(digest.data(), digest.size());
  return std::move(w.bytes);
}

template <class T>
Checkpoint<T> deserialize_checkpoint(std::span<const std::uint8_t> bytes, const std::string& ctx = "checkpoint") {
  if (bytes.size() < sizeof kCheckpointMagic + 4 + 32)
    throw DigestError(ctx + ": file too short (truncated?)");
  const auto body = bytes.first(bytes.size() - 32);
  const auto stored = bytes.last(32);
  const auto actual = sha256(body);
  if (!std::equal(actual.begin(), actual.end(), stored.begin()))
    throw DigestError(ctx + ": content digest mismatch (truncated or corrupted)");
  detail::ByteReader r(body, ctx);
  const auto magic = r.take(sizeof kCheckpointMagic);
  if (!std::equal(magic.begin(), magic.end(), reinterpret_cast<const std::uint8_t*>(kCheckpointMagic)))
    throw IoError(ctx + ": not a checkpoint archive");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw VersionError(ctx + ": checkpoint format version " + std::to_string(version) +
                       ", this build reads version " + std::to_string(kCheckpointVersion));
  const auto text_len = r.get<std::uint64_t>();
  const auto text_bytes = r.take(text_len);
  const auto kv = detail::parse_kv(std::string(text_bytes.begin(), text_bytes.end()));
  auto field = [&](const std::string& k) {
    const auto it = kv.find(k);
    if (it == kv.end()) throw IoError(ctx + ": manifest lacks '" + k + "'");
    return it->second;
  };

  Checkpoint<T> c;
  ArchDescriptor a;
  a.in_channels = std::stoi(field("arch_in_channels"));
  a.height = std::stoi(field("arch_height"));
  a.width = std::stoi(field("arch_width"));
  a.widths.clear();
  {
    std::istringstream ws(field("arch_widths"));
    for (std::string tok; std::getline(ws, tok, ',');) a.widths.push_back(std::stoi(tok));
  }
  a.embed_dim = std::stoi(field("arch_embed_dim"));
  a.norm_groups = std::stoi(field("arch_norm_groups"));
  a.num_timesteps = std::stoi(field("arch_num_timesteps"));
  c.params = init_params<T>(a, 0);
  c.phase = phase_from_string(field("phase"));
  c.iteration = std::stoll(field("iteration"));
  c.config_hash = field("config_hash");
  c.codec.mode = codec_mode_from_string(field("codec_mode"));
  c.codec.patch_size = std::stoi(field("codec_patch_size"));
  c.codec.seed = std::stoull(field("codec_seed"));
  c.schedule_T = std::stoi(field("schedule_T"));
  c.beta_start = std::stod(field("schedule_beta_start"));
  c.beta_end = std::stod(field("schedule_beta_end"));
  c.optimizer.step = std::stoll(field("adam_step"));

  std::map<std::string, const ParamSpec*> by_name;
  for (const auto& s : c.params.specs) by_name[s.name] = &s;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = r.get<std::uint32_t>();
    const auto nb = r.take(name_len);
    std::string name(nb.begin(), nb.end());
    const auto dtype = r.get<std::uint8_t>();
    const auto rank = r.get<std::uint8_t>();
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(r.get<std::uint32_t>());
    const auto nbytes = r.get<std::uint64_t>();
    std::vector<T>* dest = &c.params.values;
    std::string base = name;
    if (name.starts_with("adam.m.")) dest = &c.optimizer.m, base = name.substr(7);
    else if (name.starts_with("adam.v.")) dest = &c.optimizer.v, base = name.substr(7);
    const auto it = by_name.find(base);
    if (it == by_name.end()) throw IoError(ctx + ": unexpected tensor '" + name + "'");
    const ParamSpec& s = *it->second;
    if (shape != s.shape) throw ShapeError(ctx + ": tensor '" + name + "' has wrong shape");
    if (dtype > 1) throw IoError(ctx + ": tensor '" + name + "' has unknown dtype");
    const std::size_t width = dtype == 1 ? 8 : 4;
    if (nbytes != s.size * width) throw IoError(ctx + ": tensor '" + name + "' byte count mismatch");
    if (dest->size() != c.params.size()) dest->assign(c.params.size(), T(0));
    for (std::size_t i = 0; i < s.size; ++i)
      (*dest)[s.offset + i] = dtype == 1 ? static_cast<T>(r.get<double>()) : static_cast<T>(r.get<float>());
  }
  if (!r.done()) throw IoError(ctx + ": trailing bytes after tensors");
  return c;
}

template <class T>
void save_checkpoint(const Checkpoint<T>& c, const fs::path& path) {
  const auto bytes = serialize_checkpoint(c);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

template <class T>
Checkpoint<T> load_checkpoint(const fs::path& path) {
  return deserialize_checkpoint<T>(read_file_bytes(path), path.string());
}

// ---------------------------------------------------------------------------
// Optimization.

inline std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t iteration, std::uint64_t phase_tag) {
  return detail::make_rng(seed, static_cast<std::uint64_t>(iteration), phase_tag, 0x57e9);
}

/// Mutable optimization state threaded through the step functions.
template <class T>
struct TrainState {
  DenoiserParams<T> params;
  AdamState<T> optimizer;
  std::int64_t iteration = 0;
};

/// One fine-tuning step: weighted objective on the batch, one Adam update.
template <class T>
LossBreakdown train_step(TrainState<T>& st, const TrainBatch<T>& batch, const TrainConfig& cfg,
                         const NoiseSchedule& sched, std::mt19937_64& rng) {
  std::vector<T> grads(st.params.size(), T(0));
  TrainBatch<T> b = batch;
  const auto opt = cfg.objective_options();
  if (opt.teacher == TeacherMode::none) b.real_rgb.clear(), b.real_teacher.clear();
  const auto loss = final_loss(st.params, b, cfg.effective_weights(), sched, rng, &grads, opt);
  if (!std::isfinite(loss.l_final)) throw DivergenceError("non-finite loss at iteration " + std::to_string(st.iteration), "");
  adam_update(st.params.values, grads, st.optimizer, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
              cfg.adam_eps);
  ++st.iteration;
  return loss;
}

/// One pretraining step on image latents: mean simple_loss over the batch.
template <class T>
double pretrain_step(TrainState<T>& st, const std::vector<const Latent<T>*>& images, const TrainConfig& cfg,
                     const NoiseSchedule& sched, std::mt19937_64& rng) {
  std::vector<T> grads(st.params.size(), T(0));
  std::uniform_int_distribution<int> pick_t(1, sched.T);
  std::normal_distribution<double> normal(0.0, 1.0);
  double loss = 0;
  const double n = static_cast<double>(images.size());
  for (const auto* x0 : images) {
    const int t = pick_t(rng);
    Latent<T> eps(x0->channels(), x0->height(), x0->width());
    for (auto& e : eps.values()) e = static_cast<T>(normal(rng));
    loss += simple_loss(st.params, *x0, eps, t, sched, &grads, 1.0 / n) / n;
  }
  if (!std::isfinite(loss)) throw DivergenceError("non-finite pretraining loss at iteration " + std::to_string(st.iteration), "");
  adam_update(st.params.values, grads, st.optimizer, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
              cfg.adam_eps);
  ++st.iteration;
  return loss;
}

struct RunHooks {
  std::ostream* log = nullptr;                       // one line per iteration
  std::optional<fs::path> checkpoint_dir;            // periodic + final checkpoints
  std::function<void(std::int64_t, double)> on_step;  // iteration, total loss
};

inline void write_log_line(std::ostream& os, std::int64_t iter, const LossBreakdown& b) {
  os << std::setprecision(17) << iter << '\t' << b.l_mae_t0 << '\t' << b.l_gm_t0 << '\t' << b.l_mae_tm1 << '\t'
     << b.l_gm_tm1 << '\t' << b.l_k << '\t' << b.l_final << '\n';
}

inline LossBreakdown parse_log_line(const std::string& line, std::int64_t* iter = nullptr) {
  std::istringstream is(line);
  std::int64_t it = 0;
  LossBreakdown b;
  is >> it >> b.l_mae_t0 >> b.l_gm_t0 >> b.l_mae_tm1 >> b.l_gm_tm1 >> b.l_k >> b.l_final;
  if (!is) throw IoError("malformed training log line: " + line);
  if (iter) *iter = it;
  return b;
}

namespace detail {

template <class T>
Checkpoint<T> checkpoint_from(const TrainState<T>& st, const Checkpoint<T>& base, Phase phase,
                              const std::string& hash) {
  Checkpoint<T> c = base;
  c.params = st.params;
  c.optimizer = st.optimizer;
  c.iteration = st.iteration;
  c.phase = phase;
  c.config_hash = hash;
  return c;
}

template <class T>
fs::path save_periodic(const Checkpoint<T>& c, const fs::path& dir, const std::string& stem) {
  fs::create_directories(dir);
  std::ostringstream name;
  name << stem << "_" << std::setw(7) << std::setfill('0') << c.iteration << ".ckpt";
  const auto p = dir / name.str();
  save_checkpoint(c, p);
  return p;
}

}  // namespace detail

/// Diffusion pretraining on RGB latents. Returns a checkpoint tagged phase A;
/// with zero iterations the parameters equal the initialization. Losses are
/// appended to loss_trace when given.
template <class T>
Checkpoint<T> pretrain(const TrainConfig& cfg, const std::vector<Latent<T>>& images, const Checkpoint<T>& init,
                       const RunHooks& hooks = {}, std::vector<double>* loss_trace = nullptr) {
  cfg.validate();
  if (images.empty()) throw ConfigError("", "pretraining needs at least one image");
  const auto sched = cfg.schedule();
  const auto hash = config_hash(cfg.canonical());
  TrainState<T> st{init.params, {}, 0};
  EpochSampler sampler(images.size(), cfg.seed, 3);
  std::string last_good;
  for (int it = 0; it < cfg.pretrain_iterations; ++it) {
    std::vector<const Latent<T>*> batch;
    for (int j = 0; j < cfg.batch_size; ++j)
      batch.push_back(&images[sampler(static_cast<std::uint64_t>(it) * cfg.batch_size + j)]);
    auto rng = step_rng(cfg.seed, it, 0xA);
    double loss;
    try {
      loss = pretrain_step(st, batch, cfg, sched, rng);
    } catch (const DivergenceError& e) {
      throw DivergenceError(e.what(), last_good);
    }
    if (loss_trace) loss_trace->push_back(loss);
    if (hooks.log) *hooks.log << it << '\t' << std::setprecision(17) << loss << '\n';
    if (hooks.on_step) hooks.on_step(it, loss);
    if (hooks.checkpoint_dir && cfg.checkpoint_interval > 0 && st.iteration % cfg.checkpoint_interval == 0)
      last_good = detail::save_periodic(detail::checkpoint_from(st, init, Phase::pretrain, hash),
                                        *hooks.checkpoint_dir, "pretrain").string();
  }
  auto out = detail::checkpoint_from(st, init, Phase::pretrain, hash);
  if (cfg.pretrain_iterations == 0) out.optimizer = {};
  return out;
}

/// Depth fine-tuning from `init`. The batch for iteration i and its noise
/// draws depend only on (seed, i), so resuming from a saved checkpoint
/// continues the exact sequence.
template <class T>
Checkpoint<T> train(const TrainConfig& cfg, const LatentSet<T>& data, const Checkpoint<T>& init,
                    const RunHooks& hooks = {}, std::vector<LossBreakdown>* trace = nullptr) {
  cfg.validate();
  const auto sched = cfg.schedule();
  const auto hash = config_hash(cfg.canonical());
  BatchStream<T> stream(data, cfg.batch_size, cfg.seed);
  const bool resume = init.phase == Phase::finetune;
  TrainState<T> st{init.params, resume ? init.optimizer : AdamState<T>{}, resume ? init.iteration : 0};
  std::string last_good;
  while (st.iteration < cfg.iterations) {
    const auto it = st.iteration;
    auto rng = step_rng(cfg.seed, it, 0xB);
    LossBreakdown loss;
    try {
      loss = train_step(st, stream.batch(static_cast<std::uint64_t>(it)), cfg, sched, rng);
    } catch (const DivergenceError& e) {
      throw DivergenceError(e.what(), last_good);
    }
    if (trace) trace->push_back(loss);
    if (hooks.log) write_log_line(*hooks.log, it, loss);
    if (hooks.on_step) hooks.on_step(it, loss.l_final);
    if (hooks.checkpoint_dir && cfg.checkpoint_interval > 0 && st.iteration % cfg.checkpoint_interval == 0)
      last_good = detail::save_periodic(detail::checkpoint_from(st, init, Phase::finetune, hash),
                                        *hooks.checkpoint_dir, "train").string();
  }
  return detail::checkpoint_from(st, init, Phase::finetune, hash);
}

}  // namespace fiffdepth
