// fiffdepth/dataset.hpp

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

// On-disk dataset layout, latent caching and the half-synthetic/half-real
// batch stream.
//
//   <dir>/manifest.txt        "# key=value" header lines, then one
//                             tab-separated record per sample:
//                             id, domain, rgb path, depth path|-, teacher path|-
//   <dir>/rgb/<id>.png        8-bit RGB
//   <dir>/depth/<id>.pfm      synthetic ground truth
//   <dir>/teacher/<id>.pfm    teacher pseudo-labels (real domain)
//   <dir>/hidden/<id>.pfm     held-back true depth of real samples, read only
//                             by evaluation

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

#include "fiffdepth/data.hpp"
#include "fiffdepth/digest.hpp"
#include "fiffdepth/image_io.hpp"
#include "fiffdepth/objective.hpp"

namespace fiffdepth {

namespace fs = std::filesystem;

struct ManifestEntry {
  std::string id;
  Domain domain = Domain::synthetic;
  std::string rgb, depth, teacher;  // relative paths; empty when absent
};

struct Manifest {
  fs::path dir;
  std::string config_hash;
  std::vector<ManifestEntry> entries;
};

inline constexpr const char* kManifestName = "manifest.txt";

/// Generates n_synthetic + n_real samples. With workers > 1 generation is
/// split across threads; output order is by (domain, index) regardless.
inline std::vector<SceneSample> generate_samples(const SceneGenConfig& cfg, int n_synthetic,
                                                 int n_real, int workers = 1,
                                                 int first_index = 0) {
  cfg.validate();
  const int total = n_synthetic + n_real;
  std::vector<SceneSample> out(total);
  auto job = [&](int begin, int end) {
    for (int i = begin; i < end; ++i)
      out[i] = i < n_synthetic ? gen_scene(cfg, first_index + i, Domain::synthetic)
                               : gen_scene(cfg, first_index + i - n_synthetic, Domain::real);
  };
  workers = std::max(1, std::min(workers, total));
  if (workers == 1) {
    job(0, total);
    return out;
  }
  std::vector<std::thread> pool;
  const int chunk = (total + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) pool.emplace_back(job, w * chunk, std::min(total, (w + 1) * chunk));
  for (auto& t : pool) t.join();
  return out;
}

inline Manifest write_dataset(const std::vector<SceneSample>& samples, const fs::path& dir,
                              const std::string& config_hash) {
  std::error_code ec;
  for (const char* sub : {"rgb", "depth", "teacher", "hidden"}) {
    fs::create_directories(dir / sub, ec);
    if (ec) throw IoError("cannot create " + (dir / sub).string() + ": " + ec.message());
  }
  Manifest m{dir, config_hash, {}};
  for (const auto& s : samples) {
    ManifestEntry e{s.id, s.domain, "rgb/" + s.id + ".png", "", ""};
    write_rgb_png(dir / e.rgb, s.rgb);
    if (s.depth_gt) {
      e.depth = "depth/" + s.id + ".pfm";
      write_pfm(dir / e.depth, *s.depth_gt);
    }
    if (s.teacher_depth) {
      e.teacher = "teacher/" + s.id + ".pfm";
      write_pfm(dir / e.teacher, *s.teacher_depth);
    }
    if (s.hidden_depth) write_pfm(dir / "hidden" / (s.id + ".pfm"), *s.hidden_depth);
    m.entries.push_back(std::move(e));
  }
  std::ofstream f(dir / kManifestName, std::ios::binary);
  if (!f) throw IoError("cannot write " + (dir / kManifestName).string());
  f << "# fiffdepth dataset manifest v1\n# config_hash=" << config_hash << "\n";
  for (const auto& e : m.entries)
    f << e.id << '\t' << to_string(e.domain) << '\t' << e.rgb << '\t'
      << (e.depth.empty() ? "-" : e.depth) << '\t' << (e.teacher.empty() ? "-" : e.teacher) << '\n';
  if (!f) throw IoError("write failed: " + (dir / kManifestName).string());
  return m;
}

inline Manifest read_manifest(const fs::path& dir) {
  std::ifstream f(dir / kManifestName);
  if (!f) throw IoError("cannot open " + (dir / kManifestName).string());
  Manifest m{dir, "", {}};
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq != std::string::npos && line.substr(2, eq - 2) == "config_hash")
        m.config_hash = line.substr(eq + 1);
      continue;
    }
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
      cols.push_back(line.substr(start, tab - start));
    cols.push_back(line.substr(start));
    if (cols.size() != 5)
      throw IoError((dir / kManifestName).string() + ":" + std::to_string(lineno) +
                    ": expected 5 tab-separated fields");
    ManifestEntry e{cols[0], domain_from_string(cols[1]), cols[2], cols[3] == "-" ? "" : cols[3],
                    cols[4] == "-" ? "" : cols[4]};
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline SceneSample load_sample(const Manifest& m, const ManifestEntry& e) {
  SceneSample s;
  s.id = e.id;
  s.domain = e.domain;
  s.rgb = read_rgb_png(m.dir / e.rgb);
  if (!e.depth.empty()) s.depth_gt = read_pfm(m.dir / e.depth);
  if (!e.teacher.empty()) s.teacher_depth = read_pfm(m.dir / e.teacher);
  const auto hidden = m.dir / "hidden" / (e.id + ".pfm");
  if (e.domain == Domain::real && fs::exists(hidden)) s.hidden_depth = read_pfm(hidden);
  return s;
}

inline std::vector<SceneSample> load_samples(const Manifest& m) {
  std::vector<SceneSample> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) out.push_back(load_sample(m, e));
  return out;
}

/// Encoded training latents, cached once per run.
template <class T>
struct LatentSet {
  std::vector<Latent<T>> syn_rgb, syn_depth, real_rgb, real_teacher;

  static LatentSet build(const std::vector<SceneSample>& samples, const Codec& codec) {
    LatentSet s;
    for (const auto& smp : samples) {
      if (smp.domain == Domain::synthetic) {
        if (!smp.depth_gt) throw IoError("synthetic sample " + smp.id + " has no depth");
        s.syn_rgb.push_back(codec.encode_image<T>(smp.rgb));
        s.syn_depth.push_back(codec.encode_depth<T>(*smp.depth_gt));
      } else {
        if (!smp.teacher_depth) throw IoError("real sample " + smp.id + " has no teacher depth");
        s.real_rgb.push_back(codec.encode_image<T>(smp.rgb));
        s.real_teacher.push_back(codec.encode_depth<T>(*smp.teacher_depth));
      }
    }
    return s;
  }
};

/// Maps a global slot counter onto a per-epoch permutation of [0, n); each
/// epoch is reshuffled from (seed, stream, epoch).
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed, std::uint64_t stream)
      : n_(n), seed_(seed), stream_(stream) {}

  std::size_t operator()(std::uint64_t slot) const {
    const std::uint64_t epoch = slot / n_;
    if (epoch != cached_epoch_ || perm_.empty()) {
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      auto rng = detail::make_rng(seed_, stream_, epoch, 0xba7c4);
      std::shuffle(perm_.begin(), perm_.end(), rng);
      cached_epoch_ = epoch;
    }
    return perm_[slot % n_];
  }

 private:
  std::size_t n_;
  std::uint64_t seed_, stream_;
  mutable std::uint64_t cached_epoch_ = ~std::uint64_t{0};
  mutable std::vector<std::size_t> perm_;
};

/// Deterministic, seekable stream of half/half batches: batch i depends only
/// on (latents, batch_size, seed, i).
template <class T>
class BatchStream {
 public:
  BatchStream(const LatentSet<T>& data, int batch_size, std::uint64_t seed)
      : data_(&data), batch_size_(batch_size),
        syn_(data.syn_rgb.size(), seed, 1), real_(data.real_rgb.size(), seed, 2) {
    if (batch_size <= 0 || batch_size % 2) throw ConfigError("train.batch_size", "must be even and positive");
    if (data.syn_rgb.empty()) throw ConfigError("", "dataset has no synthetic samples");
    if (data.real_rgb.empty()) throw ConfigError("", "dataset has no real samples");
  }

  int batch_size() const noexcept { return batch_size_; }

  TrainBatch<T> batch(std::uint64_t iteration) const {
    const std::uint64_t half = static_cast<std::uint64_t>(batch_size_ / 2);
    TrainBatch<T> b;
    for (std::uint64_t j = 0; j < half; ++j) {
      const auto i = syn_(iteration * half + j);
      b.syn_rgb.push_back(data_->syn_rgb[i]);
      b.syn_depth.push_back(data_->syn_depth[i]);
      const auto k = real_(iteration * half + j);
      b.real_rgb.push_back(data_->real_rgb[k]);
      b.real_teacher.push_back(data_->real_teacher[k]);
    }
    return b;
  }

  TrainBatch<T> next() { return batch(position_++); }

 private:
  const LatentSet<T>* data_;
  int batch_size_;
  EpochSampler syn_, real_;
  std::uint64_t position_ = 0;
};

}  // namespace fiffdepth
