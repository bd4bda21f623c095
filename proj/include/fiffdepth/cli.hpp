// fiffdepth/cli.hpp

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

// Subcommands behind the `fiffdepth` executable. Each cmd_* function is
// usable directly; run_cli parses arguments and maps failures to exit codes
// (0 ok, 1 runtime failure, 2 configuration or usage error).

#pragma once

#include <CLI11.hpp>

#include <iostream>
#include <map>

#include "fiffdepth/config.hpp"
#include "fiffdepth/evalkit.hpp"

namespace fiffdepth {

inline constexpr const char* kEffectiveConfigName = "effective_config.txt";

inline void echo_config(const RunConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream f(dir / kEffectiveConfigName);
  if (!f) throw IoError("cannot write " + (dir / kEffectiveConfigName).string());
  f << cfg.to_text();
}

inline std::vector<SceneSample> load_dataset(const fs::path& dir) { return load_samples(read_manifest(dir)); }

/// Training samples in `out`, held-out samples in `out/heldout`.
inline fs::path cmd_gen_data(const RunConfig& cfg, const fs::path& out) {
  echo_config(cfg, out);
  const auto hash = config_hash(cfg.scene.canonical());
  write_dataset(generate_samples(cfg.scene, cfg.data.n_synthetic, cfg.data.n_real, cfg.workers), out, hash);
  auto held = generate_samples(cfg.scene, cfg.data.n_heldout, 0, cfg.workers, cfg.data.n_synthetic);
  auto held_real = generate_samples(cfg.scene, 0, cfg.data.n_heldout, cfg.workers, cfg.data.n_real);
  held.insert(held.end(), std::make_move_iterator(held_real.begin()), std::make_move_iterator(held_real.end()));
  write_dataset(held, out / "heldout", hash);
  return out / kManifestName;
}

inline std::vector<Latent<float>> synthetic_image_latents(const std::vector<SceneSample>& samples,
                                                         const Codec& codec) {
  std::vector<Latent<float>> out;
  for (const auto& s : samples)
    if (s.domain == Domain::synthetic) out.push_back(codec.encode_image<float>(s.rgb));
  return out;
}

/// Phase A on the synthetic RGB images of the dataset.
inline Checkpoint<float> run_pretrain(const RunConfig& cfg, const std::vector<SceneSample>& samples,
                                      const RunHooks& hooks = {}) {
  const Codec codec(cfg.codec);
  return pretrain(cfg.train, synthetic_image_latents(samples, codec), initial_checkpoint<float>(cfg.train), hooks);
}

inline fs::path cmd_pretrain(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out) {
  echo_config(cfg, out);
  std::ofstream log(out / "pretrain_log.tsv");
  RunHooks hooks;
  hooks.log = &log;
  if (cfg.train.checkpoint_interval > 0) hooks.checkpoint_dir = out / "checkpoints";
  const auto ckpt = run_pretrain(cfg, load_dataset(data_dir), hooks);
  save_checkpoint(ckpt, out / "pretrain.ckpt");
  return out / "pretrain.ckpt";
}

inline void require_compatible(const Checkpoint<float>& c, const RunConfig& cfg) {
  if (!(c.params.arch == cfg.train.arch))
    throw ConfigError("arch.widths", "checkpoint architecture differs from the configured one");
  if (!(c.codec == cfg.codec)) throw ConfigError("codec.mode", "checkpoint codec differs from the configured one");
}

/// Phase B from `init`; an empty init path is allowed only with from_scratch.
inline fs::path cmd_train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& init,
                          const fs::path& out) {
  Checkpoint<float> start;
  if (init.empty()) {
    if (!cfg.train.ablation.from_scratch)
      throw ConfigError("ablation.from_scratch", "an --init checkpoint is required unless set");
    start = initial_checkpoint<float>(cfg.train);
  } else {
    start = load_checkpoint<float>(init);
    require_compatible(start, cfg);
  }
  echo_config(cfg, out);
  const auto samples = load_dataset(data_dir);
  const auto data = LatentSet<float>::build(samples, Codec(cfg.codec));
  std::ofstream log(out / "train_log.tsv");
  RunHooks hooks;
  hooks.log = &log;
  if (cfg.train.checkpoint_interval > 0) hooks.checkpoint_dir = out / "checkpoints";
  save_checkpoint(train(cfg.train, data, start, hooks), out / "train.ckpt");
  return out / "train.ckpt";
}

/// Predicted normalized depth for one RGB image.
inline DepthMap infer_depth(const Checkpoint<float>& c, const PixelImage& img) {
  const Codec codec(c.codec);
  return codec.decode_depth(predict_d0(c.params, codec.encode_image<float>(img)));
}

/// `input` is a PNG file or a directory of PNG files. Writes <stem>.pfm and
/// <stem>_preview.png per image and returns both paths, in that order.
inline std::vector<fs::path> cmd_infer(const fs::path& checkpoint, const fs::path& input, const fs::path& out) {
  const auto c = load_checkpoint<float>(checkpoint);
  std::vector<fs::path> inputs;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input))
      if (e.path().extension() == ".png") inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
  } else {
    if (!fs::exists(input)) throw IoError("no such input: " + input.string());
    inputs.push_back(input);
  }
  fs::create_directories(out);
  std::vector<fs::path> written;
  for (const auto& p : inputs) {
    const auto d = infer_depth(c, read_rgb_png(p));
    const auto stem = p.stem().string();
    write_pfm(out / (stem + ".pfm"), d);
    write_depth_preview(out / (stem + "_preview.png"), d);
    written.push_back(out / (stem + ".pfm"));
    written.push_back(out / (stem + "_preview.png"));
  }
  return written;
}

inline EvalReport cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& report,
                           const EvalOptions& opt = {}, const fs::path& csv = {}) {
  const auto c = load_checkpoint<float>(checkpoint);
  const auto rep = evaluate(c.params, load_dataset(data_dir), Codec(c.codec), opt);
  if (report.has_parent_path()) fs::create_directories(report.parent_path());
  std::ofstream(report) << "checkpoint=" << checkpoint.string() << "\n" << rep.to_text();
  if (!csv.empty()) std::ofstream(csv) << rep.to_csv();
  return rep;
}

struct AblationRow {
  std::string preset;
  std::uint64_t seed = 0;
  Domain domain = Domain::synthetic;
  double abs_rel = 0, delta1 = 0, gradient_error = 0;
  double train_seconds = 0;  // phase B only
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::map<std::uint64_t, std::map<Domain, EvalReport>> untrained;  // per seed
  std::map<std::uint64_t, double> pretrain_seconds;                 // per seed

  /// Median over seeds of one metric for (preset, domain).
  double median_of(const std::string& preset, Domain d, double AblationRow::*metric) const {
    std::vector<double> v;
    for (const auto& r : rows)
      if (r.preset == preset && r.domain == d) v.push_back(r.*metric);
    if (v.empty()) throw Error("no ablation rows for preset " + preset);
    return median(v);
  }

  std::string to_tsv() const {
    std::ostringstream os;
    os << std::setprecision(9) << "preset\tseed\tdomain\tabs_rel\tdelta1\tgradient_error\n";
    for (const auto& r : rows)
      os << r.preset << '\t' << r.seed << '\t' << to_string(r.domain) << '\t' << r.abs_rel << '\t' << r.delta1
         << '\t' << r.gradient_error << '\n';
    return os.str();
  }

  std::string summary_tsv(const std::vector<std::string>& presets) const {
    std::ostringstream os;
    os << std::setprecision(6) << "preset\tdomain\tmedian_abs_rel\tmedian_delta1\tmedian_gradient_error\n";
    for (const auto& p : presets)
      for (auto d : {Domain::synthetic, Domain::real})
        os << p << '\t' << to_string(d) << '\t' << median_of(p, d, &AblationRow::abs_rel) << '\t'
           << median_of(p, d, &AblationRow::delta1) << '\t' << median_of(p, d, &AblationRow::gradient_error)
           << '\n';
    return os.str();
  }
};

inline double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

/// Trains every preset for every seed and evaluates on `heldout` per domain.
/// Phase A runs once per seed and is shared by all presets that use it.
/// `progress`, when set, receives one line per finished run.
inline AblationTable run_ablation(const RunConfig& base, const std::vector<SceneSample>& train_samples,
                                  const std::vector<SceneSample>& heldout, const fs::path& out = {},
                                  std::ostream* progress = nullptr) {
  const Codec codec(base.codec);
  const auto data = LatentSet<float>::build(train_samples, codec);
  AblationTable table;
  for (const auto seed : base.ablate.seeds) {
    RunConfig cfg = base;
    cfg.train.seed = seed;
    cfg.train.ablation = {};
    const auto init = initial_checkpoint<float>(cfg.train);
    for (auto d : {Domain::synthetic, Domain::real})
      table.untrained[seed][d] = evaluate(init.params, heldout, codec, {base.align_space, d});
    std::optional<Checkpoint<float>> phase_a;
    for (const auto& preset : base.ablate.presets) {
      cfg.train.ablation = RunConfig::apply_preset(preset, {});
      Checkpoint<float> start = init;
      if (!cfg.train.ablation.from_scratch) {
        if (!phase_a) {
          const auto ta = std::chrono::steady_clock::now();
          RunConfig a = cfg;
          a.train.ablation = {};
          phase_a = run_pretrain(a, train_samples);
          table.pretrain_seconds[seed] = seconds_since(ta);
        }
        start = *phase_a;
      }
      const auto t0 = std::chrono::steady_clock::now();
      const auto trained = train(cfg.train, data, start);
      const double train_s = seconds_since(t0);
      if (!out.empty()) {
        const auto dir = out / (preset + "_seed" + std::to_string(seed));
        echo_config(cfg, dir);
        save_checkpoint(trained, dir / "train.ckpt");
      }
      for (auto d : {Domain::synthetic, Domain::real}) {
        const auto rep = evaluate(trained.params, heldout, codec, {base.align_space, d});
        table.rows.push_back({preset, seed, d, rep.abs_rel, rep.delta1, rep.gradient_error, train_s});
      }
      if (progress) {
        const auto& syn = table.rows[table.rows.size() - 2];
        const auto& real = table.rows.back();
        *progress << "ablate seed=" << seed << " preset=" << preset << " syn_abs_rel=" << syn.abs_rel
                  << " real_abs_rel=" << real.abs_rel << " train_seconds=" << train_s << std::endl;
      }
    }
  }
  return table;
}

inline AblationTable cmd_ablate(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out,
                                std::ostream* progress = nullptr) {
  echo_config(cfg, out);
  const auto table = run_ablation(cfg, load_dataset(data_dir), load_dataset(data_dir / "heldout"), out, progress);
  std::ofstream(out / "ablation.tsv") << table.to_tsv();
  std::ofstream(out / "ablation_summary.tsv") << table.summary_tsv(cfg.ablate.presets);
  return table;
}

inline std::vector<TimingReport> cmd_bench(const fs::path& checkpoint, const BenchSettings& b) {
  const auto c = load_checkpoint<float>(checkpoint);
  std::vector<TimingReport> out;
  for (int size : b.sizes) out.push_back(timing_bench(c.params, c.schedule(), c.codec, size, b.K, b.repeats));
  return out;
}

/// Parses argv and dispatches. Unknown `--section.key value` arguments are
/// applied as config overrides.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"fiffdepth: one-step depth estimation from a diffusion-pretrained denoiser"};
  app.require_subcommand(1);
  std::string config_path, data_dir, out_dir, init, checkpoint, input, report, csv, domain;

  auto with_config = [&](CLI::App* s) {
    s->add_option("--config", config_path, "key = value configuration file");
    s->allow_extras();
  };
  auto* gen = app.add_subcommand("gen-data", "generate the toy dataset");
  with_config(gen);
  gen->add_option("--out", out_dir)->required();
  auto* pre = app.add_subcommand("pretrain", "diffusion pretraining (phase A)");
  with_config(pre);
  pre->add_option("--data", data_dir)->required();
  pre->add_option("--out", out_dir)->required();
  auto* tr = app.add_subcommand("train", "depth fine-tuning (phase B)");
  with_config(tr);
  tr->add_option("--data", data_dir)->required();
  tr->add_option("--init", init, "phase A checkpoint");
  tr->add_option("--out", out_dir)->required();
  auto* inf = app.add_subcommand("infer", "predict depth for PNG images");
  inf->add_option("--checkpoint", checkpoint)->required();
  inf->add_option("--input", input, "PNG file or directory")->required();
  inf->add_option("--out", out_dir)->required();
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  with_config(ev);
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--data", data_dir)->required();
  ev->add_option("--report", report)->required();
  ev->add_option("--csv", csv, "per-image CSV");
  ev->add_option("--domain", domain, "synthetic or real");
  auto* ab = app.add_subcommand("ablate", "train and evaluate the ablation presets");
  with_config(ab);
  ab->add_option("--data", data_dir)->required();
  ab->add_option("--out", out_dir)->required();
  auto* be = app.add_subcommand("bench", "single pass vs iterative rollout timing");
  with_config(be);
  be->add_option("--checkpoint", checkpoint)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg = load_run_config(config_path);
    for (auto* s : app.get_subcommands()) apply_overrides(cfg, s->remaining());
    cfg.finalize();

    if (gen->parsed()) {
      out << "manifest=" << cmd_gen_data(cfg, out_dir).string() << "\n";
    } else if (pre->parsed()) {
      out << "checkpoint=" << cmd_pretrain(cfg, data_dir, out_dir).string() << "\n";
    } else if (tr->parsed()) {
      out << "checkpoint=" << cmd_train(cfg, data_dir, init, out_dir).string() << "\n";
    } else if (inf->parsed()) {
      for (const auto& p : cmd_infer(checkpoint, input, out_dir))
        out << (p.extension() == ".pfm" ? "depth=" : "preview=") << p.string() << "\n";
    } else if (ev->parsed()) {
      EvalOptions opt{cfg.align_space, std::nullopt};
      if (!domain.empty()) opt.domain = domain_from_string(domain);
      if (fs::path(report).has_parent_path()) echo_config(cfg, fs::path(report).parent_path());
      out << cmd_eval(checkpoint, data_dir, report, opt, csv).to_text();
    } else if (ab->parsed()) {
      const auto table = cmd_ablate(cfg, data_dir, out_dir, &err);
      out << table.summary_tsv(cfg.ablate.presets);
    } else if (be->parsed()) {
      for (const auto& r : cmd_bench(checkpoint, cfg.bench)) out << r.to_text() << "\n";
    }
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace fiffdepth
