// Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
// when any criterion of the selected group fails.
//
//   acceptance --group properties   criteria 1-5, 8, 9
//   acceptance --group training     criteria 6, 7 (canonical runs, hours on one core)
//   acceptance --group all

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include "fiffdepth/cli.hpp"
#include "oracles.hpp"

using namespace fiffdepth;

namespace {

// Tolerances and budgets, pinned.
constexpr double kAlgebraTol = 1e-10;
constexpr double kGradStep = 1e-5;
constexpr double kGradTol = 1e-4;
constexpr int kGradCoords = 50;
constexpr double kOracleTol = 1e-12;
constexpr double kCodecTol = 1e-5;
constexpr double kAffineEncodeTol = 1e-6;
constexpr double kInvarianceTol = 1e-9;
constexpr double kSpeedupMin = 10.0;
constexpr double kLearningRatioMin = 5.0;
constexpr double kCanonicalRunSecondsMax = 30 * 60;
constexpr double kBookkeepingTol = 1e-10;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

int report(int id, const char* title, const std::function<Outcome()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << title << "  [" << o.detail
            << "; " << fmt(s) << " s]" << std::endl;
  return o.pass ? 0 : 1;
}

PixelImage random_image(std::mt19937_64& rng, int h, int w) {
  PixelImage img{Tensor<float>(3, h, w)};
  std::uniform_real_distribution<float> u(-1, 1);
  for (auto& v : img.data.values()) v = u(rng);
  return img;
}

// ---------------------------------------------------------------------------

Outcome diffusion_algebra() {
  std::mt19937_64 rng(101);
  const auto sched = make_linear_schedule(1000);
  std::uniform_int_distribution<int> pick_t(1, 1000);
  double worst = 0;
  for (int k = 0; k < 1000; ++k) {
    const auto b0 = oracle::random_tensor<double>(rng, 3, 4, 4, -2, 2);
    const auto eps = oracle::random_tensor<double>(rng, 3, 4, 4, -3, 3);
    const int t = pick_t(rng);
    const auto xt = add_noise(b0, eps, t, sched);
    const auto v = v_target(b0, eps, t, sched);
    worst = std::max(worst, max_abs_diff(recover_b0(xt, v, t, sched), b0));
    worst = std::max(worst, max_abs_diff(recover_eps(xt, v, t, sched), eps));
  }
  bool schedule_ok = true;
  for (int T : {1, 10, 1000}) {
    const auto s = make_linear_schedule(T);
    double prod = 1;
    for (int t = 1; t <= T; ++t) {
      prod *= 1 - s.beta(t);
      schedule_ok &= std::abs(s.alpha_bar(t) - prod) <= 1e-15;
      schedule_ok &= s.alpha_bar(t) > 0 && s.alpha_bar(t) < 1;
      if (t > 1) {
        schedule_ok &= s.beta(t) >= s.beta(t - 1);
        schedule_ok &= s.alpha_bar(t) < s.alpha_bar(t - 1);
        schedule_ok &= s.alpha_bar(t) == s.alpha_bar(t - 1) * (1 - s.beta(t));
      }
    }
  }
  return {worst <= kAlgebraTol && schedule_ok,
          "worst identity error " + fmt(worst) + ", schedule invariants " + (schedule_ok ? "hold" : "broken")};
}

Outcome gradient_correctness() {
  const auto arch = oracle::tiny_arch();
  auto p = init_params<double>(arch, 3, false);
  std::mt19937_64 rng(202);
  std::normal_distribution<double> jitter(0, 0.05);
  for (auto& v : p.values) v += jitter(rng);
  const auto sched = make_linear_schedule(arch.num_timesteps);
  auto lat = [&] { return oracle::random_tensor<double>(rng, 3, arch.height, arch.width); };
  const auto x0 = lat(), eps = lat(), target = lat();
  LossWeights w;

  std::vector<std::pair<std::string, oracle::GradCheck>> checks;
  auto run = [&](const std::string& name, const std::function<double(std::vector<double>*)>& f) {
    std::vector<double> g(p.size(), 0.0);
    f(&g);
    checks.emplace_back(name, oracle::check_gradient(p.values, g, [&] { return f(nullptr); }, kGradCoords,
                                                     checks.size() + 7, kGradStep, kGradTol));
  };
  run("simple_loss", [&](std::vector<double>* g) { return simple_loss(p, x0, eps, 321, sched, g); });
  run("trajectory_keep_loss",
      [&](std::vector<double>* g) { return trajectory_keep_loss(p, x0, target, w.gamma, 654, eps, sched, g); });
  auto depth_term = [&](bool gm) {
    return [&, gm](std::vector<double>* g) {
      ForwardTrace<double> tr;
      const auto d0 = predict_d0(p, x0, g ? &tr : nullptr);
      const double loss = gm ? gm_loss(target, d0) : mae_loss(target, d0);
      if (g) {
        Latent<double> gd(d0.channels(), d0.height(), d0.width());
        if (gm)
          gm_loss_grad(target, d0, 1.0, gd);
        else
          mae_loss_grad(target, d0, 1.0, gd);
        backward(p, tr, gd, *g, false);
      }
      return loss;
    };
  };
  run("mae_loss*predict_d0", depth_term(false));
  run("gm_loss*predict_d0", depth_term(true));
  TrainBatch<double> batch;
  for (int i = 0; i < 2; ++i) {
    batch.syn_rgb.push_back(lat());
    batch.syn_depth.push_back(lat());
    batch.real_rgb.push_back(lat());
    batch.real_teacher.push_back(lat());
  }
  run("final_loss", [&](std::vector<double>* g) {
    std::mt19937_64 r(77);
    return final_loss(p, batch, w, sched, r, g).l_final;
  });

  bool ok = true;
  std::string detail;
  for (const auto& [name, c] : checks) {
    ok &= c.failures == 0 && c.checked >= kGradCoords;
    detail += (detail.empty() ? "" : ", ") + name + " " + fmt(c.worst_rel);
  }
  return {ok, "worst relative error: " + detail};
}

Outcome oracle_equivalence() {
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<int> ch(1, 4), side(2, 16), dside(3, 64);
  double worst = 0;
  for (int k = 0; k < 100; ++k) {
    const int c = ch(rng), h = side(rng), w = side(rng);
    const auto d = oracle::random_tensor<double>(rng, c, h, w, -2, 2);
    const auto s = oracle::random_tensor<double>(rng, c, h, w, -2, 2);
    const auto fd = oracle::flat(d), fs = oracle::flat(s);
    worst = std::max(worst, std::abs(mae_loss(d, s) - oracle::mae(fd, fs)));
    worst = std::max(worst, std::abs(gm_loss(d, s) - oracle::gm(fd, fs, c, h, w)));
    const int dh = dside(rng), dw = dside(rng);
    auto p = oracle::random_depth(rng, dh, dw, -0.5, 6);
    auto g = oracle::random_depth(rng, dh, dw, 0.5, 6);
    p.valid[rng() % p.size()] = 0;
    g.valid[rng() % g.size()] = 0;
    worst = std::max(worst, std::abs(abs_rel(p, g) - oracle::abs_rel(p, g)));
    worst = std::max(worst, std::abs(delta1(p, g) - oracle::delta1(p, g)));
    worst = std::max(worst, std::abs(gradient_error(p, g) - oracle::gradient_error(p, g)));
  }
  return {worst <= kOracleTol, "worst deviation " + fmt(worst) + " over 100 cases x 5 functions"};
}

Outcome codec_exactness() {
  std::mt19937_64 rng(404);
  const CodecConfig modes[] = {{}, {CodecMode::orthonormal_patch, 4, 11}};
  double worst = 0, worst_affine = 0;
  for (const auto& cfg : modes) {
    const Codec codec(cfg);
    for (int k = 0; k < 50; ++k) {
      const auto img = random_image(rng, 32, 32);
      worst = std::max(worst, max_abs_diff(codec.decode_image(codec.encode_image<float>(img)).data, img.data));
      auto d = oracle::random_depth(rng, 32, 32, 0.5, 20);
      d.valid[k] = 0;
      const auto back = codec.decode_depth(codec.encode_depth<float>(d));
      worst = std::max(worst, max_abs_diff(back.data, normalize_depth(d)));
      const auto z = codec.encode_depth<double>(d);
      for (auto [a, b] : {std::pair{0.01, -3.0}, {7.0, 2.5}, {250.0, 1e3}}) {
        DepthMap e = d;
        for (auto& v : e.data.values()) v = a * v + b;
        worst_affine = std::max(worst_affine, max_abs_diff(codec.encode_depth<double>(e), z));
      }
    }
  }
  return {worst <= kCodecTol && worst_affine <= kAffineEncodeTol,
          "round trip " + fmt(worst) + ", affine encode " + fmt(worst_affine)};
}

Outcome metric_invariance() {
  std::mt19937_64 rng(505);
  double worst = 0;
  for (int k = 0; k < 10; ++k) {
    const auto g = oracle::random_depth(rng, 24, 24, 1, 8);
    auto p = g;
    for (auto& v : p.data.values()) v += std::normal_distribution<double>(0, 0.7)(rng);
    const auto base = align_prediction(p, g);
    const double r0 = abs_rel(base, g), d0 = delta1(base, g);
    for (double a : {0.1, 1.0, 10.0})
      for (double b : {-5.0, 0.0, 5.0}) {
        DepthMap q = p;
        for (auto& v : q.data.values()) v = a * v + b;
        const auto al = align_prediction(q, g);
        worst = std::max({worst, std::abs(abs_rel(al, g) - r0), std::abs(delta1(al, g) - d0)});
      }
  }
  const auto g = oracle::random_depth(rng, 16, 16, 1, 8);
  DepthMap near = g, far = g;
  for (auto& v : near.data.values()) v *= 1.2;
  for (auto& v : far.data.values()) v *= 2.0;
  const double d_near = delta1(near, g), d_far = delta1(far, g);
  return {worst <= kInvarianceTol && d_near == 1.0 && d_far == 0.0,
          "worst drift " + fmt(worst) + ", delta1(1.2x)=" + fmt(d_near) + ", delta1(2x)=" + fmt(d_far)};
}

bool same_bytes(const fs::path& a, const fs::path& b) {
  return read_file_bytes(a) == read_file_bytes(b);
}

Outcome determinism_and_efficiency(const fs::path& work) {
  RunConfig cfg;
  cfg.finalize();
  auto ckpt = initial_checkpoint<float>(cfg.train);
  ckpt.params = init_params<float>(cfg.train.arch, 9, false);
  fs::create_directories(work / "images");
  save_checkpoint(ckpt, work / "model.ckpt");
  for (int i = 0; i < 6; ++i) {
    const auto s = gen_scene(cfg.scene, i, i % 2 ? Domain::real : Domain::synthetic);
    write_rgb_png(work / "images" / (s.id + ".png"), s.rgb);
  }
  const auto a = cmd_infer(work / "model.ckpt", work / "images", work / "run_a");
  const auto b = cmd_infer(work / "model.ckpt", work / "images", work / "run_b");
  bool identical = a.size() == b.size() && !a.empty();
  for (std::size_t i = 0; identical && i < a.size(); ++i) identical = same_bytes(a[i], b[i]);

  BenchSettings bench;
  bench.sizes = {64, 256};
  bench.K = 20;
  bench.repeats = 20;
  const auto reps = cmd_bench(work / "model.ckpt", bench);
  bool fast = true;
  std::string detail = std::to_string(a.size()) + " files " + (identical ? "bit-identical" : "DIFFER");
  for (const auto& r : reps) {
    fast &= r.speedup() >= kSpeedupMin && r.repeats >= 20;
    detail += ", " + std::to_string(r.image_size) + "px speedup " + fmt(r.speedup());
  }
  return {identical && fast, detail};
}

Outcome trainer_bookkeeping() {
  RunConfig cfg;
  cfg.train.iterations = 200;
  cfg.finalize();
  SceneGenConfig scene = cfg.scene;
  const auto samples = generate_samples(scene, 64, 64);
  const auto data = LatentSet<float>::build(samples, Codec(cfg.codec));
  auto init = initial_checkpoint<float>(cfg.train);
  init.params = init_params<float>(cfg.train.arch, 4, false);

  std::ostringstream log;
  RunHooks hooks;
  hooks.log = &log;
  train(cfg.train, data, init, hooks);
  std::istringstream in(log.str());
  std::string line;
  int lines = 0;
  double worst = 0;
  const auto w = cfg.train.effective_weights();
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto b = parse_log_line(line);
    worst = std::max(worst, std::abs(weighted_total(b, w) - b.l_final));
    ++lines;
  }

  TrainConfig zero = cfg.train;
  zero.weights.lambda_mae = zero.weights.lambda_gm = zero.weights.lambda_k = 0;
  zero.iterations = 25;
  const auto after = train(zero, data, init);
  const bool fixed = after.params.values == init.params.values;
  return {lines == 200 && worst <= kBookkeepingTol && fixed,
          std::to_string(lines) + " log lines, worst reconstruction error " + fmt(worst) + ", zero-weight run " +
              (fixed ? "bit-identical" : "MOVED")};
}

// ---------------------------------------------------------------------------

struct Canonical {
  AblationTable table;
  RunConfig cfg;
};

Canonical run_canonical(const fs::path& work) {
  RunConfig cfg;
  cfg.ablate.presets = {"full", "no_teacher", "teacher_at_d0", "no_traj_keep", "from_scratch"};
  cfg.ablate.seeds = {0, 1, 2};
  cfg.finalize();
  std::cout << "generating " << cfg.data.n_synthetic << "+" << cfg.data.n_real << " training scenes" << std::endl;
  const auto train_samples = generate_samples(cfg.scene, cfg.data.n_synthetic, cfg.data.n_real);
  auto heldout = generate_samples(cfg.scene, cfg.data.n_heldout, 0, 1, cfg.data.n_synthetic);
  auto held_real = generate_samples(cfg.scene, 0, cfg.data.n_heldout, 1, cfg.data.n_real);
  heldout.insert(heldout.end(), held_real.begin(), held_real.end());
  Canonical c{run_ablation(cfg, train_samples, heldout, work, &std::cout), cfg};
  std::ofstream(work / "ablation.tsv") << c.table.to_tsv();
  std::ofstream(work / "ablation_summary.tsv") << c.table.summary_tsv(cfg.ablate.presets);
  return c;
}

Outcome end_to_end_learning(const Canonical& c) {
  std::vector<double> ratios;
  double slowest = 0, total = 0;
  std::string detail;
  for (const auto seed : c.cfg.ablate.seeds) {
    const double before = c.table.untrained.at(seed).at(Domain::synthetic).abs_rel;
    double after = 0, train_s = 0;
    for (const auto& r : c.table.rows)
      if (r.preset == "full" && r.seed == seed && r.domain == Domain::synthetic) after = r.abs_rel, train_s = r.train_seconds;
    ratios.push_back(before / after);
    const double run_s = c.table.pretrain_seconds.at(seed) + train_s;
    slowest = std::max(slowest, run_s);
    total += run_s;
    detail += "seed " + std::to_string(seed) + " " + fmt(before) + "->" + fmt(after) + "; ";
  }
  const double med = median(ratios);
  return {med >= kLearningRatioMin && slowest <= kCanonicalRunSecondsMax,
          detail + "median improvement " + fmt(med) + "x, slowest run " + fmt(slowest / 60) + " min, all seeds " + fmt(total / 60) + " min"};
}

Outcome ablation_directions(const Canonical& c) {
  const auto& t = c.table;
  struct Dir {
    const char* label;
    const char* preset;
    Domain domain;
    double AblationRow::*metric;
  };
  const Dir dirs[] = {
      {"(a) no_teacher real abs_rel", "no_teacher", Domain::real, &AblationRow::abs_rel},
      {"(b) teacher_at_d0 real gradient_error", "teacher_at_d0", Domain::real, &AblationRow::gradient_error},
      {"(c) no_traj_keep synthetic gradient_error", "no_traj_keep", Domain::synthetic, &AblationRow::gradient_error},
      {"(d) from_scratch synthetic abs_rel", "from_scratch", Domain::synthetic, &AblationRow::abs_rel},
  };
  bool ok = true;
  std::string detail;
  for (const auto& d : dirs) {
    const double full = t.median_of("full", d.domain, d.metric);
    const double ablated = t.median_of(d.preset, d.domain, d.metric);
    const bool worse = ablated > full;
    ok &= worse;
    detail += std::string(detail.empty() ? "" : "; ") + d.label + " " + fmt(ablated) + " vs full " + fmt(full) +
              (worse ? "" : " (NOT worse)");
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fiffdepth acceptance gate"};
  std::string group = "properties";
  std::string work = "acceptance_work";
  app.add_option("--group", group, "properties, training or all")
      ->check(CLI::IsMember({"properties", "training", "all"}));
  app.add_option("--workdir", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);

  const fs::path dir(work);
  fs::create_directories(dir);
  int failures = 0;
  if (group != "training") {
    failures += report(1, "diffusion algebra identities", diffusion_algebra);
    failures += report(2, "gradient correctness", gradient_correctness);
    failures += report(3, "loss/metric oracle equivalence", oracle_equivalence);
    failures += report(4, "codec exactness", codec_exactness);
    failures += report(5, "metric protocol invariance", metric_invariance);
    failures += report(8, "determinism and efficiency", [&] { return determinism_and_efficiency(dir / "infer"); });
    failures += report(9, "trainer bookkeeping", trainer_bookkeeping);
  }
  if (group != "properties") {
    std::optional<Canonical> canonical;
    try {
      canonical = run_canonical(dir / "canonical");
    } catch (const std::exception& e) {
      std::cout << "canonical runs failed: " << e.what() << std::endl;
    }
    auto need = [&](auto fn) {
      return [&, fn] { return canonical ? fn(*canonical) : Outcome{false, "canonical runs unavailable"}; };
    };
    failures += report(6, "end-to-end learning", need(end_to_end_learning));
    failures += report(7, "ablation directions", need(ablation_directions));
  }
  return failures == 0 ? 0 : 1;
}
