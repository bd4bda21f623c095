#include <gtest/gtest.h>

#include <sstream>

#include "fiffdepth/trainer.hpp"
#include "oracles.hpp"

using namespace fiffdepth;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.arch = oracle::tiny_arch();
  c.arch.height = c.arch.width = 16;
  c.batch_size = 4;
  c.iterations = 6;
  c.pretrain_iterations = 3;
  c.learning_rate = 1e-3;
  c.seed = 5;
  return c;
}

const LatentSet<float>& tiny_data() {
  static const LatentSet<float> set = [] {
    SceneGenConfig g;
    g.image_size = 16;
    g.seed = 2;
    return LatentSet<float>::build(generate_samples(g, 6, 6), Codec(CodecConfig{}));
  }();
  return set;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("fiffdepth_trainer_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(TrainConfig, Validation) {
  auto c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.ablation.no_teacher = c.ablation.teacher_at_d0 = true;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.schedule_T = 500;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.learning_rate = 0;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "train.learning_rate");
  }
  EXPECT_EQ(TrainConfig{}.batch_size, 32);
  const LossWeights w;
  EXPECT_EQ(w.gamma, 0.5);
  EXPECT_EQ(w.lambda_mae, 1.0);
  EXPECT_EQ(w.lambda_gm, 0.5);
  EXPECT_EQ(w.lambda_k, 0.2);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<double> p = {1.0, -2.0, 0.5}, g = {0.3, -4.0, 0.0};
  AdamState<double> st;
  adam_update(p, g, st, 0.01, 0.9, 0.999, 1e-8);
  // bias-corrected first step: lr * g / (|g| + eps)
  EXPECT_NEAR(p[0], 1.0 - 0.01 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(p[1], -2.0 + 0.01 * 4.0 / (4.0 + 1e-8), 1e-15);
  EXPECT_EQ(p[2], 0.5);
  EXPECT_EQ(st.step, 1);
}

TEST(Train, AblationFlagsReduceObjective) {
  const auto p = init_params<double>(oracle::tiny_arch(), 3, false);
  const auto s = make_linear_schedule(1000);
  std::mt19937_64 drng(4);
  TrainBatch<double> b;
  for (int i = 0; i < 2; ++i) {
    b.syn_rgb.push_back(oracle::random_tensor<double>(drng, 3, 8, 8));
    b.syn_depth.push_back(oracle::random_tensor<double>(drng, 3, 8, 8));
    b.real_rgb.push_back(oracle::random_tensor<double>(drng, 3, 8, 8));
    b.real_teacher.push_back(oracle::random_tensor<double>(drng, 3, 8, 8));
  }
  auto eval = [&](const TrainConfig& c) {
    std::mt19937_64 rng(9);
    return final_loss(p, b, c.effective_weights(), s, rng, nullptr, c.objective_options()).l_final;
  };
  auto general = [&](LossWeights w) {
    std::mt19937_64 rng(9);
    return final_loss(p, b, w, s, rng).l_final;
  };
  TrainConfig c;
  c.ablation.no_traj_keep = true;
  EXPECT_NEAR(eval(c), general({0.5, 1.0, 0.5, 0.0}), 1e-12);
  c = {};
  c.ablation.image_only_traj = true;
  EXPECT_NEAR(eval(c), general({1.0, 1.0, 0.5, 0.2}), 1e-12);
  c = {};
  c.ablation.no_teacher = true;
  EXPECT_EQ(c.objective_options().teacher, TeacherMode::none);
  c = {};
  c.ablation.teacher_at_d0 = true;
  EXPECT_EQ(c.objective_options().teacher, TeacherMode::at_d0);
}

TEST(Train, ZeroWeightsLeaveParametersUnchanged) {
  auto cfg = tiny_config();
  cfg.weights = {0.5, 0, 0, 0};
  auto init = initial_checkpoint<float>(cfg);
  init.params = init_params<float>(cfg.arch, 1, false);
  const auto out = train(cfg, tiny_data(), init);
  EXPECT_EQ(out.params, init.params);
  EXPECT_EQ(out.iteration, cfg.iterations);
}

TEST(Train, LogLinesReconstructTotal) {
  auto cfg = tiny_config();
  std::ostringstream log;
  RunHooks hooks;
  hooks.log = &log;
  train(cfg, tiny_data(), initial_checkpoint<float>(cfg), hooks);
  std::istringstream is(log.str());
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    std::int64_t it;
    const auto b = parse_log_line(line, &it);
    EXPECT_EQ(it, n);
    EXPECT_NEAR(weighted_total(b, cfg.weights), b.l_final, 1e-10);
    EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 6);
    ++n;
  }
  EXPECT_EQ(n, cfg.iterations);
  EXPECT_THROW(parse_log_line("1\t2"), IoError);
}

TEST(Train, DeterministicRuns) {
  auto cfg = tiny_config();
  const auto init = initial_checkpoint<float>(cfg);
  std::vector<LossBreakdown> a, b;
  const auto ca = train(cfg, tiny_data(), init, {}, &a);
  const auto cb = train(cfg, tiny_data(), init, {}, &b);
  EXPECT_EQ(ca.params, cb.params);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].l_final, b[i].l_final);
}

TEST(Pretrain, ZeroIterationsAndDeterminism) {
  auto cfg = tiny_config();
  const auto init = initial_checkpoint<float>(cfg);
  cfg.pretrain_iterations = 0;
  const auto z = pretrain(cfg, tiny_data().syn_rgb, init);
  EXPECT_EQ(z.params, init.params);
  EXPECT_EQ(z.phase, Phase::pretrain);
  cfg.pretrain_iterations = 3;
  std::vector<double> ta, tb;
  const auto a = pretrain(cfg, tiny_data().syn_rgb, init, {}, &ta);
  const auto b = pretrain(cfg, tiny_data().syn_rgb, init, {}, &tb);
  EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
  EXPECT_EQ(ta, tb);
  EXPECT_FALSE(a.params == init.params);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  auto cfg = tiny_config();
  cfg.codec = {CodecMode::orthonormal_patch, 2, 77};
  cfg.arch.height = cfg.arch.width = 8;
  cfg.arch.in_channels = 12;
  auto c = initial_checkpoint<float>(cfg);
  c.optimizer.m.assign(c.params.size(), 0.25f);
  c.optimizer.v.assign(c.params.size(), 0.5f);
  c.optimizer.step = 9;
  c.iteration = 9;
  c.phase = Phase::finetune;
  const auto dir = scratch("roundtrip");
  save_checkpoint(c, dir / "a.ckpt");
  const auto back = load_checkpoint<float>(dir / "a.ckpt");
  EXPECT_EQ(back.params, c.params);
  EXPECT_EQ(back.optimizer, c.optimizer);
  EXPECT_EQ(back.codec, c.codec);
  EXPECT_EQ(back.phase, Phase::finetune);
  EXPECT_EQ(back.config_hash, c.config_hash);
  save_checkpoint(back, dir / "b.ckpt");
  EXPECT_EQ(read_file_bytes(dir / "a.ckpt"), read_file_bytes(dir / "b.ckpt"));
}

TEST(Checkpoint, CorruptionAndVersion) {
  const auto c = initial_checkpoint<float>(tiny_config());
  auto bytes = serialize_checkpoint(c);
  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  EXPECT_THROW(deserialize_checkpoint<float>(truncated), DigestError);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(deserialize_checkpoint<float>(flipped), DigestError);
  EXPECT_THROW(deserialize_checkpoint<float>(serialize_checkpoint(c, kCheckpointVersion + 1)), VersionError);
  EXPECT_THROW(load_checkpoint<float>(scratch("missing") / "none.ckpt"), IoError);
}

TEST(Checkpoint, ResumeContinuesExactly) {
  auto cfg = tiny_config();
  const auto init = initial_checkpoint<float>(cfg);
  const auto straight = train(cfg, tiny_data(), init);
  auto half = cfg;
  half.iterations = 3;
  const auto dir = scratch("resume");
  save_checkpoint(train(half, tiny_data(), init), dir / "mid.ckpt");
  const auto resumed = train(cfg, tiny_data(), load_checkpoint<float>(dir / "mid.ckpt"));
  EXPECT_EQ(resumed.params, straight.params);
  EXPECT_EQ(resumed.optimizer, straight.optimizer);
}

TEST(Checkpoint, PeriodicFilesWritten) {
  auto cfg = tiny_config();
  cfg.checkpoint_interval = 2;
  const auto dir = scratch("periodic");
  RunHooks hooks;
  hooks.checkpoint_dir = dir;
  train(cfg, tiny_data(), initial_checkpoint<float>(cfg), hooks);
  EXPECT_TRUE(fs::exists(dir / "train_0000002.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "train_0000006.ckpt"));
  EXPECT_EQ(load_checkpoint<float>(dir / "train_0000004.ckpt").iteration, 4);
}

TEST(Train, DivergenceReportsLastGoodCheckpoint) {
  auto cfg = tiny_config();
  cfg.checkpoint_interval = 1;
  const auto dir = scratch("diverge");
  auto init = initial_checkpoint<float>(cfg);
  init.params.values[0] = std::numeric_limits<float>::quiet_NaN();
  RunHooks hooks;
  hooks.checkpoint_dir = dir;
  try {
    train(cfg, tiny_data(), init, hooks);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.last_good_checkpoint(), "");
  }
}
