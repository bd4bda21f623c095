#include <gtest/gtest.h>

#include <fstream>

#include "fiffdepth/dataset.hpp"
#include "fiffdepth/digest.hpp"
#include "oracles.hpp"

using namespace fiffdepth;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("fiffdepth_dataset_test_" + name);
  fs::remove_all(p);
  return p;
}

SceneGenConfig small_cfg() {
  SceneGenConfig c;
  c.image_size = 16;
  c.seed = 21;
  return c;
}

}  // namespace

TEST(Pfm, BitExactRoundTrip) {
  const auto dir = scratch_dir("pfm");
  fs::create_directories(dir);
  std::mt19937_64 rng(1);
  auto d = oracle::random_depth(rng, 5, 7, -3, 3);
  for (auto& v : d.data.values()) v = round_to_float(v);
  write_pfm(dir / "a.pfm", d);
  const auto back = read_pfm(dir / "a.pfm");
  EXPECT_EQ(back.data, d.data);
  EXPECT_EQ(back.valid, d.valid);

  std::ifstream f(dir / "a.pfm", std::ios::binary);
  std::string magic, scale;
  int w, h;
  f >> magic >> w >> h >> scale;
  EXPECT_EQ(magic, "Pf");
  EXPECT_EQ(w, 7);
  EXPECT_EQ(h, 5);
  EXPECT_EQ(std::stod(scale), -1.0);
  EXPECT_THROW(read_pfm(dir / "missing.pfm"), IoError);
}

TEST(Pfm, BigEndianInput) {
  const auto dir = scratch_dir("pfm_be");
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "b.pfm", std::ios::binary);
    f << "Pf\n2 1\n1.0\n";
    for (float v : {1.5f, -2.25f}) {
      auto u = __builtin_bswap32(std::bit_cast<std::uint32_t>(v));
      f.write(reinterpret_cast<const char*>(&u), 4);
    }
  }
  const auto d = read_pfm(dir / "b.pfm");
  EXPECT_EQ(d.at(0, 0), 1.5);
  EXPECT_EQ(d.at(0, 1), -2.25);
}

TEST(Dataset, WriteReadRoundTrip) {
  const auto dir = scratch_dir("roundtrip");
  const auto cfg = small_cfg();
  const auto samples = generate_samples(cfg, 3, 2);
  const auto hash = config_hash(cfg.canonical());
  write_dataset(samples, dir, hash);
  const auto m = read_manifest(dir);
  EXPECT_EQ(m.config_hash, hash);
  ASSERT_EQ(m.entries.size(), 5u);
  const auto back = load_samples(m);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(back[i].id, samples[i].id);
    EXPECT_EQ(back[i].domain, samples[i].domain);
    // generator output already sits on the 8-bit grid
    EXPECT_EQ(back[i].rgb.data, samples[i].rgb.data);
    EXPECT_EQ(back[i].depth_gt.has_value(), samples[i].depth_gt.has_value());
    if (samples[i].depth_gt) {
      EXPECT_EQ(back[i].depth_gt->data, samples[i].depth_gt->data);
    }
    if (samples[i].teacher_depth) {
      EXPECT_EQ(back[i].teacher_depth->data, samples[i].teacher_depth->data);
      EXPECT_EQ(back[i].hidden_depth->data, samples[i].hidden_depth->data);
    }
  }
  std::ifstream f(dir / kManifestName);
  std::string line;
  std::getline(f, line);
  std::getline(f, line);
  std::getline(f, line);
  EXPECT_EQ(line, "syn_000000\tsynthetic\trgb/syn_000000.png\tdepth/syn_000000.pfm\t-");
}

TEST(Dataset, EmptyManifest) {
  const auto dir = scratch_dir("empty");
  write_dataset({}, dir, "abc");
  const auto m = read_manifest(dir);
  EXPECT_TRUE(m.entries.empty());
  EXPECT_EQ(m.config_hash, "abc");
}

TEST(Dataset, MalformedManifest) {
  const auto dir = scratch_dir("bad");
  fs::create_directories(dir);
  std::ofstream(dir / kManifestName) << "x\tsynthetic\trgb/x.png\n";
  EXPECT_THROW(read_manifest(dir), IoError);
  EXPECT_THROW(read_manifest(dir / "nope"), IoError);
}

TEST(Dataset, ConfigHashTracksConfig) {
  auto a = small_cfg(), b = small_cfg();
  EXPECT_EQ(config_hash(a.canonical()), config_hash(b.canonical()));
  b.noise_sigma = 0.07;
  EXPECT_NE(config_hash(a.canonical()), config_hash(b.canonical()));
  EXPECT_EQ(config_hash("").size(), 16u);
  // sha256("abc") prefix
  EXPECT_EQ(to_hex(sha256(std::string_view("abc"))),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Dataset, WorkerCountDoesNotChangeOutput) {
  const auto cfg = small_cfg();
  const auto a = generate_samples(cfg, 5, 4, 1), b = generate_samples(cfg, 5, 4, 3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].rgb.data, b[i].rgb.data);
  }
}

TEST(BatchStream, HalfAndHalfAndDeterministic) {
  const auto samples = generate_samples(small_cfg(), 10, 7);
  const auto set = LatentSet<float>::build(samples, Codec(CodecConfig{}));
  for (int bs : {2, 32}) {
    BatchStream<float> a(set, bs, 4), b(set, bs, 4);
    for (int k = 0; k < 5; ++k) {
      const auto x = a.next(), y = b.next();
      EXPECT_EQ(x.syn_rgb.size(), static_cast<std::size_t>(bs / 2));
      EXPECT_EQ(x.real_rgb.size(), static_cast<std::size_t>(bs / 2));
      EXPECT_EQ(x.syn_rgb, y.syn_rgb);
      EXPECT_EQ(x.real_teacher, y.real_teacher);
    }
  }
  BatchStream<float> c(set, 4, 4), d(set, 4, 5);
  bool differs = false;
  for (int k = 0; k < 5; ++k) differs |= c.batch(k).syn_rgb != d.batch(k).syn_rgb;
  EXPECT_TRUE(differs);
  EXPECT_THROW(BatchStream<float>(set, 3, 0), ConfigError);
  EXPECT_THROW(BatchStream<float>(set, 0, 0), ConfigError);
}

TEST(EpochSampler, EachEpochIsAPermutation) {
  const EpochSampler s(7, 3, 1);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::vector<int> seen(7, 0);
    for (int j = 0; j < 7; ++j) ++seen[s(epoch * 7 + j)];
    for (int v : seen) EXPECT_EQ(v, 1);
  }
  std::vector<std::size_t> e0, e1;
  for (int j = 0; j < 7; ++j) e0.push_back(s(j)), e1.push_back(s(7 + j));
  EXPECT_NE(e0, e1);
}
