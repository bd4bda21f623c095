#include <gtest/gtest.h>

#include <random>

#include "fiffdepth/denoiser.hpp"
#include "oracles.hpp"

using namespace fiffdepth;

namespace {

/// Parameter count recomputed from the block structure by hand.
std::size_t count_by_hand(const ArchDescriptor& a) {
  const std::size_t e = a.embed_dim;
  auto block = [&](std::size_t cin, std::size_t cout) {
    return cout * cin * 9 + cout       // conv1
           + 2 * cout                  // norm1
           + cout * e + cout           // time projection
           + cout * cout * 9 + cout    // conv2
           + 2 * cout;                 // norm2
  };
  std::size_t n = e * e + e;
  const auto& w = a.widths;
  for (std::size_t i = 0; i < w.size(); ++i) n += block(i == 0 ? a.in_channels : w[i - 1], w[i]);
  for (std::size_t i = 0; i + 1 < w.size(); ++i) n += block(w[i + 1] + w[i], w[i]);
  n += static_cast<std::size_t>(a.in_channels) * w[0] * 9 + a.in_channels;
  return n;
}

}  // namespace

TEST(Denoiser, DefaultArchParameterCount) {
  const ArchDescriptor a;  // 3 levels, 32/64/128, 64x64 identity-codec input
  ASSERT_EQ(a.widths, (std::vector<int>{32, 64, 128}));
  EXPECT_EQ(parameter_count(a), count_by_hand(a));
  // 64*64+64 + enc(3->32, 32->64, 64->128) + dec(192->64, 96->32) + out(32->3)
  EXPECT_EQ(parameter_count(a), 498627u);
  const auto p = init_params<float>(a, 1);
  EXPECT_EQ(p.size(), parameter_count(a));
  for (const auto& s : p.specs) {
    std::size_t n = 1;
    for (int d : s.shape) n *= d;
    EXPECT_EQ(n, s.size) << s.name;
  }
}

TEST(Denoiser, InitIsDeterministic) {
  const auto a = oracle::tiny_arch();
  EXPECT_EQ(init_params<float>(a, 42), init_params<float>(a, 42));
  EXPECT_FALSE(init_params<float>(a, 42) == init_params<float>(a, 43));
}

TEST(Denoiser, ZeroOutputLayerGivesZero) {
  const auto a = oracle::tiny_arch();
  const auto p = init_params<double>(a, 7);
  std::mt19937_64 rng(1);
  const auto z = oracle::random_tensor<double>(rng, 3, 8, 8);
  for (int t : {-1, 0, 1, 999, 1000}) {
    const auto out = forward(p, z, t);
    EXPECT_TRUE(out.same_shape(z));
    for (double v : out.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Denoiser, ForwardIsDeterministic) {
  const auto p = init_params<float>(oracle::tiny_arch(), 3, false);
  std::mt19937_64 rng(2);
  const auto z = oracle::random_tensor<float>(rng, 3, 8, 8);
  EXPECT_EQ(forward(p, z, 0), forward(p, z, 0));
  EXPECT_EQ(forward(p, z, -1), forward(p, z, -1));
}

TEST(Denoiser, AcceptsOtherSpatialSizes) {
  const auto p = init_params<float>(oracle::tiny_arch(), 3, false);
  const Latent<float> z(3, 16, 24, 0.5f);
  EXPECT_EQ(forward(p, z, 5).width(), 24);
}

TEST(Denoiser, Errors) {
  const auto p = init_params<double>(oracle::tiny_arch(), 3);
  EXPECT_THROW(forward(p, Latent<double>(3, 8, 8), -2), RangeError);
  EXPECT_THROW(forward(p, Latent<double>(3, 8, 8), 1001), RangeError);
  EXPECT_THROW(forward(p, Latent<double>(2, 8, 8), 0), ShapeError);
  EXPECT_THROW(forward(p, Latent<double>(3, 6, 8), 0), ShapeError);
  ArchDescriptor bad = oracle::tiny_arch();
  bad.widths = {4};
  EXPECT_THROW(init_params<double>(bad, 0), ConfigError);
  bad.widths = {4, 0};
  EXPECT_THROW(init_params<double>(bad, 0), ConfigError);
}

TEST(Denoiser, TimestepEmbeddingsDistinct) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> pick(1, 1000);
  std::vector<int> ts = {-1, 0};
  for (int k = 0; k < 5; ++k) ts.push_back(pick(rng));
  for (std::size_t i = 0; i < ts.size(); ++i)
    for (std::size_t j = i + 1; j < ts.size(); ++j) {
      if (ts[i] == ts[j]) continue;
      EXPECT_NE(timestep_embedding<double>(ts[i], 64), timestep_embedding<double>(ts[j], 64));
    }
}

TEST(Denoiser, InputAndParameterGradientsMatchFiniteDifferences) {
  const auto a = oracle::tiny_arch();
  auto p = init_params<double>(a, 5, false);
  std::mt19937_64 rng(6);
  auto z = oracle::random_tensor<double>(rng, 3, 8, 8);
  const auto w = oracle::random_tensor<double>(rng, 3, 8, 8);
  for (int t : {-1, 0, 250}) {
    // L = sum(w * net(z, t))
    auto loss = [&] {
      const auto out = forward(p, z, t);
      double s = 0;
      for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
      return s;
    };
    ForwardTrace<double> tr;
    forward(p, z, t, &tr);
    std::vector<double> g;
    const auto gz = backward(p, tr, w, g);
    auto r = oracle::check_gradient(p.values, g, loss, 60, 100 + t);
    EXPECT_EQ(r.failures, 0) << "t=" << t << " worst " << r.worst_rel;
    std::vector<double> zv(z.values().begin(), z.values().end());
    std::vector<double> gzv(gz.values().begin(), gz.values().end());
    auto zloss = [&] {
      std::copy(zv.begin(), zv.end(), z.data());
      return loss();
    };
    r = oracle::check_gradient(zv, gzv, zloss, 40, 200 + t);
    std::copy(zv.begin(), zv.end(), z.data());
    EXPECT_EQ(r.failures, 0) << "input grad t=" << t << " worst " << r.worst_rel;
  }
}
