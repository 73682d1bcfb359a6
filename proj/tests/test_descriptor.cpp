#include <gtest/gtest.h>

#include <random>
#include <set>

#include "ctatlas/descriptor.hpp"

using namespace ctatlas;

namespace {

ImageVolume random_image(Index3 dims, std::uint32_t seed, float scale = 200.0f) {
  ImageVolume v = make_image(centered_grid(dims, 1.0));
  std::mt19937 rng(seed);
  std::normal_distribution<float> n(0.0f, scale);
  for (auto& x : v.data) x = n(rng);
  return v;
}

// Direct evaluation of the descriptor at one voxel, written independently of
// the separable implementation.
std::array<double, kSscChannels> reference_ssc(const ImageVolume& v, int i, int j, int k, const DescriptorParams& p) {
  const auto nb = p.neighborhood();
  std::array<double, kSscChannels> ssd{};
  int c = 0;
  for (int a = 0; a < 6; ++a)
    for (int b = a + 1; b < 6; ++b) {
      if (a / 2 == b / 2) continue;
      double s = 0.0;
      for (int dz = -p.patch_radius; dz <= p.patch_radius; ++dz)
        for (int dy = -p.patch_radius; dy <= p.patch_radius; ++dy)
          for (int dx = -p.patch_radius; dx <= p.patch_radius; ++dx) {
            const double x = v.clamped(i + nb[a][0] + dx, j + nb[a][1] + dy, k + nb[a][2] + dz);
            const double y = v.clamped(i + nb[b][0] + dx, j + nb[b][1] + dy, k + nb[b][2] + dz);
            s += (x - y) * (x - y);
          }
      ssd[c++] = s;
    }
  double q2 = 0.0;
  for (double s : ssd) q2 += s;
  q2 = std::max(q2 / kSscChannels, kNoiseFloor);
  for (double& s : ssd) s = std::exp(-s / q2);
  return ssd;
}

}  // namespace

TEST(Params, NeighbourhoodAndPairs) {
  const DescriptorParams p;
  EXPECT_EQ(p.neighborhood().size(), 6u);
  const auto pairs = DescriptorParams::pair_set();
  EXPECT_EQ(pairs.size(), 12u);
  std::set<std::pair<int, int>> seen;
  for (const auto& pr : pairs) {
    EXPECT_NE(pr[0] / 2, pr[1] / 2);
    seen.insert({pr[0], pr[1]});
  }
  EXPECT_EQ(seen.size(), 12u);
  DescriptorParams bad;
  bad.patch_radius = 0;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Ssc, MatchesDirectEvaluation) {
  const ImageVolume v = random_image({11, 10, 9}, 1);
  DescriptorParams p;
  const auto d = compute_ssc(v, p);
  for (int k = 0; k < 9; ++k)
    for (int j = 0; j < 10; ++j)
      for (int i = 0; i < 11; ++i) {
        const auto ref = reference_ssc(v, i, j, k, p);
        const auto got = d.at(i, j, k);
        for (int c = 0; c < kSscChannels; ++c) ASSERT_NEAR(got[c], ref[c], 1e-5) << i << " " << j << " " << k;
      }
}

TEST(Ssc, ConstantVolumeGivesOnes) {
  const auto d = compute_ssc(make_image(centered_grid({8, 8, 8}, 1.0), 55.0f), DescriptorParams{});
  for (float x : d.channels) EXPECT_EQ(x, 1.0f);
}

TEST(Ssc, TooSmallVolume) {
  try {
    compute_ssc(make_image(centered_grid({6, 20, 20}, 1.0)), DescriptorParams{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InsufficientExtent);
  }
}

TEST(Ssc, ChannelsInUnitInterval) {
  const auto d = compute_ssc(random_image({10, 10, 10}, 2, 1000.0f), DescriptorParams{});
  for (float x : d.channels) {
    EXPECT_GT(x, 0.0f);
    EXPECT_LE(x, 1.0f);
  }
}

TEST(Ssc, IntegerShiftCommutesInInterior) {
  const ImageVolume v = random_image({20, 20, 20}, 3);
  ImageVolume s = v;
  const Index3 t{2, -3, 1};
  for (int k = 0; k < 20; ++k)
    for (int j = 0; j < 20; ++j)
      for (int i = 0; i < 20; ++i) s.at(i, j, k) = v.clamped(i - t[0], j - t[1], k - t[2]);
  const auto dv = compute_ssc(v, DescriptorParams{});
  const auto ds = compute_ssc(s, DescriptorParams{});
  for (int k = 7; k < 13; ++k)
    for (int j = 7; j < 13; ++j)
      for (int i = 7; i < 13; ++i)
        for (int c = 0; c < kSscChannels; ++c)
          EXPECT_NEAR(ds.at(i + t[0], j + t[1], k + t[2])[c], dv.at(i, j, k)[c], 1e-5);
}

TEST(Ssc, AdditiveOffsetInvariance) {
  const ImageVolume v = random_image({10, 9, 8}, 4);
  ImageVolume w = v;
  for (auto& x : w.data) x += 100.0f;
  const auto a = compute_ssc(v, DescriptorParams{}), b = compute_ssc(w, DescriptorParams{});
  for (std::size_t i = 0; i < a.channels.size(); ++i) EXPECT_NEAR(a.channels[i], b.channels[i], 1e-6);
}

TEST(Ssc, MultiplicativeInvariance) {
  const ImageVolume v = random_image({10, 9, 8}, 5);
  for (float k : {0.5f, 3.0f}) {
    ImageVolume w = v;
    for (auto& x : w.data) x *= k;
    const auto a = compute_ssc(v, DescriptorParams{}), b = compute_ssc(w, DescriptorParams{});
    for (std::size_t i = 0; i < a.channels.size(); ++i) EXPECT_NEAR(a.channels[i], b.channels[i], 1e-5);
  }
}

TEST(Ssc, GlobalNoiseRuleStaysBounded) {
  DescriptorParams p;
  p.noise_rule = NoiseRule::GlobalMean;
  const auto d = compute_ssc(random_image({9, 9, 9}, 6), p);
  for (float x : d.channels) {
    EXPECT_GT(x, 0.0f);
    EXPECT_LE(x, 1.0f);
  }
}

TEST(Distance, HandValues) {
  const std::array<float, 12> ones = [] { std::array<float, 12> a; a.fill(1.0f); return a; }();
  const std::array<float, 12> halves = [] { std::array<float, 12> a; a.fill(0.5f); return a; }();
  EXPECT_EQ(descriptor_distance(ones, ones), 0.0);
  EXPECT_DOUBLE_EQ(descriptor_distance(ones, halves), 6.0);
  const std::array<float, 5> short_vec{};
  EXPECT_THROW(descriptor_distance(short_vec, ones), Error);
}

TEST(Distance, MetricAxiomsOnRandomTriples) {
  std::mt19937 rng(7);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int t = 0; t < 500; ++t) {
    std::array<float, 12> a, b, c;
    for (int i = 0; i < 12; ++i) a[i] = u(rng), b[i] = u(rng), c[i] = u(rng);
    const double ab = descriptor_distance(a, b), ba = descriptor_distance(b, a);
    EXPECT_GE(ab, 0.0);
    EXPECT_EQ(ab, ba);
    EXPECT_LE(ab, descriptor_distance(a, c) + descriptor_distance(c, b) + 1e-9);
    EXPECT_NEAR(descriptor_l1(a.data(), b.data()), ab, 1e-5);
  }
}
