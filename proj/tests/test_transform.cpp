#include <gtest/gtest.h>

#include <random>
#include <set>

#include "ctatlas/phantom.hpp"
#include "ctatlas/transform.hpp"

using namespace ctatlas;

namespace {

ImageVolume random_image(const GridGeometry& g, std::uint32_t seed) {
  ImageVolume v = make_image(g);
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-500.0f, 500.0f);
  for (auto& x : v.data) x = u(rng);
  return v;
}

LabelVolume random_labels(const GridGeometry& g, std::vector<std::uint16_t> set, std::uint32_t seed) {
  LabelVolume l = make_labels(g);
  std::mt19937 rng(seed);
  for (auto& x : l.data) x = set[std::uniform_int_distribution<std::size_t>(0, set.size() - 1)(rng)];
  return l;
}

template <typename T>
std::set<T> value_set(const Volume<T>& v) {
  return {v.data.begin(), v.data.end()};
}

}  // namespace

TEST(ApplyAffine, IdentityOnSameGrid) {
  const ImageVolume v = random_image(centered_grid({9, 8, 7}, 1.3), 1);
  const ImageVolume r = apply_affine(v, AffineTransform::identity(), v.geometry, Interp::Trilinear);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(r.data[i], v.data[i], 1e-6);
}

TEST(ApplyAffine, IntegerTranslation) {
  const GridGeometry g = centered_grid({12, 10, 8}, 1.5);
  const ImageVolume v = random_image(g, 2);
  const ImageVolume r = apply_affine(v, AffineTransform::translation(Vec3(2 * 1.5, 0, 0)), g, Interp::Trilinear);
  for (int k = 0; k < 8; ++k)
    for (int j = 0; j < 10; ++j) {
      for (int i = 2; i < 12; ++i) EXPECT_NEAR(r.at(i, j, k), v.at(i - 2, j, k), 1e-4);
      EXPECT_EQ(r.at(0, j, k), kAirHU);
    }
}

TEST(ApplyAffine, LabelsGainNoNewValues) {
  std::mt19937 rng(3);
  const GridGeometry g = centered_grid({14, 14, 14}, 1.0);
  const LabelVolume l = random_labels(g, {0, 2, 7, 13}, 3);
  for (int t = 0; t < 5; ++t) {
    AffineTransform::Parameters p;
    p.rotation = Vec3::Random() * 0.3;
    p.translation = Vec3::Random() * 3.0;
    p.scale = Vec3::Ones() + Vec3::Random() * 0.1;
    const auto out = apply_affine(l, AffineTransform::from_parameters(p), g, Interp::Trilinear);
    for (auto x : value_set(out)) EXPECT_TRUE(value_set(l).count(x));
  }
}

TEST(ApplyAffine, SingularRejected) {
  const ImageVolume v = random_image(centered_grid({4, 4, 4}, 1.0), 4);
  AffineTransform a;
  a.matrix(1, 1) = 0.0;
  try {
    apply_affine(v, a, v.geometry, Interp::Trilinear);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SingularTransform);
  }
}

TEST(ApplyField, ZeroUniformAndOutside) {
  const GridGeometry g = centered_grid({10, 6, 5}, 1.0);
  const ImageVolume v = random_image(g, 5);
  DisplacementField f(g);
  EXPECT_EQ(apply_field(v, f, Interp::Trilinear).data, v.data);
  for (std::size_t n = 0; n < f.size(); ++n) f.set(n, Vec3(3, 0, 0));
  const ImageVolume s = apply_field(v, f, Interp::Trilinear);
  for (int k = 0; k < 5; ++k)
    for (int j = 0; j < 6; ++j)
      for (int i = 0; i < 7; ++i) EXPECT_FLOAT_EQ(s.at(i, j, k), v.at(i + 3, j, k));
  for (std::size_t n = 0; n < f.size(); ++n) f.set(n, Vec3(100, 0, 0));
  for (float x : apply_field(v, f, Interp::Trilinear).data) EXPECT_EQ(x, v.padding_value);
  DisplacementField other(centered_grid({10, 6, 4}, 1.0));
  try {
    apply_field(v, other, Interp::Trilinear);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Shape);
  }
}

TEST(Compose, IdentityAffineAndZeroField) {
  const GridGeometry g = centered_grid({8, 7, 6}, 1.2);
  DisplacementField f(g);
  std::mt19937 rng(6);
  for (auto& x : f.vectors) x = std::uniform_real_distribution<float>(-2, 2)(rng);
  const DisplacementField c = compose_affine_field(AffineTransform::identity(), f, g);
  for (std::size_t i = 0; i < f.vectors.size(); ++i) EXPECT_NEAR(c.vectors[i], f.vectors[i], 1e-5);

  AffineTransform::Parameters p;
  p.rotation = Vec3(0.05, -0.02, 0.08);
  p.translation = Vec3(1, -2, 0.5);
  const AffineTransform a = AffineTransform::from_parameters(p);
  const DisplacementField z = compose_affine_field(a, DisplacementField(g), g);
  const DisplacementField ref = affine_to_field(a, g);
  const AffineTransform inv = a.inverse();
  for (std::size_t n = 0; n < g.voxel_count(); ++n) {
    EXPECT_LT((z.at(n) - ref.at(n)).norm(), 1e-5);
    const auto idx = g.index_of(n);
    const Vec3 x = g.voxel_to_world(Vec3(idx[0], idx[1], idx[2]));
    const Vec3 expect = g.world_to_voxel(inv.apply(x)) - Vec3(idx[0], idx[1], idx[2]);
    EXPECT_LT((z.at(n) - expect).norm(), 1e-5);
  }
}

TEST(Compose, MatchesSequentialApplication) {
  const GridGeometry g = centered_grid({40, 40, 40}, 1.0);
  auto smooth = [](const Vec3& x) {
    return 300.0 + 200.0 * std::sin(x[0] / 12.0) * std::cos(x[1] / 14.0) + 100.0 * std::sin(x[2] / 16.0 + 0.3);
  };
  ImageVolume v = make_image(g);
  for (std::size_t n = 0; n < v.size(); ++n) {
    const auto idx = g.index_of(n);
    v.data[n] = static_cast<float>(smooth(g.voxel_to_world(Vec3(idx[0], idx[1], idx[2]))));
  }
  AffineTransform::Parameters p;
  p.rotation = Vec3(0.03, -0.04, 0.05);
  p.translation = Vec3(1.5, -1.0, 0.7);
  p.scale = Vec3(1.03, 0.98, 1.01);
  const AffineTransform a = AffineTransform::from_parameters(p);
  phantom::SinusoidalWarp w;
  w.amplitude = 1.5;
  w.wavelength = 40;
  const DisplacementField f = w.field(g);
  const ImageVolume sequential =
      warp(apply_affine(v, a, g, Interp::Trilinear, Boundary::Clamp), f, Interp::Trilinear, Boundary::Clamp);
  const ImageVolume composed = warp(v, compose_affine_field(a, f, g), Interp::Trilinear, Boundary::Clamp);

  // Interior voxels, where neither route touches the clamped border.
  double mutual = 0.0, err_seq = 0.0, err_comp = 0.0, norm = 0.0;
  const AffineTransform inv = a.inverse();
  for (int k = 6; k < 34; ++k)
    for (int j = 6; j < 34; ++j)
      for (int i = 6; i < 34; ++i) {
        const double exact = smooth(inv.apply(g.voxel_to_world(Vec3(i, j, k) + f.at(i, j, k))));
        mutual += std::pow(composed.at(i, j, k) - sequential.at(i, j, k), 2);
        err_seq += std::pow(sequential.at(i, j, k) - exact, 2);
        err_comp += std::pow(composed.at(i, j, k) - exact, 2);
        norm += exact * exact;
      }
  EXPECT_LT(std::sqrt(mutual / norm), 1e-3);
  // One interpolation instead of two: never further from the analytic warp.
  EXPECT_LE(err_comp, err_seq);
}

TEST(Invert, ZeroAndUniform) {
  const GridGeometry g = centered_grid({10, 10, 10}, 1.0);
  const FieldInverse z = invert_field(DisplacementField(g));
  for (float x : z.field.vectors) EXPECT_EQ(x, 0.0f);
  DisplacementField t(g);
  for (std::size_t n = 0; n < t.size(); ++n) t.set(n, Vec3(1.5, -2.0, 0.25));
  const FieldInverse r = invert_field(t);
  for (std::size_t n = 0; n < t.size(); ++n) EXPECT_LT((r.field.at(n) - Vec3(-1.5, 2.0, -0.25)).norm(), 1e-6);
  EXPECT_LT(r.residual_max, 1e-6);
}

TEST(Invert, SmoothSinusoid) {
  const GridGeometry g = centered_grid({48, 48, 48}, 1.0);
  phantom::SinusoidalWarp w;
  w.amplitude = 4.0;
  w.wavelength = 64.0;
  const FieldInverse r = invert_field(w.field(g));
  EXPECT_LE(r.residual_mean, 0.5);
  EXPECT_LE(r.residual_max, 1.5);
  // Independent check of the reported residual.
  const DisplacementField f = w.field(g);
  double worst = 0.0;
  for (std::size_t n = 0; n < g.voxel_count(); n += 7) {
    const auto idx = g.index_of(n);
    const Vec3 x(idx[0], idx[1], idx[2]);
    const Vec3 gx = r.field.at(n);
    const Vec3 y = x + gx;
    const Vec3 c(std::clamp(y[0], 0.0, 47.0), std::clamp(y[1], 0.0, 47.0), std::clamp(y[2], 0.0, 47.0));
    worst = std::max(worst, (f.sample(c) + gx).norm());
  }
  EXPECT_LE(worst, r.residual_max + 1e-6);
}

TEST(Invert, ExpandingFieldDiverges) {
  const GridGeometry g = centered_grid({16, 16, 16}, 1.0);
  DisplacementField f(g);
  for (std::size_t n = 0; n < f.size(); ++n) f.set(n, Vec3(2.0 * (g.index_of(n)[0] - 7.5), 0, 0));
  InverseOptions opt;
  opt.max_iterations = 60;
  opt.tolerance = 0.0;
  try {
    invert_field(f, opt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonInvertibleField);
  }
}

TEST(TransferLabels, IdentityGeometryChangeOnly) {
  const GridGeometry ag = centered_grid({12, 12, 12}, 1.0);
  const LabelVolume l = random_labels(ag, {0, 11}, 7);
  const LabelVolume same = transfer_labels_inverse(l, AffineTransform::identity(), DisplacementField(ag), ag);
  EXPECT_EQ(same.data, l.data);
  const GridGeometry sg = centered_grid({6, 6, 6}, 2.0);
  const LabelVolume down = transfer_labels_inverse(l, AffineTransform::identity(), DisplacementField(ag), sg);
  const LabelVolume ref = resample(l, sg, Interp::Nearest);
  EXPECT_EQ(down.data, ref.data);
  for (auto x : value_set(down)) EXPECT_TRUE(x == 0 || x == 11);
}

TEST(TransferLabels, TranslationShiftsLabels) {
  const GridGeometry ag = centered_grid({12, 12, 12}, 1.0);
  const LabelVolume l = random_labels(ag, {0, 3, 5}, 8);
  // The affine maps subject world points to atlas world points.
  const AffineTransform a = AffineTransform::translation(Vec3(0, 2, -1));
  const LabelVolume out = transfer_labels_inverse(l, a, DisplacementField(ag), ag);
  for (int k = 1; k < 12; ++k)
    for (int j = 0; j < 10; ++j)
      for (int i = 0; i < 12; ++i) EXPECT_EQ(out.at(i, j, k), l.at(i, j + 2, k - 1));
  EXPECT_EQ(out.at(0, 11, 5), 0);
}
