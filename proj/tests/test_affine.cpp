#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "ctatlas/affine.hpp"

using namespace ctatlas;

namespace {

AffineTransform random_affine(std::mt19937& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  AffineTransform::Parameters p;
  p.translation = Vec3(u(rng), u(rng), u(rng)) * 5.0;
  p.rotation = Vec3(u(rng), u(rng), u(rng)) * 0.17;
  p.scale = Vec3::Ones() + Vec3(u(rng), u(rng), u(rng)) * 0.1;
  p.shear = Vec3(u(rng), u(rng), u(rng)) * 0.05;
  return AffineTransform::from_parameters(p, Vec3(u(rng), u(rng), u(rng)) * 10.0);
}

std::vector<Vec3> random_points(std::mt19937& rng, int n) {
  std::uniform_real_distribution<double> u(-20, 20);
  std::vector<Vec3> pts;
  for (int i = 0; i < n; ++i) pts.emplace_back(u(rng), u(rng), u(rng));
  return pts;
}

}  // namespace

TEST(Affine, ParametersAboutCentre) {
  AffineTransform::Parameters p;
  p.rotation[2] = std::acos(-1.0) / 2.0;
  const Vec3 c(3, 4, 5);
  const AffineTransform a = AffineTransform::from_parameters(p, c);
  EXPECT_LT((a.apply(c) - c).norm(), 1e-12);
  EXPECT_LT((a.apply(c + Vec3::UnitX()) - (c + Vec3::UnitY())).norm(), 1e-12);
  p = {};
  p.scale = Vec3(2, 3, 4);
  EXPECT_NEAR(AffineTransform::from_parameters(p).determinant(), 24.0, 1e-12);
}

TEST(Affine, InverseAndComposition) {
  std::mt19937 rng(1);
  for (int t = 0; t < 20; ++t) {
    const AffineTransform a = random_affine(rng), b = random_affine(rng);
    const Vec3 p = random_points(rng, 1)[0];
    EXPECT_LT((a.inverse().apply(a.apply(p)) - p).norm(), 1e-9);
    EXPECT_LT(((a * b).apply(p) - a.apply(b.apply(p))).norm(), 1e-9);
    EXPECT_TRUE(a.plausible());
  }
  AffineTransform s;
  s.matrix(2, 2) = 0.0;
  try {
    s.inverse();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SingularTransform);
  }
  EXPECT_FALSE(s.plausible());
}

TEST(Affine, TextRoundTrip) {
  std::mt19937 rng(2);
  const AffineTransform a = random_affine(rng);
  const auto path = std::filesystem::temp_directory_path() / "ctatlas_affine_rt.txt";
  write_affine(a, path);
  EXPECT_EQ(read_affine(path).matrix, a.matrix);
  EXPECT_THROW(read_affine("/nonexistent/affine.txt"), Error);
}

TEST(Affine, RelativeFrobenius) {
  AffineTransform a;
  AffineTransform b = a;
  b.matrix(0, 0) = 1.1;
  EXPECT_NEAR(relative_frobenius_error(b, a), 0.1 / 2.0, 1e-12);
  EXPECT_EQ(relative_frobenius_error(a, a), 0.0);
}

TEST(Fit, ExactOnNoiselessCorrespondences) {
  std::mt19937 rng(3);
  for (int t = 0; t < 20; ++t) {
    const AffineTransform truth = random_affine(rng);
    const auto src = random_points(rng, 12);
    std::vector<Vec3> dst;
    for (const auto& s : src) dst.push_back(truth.apply(s));
    const AffineTransform fit = fit_affine(src, dst, std::vector<double>(src.size(), 1.0));
    EXPECT_LT((fit.matrix - truth.matrix).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Fit, AnisotropicInformationUsesConstrainedAxes) {
  // Each point only constrains one axis; together they still pin down the map.
  std::mt19937 rng(4);
  const AffineTransform truth = random_affine(rng);
  const auto src = random_points(rng, 60);
  std::vector<Vec3> dst;
  std::vector<Mat3> info;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const int axis = static_cast<int>(i % 3);
    Vec3 t = truth.apply(src[i]);
    for (int a = 0; a < 3; ++a)
      if (a != axis) t[a] += 50.0;
    dst.push_back(t);
    Mat3 w = Mat3::Zero();
    w(axis, axis) = 1.0;
    info.push_back(w);
  }
  EXPECT_LT((fit_affine(src, dst, info).matrix - truth.matrix).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Fit, DegenerateCorrespondences) {
  std::vector<Vec3> few{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)};
  try {
    fit_affine(few, few, std::vector<double>(3, 1.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateFit);
  }
  std::vector<Vec3> planar;
  for (int i = 0; i < 10; ++i) planar.emplace_back(i, i * i % 7, 0.0);
  try {
    fit_affine(planar, planar, std::vector<double>(planar.size(), 1.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateFit);
  }
}

TEST(Fit, RobustRejectsOutliers) {
  std::mt19937 rng(5);
  const AffineTransform truth = random_affine(rng);
  const auto src = random_points(rng, 80);
  std::vector<Vec3> dst;
  std::normal_distribution<double> noise(0.0, 0.05);
  for (std::size_t i = 0; i < src.size(); ++i) {
    Vec3 t = truth.apply(src[i]) + Vec3(noise(rng), noise(rng), noise(rng));
    if (i % 5 == 0) t += Vec3(15, -12, 9);
    dst.push_back(t);
  }
  const std::vector<double> w(src.size(), 1.0);
  const double plain = relative_frobenius_error(fit_affine(src, dst, w), truth);
  const double robust = relative_frobenius_error(fit_affine_robust(src, dst, w, 0.1), truth);
  EXPECT_LT(robust, 0.01);
  EXPECT_LT(robust, plain);
}
