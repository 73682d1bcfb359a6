#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

#include "ctatlas/volume.hpp"

namespace ctatlas {

using Mat4 = Eigen::Matrix4d;

// 12-DOF map from moving world (mm) to fixed world (mm). Images are warped by
// pull-back: the output at fixed point x samples the input at inverse()(x).
struct AffineTransform {
  Mat4 matrix = Mat4::Identity();

  static AffineTransform identity() { return {}; }

  static AffineTransform translation(const Vec3& t) {
    AffineTransform a;
    a.matrix.topRightCorner<3, 1>() = t;
    return a;
  }

  // Parameters: translation (mm), rotation about x, y, z (radians), scale,
  // shear (xy, xz, yz). Linear part is R * Shear * Scale applied about center.
  struct Parameters {
    Vec3 translation = Vec3::Zero();
    Vec3 rotation = Vec3::Zero();
    Vec3 scale = Vec3::Ones();
    Vec3 shear = Vec3::Zero();
  };

  static AffineTransform from_parameters(const Parameters& p, const Vec3& center = Vec3::Zero()) {
    const Mat3 r = (Eigen::AngleAxisd(p.rotation[2], Vec3::UnitZ()) *
                    Eigen::AngleAxisd(p.rotation[1], Vec3::UnitY()) *
                    Eigen::AngleAxisd(p.rotation[0], Vec3::UnitX()))
                       .toRotationMatrix();
    Mat3 sh = Mat3::Identity();
    sh(0, 1) = p.shear[0];
    sh(0, 2) = p.shear[1];
    sh(1, 2) = p.shear[2];
    const Mat3 lin = r * sh * p.scale.asDiagonal();
    AffineTransform a;
    a.matrix.topLeftCorner<3, 3>() = lin;
    a.matrix.topRightCorner<3, 1>() = center + p.translation - lin * center;
    return a;
  }

  Mat3 linear() const { return matrix.topLeftCorner<3, 3>(); }
  Vec3 offset() const { return matrix.topRightCorner<3, 1>(); }
  double determinant() const { return linear().determinant(); }

  Vec3 apply(const Vec3& p) const { return linear() * p + offset(); }

  bool invertible() const { return std::abs(determinant()) > 1e-12; }

  // |det| within [0.2, 5] and a proper homogeneous bottom row.
  bool plausible() const {
    const double d = std::abs(determinant());
    return matrix.row(3).isApprox(Eigen::RowVector4d(0, 0, 0, 1)) && d >= 0.2 && d <= 5.0;
  }

  AffineTransform inverse() const {
    if (!invertible()) throw Error(ErrorCode::SingularTransform, "affine matrix is singular");
    return {matrix.inverse()};
  }

  // (this * other)(p) = this(other(p))
  AffineTransform operator*(const AffineTransform& other) const { return {matrix * other.matrix}; }
};

inline double relative_frobenius_error(const AffineTransform& estimate, const AffineTransform& truth) {
  return (estimate.matrix - truth.matrix).norm() / truth.matrix.norm();
}

// 16 numbers, row-major, one row per line.
inline void write_affine(const AffineTransform& a, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IO, "cannot write " + path.string());
  os << std::setprecision(17);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) os << (c ? " " : "") << a.matrix(r, c);
    os << "\n";
  }
  if (!os) throw Error(ErrorCode::IO, "write failed: " + path.string());
}

inline AffineTransform read_affine(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::IO, "cannot read " + path.string());
  AffineTransform a;
  for (int i = 0; i < 16; ++i) {
    double v;
    if (!(is >> v)) throw Error(ErrorCode::Format, "affine file needs 16 numbers: " + path.string());
    a.matrix(i / 4, i % 4) = v;
  }
  if ((a.matrix.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-9)
    throw Error(ErrorCode::Format, "affine bottom row must be 0 0 0 1");
  return a;
}

// Generalised least-squares 12-DOF fit of target ~ A * source: minimises
// sum (A s_i - t_i)^T W_i (A s_i - t_i) with positive semidefinite W_i.
inline AffineTransform fit_affine(const std::vector<Vec3>& source, const std::vector<Vec3>& target,
                                  const std::vector<Mat3>& info) {
  const std::size_t n = source.size();
  double wsum = 0.0;
  Vec3 centroid = Vec3::Zero();
  std::size_t support = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = info[i].trace();
    if (!(w > 0.0)) continue;
    wsum += w;
    centroid += w * source[i];
    ++support;
  }
  if (support < 4) throw Error(ErrorCode::DegenerateFit, "fewer than 4 weighted correspondences");
  centroid /= wsum;

  Mat3 cov = Mat3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    const double w = info[i].trace();
    if (!(w > 0.0)) continue;
    const Vec3 d = source[i] - centroid;
    cov += w * d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov / wsum);
  const double lo = eig.eigenvalues().minCoeff(), hi = eig.eigenvalues().maxCoeff();
  if (!(hi > 0.0) || lo < 1e-6 * hi) throw Error(ErrorCode::DegenerateFit, "correspondences are coplanar");

  // Unknowns: rows of the linear part and the offset, about the centroid.
  using Mat12 = Eigen::Matrix<double, 12, 12>;
  using Vec12 = Eigen::Matrix<double, 12, 1>;
  Mat12 lhs = Mat12::Zero();
  Vec12 rhs = Vec12::Zero();
  Eigen::Matrix<double, 3, 12> m;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(info[i].trace() > 0.0)) continue;
    const Vec3 d = source[i] - centroid;
    m.setZero();
    for (int r = 0; r < 3; ++r) {
      m.block<1, 3>(r, 3 * r) = d.transpose();
      m(r, 9 + r) = 1.0;
    }
    lhs += m.transpose() * info[i] * m;
    rhs += m.transpose() * info[i] * target[i];
  }
  Eigen::SelfAdjointEigenSolver<Mat12> sys(lhs);
  if (sys.eigenvalues().minCoeff() <= 1e-10 * sys.eigenvalues().maxCoeff())
    throw Error(ErrorCode::DegenerateFit, "correspondences do not constrain all 12 parameters");
  const Vec12 sol = lhs.ldlt().solve(rhs);
  AffineTransform a;
  for (int r = 0; r < 3; ++r) a.matrix.block<1, 3>(r, 0) = sol.segment<3>(3 * r).transpose();
  a.matrix.topRightCorner<3, 1>() = sol.tail<3>() - a.linear() * centroid;
  return a;
}

// Scalar-weighted form.
inline AffineTransform fit_affine(const std::vector<Vec3>& source, const std::vector<Vec3>& target,
                                  const std::vector<double>& weights) {
  std::vector<Mat3> info(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) info[i] = std::max(weights[i], 0.0) * Mat3::Identity();
  return fit_affine(source, target, info);
}

// Iteratively reweighted fit: Tukey biweights from residual norms, scale
// 1.4826 * median residual floored at min_scale.
inline AffineTransform fit_affine_robust(const std::vector<Vec3>& source, const std::vector<Vec3>& target,
                                         const std::vector<Mat3>& info, double min_scale, int rounds = 3) {
  AffineTransform fit = fit_affine(source, target, info);
  std::vector<double> residual(source.size());
  for (int r = 0; r < rounds; ++r) {
    std::vector<double> active;
    for (std::size_t i = 0; i < source.size(); ++i) {
      residual[i] = (fit.apply(source[i]) - target[i]).norm();
      if (info[i].trace() > 0.0) active.push_back(residual[i]);
    }
    std::nth_element(active.begin(), active.begin() + active.size() / 2, active.end());
    const double cutoff = 3.0 * std::max(1.4826 * active[active.size() / 2], min_scale);
    std::vector<Mat3> w(info);
    for (std::size_t i = 0; i < source.size(); ++i) {
      const double u = residual[i] / cutoff;
      w[i] *= u < 1.0 ? (1.0 - u * u) * (1.0 - u * u) : 0.0;
    }
    fit = fit_affine(source, target, w);
  }
  return fit;
}

inline AffineTransform fit_affine_robust(const std::vector<Vec3>& source, const std::vector<Vec3>& target,
                                         const std::vector<double>& weights, double min_scale, int rounds = 3) {
  std::vector<Mat3> info(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) info[i] = std::max(weights[i], 0.0) * Mat3::Identity();
  return fit_affine_robust(source, target, info, min_scale, rounds);
}

}  // namespace ctatlas
