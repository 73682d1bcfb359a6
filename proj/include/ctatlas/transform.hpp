#pragma once

#include <cmath>
#include <vector>

#include "ctatlas/affine.hpp"
#include "ctatlas/field.hpp"
#include "ctatlas/volume.hpp"

namespace ctatlas {

// Pull-back affine warp: output at world x samples the input at A^-1(x).
template <typename T>
Volume<T> apply_affine(const Volume<T>& vol, const AffineTransform& a, const GridGeometry& target, Interp interp,
                       Boundary boundary = Boundary::Pad) {
  const AffineTransform inv = a.inverse();
  const Mat4 m = vol.geometry.voxel_to_world_matrix().inverse() * inv.matrix * target.voxel_to_world_matrix();
  const Mat3 lin = m.topLeftCorner<3, 3>();
  const Vec3 off = m.topRightCorner<3, 1>();
  return resample_with(vol, target, interp, boundary,
                       [&](int i, int j, int k) { return Vec3(lin * Vec3(i, j, k) + off); });
}

// Samples vol at i + u(i), where positions are voxel coordinates of the field
// grid. Inputs on another grid are reached through world coordinates.
template <typename T>
Volume<T> warp(const Volume<T>& vol, const DisplacementField& field, Interp interp,
               Boundary boundary = Boundary::Pad) {
  const GridGeometry& fg = field.geometry;
  if (vol.geometry.same_as(fg, 1e-9)) {
    return resample_with(vol, fg, interp, boundary, [&](int i, int j, int k) {
      return Vec3(Vec3(i, j, k) + field.at(i, j, k));
    });
  }
  const Mat4 m = vol.geometry.voxel_to_world_matrix().inverse() * fg.voxel_to_world_matrix();
  const Mat3 lin = m.topLeftCorner<3, 3>();
  const Vec3 off = m.topRightCorner<3, 1>();
  return resample_with(vol, fg, interp, boundary, [&](int i, int j, int k) {
    return Vec3(lin * (Vec3(i, j, k) + field.at(i, j, k)) + off);
  });
}

template <typename T>
Volume<T> apply_field(const Volume<T>& vol, const DisplacementField& field, Interp interp,
                      Boundary boundary = Boundary::Pad) {
  if (!vol.geometry.same_as(field.geometry))
    throw Error(ErrorCode::Shape, "field geometry differs from the volume geometry");
  return warp(vol, field, interp, boundary);
}

// Dense displacement equivalent of A on `target`: u(i) = grid(A^-1(world(i))) - i.
inline DisplacementField affine_to_field(const AffineTransform& a, const GridGeometry& target) {
  const Mat4 m = target.voxel_to_world_matrix().inverse() * a.inverse().matrix * target.voxel_to_world_matrix();
  const Mat3 lin = m.topLeftCorner<3, 3>();
  const Vec3 off = m.topRightCorner<3, 1>();
  DisplacementField out(target);
  for (std::size_t n = 0; n < out.size(); ++n) {
    const auto idx = target.index_of(n);
    const Vec3 p(idx[0], idx[1], idx[2]);
    out.set(n, lin * p + off - p);
  }
  return out;
}

// Single-resampling form of "affine, then field": psi(i) = grid(A^-1(world(i + u(i)))) - i,
// to be applied with warp() directly on the original moving volume.
inline DisplacementField compose_affine_field(const AffineTransform& a, const DisplacementField& field,
                                              const GridGeometry& target) {
  if (!field.geometry.same_as(target)) throw Error(ErrorCode::Shape, "field must live on the target grid");
  const Mat4 m = target.voxel_to_world_matrix().inverse() * a.inverse().matrix * target.voxel_to_world_matrix();
  const Mat3 lin = m.topLeftCorner<3, 3>();
  const Vec3 off = m.topRightCorner<3, 1>();
  DisplacementField out(target);
  parallel::for_range(out.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t n = b; n < e; ++n) {
      const auto idx = target.index_of(n);
      const Vec3 p(idx[0], idx[1], idx[2]);
      out.set(n, lin * (p + field.at(n)) + off - p);
    }
  });
  return out;
}

struct InverseOptions {
  int max_iterations = 30;
  double tolerance = 0.01;     // mean update, voxels
  int divergence_window = 5;   // consecutive residual increases
};

struct FieldInverse {
  DisplacementField field;
  double residual_mean = 0.0;  // |f(x + g(x)) + g(x)|
  double residual_max = 0.0;
  int iterations = 0;
};

namespace detail {
inline std::pair<double, double> inverse_residual(const DisplacementField& f, const DisplacementField& g) {
  std::vector<double> r(g.size());
  parallel::for_range(g.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t n = b; n < e; ++n) {
      const auto idx = g.geometry.index_of(n);
      const Vec3 gx = g.at(n);
      r[n] = (f.sample(Vec3(idx[0], idx[1], idx[2]) + gx) + gx).norm();
    }
  });
  double s = 0.0, m = 0.0;
  for (double v : r) {
    s += v;
    m = std::max(m, v);
  }
  return {r.empty() ? 0.0 : s / r.size(), m};
}
}  // namespace detail

// Fixed-point inversion g <- -f(x + g(x)).
inline FieldInverse invert_field(const DisplacementField& f, const InverseOptions& opt = {}) {
  FieldInverse out;
  out.field = DisplacementField(f.geometry);
  DisplacementField next(f.geometry);
  const std::size_t n = f.size();
  std::vector<double> update(n);
  double previous = std::numeric_limits<double>::infinity();
  int rising = 0;
  for (int it = 0; it < opt.max_iterations; ++it) {
    parallel::for_range(n, [&](std::size_t b, std::size_t e) {
      for (std::size_t v = b; v < e; ++v) {
        const auto idx = f.geometry.index_of(v);
        const Vec3 g = out.field.at(v);
        const Vec3 gn = -f.sample(Vec3(idx[0], idx[1], idx[2]) + g);
        next.set(v, gn);
        update[v] = (gn - g).norm();
      }
    });
    std::swap(out.field.vectors, next.vectors);
    out.iterations = it + 1;
    double mean_update = 0.0;
    for (double u : update) mean_update += u;
    mean_update = n ? mean_update / n : 0.0;

    const auto [res_mean, res_max] = detail::inverse_residual(f, out.field);
    out.residual_mean = res_mean;
    out.residual_max = res_max;
    rising = res_mean > previous ? rising + 1 : 0;
    previous = res_mean;
    if (rising >= opt.divergence_window)
      throw Error(ErrorCode::NonInvertibleField,
                  "fixed-point inversion diverged (residual mean " + std::to_string(res_mean) + ", max " +
                      std::to_string(res_max) + ")");
    if (mean_update < opt.tolerance) break;
  }
  return out;
}

// Maps atlas labels into a subject grid through the inverse of
// "affine A, then field u" (nearest neighbour; 0 outside the atlas).
inline LabelVolume transfer_labels_inverse(const LabelVolume& atlas_labels, const AffineTransform& a,
                                           const FieldInverse& inverse, const GridGeometry& subject) {
  const DisplacementField& g = inverse.field;
  if (!atlas_labels.geometry.same_as(g.geometry))
    throw Error(ErrorCode::Shape, "atlas labels must share the field grid");
  const GridGeometry& ag = atlas_labels.geometry;
  const Mat4 m = ag.voxel_to_world_matrix().inverse() * a.matrix * subject.voxel_to_world_matrix();
  const Mat3 lin = m.topLeftCorner<3, 3>();
  const Vec3 off = m.topRightCorner<3, 1>();
  return resample_with(atlas_labels, subject, Interp::Nearest, Boundary::Pad, [&](int i, int j, int k) {
    const Vec3 p = lin * Vec3(i, j, k) + off;  // subject voxel -> atlas voxel through A
    if (!inside_extent(ag, p)) return p;
    return Vec3(p + g.sample(p));
  });
}

inline LabelVolume transfer_labels_inverse(const LabelVolume& atlas_labels, const AffineTransform& a,
                                           const DisplacementField& field, const GridGeometry& subject,
                                           const InverseOptions& opt = {}) {
  return transfer_labels_inverse(atlas_labels, a, invert_field(field, opt), subject);
}

}  // namespace ctatlas
