#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "ctatlas/error.hpp"
#include "ctatlas/parallel.hpp"

namespace ctatlas {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Index3 = std::array<int, 3>;

inline constexpr float kAirHU = -1024.0f;

// Voxel grid placed in world space (mm). Axis 0 varies fastest in memory.
struct GridGeometry {
  Index3 dims{1, 1, 1};
  Vec3 spacing = Vec3::Ones();
  Vec3 origin = Vec3::Zero();
  Mat3 direction = Mat3::Identity();

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }

  std::size_t offset(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(j) +
                                                static_cast<std::size_t>(dims[1]) * k);
  }

  Index3 index_of(std::size_t off) const {
    const int i = static_cast<int>(off % dims[0]);
    const std::size_t rest = off / dims[0];
    return {i, static_cast<int>(rest % dims[1]), static_cast<int>(rest / dims[1])};
  }

  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
  }

  // world = origin + direction * (spacing .* index)
  Vec3 voxel_to_world(const Vec3& index) const {
    return origin + direction * spacing.cwiseProduct(index);
  }

  Vec3 world_to_voxel(const Vec3& world) const {
    return (direction.transpose() * (world - origin)).cwiseQuotient(spacing);
  }

  // Homogeneous voxel -> world matrix.
  Eigen::Matrix4d voxel_to_world_matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = direction * spacing.asDiagonal();
    m.topRightCorner<3, 1>() = origin;
    return m;
  }

  Vec3 center_world() const {
    return voxel_to_world(Vec3((dims[0] - 1) * 0.5, (dims[1] - 1) * 0.5, (dims[2] - 1) * 0.5));
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw Error(ErrorCode::Validation, "grid dims must be >= 1");
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
        throw Error(ErrorCode::Validation, "grid spacing must be > 0");
    }
    const Mat3 gram = direction.transpose() * direction;
    if ((gram - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6)
      throw Error(ErrorCode::Validation, "direction matrix is not orthonormal");
  }

  bool same_as(const GridGeometry& o, double tol = 1e-6) const {
    return dims == o.dims && (spacing - o.spacing).cwiseAbs().maxCoeff() <= tol &&
           (origin - o.origin).cwiseAbs().maxCoeff() <= tol &&
           (direction - o.direction).cwiseAbs().maxCoeff() <= tol;
  }
};

// Isotropic grid centred on the world origin with identity direction.
inline GridGeometry centered_grid(Index3 dims, double spacing) {
  GridGeometry g;
  g.dims = dims;
  g.spacing = Vec3::Constant(spacing);
  for (int a = 0; a < 3; ++a) g.origin[a] = -0.5 * (dims[a] - 1) * spacing;
  return g;
}

template <typename T>
struct Volume {
  using value_type = T;

  GridGeometry geometry;
  std::vector<T> data;
  T padding_value{};
  std::map<std::uint16_t, std::string> label_names;  // label volumes only

  Volume() = default;
  Volume(const GridGeometry& g, T fill, T padding = T{})
      : geometry(g), data(g.voxel_count(), fill), padding_value(padding) {}

  const Index3& dims() const { return geometry.dims; }
  std::size_t size() const { return data.size(); }

  T& at(int i, int j, int k) { return data[geometry.offset(i, j, k)]; }
  const T& at(int i, int j, int k) const { return data[geometry.offset(i, j, k)]; }

  const T& clamped(int i, int j, int k) const {
    i = std::clamp(i, 0, geometry.dims[0] - 1);
    j = std::clamp(j, 0, geometry.dims[1] - 1);
    k = std::clamp(k, 0, geometry.dims[2] - 1);
    return at(i, j, k);
  }

  void validate() const {
    geometry.validate();
    if (data.size() != geometry.voxel_count())
      throw Error(ErrorCode::Shape, "data length does not match dims");
    if constexpr (std::is_floating_point_v<T>) {
      for (const T& v : data)
        if (!std::isfinite(v)) throw Error(ErrorCode::Validation, "non-finite voxel value");
    }
  }
};

using ImageVolume = Volume<float>;
using LabelVolume = Volume<std::uint16_t>;

inline ImageVolume make_image(const GridGeometry& g, float fill = 0.0f) {
  return ImageVolume(g, fill, kAirHU);
}

inline LabelVolume make_labels(const GridGeometry& g, std::uint16_t fill = 0) {
  return LabelVolume(g, fill, 0);
}

enum class Interp { Trilinear, Nearest };
enum class Boundary { Pad, Clamp };

// Half-voxel tolerance: the physical extent of a grid covers [-0.5, n - 0.5].
inline bool inside_extent(const GridGeometry& g, const Vec3& p) {
  for (int a = 0; a < 3; ++a)
    if (!(p[a] >= -0.5 - 1e-9 && p[a] <= g.dims[a] - 0.5 + 1e-9)) return false;
  return true;
}

// Trilinear interpolation at continuous voxel coordinates with edge clamping.
template <typename T>
double trilinear_clamped(const Volume<T>& v, double x, double y, double z) {
  const auto& d = v.geometry.dims;
  x = std::clamp(x, 0.0, static_cast<double>(d[0] - 1));
  y = std::clamp(y, 0.0, static_cast<double>(d[1] - 1));
  z = std::clamp(z, 0.0, static_cast<double>(d[2] - 1));
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int z0 = static_cast<int>(std::floor(z));
  const double fx = x - x0, fy = y - y0, fz = z - z0;
  const int x1 = std::min(x0 + 1, d[0] - 1);
  const int y1 = std::min(y0 + 1, d[1] - 1);
  const int z1 = std::min(z0 + 1, d[2] - 1);
  auto val = [&](int i, int j, int k) { return static_cast<double>(v.at(i, j, k)); };
  const double c00 = val(x0, y0, z0) * (1 - fx) + val(x1, y0, z0) * fx;
  const double c10 = val(x0, y1, z0) * (1 - fx) + val(x1, y1, z0) * fx;
  const double c01 = val(x0, y0, z1) * (1 - fx) + val(x1, y0, z1) * fx;
  const double c11 = val(x0, y1, z1) * (1 - fx) + val(x1, y1, z1) * fx;
  const double c0 = c00 * (1 - fy) + c10 * fy;
  const double c1 = c01 * (1 - fy) + c11 * fy;
  return c0 * (1 - fz) + c1 * fz;
}

template <typename T>
T nearest_clamped(const Volume<T>& v, const Vec3& p) {
  return v.clamped(static_cast<int>(std::lround(p[0])), static_cast<int>(std::lround(p[1])),
                   static_cast<int>(std::lround(p[2])));
}

// Samples at continuous voxel coordinates p. Label types always use nearest.
template <typename T>
T sample(const Volume<T>& v, const Vec3& p, Interp interp, Boundary boundary = Boundary::Pad) {
  if (boundary == Boundary::Pad && !inside_extent(v.geometry, p)) return v.padding_value;
  if constexpr (std::is_integral_v<T>) {
    return nearest_clamped(v, p);
  } else {
    if (interp == Interp::Nearest) return nearest_clamped(v, p);
    return static_cast<T>(trilinear_clamped(v, p[0], p[1], p[2]));
  }
}

// Pull-back resampling: out(x) = in(point_map(x)) where point_map takes an
// output voxel index to a continuous input voxel index.
template <typename T, typename PointMap>
Volume<T> resample_with(const Volume<T>& in, const GridGeometry& target, Interp interp,
                        Boundary boundary, PointMap&& point_map) {
  Volume<T> out(target, T{}, in.padding_value);
  out.label_names = in.label_names;
  const auto& d = target.dims;
  parallel::for_each_index(static_cast<std::size_t>(d[2]), [&](std::size_t kk) {
    const int k = static_cast<int>(kk);
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i)
        out.at(i, j, k) = sample(in, point_map(i, j, k), interp, boundary);
  });
  return out;
}

template <typename T>
Volume<T> resample(const Volume<T>& in, const GridGeometry& target, Interp interp) {
  target.validate();
  const Eigen::Matrix4d m =
      in.geometry.voxel_to_world_matrix().inverse() * target.voxel_to_world_matrix();
  const Mat3 lin = m.topLeftCorner<3, 3>();
  const Vec3 off = m.topRightCorner<3, 1>();
  return resample_with(in, target, interp, Boundary::Pad,
                       [&](int i, int j, int k) { return Vec3(lin * Vec3(i, j, k) + off); });
}

// Permutes and flips axes so that the direction becomes identity (RAS+ in the
// world frame). Voxel world positions are preserved.
// Separable Gaussian filter; sigma in voxels, edge-clamped, truncated at 3 sigma.
inline ImageVolume gaussian_smooth(const ImageVolume& in, double sigma) {
  if (!(sigma > 0.0)) return in;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int t = -radius; t <= radius; ++t) total += kernel[t + radius] = std::exp(-0.5 * t * t / (sigma * sigma));
  for (double& k : kernel) k /= total;
  const Index3& d = in.geometry.dims;
  ImageVolume out = in;
  ImageVolume tmp = in;
  for (int axis = 0; axis < 3; ++axis) {
    std::swap(tmp.data, out.data);
    parallel::for_range(static_cast<std::size_t>(d[2]), [&](std::size_t kb, std::size_t ke) {
      for (int k = static_cast<int>(kb); k < static_cast<int>(ke); ++k)
        for (int j = 0; j < d[1]; ++j)
          for (int i = 0; i < d[0]; ++i) {
            double acc = 0.0;
            for (int t = -radius; t <= radius; ++t) {
              int p[3] = {i, j, k};
              p[axis] = std::clamp(p[axis] + t, 0, d[axis] - 1);
              acc += kernel[t + radius] * tmp.at(p[0], p[1], p[2]);
            }
            out.at(i, j, k) = static_cast<float>(acc);
          }
    });
  }
  return out;
}

template <typename T>
Volume<T> reorient_canonical(const Volume<T>& in) {
  const GridGeometry& g = in.geometry;
  constexpr double tol = 0.2;
  std::array<int, 3> world_axis{};  // voxel axis j -> world axis
  std::array<int, 3> sign{};
  std::array<bool, 3> used{false, false, false};
  for (int j = 0; j < 3; ++j) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (std::abs(g.direction(i, j)) > std::abs(g.direction(best, j))) best = i;
    for (int i = 0; i < 3; ++i) {
      const double target = (i == best) ? 1.0 : 0.0;
      if (std::abs(std::abs(g.direction(i, j)) - target) > tol)
        throw Error(ErrorCode::UnsupportedOrientation, "oblique direction matrix");
    }
    if (used[best]) throw Error(ErrorCode::UnsupportedOrientation, "degenerate direction matrix");
    used[best] = true;
    world_axis[j] = best;
    sign[j] = g.direction(best, j) > 0 ? 1 : -1;
  }

  GridGeometry out_geom;
  Vec3 corner = Vec3::Zero();  // old index of new voxel (0,0,0)
  for (int j = 0; j < 3; ++j) {
    out_geom.dims[world_axis[j]] = g.dims[j];
    out_geom.spacing[world_axis[j]] = g.spacing[j];
    corner[j] = sign[j] > 0 ? 0 : g.dims[j] - 1;
  }
  out_geom.direction = Mat3::Identity();
  out_geom.origin = g.voxel_to_world(corner);

  Volume<T> out(out_geom, T{}, in.padding_value);
  out.label_names = in.label_names;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const int old_idx[3] = {i, j, k};
        int n[3];
        for (int a = 0; a < 3; ++a)
          n[world_axis[a]] = sign[a] > 0 ? old_idx[a] : g.dims[a] - 1 - old_idx[a];
        out.at(n[0], n[1], n[2]) = in.at(i, j, k);
      }
  return out;
}

}  // namespace ctatlas
