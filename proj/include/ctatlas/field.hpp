#pragma once

#include <cmath>
#include <filesystem>
#include <vector>

#include "ctatlas/nifti.hpp"
#include "ctatlas/volume.hpp"

namespace ctatlas {

// Displacements in voxel units of `geometry`, three interleaved floats per
// node. A dense field maps fixed voxel i to the moving sample position
// i + u(i).
struct DisplacementField {
  enum class Resolution { Control, Dense };

  GridGeometry geometry;
  std::vector<float> vectors;
  Resolution resolution = Resolution::Dense;

  DisplacementField() = default;
  explicit DisplacementField(const GridGeometry& g, Resolution res = Resolution::Dense)
      : geometry(g), vectors(g.voxel_count() * 3, 0.0f), resolution(res) {}

  std::size_t size() const { return geometry.voxel_count(); }

  Vec3 at(std::size_t node) const {
    return Vec3(vectors[3 * node], vectors[3 * node + 1], vectors[3 * node + 2]);
  }
  Vec3 at(int i, int j, int k) const { return at(geometry.offset(i, j, k)); }

  void set(std::size_t node, const Vec3& v) {
    vectors[3 * node] = static_cast<float>(v[0]);
    vectors[3 * node + 1] = static_cast<float>(v[1]);
    vectors[3 * node + 2] = static_cast<float>(v[2]);
  }

  // Trilinear interpolation with edge clamping.
  Vec3 sample(const Vec3& p) const {
    const auto& d = geometry.dims;
    double c[3];
    int lo[3], hi[3];
    double f[3];
    for (int a = 0; a < 3; ++a) {
      c[a] = std::clamp(p[a], 0.0, static_cast<double>(d[a] - 1));
      lo[a] = static_cast<int>(std::floor(c[a]));
      hi[a] = std::min(lo[a] + 1, d[a] - 1);
      f[a] = c[a] - lo[a];
    }
    Vec3 out = Vec3::Zero();
    for (int corner = 0; corner < 8; ++corner) {
      const int i = (corner & 1) ? hi[0] : lo[0];
      const int j = (corner & 2) ? hi[1] : lo[1];
      const int k = (corner & 4) ? hi[2] : lo[2];
      const double w = ((corner & 1) ? f[0] : 1 - f[0]) * ((corner & 2) ? f[1] : 1 - f[1]) *
                       ((corner & 4) ? f[2] : 1 - f[2]);
      if (w != 0.0) out += w * at(i, j, k);
    }
    return out;
  }

  double max_abs_component() const {
    double m = 0.0;
    for (float v : vectors) m = std::max(m, static_cast<double>(std::abs(v)));
    return m;
  }

  double max_norm() const {
    double m = 0.0;
    for (std::size_t i = 0; i < size(); ++i) m = std::max(m, at(i).norm());
    return m;
  }

  double mean_norm() const {
    double s = 0.0;
    for (std::size_t i = 0; i < size(); ++i) s += at(i).norm();
    return size() ? s / static_cast<double>(size()) : 0.0;
  }
};

// Stored as a 5D NIfTI vector image (dim[5] = 3, intent VECTOR), float32.
inline void write_field(const DisplacementField& f, const std::filesystem::path& path) {
  const std::size_t n = f.size();
  std::vector<float> planar(3 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) planar[c * n + i] = f.vectors[3 * i + c];
  nifti::write_payload<float>(path, f.geometry, planar, nifti::kFloat32, 3);
}

inline DisplacementField read_field(const std::filesystem::path& path) {
  auto p = nifti::read_payload(path, true);
  if (p.components != 3) throw Error(ErrorCode::UnsupportedShape, "displacement file needs 3 components");
  DisplacementField f(p.geometry);
  const std::size_t n = f.size();
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) {
      const double v = p.values[c * n + i];
      if (!std::isfinite(v)) throw Error(ErrorCode::Format, "non-finite displacement");
      f.vectors[3 * i + c] = static_cast<float>(v);
    }
  return f;
}

}  // namespace ctatlas
