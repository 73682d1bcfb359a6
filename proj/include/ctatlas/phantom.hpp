#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "ctatlas/affine.hpp"
#include "ctatlas/field.hpp"
#include "ctatlas/volume.hpp"

namespace ctatlas::phantom {

struct Ellipsoid {
  Vec3 center = Vec3::Zero();  // mm
  Vec3 radii = Vec3::Ones();   // mm
  Mat3 rotation = Mat3::Identity();
  float hu = 0.0f;
  std::uint16_t label = 0;

  // Normalised radius: < 1 inside.
  double radius_at(const Vec3& p) const {
    return (rotation.transpose() * (p - center)).cwiseQuotient(radii).norm();
  }
};

// Analytic torso: a textured soft-tissue body in air holding ellipsoidal
// organs with smooth (about one voxel wide) boundaries.
struct Phantom {
  Ellipsoid body;
  std::vector<Ellipsoid> organs;
  float background = kAirHU;
  double edge_width = 0.6;     // mm
  double texture_amplitude = 30.0;
  double texture_cell = 4.0;   // mm, finest octave
  std::uint32_t seed = 7;

  double intensity(const Vec3& p) const {
    const double in_body = smooth_inside(body, p);
    double v = body.hu;
    for (const auto& o : organs) {
      const double s = smooth_inside(o, p);
      v = v * (1.0 - s) + o.hu * s;
    }
    v += texture_amplitude * (texture(p, texture_cell) + texture(p, 2.0 * texture_cell) + texture(p, 4.0 * texture_cell));
    return background * (1.0 - in_body) + v * in_body;
  }

  std::uint16_t label(const Vec3& p) const {
    std::uint16_t l = 0;
    for (const auto& o : organs)
      if (o.radius_at(p) < 1.0) l = o.label;
    return l;
  }

  bool in_body(const Vec3& p) const { return body.radius_at(p) < 1.0; }

 private:
  double smooth_inside(const Ellipsoid& e, const Vec3& p) const {
    const double t = (1.0 - e.radius_at(p)) * e.radii.minCoeff() / edge_width;
    if (t > 12.0) return 1.0;
    if (t < -12.0) return 0.0;
    return 1.0 / (1.0 + std::exp(-t));
  }

  double lattice(long i, long j, long k) const {
    std::uint64_t h = static_cast<std::uint64_t>(i) * 73856093ULL ^ static_cast<std::uint64_t>(j) * 19349663ULL ^
                      static_cast<std::uint64_t>(k) * 83492791ULL ^ (static_cast<std::uint64_t>(seed) << 32);
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdULL;
    h ^= h >> 33;
    h *= 0xc4ceb9fe1a85ec53ULL;
    h ^= h >> 33;
    return static_cast<double>(h & 0xFFFFFF) / static_cast<double>(0xFFFFFF) * 2.0 - 1.0;
  }

  // Smoothly interpolated value noise in [-1, 1].
  double texture(const Vec3& p, double cell) const {
    const Vec3 q = p / cell + Vec3::Constant(cell);
    const long x0 = static_cast<long>(std::floor(q[0]));
    const long y0 = static_cast<long>(std::floor(q[1]));
    const long z0 = static_cast<long>(std::floor(q[2]));
    auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
    const double fx = smooth(q[0] - x0), fy = smooth(q[1] - y0), fz = smooth(q[2] - z0);
    double v = 0.0;
    for (int c = 0; c < 8; ++c) {
      const double w = ((c & 1) ? fx : 1 - fx) * ((c & 2) ? fy : 1 - fy) * ((c & 4) ? fz : 1 - fz);
      v += w * lattice(x0 + (c & 1), y0 + ((c >> 1) & 1), z0 + ((c >> 2) & 1));
    }
    return v;
  }
};

inline Mat3 rotation_z(double deg) {
  return Eigen::AngleAxisd(deg * std::numbers::pi / 180.0, Vec3::UnitZ()).toRotationMatrix();
}

// Body plus three organs of distinct HU, sized for a 64 mm cube.
inline Phantom abdominal(double scale = 1.0, std::uint32_t seed = 7) {
  Phantom p;
  p.seed = seed;
  p.body = {Vec3::Zero(), Vec3(27, 23, 28) * scale, Mat3::Identity(), 40.0f, 0};
  p.organs.push_back({Vec3(-8, 3, 3) * scale, Vec3(12, 8, 10) * scale, rotation_z(20), 160.0f, 1});
  p.organs.push_back({Vec3(11, -5, -7) * scale, Vec3(7, 9, 8) * scale, rotation_z(-15), -90.0f, 2});
  p.organs.push_back({Vec3(7, 9, 12) * scale, Vec3(6, 6, 9) * scale, rotation_z(40), 320.0f, 3});
  return p;
}

struct Rendered {
  ImageVolume image;
  LabelVolume labels;
};

// Renders out(x) = phantom(point_map(world(x))).
template <typename PointMap>
Rendered render_mapped(const Phantom& p, const GridGeometry& g, PointMap&& point_map) {
  Rendered r{make_image(g), make_labels(g)};
  parallel::for_range(g.voxel_count(), [&](std::size_t b, std::size_t e) {
    for (std::size_t n = b; n < e; ++n) {
      const auto idx = g.index_of(n);
      const Vec3 q = point_map(Vec3(idx[0], idx[1], idx[2]));
      r.image.data[n] = static_cast<float>(p.intensity(q));
      r.labels.data[n] = p.label(q);
    }
  });
  return r;
}

inline Rendered render(const Phantom& p, const GridGeometry& g) {
  return render_mapped(p, g, [&](const Vec3& i) { return g.voxel_to_world(i); });
}

// Moving image for which the true pull-back affine is `truth`:
// moving(y) = phantom(truth(y)), hence apply_affine(moving, truth) == phantom.
inline Rendered render_affine(const Phantom& p, const GridGeometry& g, const AffineTransform& truth) {
  return render_mapped(p, g, [&](const Vec3& i) { return truth.apply(g.voxel_to_world(i)); });
}

// Smooth displacement (voxels): component a varies sinusoidally along axis
// (a + 1) mod 3. Lipschitz constant = amplitude * 2 pi / wavelength.
struct SinusoidalWarp {
  double amplitude = 6.0;
  double wavelength = 64.0;
  Vec3 phase = Vec3(0.3, 1.1, 2.0);

  Vec3 at(const Vec3& x) const {
    const double w = 2.0 * std::numbers::pi / wavelength;
    return amplitude * Vec3(std::sin(w * x[1] + phase[0]), std::sin(w * x[2] + phase[1]), std::sin(w * x[0] + phase[2]));
  }

  DisplacementField field(const GridGeometry& g) const {
    DisplacementField f(g);
    for (std::size_t n = 0; n < f.size(); ++n) {
      const auto idx = g.index_of(n);
      f.set(n, at(Vec3(idx[0], idx[1], idx[2])));
    }
    return f;
  }

  // Solves x + u(x) = y for x by fixed-point iteration.
  Vec3 inverse_point(const Vec3& y) const {
    Vec3 x = y;
    for (int it = 0; it < 60; ++it) x = y - at(x);
    return x;
  }
};

// Moving image whose true dense pull-back field on g is warp.field(g):
// moving(i + u(i)) = phantom(world(i)).
inline Rendered render_warped(const Phantom& p, const GridGeometry& g, const SinusoidalWarp& warp) {
  return render_mapped(p, g, [&](const Vec3& i) { return g.voxel_to_world(warp.inverse_point(i)); });
}

}  // namespace ctatlas::phantom
