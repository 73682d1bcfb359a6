#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "ctatlas/affine.hpp"
#include "ctatlas/descriptor.hpp"
#include "ctatlas/field.hpp"
#include "ctatlas/mst.hpp"
#include "ctatlas/transform.hpp"
#include "ctatlas/volume.hpp"

namespace ctatlas {

// Coarse-to-fine schedule. Defaults interpolate the 8..4 voxel grid spacing,
// 6..2 search steps and 5..1 voxel step sizes over five levels.
struct RegistrationLevels {
  std::vector<int> grid_spacing{8, 7, 6, 5, 4};
  std::vector<int> search_steps{6, 5, 4, 3, 2};
  std::vector<int> step_size{5, 4, 3, 2, 1};
  double alpha = 1.0;

  int n_levels() const { return static_cast<int>(grid_spacing.size()); }

  void validate() const {
    const std::size_t n = grid_spacing.size();
    if (n == 0) throw Error(ErrorCode::Config, "at least one level is required");
    if (search_steps.size() != n || step_size.size() != n)
      throw Error(ErrorCode::Config, "per-level sequences must have equal length");
    for (std::size_t l = 0; l < n; ++l) {
      if (grid_spacing[l] < 1 || search_steps[l] < 1 || step_size[l] < 1)
        throw Error(ErrorCode::Config, "level entries must be >= 1");
      if (l > 0 && (grid_spacing[l] > grid_spacing[l - 1] || search_steps[l] > search_steps[l - 1] ||
                    step_size[l] > step_size[l - 1]))
        throw Error(ErrorCode::Config, "level schedule must be non-increasing");
    }
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw Error(ErrorCode::Config, "alpha must be >= 0");
  }

  // Largest per-axis displacement the schedule can reach.
  int reachable_bound() const {
    int s = 0;
    for (std::size_t l = 0; l < grid_spacing.size(); ++l) s += search_steps[l] * step_size[l];
    return s;
  }
};

struct MatchingOptions {
  int samples_per_node = 64;
  // Extra passes of the finest affine level (sub-voxel refinement).
  int affine_refinements = 12;
  // Fixed patches whose descriptor structure (12 - sum of channels, averaged)
  // is below this are not used as affine correspondences.
  double min_structure = 0.05;
  // Same for patches whose fixed intensity range (HU) is below this. In the
  // deformable stage such nodes get zero data cost and a harmonic fill.
  double min_intensity_range = 10.0;
  // Deformable node patch side in units of the grid spacing.
  double patch_scale = 2.0;
  // Affine matching at step size s uses images smoothed with sigma
  // match_sigma * (s - 1) voxels.
  double match_sigma = 0.5;
  // Per-pass bound on the singular values of the affine update.
  double affine_max_stretch = 1.1;
  // Gaussian sigmas, in grid spacings, for each level's increment and for the
  // composed field.
  double increment_sigma = 0.5;
  double field_sigma = 1.0;
};

struct LevelTrace {
  int level = 0;             // -1 for affine refinement passes
  double objective = 0.0;    // mean descriptor distance after the level
  bool accepted = true;
};

struct AffineRegistration {
  AffineTransform transform;
  double initial_objective = 0.0;
  std::vector<LevelTrace> trace;
};

struct DeformableRegistration {
  DisplacementField field;
  double initial_objective = 0.0;
  std::vector<LevelTrace> trace;
};

namespace detail {

// Nodes sit at the centres of g-cubes tiling the fixed grid.
struct ControlGrid {
  Index3 dims{};
  Index3 nodes{};
  int spacing = 1;

  ControlGrid(const Index3& image_dims, int g) : dims(image_dims), spacing(g) {
    for (int a = 0; a < 3; ++a) nodes[a] = std::max(1, (image_dims[a] + g - 1) / g);
  }

  std::size_t count() const { return static_cast<std::size_t>(nodes[0]) * nodes[1] * nodes[2]; }
  std::size_t offset(int i, int j, int k) const {
    return static_cast<std::size_t>(i) + static_cast<std::size_t>(nodes[0]) * (j + static_cast<std::size_t>(nodes[1]) * k);
  }
  Index3 index_of(std::size_t n) const {
    return {static_cast<int>(n % nodes[0]), static_cast<int>((n / nodes[0]) % nodes[1]),
            static_cast<int>(n / (static_cast<std::size_t>(nodes[0]) * nodes[1]))};
  }
  double center(int node_index, int axis) const {
    return std::min(node_index * spacing + 0.5 * (spacing - 1), static_cast<double>(dims[axis] - 1));
  }
  Vec3 center(const Index3& n) const { return Vec3(center(n[0], 0), center(n[1], 1), center(n[2], 2)); }

  // Deterministic sample voxels inside the node patch, a cube of side
  // round(scale * spacing) centred on the node and clipped to the volume: all
  // voxels when it holds at most max_samples, otherwise an R3
  // low-discrepancy subset.
  std::vector<Index3> samples(const Index3& n, int max_samples, double scale = 1.0) const {
    const int side = std::max(1, static_cast<int>(std::lround(scale * spacing)));
    Index3 lo, size;
    for (int a = 0; a < 3; ++a) {
      const int first = static_cast<int>(std::lround(center(n[a], a) - 0.5 * (side - 1)));
      lo[a] = std::max(0, first);
      size[a] = std::max(1, std::min(first + side, dims[a]) - lo[a]);
    }
    std::vector<Index3> out;
    const long total = static_cast<long>(size[0]) * size[1] * size[2];
    if (total <= max_samples) {
      for (int k = 0; k < size[2]; ++k)
        for (int j = 0; j < size[1]; ++j)
          for (int i = 0; i < size[0]; ++i) out.push_back({lo[0] + i, lo[1] + j, lo[2] + k});
      return out;
    }
    constexpr double phi = 1.2207440846057594;  // plastic number (R3 sequence)
    const double step[3] = {1.0 / phi, 1.0 / (phi * phi), 1.0 / (phi * phi * phi)};
    for (int s = 0; s < max_samples; ++s) {
      Index3 p;
      for (int a = 0; a < 3; ++a) {
        const double u = std::fmod(0.5 + (s + 1) * step[a], 1.0);
        p[a] = lo[a] + std::min(size[a] - 1, static_cast<int>(u * size[a]));
      }
      out.push_back(p);
    }
    return out;
  }
};

// Mean over all voxels, or over voxels with mask != 0 when a mask is given.
inline double mean_descriptor_distance(const SSCDescriptorVolume& a, const SSCDescriptorVolume& b,
                                       const std::vector<char>* mask = nullptr) {
  std::vector<double> slice(a.geometry.dims[2], 0.0);
  std::vector<std::size_t> count(a.geometry.dims[2], 0);
  const std::size_t slab = static_cast<std::size_t>(a.geometry.dims[0]) * a.geometry.dims[1];
  parallel::for_each_index(slice.size(), [&](std::size_t k) {
    double s = 0.0;
    std::size_t c = 0;
    for (std::size_t v = k * slab; v < (k + 1) * slab; ++v) {
      if (mask && !(*mask)[v]) continue;
      s += descriptor_l1(a.channels.data() + v * kSscChannels, b.channels.data() + v * kSscChannels);
      ++c;
    }
    slice[k] = s;
    count[k] = c;
  });
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < slice.size(); ++k) {
    total += slice[k];
    n += count[k];
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

// Fixed voxels whose descriptor support (a box of half-width `reach`, clamped
// to the fixed grid) pulls back through `moving_to_fixed` inside the moving
// volume.
inline std::vector<char> coverage(const GridGeometry& fixed, const GridGeometry& moving,
                                  const AffineTransform& moving_to_fixed, int reach = 0) {
  const Mat4 m = moving.voxel_to_world_matrix().inverse() * moving_to_fixed.inverse().matrix *
                 fixed.voxel_to_world_matrix();
  const Mat3 lin = m.topLeftCorner<3, 3>();
  const Vec3 off = m.topRightCorner<3, 1>();
  std::vector<char> out(fixed.voxel_count());
  parallel::for_range(out.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t n = b; n < e; ++n) {
      const auto idx = fixed.index_of(n);
      bool in = true;
      for (int c = 0; c < 8 && in; ++c) {
        Vec3 p;
        for (int a = 0; a < 3; ++a) p[a] = std::clamp(idx[a] + (((c >> a) & 1) ? reach : -reach), 0, fixed.dims[a] - 1);
        in = inside_extent(moving, Vec3(lin * p + off));
      }
      out[n] = in ? 1 : 0;
    }
  });
  return out;
}

struct NodeCosts {
  std::vector<double> costs;  // node * L + label
  std::vector<std::vector<Index3>> samples;
};

// Mean patch distance per node and label. With `valid`, labels moving any
// sample onto a voxel with valid == 0 cost infinity.
inline NodeCosts node_costs(const ControlGrid& grid, const LabelSpace& labels, const SSCDescriptorVolume& fixed,
                            const SSCDescriptorVolume& moving, int max_samples, double patch_scale = 1.0,
                            const std::vector<char>* valid = nullptr) {
  const std::size_t L = labels.size();
  NodeCosts out;
  out.costs.assign(grid.count() * L, 0.0);
  out.samples.resize(grid.count());
  std::vector<std::array<int, 3>> shifts(L);
  for (std::size_t l = 0; l < L; ++l)
    for (int a = 0; a < 3; ++a) shifts[l][a] = static_cast<int>(std::lround(labels.displacements[l][a]));
  const Index3& d = fixed.geometry.dims;

  parallel::for_each_index(grid.count(), [&](std::size_t n) {
    out.samples[n] = grid.samples(grid.index_of(n), max_samples, patch_scale);
    const auto& pts = out.samples[n];
    const double inv = 1.0 / static_cast<double>(pts.size());
    double* c = out.costs.data() + n * L;
    for (std::size_t l = 0; l < L; ++l) {
      float s = 0.0f;
      bool ok = true;
      for (const Index3& p : pts) {
        const int x = std::clamp(p[0] + shifts[l][0], 0, d[0] - 1);
        const int y = std::clamp(p[1] + shifts[l][1], 0, d[1] - 1);
        const int z = std::clamp(p[2] + shifts[l][2], 0, d[2] - 1);
        const std::size_t off = moving.geometry.offset(x, y, z);
        if (valid && !(*valid)[off]) {
          ok = false;
          break;
        }
        s += descriptor_l1(fixed.channels.data() + fixed.geometry.offset(p[0], p[1], p[2]) * kSscChannels,
                           moving.channels.data() + off * kSscChannels);
      }
      c[l] = ok ? s * inv : std::numeric_limits<double>::infinity();
    }
  });
  return out;
}

// Clamps the singular values of the linear part to [1/s, s], keeping the
// image of the source centroid.
inline AffineTransform limit_step(const AffineTransform& a, const std::vector<Vec3>& source, double s) {
  Vec3 c = Vec3::Zero();
  for (const Vec3& p : source) c += p;
  c /= static_cast<double>(std::max<std::size_t>(source.size(), 1));
  Eigen::JacobiSVD<Mat3> svd(a.linear(), Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues().cwiseMax(1.0 / s).cwiseMin(s);
  const Mat3 lin = svd.matrixU() * sv.asDiagonal() * svd.matrixV().transpose();
  AffineTransform out;
  out.matrix.topLeftCorner<3, 3>() = lin;
  out.matrix.topRightCorner<3, 1>() = a.apply(c) - lin * c;
  return out;
}

// Left-right check: the moving patch at samples + shift, searched over the
// fixed volume, must find its best match within one step of the original.
inline bool consistent_match(const SSCDescriptorVolume& fixed, const SSCDescriptorVolume& moving,
                             const std::vector<Index3>& samples, const Vec3& shift, const LabelSpace& labels,
                             double step) {
  const Index3& d = fixed.geometry.dims;
  std::array<int, 3> sh;
  for (int a = 0; a < 3; ++a) sh[a] = static_cast<int>(std::lround(shift[a]));
  double best = std::numeric_limits<double>::infinity();
  Vec3 best_disp = Vec3::Zero();
  for (const int l : labels.priority) {
    std::array<int, 3> e;
    for (int a = 0; a < 3; ++a) e[a] = static_cast<int>(std::lround(labels.displacements[l][a]));
    double s = 0.0;
    bool ok = true;
    for (const Index3& p : samples) {
      const int mx = std::clamp(p[0] + sh[0], 0, d[0] - 1), my = std::clamp(p[1] + sh[1], 0, d[1] - 1),
                mz = std::clamp(p[2] + sh[2], 0, d[2] - 1);
      const int fx = mx + e[0], fy = my + e[1], fz = mz + e[2];
      if (fx < 0 || fy < 0 || fz < 0 || fx >= d[0] || fy >= d[1] || fz >= d[2]) {
        ok = false;
        break;
      }
      s += descriptor_l1(moving.channels.data() + moving.geometry.offset(mx, my, mz) * kSscChannels,
                         fixed.channels.data() + fixed.geometry.offset(fx, fy, fz) * kSscChannels);
      if (s >= best * static_cast<double>(samples.size())) {
        ok = false;
        break;
      }
    }
    if (ok && s / static_cast<double>(samples.size()) < best) {
      best = s / static_cast<double>(samples.size());
      best_disp = labels.displacements[l];
    }
  }
  return std::isfinite(best) && (best_disp + shift).cwiseAbs().maxCoeff() <= step + 0.5;
}

inline int argmin_label(const double* c, const LabelSpace& labels) {
  int best = labels.zero_label();
  double v = std::numeric_limits<double>::infinity();
  for (const int l : labels.priority)
    if (c[l] < v) {
      v = c[l];
      best = l;
    }
  return best;
}

// World extents of a and of b mapped through `b_to_a` must intersect.
inline void check_overlap(const GridGeometry& a, const GridGeometry& b, const AffineTransform& b_to_a) {
  auto bounds = [](const GridGeometry& g, const AffineTransform& t) {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (int c = 0; c < 8; ++c) {
      const Vec3 p = t.apply(g.voxel_to_world(Vec3((c & 1) ? g.dims[0] - 0.5 : -0.5, (c & 2) ? g.dims[1] - 0.5 : -0.5,
                                           (c & 4) ? g.dims[2] - 0.5 : -0.5)));
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    return std::pair{lo, hi};
  };
  const auto [alo, ahi] = bounds(a, AffineTransform::identity());
  const auto [blo, bhi] = bounds(b, b_to_a);
  for (int k = 0; k < 3; ++k)
    if (ahi[k] <= blo[k] || bhi[k] <= alo[k]) throw Error(ErrorCode::NoOverlap, "volumes do not overlap in world space");
}

}  // namespace detail

// Block-matching affine registration on SSC descriptors. Each level matches
// control-node patches over a discrete search window (on smoothed images at
// coarse steps), keeps left-right consistent matches, fits a 12-DOF map to
// them (iteratively reweighted, singular values bounded per pass) and
// composes it with the running estimate. The objective is the mean
// descriptor distance over fixed voxels covered by the moving volume;
// updates that increase it are rejected.
inline AffineRegistration register_affine_traced(const ImageVolume& fixed, const ImageVolume& moving,
                                                 const DescriptorParams& params, const RegistrationLevels& levels,
                                                 const MatchingOptions& opt = {},
                                                 const AffineTransform& initial = AffineTransform::identity()) {
  levels.validate();
  params.validate();
  detail::check_overlap(fixed.geometry, moving.geometry, initial);
  const GridGeometry& fg = fixed.geometry;
  const SSCDescriptorVolume fdesc = compute_ssc(fixed, params);

  AffineRegistration out;
  out.transform = initial;
  ImageVolume warped = apply_affine(moving, out.transform, fg, Interp::Trilinear);
  SSCDescriptorVolume mdesc = compute_ssc(warped, params);
  const int reach = params.offset + params.patch_radius;
  std::vector<char> covered = detail::coverage(fg, moving.geometry, out.transform, reach);
  auto objective_of = [&](const SSCDescriptorVolume& m, const std::vector<char>& cov) {
    return detail::mean_descriptor_distance(fdesc, m, &cov);
  };
  double objective = objective_of(mdesc, covered);
  out.initial_objective = objective;
  const double min_scale = 0.5 * fg.spacing.minCoeff();

  const int n_levels = levels.n_levels();
  for (int pass = 0; pass < n_levels + opt.affine_refinements; ++pass) {
    const int l = std::min(pass, n_levels - 1);
    const detail::ControlGrid grid(fg.dims, levels.grid_spacing[l]);
    const LabelSpace labels = LabelSpace::cube(levels.search_steps[l], levels.step_size[l]);
    // Coarse steps match descriptors of smoothed images.
    const double sigma = opt.match_sigma * (levels.step_size[l] - 1);
    const SSCDescriptorVolume fsm = sigma > 0.0 ? compute_ssc(gaussian_smooth(fixed, sigma), params) : SSCDescriptorVolume{};
    const SSCDescriptorVolume msm = sigma > 0.0 ? compute_ssc(gaussian_smooth(warped, sigma), params) : SSCDescriptorVolume{};
    const SSCDescriptorVolume& fd = sigma > 0.0 ? fsm : fdesc;
    const std::vector<char> valid =
        detail::coverage(fg, moving.geometry, out.transform, reach + static_cast<int>(std::ceil(2.0 * sigma)));
    const detail::NodeCosts nc =
        detail::node_costs(grid, labels, fd, sigma > 0.0 ? msm : mdesc, opt.samples_per_node, 1.0, &valid);
    const std::size_t L = labels.size();
    const int radius = levels.search_steps[l];
    const int side = 2 * radius + 1;
    const double step = levels.step_size[l];

    std::vector<Vec3> src, dst;
    std::vector<Mat3> w;
    for (std::size_t n = 0; n < grid.count(); ++n) {
      double structure = 0.0;
      for (const Index3& p : nc.samples[n]) {
        const auto ch = fd.at(p[0], p[1], p[2]);
        structure += kSscChannels - std::accumulate(ch.begin(), ch.end(), 0.0);
      }
      structure /= static_cast<double>(nc.samples[n].size());
      if (structure < opt.min_structure) continue;
      if (!std::all_of(nc.samples[n].begin(), nc.samples[n].end(),
                       [&](const Index3& p) { return valid[fg.offset(p[0], p[1], p[2])] != 0; }))
        continue;
      float lo = std::numeric_limits<float>::infinity(), hi = -lo;
      for (const Index3& p : nc.samples[n]) {
        lo = std::min(lo, fixed.at(p[0], p[1], p[2]));
        hi = std::max(hi, fixed.at(p[0], p[1], p[2]));
      }
      if (hi - lo < opt.min_intensity_range) continue;
      const double* c = nc.costs.data() + n * L;
      const int best = detail::argmin_label(c, labels);
      if (!std::isfinite(c[best])) continue;
      double mean = 0.0;
      std::size_t finite = 0;
      for (std::size_t k = 0; k < L; ++k)
        if (std::isfinite(c[k])) {
          mean += c[k];
          ++finite;
        }
      const double contrast = mean / static_cast<double>(finite) - c[best];
      if (!(contrast > 0.0)) continue;

      // Minima on the window boundary may lie outside it.
      const int bi[3] = {best % side, (best / side) % side, best / (side * side)};
      if (std::min({bi[0], bi[1], bi[2]}) == 0 || std::max({bi[0], bi[1], bi[2]}) == side - 1) continue;
      // So may minima next to uncovered candidates.
      bool interior = true;
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            interior = interior && std::isfinite(c[best + dx + side * dy + side * side * dz]);
      if (!interior) continue;

      Vec3 disp = labels.displacements[best];
      if (!detail::consistent_match(fd, sigma > 0.0 ? msm : mdesc, nc.samples[n], disp, labels, step)) continue;

      // Equiangular (V-shaped) sub-step refinement along each axis of the label cube.
      const int stride[3] = {1, side, side * side};
      for (int a = 0; a < 3; ++a) {
        const double cm = c[best - stride[a]], c0 = c[best], cp = c[best + stride[a]];
        const double denom = 2.0 * (std::max(cm, cp) - c0);
        if (denom > 0.0) disp[a] += std::clamp(step * (cm - cp) / denom, -0.5 * step, 0.5 * step);
      }
      // Cost curvature at the minimum; flat directions (aperture problem)
      // carry no information.
      Mat3 h;
      for (int a = 0; a < 3; ++a)
        for (int b = a; b < 3; ++b) {
          double v;
          if (a == b) {
            v = c[best - stride[a]] - 2.0 * c[best] + c[best + stride[a]];
          } else {
            v = 0.25 * (c[best + stride[a] + stride[b]] - c[best + stride[a] - stride[b]] -
                        c[best - stride[a] + stride[b]] + c[best - stride[a] - stride[b]]);
          }
          h(a, b) = h(b, a) = v / (step * step);
        }
      Eigen::SelfAdjointEigenSolver<Mat3> eh(h);
      const Mat3 info = eh.eigenvectors() * eh.eigenvalues().cwiseMax(0.0).asDiagonal() * eh.eigenvectors().transpose();
      if (!(info.trace() > 0.0)) continue;
      const Vec3 center = grid.center(grid.index_of(n));
      src.push_back(fg.voxel_to_world(center));
      dst.push_back(fg.voxel_to_world(center + disp));
      const Mat3 to_world = fg.direction * fg.spacing.asDiagonal().inverse();
      w.push_back(to_world * info * to_world.transpose());
    }

    LevelTrace tr;
    tr.level = pass < n_levels ? l : -1;
    const AffineTransform correspondence =
        detail::limit_step(fit_affine_robust(src, dst, w, min_scale), src, opt.affine_max_stretch);
    const AffineTransform candidate = correspondence.inverse() * out.transform;
    if (candidate.plausible()) {
      ImageVolume cand_img = apply_affine(moving, candidate, fg, Interp::Trilinear);
      SSCDescriptorVolume cand_desc = compute_ssc(cand_img, params);
      std::vector<char> cand_cov = detail::coverage(fg, moving.geometry, candidate, reach);
      const double cand_obj = objective_of(cand_desc, cand_cov);
      if (cand_obj <= objective) {
        out.transform = candidate;
        warped = std::move(cand_img);
        mdesc = std::move(cand_desc);
        covered = std::move(cand_cov);
        objective = cand_obj;
      } else {
        tr.accepted = false;
      }
    } else {
      tr.accepted = false;
    }
    tr.objective = objective;
    out.trace.push_back(tr);

    if (pass >= n_levels && tr.accepted) {
      // Stop refining once the correspondence map is numerically identity.
      const Mat4 delta = correspondence.matrix - Mat4::Identity();
      const double lin = delta.topLeftCorner<3, 3>().cwiseAbs().maxCoeff();
      const double trans = delta.topRightCorner<3, 1>().cwiseAbs().maxCoeff() / fg.spacing.minCoeff();
      if (lin < 1e-4 && trans < 0.01) break;
    }
    if (pass >= n_levels && !tr.accepted) break;
  }
  if (!out.transform.plausible()) throw Error(ErrorCode::DegenerateFit, "affine estimate is implausible");
  return out;
}

inline AffineTransform register_affine(const ImageVolume& fixed, const ImageVolume& moving,
                                       const DescriptorParams& params, const RegistrationLevels& levels) {
  return register_affine_traced(fixed, moving, params, levels).transform;
}

namespace detail {

// Trilinear upsampling of node displacements to every voxel of the fixed grid.
inline DisplacementField upsample_nodes(const ControlGrid& grid, const std::vector<Vec3>& node_disp,
                                        const GridGeometry& geom) {
  DisplacementField out(geom);
  const double g = grid.spacing;
  auto axis_weights = [&](int x, int axis, int& i0, int& i1, double& f) {
    const double t = std::clamp((x - 0.5 * (g - 1)) / g, 0.0, static_cast<double>(grid.nodes[axis] - 1));
    i0 = static_cast<int>(std::floor(t));
    i1 = std::min(i0 + 1, grid.nodes[axis] - 1);
    f = t - i0;
  };
  parallel::for_range(out.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t v = b; v < e; ++v) {
      const auto idx = geom.index_of(v);
      int lo[3], hi[3];
      double f[3];
      for (int a = 0; a < 3; ++a) axis_weights(idx[a], a, lo[a], hi[a], f[a]);
      Vec3 d = Vec3::Zero();
      for (int c = 0; c < 8; ++c) {
        const double wgt = ((c & 1) ? f[0] : 1 - f[0]) * ((c & 2) ? f[1] : 1 - f[1]) * ((c & 4) ? f[2] : 1 - f[2]);
        if (wgt == 0.0) continue;
        d += wgt * node_disp[grid.offset((c & 1) ? hi[0] : lo[0], (c & 2) ? hi[1] : lo[1], (c & 4) ? hi[2] : lo[2])];
      }
      out.set(v, d);
    }
  });
  return out;
}

// Replaces displacements of featureless nodes by the harmonic extension of
// the remaining nodes (Jacobi iterations on the 6-neighbour grid).
inline void fill_flat_nodes(const ControlGrid& grid, const std::vector<char>& flat, std::vector<Vec3>& disp) {
  const std::size_t n = grid.count();
  if (std::count(flat.begin(), flat.end(), 0) == 0) {
    std::fill(disp.begin(), disp.end(), Vec3::Zero());
    return;
  }
  for (std::size_t v = 0; v < n; ++v)
    if (flat[v]) disp[v] = Vec3::Zero();
  std::vector<Vec3> next(disp);
  for (int it = 0; it < 2000; ++it) {
    double change = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
      if (!flat[v]) continue;
      const Index3 idx = grid.index_of(v);
      Vec3 sum = Vec3::Zero();
      int cnt = 0;
      for (int a = 0; a < 3; ++a)
        for (int s : {-1, 1}) {
          Index3 nb = idx;
          nb[a] += s;
          if (nb[a] < 0 || nb[a] >= grid.nodes[a]) continue;
          sum += disp[grid.offset(nb[0], nb[1], nb[2])];
          ++cnt;
        }
      next[v] = sum / cnt;
      change = std::max(change, (next[v] - disp[v]).cwiseAbs().maxCoeff());
    }
    std::swap(disp, next);
    if (change < 1e-4) break;
  }
}

// Separable Gaussian smoothing of each displacement component (voxels).
inline DisplacementField smooth_field(const DisplacementField& f, double sigma) {
  if (!(sigma > 0.0)) return f;
  DisplacementField out(f.geometry);
  ImageVolume comp = make_image(f.geometry);
  for (int a = 0; a < 3; ++a) {
    for (std::size_t n = 0; n < f.size(); ++n) comp.data[n] = f.vectors[3 * n + a];
    const ImageVolume s = gaussian_smooth(comp, sigma);
    for (std::size_t n = 0; n < f.size(); ++n) out.vectors[3 * n + a] = s.data[n];
  }
  return out;
}

// u_new(x) = delta(x) + u(x + delta(x))
inline DisplacementField compose_fields(const DisplacementField& u, const DisplacementField& delta) {
  DisplacementField out(u.geometry);
  parallel::for_range(out.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t v = b; v < e; ++v) {
      const auto idx = u.geometry.index_of(v);
      const Vec3 dv = delta.at(v);
      out.set(v, dv + u.sample(Vec3(idx[0], idx[1], idx[2]) + dv));
    }
  });
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
  return v[v.size() / 2];
}

}  // namespace detail

// Multi-level discrete deformable registration. At each level every control
// node scores a cube of candidate displacements by mean descriptor distance
// over its patch; the labelling minimising data cost plus
// alpha_eff * |d_i - d_j|^2 on a minimum spanning tree of the control grid is
// found exactly. alpha_eff = alpha * median(node cost range) / (spacing * step).
// Featureless nodes follow their neighbours; increments and the composed
// field are Gaussian-smoothed; a level that raises the objective is dropped.
// With `covered`, costs and objective only use fixed voxels marked there:
// nodes outside it count as featureless and candidates sampling outside it
// get the node's worst cost.
inline DeformableRegistration register_deformable_traced(const ImageVolume& fixed, const ImageVolume& moving_affine,
                                                         const DescriptorParams& params,
                                                         const RegistrationLevels& levels,
                                                         const MatchingOptions& opt = {},
                                                         const std::vector<char>* covered = nullptr) {
  levels.validate();
  params.validate();
  if (!fixed.geometry.same_as(moving_affine.geometry))
    throw Error(ErrorCode::Shape, "deformable stage expects the moving image resampled onto the fixed grid");
  const GridGeometry& fg = fixed.geometry;
  if (covered && covered->size() != fg.voxel_count()) throw Error(ErrorCode::Shape, "coverage mask size mismatch");
  const SSCDescriptorVolume fdesc = compute_ssc(fixed, params);

  DeformableRegistration out;
  out.field = DisplacementField(fg);
  SSCDescriptorVolume mdesc = compute_ssc(moving_affine, params);
  double objective = detail::mean_descriptor_distance(fdesc, mdesc, covered);
  out.initial_objective = objective;

  for (int l = 0; l < levels.n_levels(); ++l) {
    const detail::ControlGrid grid(fg.dims, levels.grid_spacing[l]);
    const LabelSpace labels = LabelSpace::cube(levels.search_steps[l], levels.step_size[l]);
    const std::size_t L = labels.size();
    detail::NodeCosts nc =
        detail::node_costs(grid, labels, fdesc, mdesc, opt.samples_per_node, opt.patch_scale, covered);
    std::vector<char> flat(grid.count(), 0);
    std::vector<double> ranges, mean_intensity(grid.count(), 0.0);
    for (std::size_t n = 0; n < grid.count(); ++n) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (const Index3& p : nc.samples[n]) {
        const double v = fixed.at(p[0], p[1], p[2]);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        mean_intensity[n] += v;
      }
      mean_intensity[n] /= static_cast<double>(nc.samples[n].size());
      double* c = nc.costs.data() + n * L;
      double worst = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < L; ++k)
        if (std::isfinite(c[k])) worst = std::max(worst, c[k]);
      if (hi - lo < opt.min_intensity_range || !std::isfinite(c[labels.zero_label()])) {
        flat[n] = 1;
        std::fill_n(c, L, 0.0);
        continue;
      }
      std::replace_if(c, c + L, [](double v) { return !std::isfinite(v); }, worst);
      const auto [mn, mx] = std::minmax_element(c, c + L);
      if (*mx > *mn) ranges.push_back(*mx - *mn);
    }
    const double range = ranges.empty() ? 1.0 : detail::median(ranges);
    const double g = levels.grid_spacing[l];
    const double alpha_eff = levels.alpha * range / (g * levels.step_size[l]);

    Graph graph;
    graph.nodes = static_cast<int>(grid.count());
    for (std::size_t n = 0; n < grid.count(); ++n) {
      const Index3 idx = grid.index_of(n);
      for (int a = 0; a < 3; ++a) {
        Index3 nb = idx;
        if (++nb[a] >= grid.nodes[a]) continue;
        const std::size_t m = grid.offset(nb[0], nb[1], nb[2]);
        graph.edges.push_back({static_cast<int>(n), static_cast<int>(m),
                               std::abs(mean_intensity[n] - mean_intensity[m])});
      }
    }
    const std::vector<int> assignment = mst_optimize(nc.costs, labels, graph, alpha_eff);

    std::vector<Vec3> node_disp(grid.count());
    for (std::size_t n = 0; n < grid.count(); ++n) node_disp[n] = labels.displacements[assignment[n]];
    detail::fill_flat_nodes(grid, flat, node_disp);
    const DisplacementField delta =
        detail::smooth_field(detail::upsample_nodes(grid, node_disp, fg), opt.increment_sigma * g);
    DisplacementField candidate = detail::smooth_field(detail::compose_fields(out.field, delta), opt.field_sigma * g);
    SSCDescriptorVolume cand_desc =
        compute_ssc(warp(moving_affine, candidate, Interp::Trilinear, Boundary::Clamp), params);
    const double cand_obj = detail::mean_descriptor_distance(fdesc, cand_desc, covered);

    LevelTrace tr;
    tr.level = l;
    if (cand_obj <= objective) {
      out.field = std::move(candidate);
      mdesc = std::move(cand_desc);
      objective = cand_obj;
    } else {
      tr.accepted = false;
    }
    tr.objective = objective;
    out.trace.push_back(tr);
  }
  return out;
}

inline DisplacementField register_deformable(const ImageVolume& fixed, const ImageVolume& moving_affine,
                                             const DescriptorParams& params, const RegistrationLevels& levels,
                                             const std::vector<char>* covered = nullptr) {
  return register_deformable_traced(fixed, moving_affine, params, levels, {}, covered).field;
}

// Negated mean descriptor distance between two images on one grid, over
// voxels with mask != 0 when given; higher is better.
inline double registration_similarity(const ImageVolume& fixed, const ImageVolume& warped,
                                      const DescriptorParams& params, const std::vector<char>* mask = nullptr) {
  if (!fixed.geometry.same_as(warped.geometry)) throw Error(ErrorCode::Shape, "similarity needs a shared grid");
  return -detail::mean_descriptor_distance(compute_ssc(fixed, params), compute_ssc(warped, params), mask);
}

}  // namespace ctatlas
