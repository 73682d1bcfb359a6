#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ctatlas/fov_crop.hpp"
#include "ctatlas/nifti.hpp"
#include "ctatlas/phantom.hpp"
#include "ctatlas/pipeline.hpp"

namespace ctatlas::synthetic {

struct CohortOptions {
  int subjects = 10;
  int size = 48;             // atlas grid edge, 1 mm voxels
  double body_scale = 0.75;
  std::uint32_t seed = 1;
  double warp_amplitude = 2.0;  // mm
  double rotation_deg = 4.0;
  double translation_mm = 3.0;
  double scale_deviation = 0.04;
  double organ_jitter = 0.08;   // fraction of organ radii
  // Extra axial slices beyond the atlas field of view, drawn per subject in
  // [0, distractor_slices] above and below. The body then continues through
  // the volume, with lungs above and bone below the abdominal window.
  int distractor_slices = 0;
  std::vector<std::string> phases{"portal-venous"};
};

struct Cohort {
  PipelineConfig config;  // output_dir = <dir>/out, crop enabled
  phantom::Phantom reference;
};

// Score track of a canonical volume: score = -z / mm_per_unit, clamped.
inline SliceScoreTrack linear_scores(const GridGeometry& g, double mm_per_unit) {
  SliceScoreTrack t;
  for (int k = 0; k < g.dims[2]; ++k) {
    const double z = g.voxel_to_world(Vec3(0, 0, k))[2];
    t.scores.push_back(std::clamp(-z / mm_per_unit, kScoreMin, kScoreMax));
  }
  return t;
}

inline phantom::Phantom reference_phantom(const CohortOptions& o) {
  phantom::Phantom p = phantom::abdominal(o.body_scale, 7);
  if (o.distractor_slices > 0) {
    const double half = 0.5 * o.size;
    p.body.radii[2] = 4.0 * half;
    p.organs.push_back({Vec3(-10, 0, half + 26), Vec3(8, 9, 12) * o.body_scale * 1.3, Mat3::Identity(), -850.0f, 0});
    p.organs.push_back({Vec3(10, 0, half + 26), Vec3(8, 9, 12) * o.body_scale * 1.3, Mat3::Identity(), -850.0f, 0});
    p.organs.push_back({Vec3(-12, -4, -half - 10), Vec3(5, 7, 8), Mat3::Identity(), 700.0f, 0});
    p.organs.push_back({Vec3(12, -4, -half - 10), Vec3(5, 7, 8), Mat3::Identity(), 700.0f, 0});
    // Unlabelled look-alikes of two organs just outside the window.
    for (const auto& [src, dz] : {std::pair{0, 32.0}, std::pair{1, -30.0}}) {
      phantom::Ellipsoid decoy = p.organs[static_cast<std::size_t>(src)];
      decoy.center[2] += dz * o.size / 48.0;
      decoy.label = 0;
      p.organs.push_back(decoy);
    }
  }
  return p;
}

// Writes atlas, atlas labels, subjects (image, labels, score sidecar) and a
// pipeline config under `dir`. Subject i is the reference with jittered
// organs seen through a random affine and a smooth sinusoidal warp.
inline Cohort write_cohort(const std::filesystem::path& out, const CohortOptions& o) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::absolute(out);
  fs::create_directories(dir / "subjects");
  const double mm_per_unit = o.size / 12.0;
  Cohort c;
  c.reference = reference_phantom(o);
  const GridGeometry ag = centered_grid({o.size, o.size, o.size}, 1.0);
  const auto atlas = phantom::render(c.reference, ag);
  PipelineConfig& cfg = c.config;
  cfg.atlas = dir / "atlas.nii.gz";
  cfg.atlas_labels = dir / "atlas_labels.nii.gz";
  write_volume(atlas.image, cfg.atlas);
  write_volume(atlas.labels, *cfg.atlas_labels);
  cfg.output_dir = dir / "out";

  std::mt19937 rng(o.seed);
  auto uni = [&](double a) { return std::uniform_real_distribution<double>(-a, a)(rng); };
  for (int i = 0; i < o.subjects; ++i) {
    phantom::Phantom p = c.reference;
    for (auto& org : p.organs) {
      if (org.label == 0) continue;
      for (int a = 0; a < 3; ++a) {
        org.center[a] += uni(o.organ_jitter) * org.radii[a];
        org.radii[a] *= 1.0 + uni(o.organ_jitter);
      }
    }
    AffineTransform::Parameters ap;
    const double rad = o.rotation_deg * std::numbers::pi / 180.0;
    ap.rotation = Vec3(uni(rad), uni(rad), uni(rad));
    ap.translation = Vec3(uni(o.translation_mm), uni(o.translation_mm), uni(o.translation_mm));
    ap.scale = Vec3(1 + uni(o.scale_deviation), 1 + uni(o.scale_deviation), 1 + uni(o.scale_deviation));
    const AffineTransform a = AffineTransform::from_parameters(ap);
    phantom::SinusoidalWarp w;
    w.amplitude = o.warp_amplitude;
    w.wavelength = o.size;
    w.phase = Vec3(uni(3.14), uni(3.14), uni(3.14));

    GridGeometry g = ag;
    if (o.distractor_slices > 0) {
      const int above = std::uniform_int_distribution<int>(0, o.distractor_slices)(rng);
      const int below = std::uniform_int_distribution<int>(0, o.distractor_slices)(rng);
      g.dims[2] += above + below;
      g.origin[2] -= below;
    }
    const auto r = phantom::render_mapped(p, g, [&](const Vec3& idx) {
      const Vec3 q = a.apply(g.voxel_to_world(idx));
      return Vec3(q + w.at(q));
    });

    char id[16];
    std::snprintf(id, sizeof id, "sub-%02d", i);
    SubjectEntry e;
    e.id = id;
    e.image = dir / "subjects" / (e.id + ".nii.gz");
    e.labels = dir / "subjects" / (e.id + "_labels.nii.gz");
    e.phase = o.phases[static_cast<std::size_t>(i) % o.phases.size()];
    write_volume(r.image, e.image);
    write_volume(r.labels, *e.labels);
    save_scores(linear_scores(g, mm_per_unit), sidecar_path_for(e.image));
    cfg.subjects.push_back(std::move(e));
  }
  save_config(cfg, dir / "config.json");
  return c;
}

}  // namespace ctatlas::synthetic
