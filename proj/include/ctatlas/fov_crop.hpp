#pragma once

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ctatlas/volume.hpp"

namespace ctatlas {

inline constexpr double kScoreMin = -12.0;
inline constexpr double kScoreMax = 12.0;
// Default abdominal window; see README for the rationale behind -6.
inline constexpr double kDefaultCropLo = -6.0;
inline constexpr double kDefaultCropHi = 5.0;

// Per-axial-slice body position score in [-12, 12]. Scores follow the slice
// order of the stored volume; in canonical orientation they decrease toward
// the head (-12 upper chest, -5 diaphragm, +6 pelvis).
struct SliceScoreTrack {
  enum class Source { Sidecar, Heuristic };

  std::vector<double> scores;
  Source source = Source::Sidecar;
  bool insufficient_anatomy = false;  // heuristic fell back to a plain ramp
};

struct CropRecord {
  int first_slice = 0;
  int last_slice = 0;  // inclusive
  double lo = kDefaultCropLo;
  double hi = kDefaultCropHi;

  int slice_count() const { return last_slice - first_slice + 1; }
};

// File name without .nii / .nii.gz.
inline std::string volume_stem(const std::filesystem::path& volume_path) {
  std::string name = volume_path.filename().string();
  for (const std::string ext : {".nii.gz", ".nii"}) {
    if (name.size() > ext.size() && name.compare(name.size() - ext.size(), ext.size(), ext) == 0) {
      name.resize(name.size() - ext.size());
      break;
    }
  }
  return name;
}

// "<dir>/<stem>.bpr.json"
inline std::filesystem::path sidecar_path_for(const std::filesystem::path& volume_path) {
  return volume_path.parent_path() / (volume_stem(volume_path) + ".bpr.json");
}

inline void validate_scores(const std::vector<double>& scores) {
  for (double s : scores)
    if (!std::isfinite(s) || s < kScoreMin || s > kScoreMax)
      throw Error(ErrorCode::Validation, "slice score outside [-12, 12]: " + std::to_string(s));
}

inline SliceScoreTrack load_scores(const std::filesystem::path& path, int axial_slices) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::IO, "cannot read score sidecar " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Format, std::string("score sidecar: ") + e.what());
  }
  if (!doc.contains("scores") || !doc["scores"].is_array())
    throw Error(ErrorCode::Format, "score sidecar lacks a 'scores' array");
  SliceScoreTrack track;
  track.source = SliceScoreTrack::Source::Sidecar;
  for (const auto& s : doc["scores"]) {
    if (!s.is_number()) throw Error(ErrorCode::Format, "non-numeric slice score");
    track.scores.push_back(s.get<double>());
  }
  if (doc.contains("n_slices") && doc["n_slices"].get<long>() != static_cast<long>(track.scores.size()))
    throw Error(ErrorCode::Shape, "n_slices disagrees with the scores array");
  if (static_cast<int>(track.scores.size()) != axial_slices)
    throw Error(ErrorCode::Shape, "sidecar has " + std::to_string(track.scores.size()) +
                                      " scores for a volume with " + std::to_string(axial_slices) +
                                      " slices");
  validate_scores(track.scores);
  return track;
}

inline SliceScoreTrack load_scores(const std::filesystem::path& path, const ImageVolume& vol) {
  return load_scores(path, vol.dims()[2]);
}

inline void save_scores(const SliceScoreTrack& track, const std::filesystem::path& path) {
  nlohmann::json doc;
  doc["n_slices"] = track.scores.size();
  doc["scores"] = track.scores;
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IO, "cannot write " + path.string());
  os << doc.dump() << "\n";
}

namespace detail {

struct SliceProfile {
  std::vector<double> enclosed_air;  // air between body voxels on a row / slice area in body
  std::vector<double> bone;          // dense voxels / body voxels
  std::vector<long> body;
};

inline SliceProfile slice_profiles(const ImageVolume& vol) {
  constexpr float body_hu = -500.0f, air_hu = -400.0f, bone_hu = 200.0f;
  const auto& d = vol.dims();
  SliceProfile p;
  p.enclosed_air.assign(d[2], 0.0);
  p.bone.assign(d[2], 0.0);
  p.body.assign(d[2], 0);
  for (int k = 0; k < d[2]; ++k) {
    long body = 0, air = 0, bone = 0;
    for (int j = 0; j < d[1]; ++j) {
      int first = -1, last = -1;
      for (int i = 0; i < d[0]; ++i) {
        if (vol.at(i, j, k) > body_hu) {
          if (first < 0) first = i;
          last = i;
        }
      }
      if (first < 0) continue;
      for (int i = first; i <= last; ++i) {
        const float v = vol.at(i, j, k);
        if (v < air_hu) {
          ++air;
        } else {
          ++body;
          if (v > bone_hu) ++bone;
        }
      }
    }
    p.body[k] = body;
    p.enclosed_air[k] = (body + air) > 0 ? static_cast<double>(air) / (body + air) : 0.0;
    p.bone[k] = body > 0 ? static_cast<double>(bone) / body : 0.0;
  }
  return p;
}

}  // namespace detail

// Approximate stand-in for a learned slice-position regressor. Lung base
// (enclosed air) anchors -5, top of dense pelvic bone anchors +6; with one
// anchor a fixed 25 mm per score unit is used. Scores decrease with the
// superior (axis 2) index and are clamped to [-12, 12].
inline SliceScoreTrack estimate_scores(const ImageVolume& vol) {
  const auto& d = vol.dims();
  if (d[2] <= 3) throw Error(ErrorCode::InsufficientExtent, "need more than 3 axial slices");
  constexpr double lung_fraction = 0.15, pelvis_bone_fraction = 0.10, mm_per_unit = 25.0;
  const double dz = vol.geometry.spacing[2];
  const auto prof = detail::slice_profiles(vol);

  SliceScoreTrack track;
  track.source = SliceScoreTrack::Source::Heuristic;
  track.scores.resize(d[2]);

  const long min_body = std::max<long>(1, static_cast<long>(0.01 * d[0] * d[1]));
  int lo_body = -1, hi_body = -1, diaphragm = -1;
  for (int k = 0; k < d[2]; ++k) {
    if (prof.body[k] >= min_body) {
      if (lo_body < 0) lo_body = k;
      hi_body = k;
      if (diaphragm < 0 && prof.enclosed_air[k] > lung_fraction) diaphragm = k;
    }
  }

  if (lo_body < 0) {
    track.insufficient_anatomy = true;
    for (int k = 0; k < d[2]; ++k)
      track.scores[k] = kScoreMax - (kScoreMax - kScoreMin) * k / (d[2] - 1);
    return track;
  }

  double anchor_slice, anchor_score, slope;  // score = anchor_score - slope * (k - anchor_slice)
  if (diaphragm >= 0) {
    anchor_slice = diaphragm;
    anchor_score = -5.0;
    slope = dz / mm_per_unit;
    int pelvis = -1;
    for (int k = diaphragm - 1; k >= lo_body; --k)
      if (prof.body[k] >= min_body && prof.bone[k] > pelvis_bone_fraction) {
        pelvis = k;
        break;
      }
    if (pelvis >= 0 && diaphragm - pelvis >= 3) slope = 11.0 / (diaphragm - pelvis);
  } else {
    anchor_slice = 0.5 * (lo_body + hi_body);
    anchor_score = 0.0;
    slope = dz / mm_per_unit;
  }
  for (int k = 0; k < d[2]; ++k)
    track.scores[k] = std::clamp(anchor_score - slope * (k - anchor_slice), kScoreMin, kScoreMax);
  return track;
}

// Longest contiguous run of slices with score in [lo, hi]; earlier run wins ties.
inline CropRecord select_slices(const SliceScoreTrack& track, double lo, double hi) {
  if (!(lo < hi)) throw Error(ErrorCode::Config, "crop range requires lo < hi");
  int best_first = -1, best_len = 0, run_first = -1;
  const int n = static_cast<int>(track.scores.size());
  for (int k = 0; k <= n; ++k) {
    const bool in = k < n && track.scores[k] >= lo && track.scores[k] <= hi;
    if (in && run_first < 0) run_first = k;
    if (!in && run_first >= 0) {
      if (k - run_first > best_len) {
        best_len = k - run_first;
        best_first = run_first;
      }
      run_first = -1;
    }
  }
  if (best_len == 0) throw Error(ErrorCode::EmptyCrop, "no slice scored within the crop range");
  return CropRecord{best_first, best_first + best_len - 1, lo, hi};
}

template <typename T>
Volume<T> crop_slices(const Volume<T>& vol, int first, int last) {
  const auto& d = vol.dims();
  if (first < 0 || last >= d[2] || first > last) throw Error(ErrorCode::Shape, "slice range out of bounds");
  GridGeometry g = vol.geometry;
  g.dims[2] = last - first + 1;
  g.origin = vol.geometry.voxel_to_world(Vec3(0, 0, first));
  Volume<T> out(g, T{}, vol.padding_value);
  out.label_names = vol.label_names;
  const std::size_t slab = static_cast<std::size_t>(d[0]) * d[1];
  std::copy(vol.data.begin() + slab * first, vol.data.begin() + slab * (last + 1), out.data.begin());
  return out;
}

template <typename T>
struct Cropped {
  Volume<T> volume;
  CropRecord record;
};

template <typename T>
Cropped<T> crop_by_score(const Volume<T>& vol, const SliceScoreTrack& track, double lo, double hi) {
  if (static_cast<int>(track.scores.size()) != vol.dims()[2])
    throw Error(ErrorCode::Shape, "score track length differs from axial dimension");
  const CropRecord rec = select_slices(track, lo, hi);
  return {crop_slices(vol, rec.first_slice, rec.last_slice), rec};
}

inline SliceScoreTrack crop_track(const SliceScoreTrack& track, const CropRecord& rec) {
  SliceScoreTrack out = track;
  out.scores.assign(track.scores.begin() + rec.first_slice, track.scores.begin() + rec.last_slice + 1);
  return out;
}

}  // namespace ctatlas
