#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctatlas/volume.hpp"

namespace ctatlas {

inline constexpr std::array<std::string_view, 4> kPhases = {"non-contrast", "arterial", "portal-venous", "delayed"};

inline bool valid_phase(std::string_view p) {
  return std::find(kPhases.begin(), kPhases.end(), p) != kPhases.end();
}

namespace detail {
template <typename V>
void check_same_geometry(std::span<const V> vols) {
  if (vols.empty()) throw Error(ErrorCode::EmptyInput, "no volumes given");
  for (const auto& v : vols)
    if (!v.geometry.same_as(vols.front().geometry)) throw Error(ErrorCode::Shape, "volume geometries differ");
}
}  // namespace detail

// Running per-voxel sum. Partial accumulators merge associatively.
struct MeanAccumulator {
  GridGeometry geometry;
  std::vector<double> sum;
  std::size_t count = 0;

  explicit MeanAccumulator(const GridGeometry& g) : geometry(g), sum(g.voxel_count(), 0.0) {}

  void add(const ImageVolume& v) {
    if (!v.geometry.same_as(geometry)) throw Error(ErrorCode::Shape, "volume geometry differs from the accumulator");
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += v.data[i];
    ++count;
  }

  void merge(const MeanAccumulator& o) {
    if (!o.geometry.same_as(geometry)) throw Error(ErrorCode::Shape, "accumulator geometries differ");
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += o.sum[i];
    count += o.count;
  }

  ImageVolume result() const {
    if (count == 0) throw Error(ErrorCode::EmptyInput, "no volumes accumulated");
    ImageVolume out = make_image(geometry);
    for (std::size_t i = 0; i < sum.size(); ++i) out.data[i] = static_cast<float>(sum[i] / static_cast<double>(count));
    return out;
  }
};

inline ImageVolume mean_map(std::span<const ImageVolume> vols) {
  detail::check_same_geometry(vols);
  MeanAccumulator acc(vols.front().geometry);
  for (const auto& v : vols) acc.add(v);
  ImageVolume out = acc.result();
  out.padding_value = vols.front().padding_value;
  return out;
}

// log(1 + v) / max log(1 + v), v the population variance about `mean`.
inline ImageVolume variance_map(std::span<const ImageVolume> vols, const ImageVolume& mean) {
  if (vols.size() < 2) throw Error(ErrorCode::InsufficientCohort, "variance needs at least two volumes");
  detail::check_same_geometry(vols);
  if (!mean.geometry.same_as(vols.front().geometry)) throw Error(ErrorCode::Shape, "mean geometry differs");
  const std::size_t n = mean.data.size();
  std::vector<double> lv(n, 0.0);
  for (const auto& v : vols)
    for (std::size_t i = 0; i < n; ++i) {
      const double d = static_cast<double>(v.data[i]) - mean.data[i];
      lv[i] += d * d;
    }
  double mx = 0.0;
  for (auto& x : lv) {
    x = std::log1p(x / static_cast<double>(vols.size()));
    mx = std::max(mx, x);
  }
  ImageVolume out = make_image(mean.geometry);
  out.padding_value = 0.0f;
  for (std::size_t i = 0; i < n; ++i) out.data[i] = mx > 0.0 ? static_cast<float>(lv[i] / mx) : 0.0f;
  return out;
}

// Per-voxel vote counts over a fixed label alphabet.
struct VoteAccumulator {
  GridGeometry geometry;
  std::vector<std::uint16_t> alphabet;  // sorted
  std::vector<std::uint32_t> counts;    // voxel-major
  std::size_t volumes = 0;

  VoteAccumulator(const GridGeometry& g, std::vector<std::uint16_t> labels) : geometry(g), alphabet(std::move(labels)) {
    std::sort(alphabet.begin(), alphabet.end());
    alphabet.erase(std::unique(alphabet.begin(), alphabet.end()), alphabet.end());
    counts.assign(g.voxel_count() * alphabet.size(), 0);
  }

  void add(const LabelVolume& v) {
    if (!v.geometry.same_as(geometry)) throw Error(ErrorCode::Shape, "label geometry differs from the accumulator");
    const std::size_t k = alphabet.size();
    for (std::size_t i = 0; i < v.data.size(); ++i) {
      const auto it = std::lower_bound(alphabet.begin(), alphabet.end(), v.data[i]);
      if (it == alphabet.end() || *it != v.data[i]) throw Error(ErrorCode::Validation, "label outside the alphabet");
      ++counts[i * k + static_cast<std::size_t>(it - alphabet.begin())];
    }
    ++volumes;
  }

  void merge(const VoteAccumulator& o) {
    if (o.alphabet != alphabet || !o.geometry.same_as(geometry))
      throw Error(ErrorCode::Shape, "vote accumulators are incompatible");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    volumes += o.volumes;
  }

  // Most frequent label; the smallest id wins ties.
  LabelVolume result() const {
    if (volumes == 0) throw Error(ErrorCode::EmptyInput, "no label volumes accumulated");
    LabelVolume out = make_labels(geometry);
    const std::size_t k = alphabet.size();
    for (std::size_t i = 0; i < out.data.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t a = 1; a < k; ++a)
        if (counts[i * k + a] > counts[i * k + best]) best = a;
      out.data[i] = alphabet[best];
    }
    return out;
  }
};

inline LabelVolume fuse_labels_majority(std::span<const LabelVolume> vols) {
  detail::check_same_geometry(vols);
  std::vector<std::uint16_t> alphabet;
  for (const auto& v : vols) {
    std::vector<char> seen(65536, 0);
    for (auto l : v.data) seen[l] = 1;
    for (std::size_t l = 0; l < seen.size(); ++l)
      if (seen[l]) alphabet.push_back(static_cast<std::uint16_t>(l));
  }
  VoteAccumulator acc(vols.front().geometry, alphabet);
  for (const auto& v : vols) acc.add(v);
  LabelVolume out = acc.result();
  for (const auto& v : vols)
    for (const auto& [id, name] : v.label_names) out.label_names.emplace(id, name);
  return out;
}

// 64-bit FNV-1a, used for stable parameter digests.
inline std::string digest_hex(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct AtlasProvenance {
  std::vector<std::string> subject_ids;
  std::string phase = "portal-venous";
  std::optional<std::pair<double, double>> crop_range;
  nlohmann::json parameters = nlohmann::json::object();

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["subjects"] = subject_ids;
    j["phase"] = phase;
    j["crop_range"] = crop_range ? nlohmann::json::array({crop_range->first, crop_range->second}) : nlohmann::json();
    j["parameters"] = parameters;
    j["parameters_digest"] = digest_hex(parameters.dump());
    return j;
  }
};

struct AtlasBundle {
  ImageVolume mean;
  std::optional<ImageVolume> variance;  // absent below two subjects
  std::optional<LabelVolume> fused_labels;
  AtlasProvenance provenance;
};

inline AtlasBundle build_atlas(std::span<const ImageVolume> images, std::span<const LabelVolume> labels,
                               AtlasProvenance provenance) {
  AtlasBundle b;
  b.mean = mean_map(images);
  if (images.size() >= 2) b.variance = variance_map(images, b.mean);
  if (!labels.empty()) {
    b.fused_labels = fuse_labels_majority(labels);
    if (!b.fused_labels->geometry.same_as(b.mean.geometry))
      throw Error(ErrorCode::Shape, "label and image geometries differ");
  }
  b.provenance = std::move(provenance);
  return b;
}

// Sum over voxels of the central-difference gradient magnitude (per mm).
inline double total_gradient_magnitude(const ImageVolume& v) {
  const auto& g = v.geometry;
  const auto& d = g.dims;
  double total = 0.0;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        const double gx = (v.clamped(i + 1, j, k) - v.clamped(i - 1, j, k)) / (2.0 * g.spacing[0]);
        const double gy = (v.clamped(i, j + 1, k) - v.clamped(i, j - 1, k)) / (2.0 * g.spacing[1]);
        const double gz = (v.clamped(i, j, k + 1) - v.clamped(i, j, k - 1)) / (2.0 * g.spacing[2]);
        total += std::sqrt(gx * gx + gy * gy + gz * gz);
      }
  return total;
}

}  // namespace ctatlas
