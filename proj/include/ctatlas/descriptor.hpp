#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "ctatlas/volume.hpp"

namespace ctatlas {

inline constexpr int kSscNeighbors = 6;
inline constexpr int kSscChannels = 12;
inline constexpr double kNoiseFloor = 1e-6;

enum class NoiseRule { MeanOfPairSSDs, GlobalMean };
enum class DistanceNorm { L1, L2 };

struct DescriptorParams {
  int patch_radius = 1;  // 3x3x3 patches
  int offset = 2;        // neighbour distance in voxels
  NoiseRule noise_rule = NoiseRule::MeanOfPairSSDs;
  DistanceNorm norm = DistanceNorm::L1;

  void validate() const {
    if (patch_radius < 1) throw Error(ErrorCode::Config, "patch_radius must be >= 1");
    if (offset < 1) throw Error(ErrorCode::Config, "neighbour offset must be >= 1");
  }

  // Six face neighbours at +-offset: +x, -x, +y, -y, +z, -z.
  std::array<Index3, kSscNeighbors> neighborhood() const {
    return {Index3{offset, 0, 0}, Index3{-offset, 0, 0}, Index3{0, offset, 0},
            Index3{0, -offset, 0}, Index3{0, 0, offset}, Index3{0, 0, -offset}};
  }

  // The 12 pairs of non-opposite neighbours (edges of the octahedron).
  static std::array<std::array<int, 2>, kSscChannels> pair_set() {
    std::array<std::array<int, 2>, kSscChannels> pairs{};
    int n = 0;
    for (int a = 0; a < kSscNeighbors; ++a)
      for (int b = a + 1; b < kSscNeighbors; ++b)
        if (a / 2 != b / 2) pairs[n++] = {a, b};
    return pairs;
  }
};

// Twelve channels per voxel, voxel-major.
struct SSCDescriptorVolume {
  GridGeometry geometry;
  std::vector<float> channels;

  std::span<const float, kSscChannels> at(std::size_t voxel) const {
    return std::span<const float, kSscChannels>(channels.data() + voxel * kSscChannels, kSscChannels);
  }
  std::span<const float, kSscChannels> at(int i, int j, int k) const {
    return at(geometry.offset(i, j, k));
  }
  std::span<const float, kSscChannels> clamped(int i, int j, int k) const {
    const auto& d = geometry.dims;
    return at(std::clamp(i, 0, d[0] - 1), std::clamp(j, 0, d[1] - 1), std::clamp(k, 0, d[2] - 1));
  }
};

inline double descriptor_distance(std::span<const float> a, std::span<const float> b,
                                  DistanceNorm norm = DistanceNorm::L1) {
  if (a.size() != kSscChannels || b.size() != kSscChannels)
    throw Error(ErrorCode::Shape, "descriptors must have 12 channels");
  double s = 0.0;
  if (norm == DistanceNorm::L1) {
    for (int c = 0; c < kSscChannels; ++c) s += std::abs(static_cast<double>(a[c]) - b[c]);
    return s;
  }
  for (int c = 0; c < kSscChannels; ++c) {
    const double d = static_cast<double>(a[c]) - b[c];
    s += d * d;
  }
  return std::sqrt(s);
}

// Hot-loop variant without size checks.
inline float descriptor_l1(const float* a, const float* b) {
  float s = 0.0f;
  for (int c = 0; c < kSscChannels; ++c) s += std::abs(a[c] - b[c]);
  return s;
}

// Self-similarity context: per voxel and neighbour pair (px, py),
// exp(-SSD(patch(v + px), patch(v + py)) / q2(v)). Patches are sampled with
// edge clamping.
inline SSCDescriptorVolume compute_ssc(const ImageVolume& vol, const DescriptorParams& params) {
  params.validate();
  const auto& d = vol.dims();
  const int reach = params.patch_radius + params.offset;
  for (int a = 0; a < 3; ++a)
    if (d[a] <= 2 * reach)
      throw Error(ErrorCode::InsufficientExtent, "volume too small for the descriptor footprint");

  const std::size_t n = vol.size();
  SSCDescriptorVolume out;
  out.geometry = vol.geometry;
  out.channels.assign(n * kSscChannels, 0.0f);

  const int r = params.patch_radius;
  const Index3 ext{d[0] + 2 * r, d[1] + 2 * r, d[2] + 2 * r};
  const std::size_t ext_n = static_cast<std::size_t>(ext[0]) * ext[1] * ext[2];
  auto ext_off = [&](int i, int j, int k) {
    return static_cast<std::size_t>(i) + static_cast<std::size_t>(ext[0]) * (j + static_cast<std::size_t>(ext[1]) * k);
  };
  std::vector<double> sq(ext_n), pass(ext_n);
  const auto nb = params.neighborhood();
  const auto pairs = DescriptorParams::pair_set();

  for (int c = 0; c < kSscChannels; ++c) {
    const Index3 pa = nb[pairs[c][0]], pb = nb[pairs[c][1]];
    // Squared differences on a grid extended by the patch radius.
    parallel::for_each_index(static_cast<std::size_t>(ext[2]), [&](std::size_t kk) {
      const int k = static_cast<int>(kk) - r;
      for (int j = -r; j < d[1] + r; ++j)
        for (int i = -r; i < d[0] + r; ++i) {
          const double diff = static_cast<double>(vol.clamped(i + pa[0], j + pa[1], k + pa[2])) -
                              static_cast<double>(vol.clamped(i + pb[0], j + pb[1], k + pb[2]));
          sq[ext_off(i + r, j + r, k + r)] = diff * diff;
        }
    });
    // Separable box sum of width 2r+1; each pass shrinks validity toward the core.
    parallel::for_each_index(static_cast<std::size_t>(ext[2]), [&](std::size_t kk) {
      const int k = static_cast<int>(kk);
      for (int j = 0; j < ext[1]; ++j)
        for (int i = r; i < ext[0] - r; ++i) {
          double s = 0.0;
          for (int o = -r; o <= r; ++o) s += sq[ext_off(i + o, j, k)];
          pass[ext_off(i, j, k)] = s;
        }
    });
    parallel::for_each_index(static_cast<std::size_t>(ext[2]), [&](std::size_t kk) {
      const int k = static_cast<int>(kk);
      for (int j = r; j < ext[1] - r; ++j)
        for (int i = r; i < ext[0] - r; ++i) {
          double s = 0.0;
          for (int o = -r; o <= r; ++o) s += pass[ext_off(i, j + o, k)];
          sq[ext_off(i, j, k)] = s;
        }
    });
    parallel::for_each_index(static_cast<std::size_t>(d[2]), [&](std::size_t kk) {
      const int k = static_cast<int>(kk);
      for (int j = 0; j < d[1]; ++j)
        for (int i = 0; i < d[0]; ++i) {
          double s = 0.0;
          for (int o = -r; o <= r; ++o) s += sq[ext_off(i + r, j + r, k + r + o)];
          out.channels[vol.geometry.offset(i, j, k) * kSscChannels + c] = static_cast<float>(s);
        }
    });
  }

  double global_q2 = 0.0;
  if (params.noise_rule == NoiseRule::GlobalMean) {
    for (float v : out.channels) global_q2 += v;
    global_q2 = std::max(global_q2 / static_cast<double>(out.channels.size()), kNoiseFloor);
  }
  constexpr float tiny = std::numeric_limits<float>::min();
  parallel::for_range(n, [&](std::size_t b, std::size_t e) {
    for (std::size_t v = b; v < e; ++v) {
      float* ch = out.channels.data() + v * kSscChannels;
      double q2 = global_q2;
      if (params.noise_rule == NoiseRule::MeanOfPairSSDs) {
        double s = 0.0;
        for (int c = 0; c < kSscChannels; ++c) s += ch[c];
        q2 = std::max(s / kSscChannels, kNoiseFloor);
      }
      for (int c = 0; c < kSscChannels; ++c)
        ch[c] = std::max(static_cast<float>(std::exp(-ch[c] / q2)), tiny);
    }
  });
  return out;
}

// One channel as a scalar volume (debug output).
inline ImageVolume descriptor_channel(const SSCDescriptorVolume& desc, int channel) {
  ImageVolume v(desc.geometry, 0.0f, 0.0f);
  for (std::size_t i = 0; i < v.size(); ++i) v.data[i] = desc.channels[i * kSscChannels + channel];
  return v;
}

}  // namespace ctatlas
