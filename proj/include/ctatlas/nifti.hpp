#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ctatlas/volume.hpp"

namespace ctatlas::nifti {

#pragma pack(push, 1)
struct Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Header) == 348, "NIfTI-1 header must be 348 bytes");

enum DataType : std::int16_t {
  kUInt8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUInt16 = 512,
  kUInt32 = 768,
};

inline constexpr std::int16_t kIntentVector = 1007;

namespace detail {

template <typename T>
void swap_bytes(T& v) {
  auto* p = reinterpret_cast<unsigned char*>(&v);
  std::reverse(p, p + sizeof(T));
}

inline void swap_header(Header& h) {
  swap_bytes(h.sizeof_hdr);
  swap_bytes(h.extents);
  swap_bytes(h.session_error);
  for (auto& d : h.dim) swap_bytes(d);
  swap_bytes(h.intent_p1);
  swap_bytes(h.intent_p2);
  swap_bytes(h.intent_p3);
  swap_bytes(h.intent_code);
  swap_bytes(h.datatype);
  swap_bytes(h.bitpix);
  swap_bytes(h.slice_start);
  for (auto& p : h.pixdim) swap_bytes(p);
  swap_bytes(h.vox_offset);
  swap_bytes(h.scl_slope);
  swap_bytes(h.scl_inter);
  swap_bytes(h.slice_end);
  swap_bytes(h.cal_max);
  swap_bytes(h.cal_min);
  swap_bytes(h.slice_duration);
  swap_bytes(h.toffset);
  swap_bytes(h.glmax);
  swap_bytes(h.glmin);
  swap_bytes(h.qform_code);
  swap_bytes(h.sform_code);
  swap_bytes(h.quatern_b);
  swap_bytes(h.quatern_c);
  swap_bytes(h.quatern_d);
  swap_bytes(h.qoffset_x);
  swap_bytes(h.qoffset_y);
  swap_bytes(h.qoffset_z);
  for (int i = 0; i < 4; ++i) {
    swap_bytes(h.srow_x[i]);
    swap_bytes(h.srow_y[i]);
    swap_bytes(h.srow_z[i]);
  }
}

inline int bytes_per_voxel(std::int16_t datatype) {
  switch (datatype) {
    case kUInt8:
    case kInt8: return 1;
    case kInt16:
    case kUInt16: return 2;
    case kInt32:
    case kUInt32:
    case kFloat32: return 4;
    case kFloat64: return 8;
    default: return 0;
  }
}

struct GzCloser {
  void operator()(gzFile_s* f) const {
    if (f) gzclose(f);
  }
};
using GzHandle = std::unique_ptr<gzFile_s, GzCloser>;

inline bool is_gz_path(const std::filesystem::path& p) { return p.extension() == ".gz"; }

// Splits the 3x3 voxel->world block into spacing and the nearest orthonormal
// direction (polar decomposition).
inline void split_affine(const Mat3& m, GridGeometry& g) {
  for (int a = 0; a < 3; ++a) {
    const double n = m.col(a).norm();
    if (!(n > 0.0)) throw Error(ErrorCode::Format, "degenerate orientation matrix");
    g.spacing[a] = n;
  }
  const Mat3 dir = m * g.spacing.cwiseInverse().asDiagonal();
  Eigen::JacobiSVD<Mat3> svd(dir, Eigen::ComputeFullU | Eigen::ComputeFullV);
  g.direction = svd.matrixU() * svd.matrixV().transpose();
}

inline Mat3 quaternion_to_rotation(double b, double c, double d) {
  double a = 1.0 - (b * b + c * c + d * d);
  if (a < 1e-7) {
    const double s = 1.0 / std::sqrt(b * b + c * c + d * d);
    b *= s;
    c *= s;
    d *= s;
    a = 0.0;
  } else {
    a = std::sqrt(a);
  }
  Mat3 r;
  r << a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c),
      2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b),
      2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b;
  return r;
}

// Rotation (det +1) to quaternion (b, c, d) with a >= 0.
inline std::array<double, 3> rotation_to_quaternion(const Mat3& r) {
  const double trace = r.trace();
  double a, b, c, d;
  if (trace > -0.99) {
    a = 0.5 * std::sqrt(1.0 + trace);
    b = 0.25 * (r(2, 1) - r(1, 2)) / a;
    c = 0.25 * (r(0, 2) - r(2, 0)) / a;
    d = 0.25 * (r(1, 0) - r(0, 1)) / a;
  } else {
    const double xd = 1.0 + r(0, 0) - (r(1, 1) + r(2, 2));
    const double yd = 1.0 + r(1, 1) - (r(0, 0) + r(2, 2));
    const double zd = 1.0 + r(2, 2) - (r(0, 0) + r(1, 1));
    if (xd > 1.0) {
      b = 0.5 * std::sqrt(xd);
      c = 0.25 * (r(0, 1) + r(1, 0)) / b;
      d = 0.25 * (r(0, 2) + r(2, 0)) / b;
      a = 0.25 * (r(2, 1) - r(1, 2)) / b;
    } else if (yd > 1.0) {
      c = 0.5 * std::sqrt(yd);
      b = 0.25 * (r(0, 1) + r(1, 0)) / c;
      d = 0.25 * (r(1, 2) + r(2, 1)) / c;
      a = 0.25 * (r(0, 2) - r(2, 0)) / c;
    } else {
      d = 0.5 * std::sqrt(zd);
      b = 0.25 * (r(0, 2) + r(2, 0)) / d;
      c = 0.25 * (r(1, 2) + r(2, 1)) / d;
      a = 0.25 * (r(1, 0) - r(0, 1)) / d;
    }
    if (a < 0.0) {
      b = -b;
      c = -c;
      d = -d;
    }
  }
  return {b, c, d};
}

}  // namespace detail

// Decoded payload: geometry of the spatial grid, number of vector components
// (dim[5]) and the scaled values in file order.
struct Payload {
  GridGeometry geometry;
  int components = 1;
  std::int16_t intent_code = 0;
  std::vector<double> values;
};

inline Payload read_payload(const std::filesystem::path& path, bool allow_vector) {
  if (!std::filesystem::exists(path))
    throw Error(ErrorCode::IO, "no such file: " + path.string());
  detail::GzHandle f(gzopen(path.c_str(), "rb"));
  if (!f) throw Error(ErrorCode::IO, "cannot open " + path.string());

  Header h{};
  if (gzread(f.get(), &h, sizeof(Header)) != static_cast<int>(sizeof(Header)))
    throw Error(ErrorCode::Format, "truncated header in " + path.string());
  bool swapped = false;
  if (h.sizeof_hdr != 348) {
    detail::swap_header(h);
    swapped = true;
    if (h.sizeof_hdr != 348) throw Error(ErrorCode::Format, "not a NIfTI-1 file: " + path.string());
  }
  if (std::memcmp(h.magic, "n+1", 4) != 0)
    throw Error(ErrorCode::Format, "unsupported NIfTI magic (single-file n+1 required)");
  const int ndim = h.dim[0];
  if (ndim < 1 || ndim > 7) throw Error(ErrorCode::Format, "invalid dim[0]");
  for (int a = 1; a <= ndim; ++a)
    if (h.dim[a] < 1) throw Error(ErrorCode::Format, "invalid dimension size");

  Payload out;
  out.intent_code = h.intent_code;
  for (int a = 0; a < 3; ++a) out.geometry.dims[a] = (a + 1 <= ndim) ? h.dim[a + 1] : 1;
  const int time = ndim >= 4 ? h.dim[4] : 1;
  const int comps = ndim >= 5 ? h.dim[5] : 1;
  for (int a = 6; a <= ndim; ++a)
    if (h.dim[a] != 1) throw Error(ErrorCode::UnsupportedShape, "payload beyond 5 dimensions");
  if (time != 1) throw Error(ErrorCode::UnsupportedShape, "4D (time series) payload");
  if (comps != 1) {
    if (!allow_vector || comps != 3)
      throw Error(ErrorCode::UnsupportedShape, "vector payload where a scalar volume is expected");
  }
  out.components = comps;

  const int bpv = detail::bytes_per_voxel(h.datatype);
  if (bpv == 0) throw Error(ErrorCode::Format, "unsupported datatype " + std::to_string(h.datatype));

  // Orientation: sform, then qform, then bare pixdim.
  if (h.sform_code > 0) {
    Mat3 m;
    m << h.srow_x[0], h.srow_x[1], h.srow_x[2], h.srow_y[0], h.srow_y[1], h.srow_y[2],
        h.srow_z[0], h.srow_z[1], h.srow_z[2];
    detail::split_affine(m, out.geometry);
    out.geometry.origin = Vec3(h.srow_x[3], h.srow_y[3], h.srow_z[3]);
  } else if (h.qform_code > 0) {
    Mat3 r = detail::quaternion_to_rotation(h.quatern_b, h.quatern_c, h.quatern_d);
    const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
    r.col(2) *= qfac;
    out.geometry.direction = r;
    for (int a = 0; a < 3; ++a)
      out.geometry.spacing[a] = h.pixdim[a + 1] > 0 ? h.pixdim[a + 1] : 1.0;
    out.geometry.origin = Vec3(h.qoffset_x, h.qoffset_y, h.qoffset_z);
  } else {
    for (int a = 0; a < 3; ++a)
      out.geometry.spacing[a] = h.pixdim[a + 1] > 0 ? h.pixdim[a + 1] : 1.0;
  }
  try {
    out.geometry.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::Format, e.what());
  }

  const auto offset = static_cast<long>(h.vox_offset);
  if (offset < 348) throw Error(ErrorCode::Format, "vox_offset inside header");
  if (gzseek(f.get(), offset, SEEK_SET) != offset)
    throw Error(ErrorCode::Format, "cannot seek to voxel data");

  const std::size_t n = out.geometry.voxel_count() * static_cast<std::size_t>(comps);
  std::vector<unsigned char> raw(n * bpv);
  std::size_t got = 0;
  while (got < raw.size()) {
    const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(raw.size() - got, 1u << 30));
    const int r = gzread(f.get(), raw.data() + got, chunk);
    if (r <= 0) throw Error(ErrorCode::Format, "truncated voxel data in " + path.string());
    got += static_cast<std::size_t>(r);
  }

  const bool scaled = h.scl_slope != 0.0f && std::isfinite(h.scl_slope);
  const double slope = scaled ? h.scl_slope : 1.0;
  const double inter = scaled && std::isfinite(h.scl_inter) ? h.scl_inter : 0.0;
  out.values.resize(n);
  auto decode = [&]<typename T>(T) {
    for (std::size_t i = 0; i < n; ++i) {
      T v;
      std::memcpy(&v, raw.data() + i * sizeof(T), sizeof(T));
      if (swapped) detail::swap_bytes(v);
      out.values[i] = static_cast<double>(v) * slope + inter;
    }
  };
  switch (h.datatype) {
    case kUInt8: decode(std::uint8_t{}); break;
    case kInt8: decode(std::int8_t{}); break;
    case kInt16: decode(std::int16_t{}); break;
    case kUInt16: decode(std::uint16_t{}); break;
    case kInt32: decode(std::int32_t{}); break;
    case kUInt32: decode(std::uint32_t{}); break;
    case kFloat32: decode(float{}); break;
    case kFloat64: decode(double{}); break;
    default: break;
  }
  return out;
}

inline Header make_header(const GridGeometry& g, std::int16_t datatype, int components) {
  Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = components > 1 ? 5 : 3;
  for (int a = 0; a < 3; ++a) h.dim[a + 1] = static_cast<std::int16_t>(g.dims[a]);
  for (int a = 4; a < 8; ++a) h.dim[a] = 1;
  if (components > 1) {
    h.dim[5] = static_cast<std::int16_t>(components);
    h.intent_code = kIntentVector;
  }
  h.datatype = datatype;
  h.bitpix = static_cast<std::int16_t>(8 * detail::bytes_per_voxel(datatype));
  for (int a = 0; a < 8; ++a) h.pixdim[a] = 1.0f;
  for (int a = 0; a < 3; ++a) h.pixdim[a + 1] = static_cast<float>(g.spacing[a]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  h.xyzt_units = 2;  // mm

  Mat3 r = g.direction;
  double qfac = 1.0;
  if (r.determinant() < 0) {
    qfac = -1.0;
    r.col(2) *= -1.0;
  }
  const auto q = detail::rotation_to_quaternion(r);
  h.pixdim[0] = static_cast<float>(qfac);
  h.qform_code = 1;
  h.sform_code = 1;
  h.quatern_b = static_cast<float>(q[0]);
  h.quatern_c = static_cast<float>(q[1]);
  h.quatern_d = static_cast<float>(q[2]);
  h.qoffset_x = static_cast<float>(g.origin[0]);
  h.qoffset_y = static_cast<float>(g.origin[1]);
  h.qoffset_z = static_cast<float>(g.origin[2]);
  const Mat3 m = g.direction * g.spacing.asDiagonal();
  for (int c = 0; c < 3; ++c) {
    h.srow_x[c] = static_cast<float>(m(0, c));
    h.srow_y[c] = static_cast<float>(m(1, c));
    h.srow_z[c] = static_cast<float>(m(2, c));
  }
  h.srow_x[3] = static_cast<float>(g.origin[0]);
  h.srow_y[3] = static_cast<float>(g.origin[1]);
  h.srow_z[3] = static_cast<float>(g.origin[2]);
  std::memcpy(h.magic, "n+1", 4);
  return h;
}

template <typename T>
void write_payload(const std::filesystem::path& path, const GridGeometry& g, std::span<const T> values,
                   std::int16_t datatype, int components) {
  const Header h = make_header(g, datatype, components);
  const char ext[4] = {0, 0, 0, 0};
  const auto bytes = std::as_bytes(values);
  if (detail::is_gz_path(path)) {
    detail::GzHandle f(gzopen(path.c_str(), "wb6"));
    if (!f) throw Error(ErrorCode::IO, "cannot write " + path.string());
    bool ok = gzwrite(f.get(), &h, sizeof(h)) == static_cast<int>(sizeof(h)) &&
              gzwrite(f.get(), ext, 4) == 4;
    std::size_t done = 0;
    while (ok && done < bytes.size()) {
      const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
      ok = gzwrite(f.get(), bytes.data() + done, chunk) == static_cast<int>(chunk);
      done += chunk;
    }
    if (!ok || gzclose(f.release()) != Z_OK) throw Error(ErrorCode::IO, "write failed: " + path.string());
  } else {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(ErrorCode::IO, "cannot write " + path.string());
    os.write(reinterpret_cast<const char*>(&h), sizeof(h));
    os.write(ext, 4);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error(ErrorCode::IO, "write failed: " + path.string());
  }
}

}  // namespace ctatlas::nifti

namespace ctatlas {

// Reads a scalar NIfTI-1 volume as float HU (scl_slope/scl_inter applied).
inline ImageVolume read_volume(const std::filesystem::path& path) {
  auto p = nifti::read_payload(path, false);
  ImageVolume v = make_image(p.geometry);
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<float>(p.values[i]);
  v.validate();
  return v;
}

inline LabelVolume read_labels(const std::filesystem::path& path) {
  auto p = nifti::read_payload(path, false);
  LabelVolume v = make_labels(p.geometry);
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    const double x = p.values[i];
    if (x < 0 || x > 65535 || x != std::floor(x))
      throw Error(ErrorCode::Format, "label values must be non-negative integers");
    v.data[i] = static_cast<std::uint16_t>(x);
  }
  return v;
}

inline void write_volume(const ImageVolume& v, const std::filesystem::path& path) {
  nifti::write_payload<float>(path, v.geometry, v.data, nifti::kFloat32, 1);
}

inline void write_volume(const LabelVolume& v, const std::filesystem::path& path) {
  nifti::write_payload<std::uint16_t>(path, v.geometry, v.data, nifti::kUInt16, 1);
}

}  // namespace ctatlas
