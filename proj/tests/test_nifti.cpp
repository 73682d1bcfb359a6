#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "ctatlas/field.hpp"
#include "ctatlas/nifti.hpp"

using namespace ctatlas;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ctatlas_test_nifti";
  fs::create_directories(dir);
  return dir / name;
}

template <typename T>
void write_raw(const fs::path& path, const nifti::Header& h, const std::vector<T>& values) {
  std::ofstream os(path, std::ios::binary);
  os.write(reinterpret_cast<const char*>(&h), sizeof h);
  const char ext[4] = {0, 0, 0, 0};
  os.write(ext, 4);
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)));
}

}  // namespace

TEST(Nifti, RoundTripIsBitExact) {
  GridGeometry g;
  g.dims = {7, 5, 4};
  g.spacing = Vec3(0.8, 0.9, 2.5);
  g.origin = Vec3(-12.5, 33.0, 7.25);
  ImageVolume v = make_image(g);
  std::mt19937 rng(1);
  std::normal_distribution<float> n(0.0f, 400.0f);
  for (auto& x : v.data) x = n(rng);
  for (const char* name : {"rt.nii", "rt.nii.gz"}) {
    write_volume(v, scratch(name));
    const ImageVolume r = read_volume(scratch(name));
    EXPECT_EQ(r.data, v.data);
    EXPECT_TRUE(r.geometry.same_as(v.geometry, 1e-6));
  }
}

TEST(Nifti, RoundTripKeepsOrientation) {
  GridGeometry g = centered_grid({3, 4, 5}, 1.0);
  g.direction << 0, 1, 0, -1, 0, 0, 0, 0, 1;
  g.origin = Vec3(1, 2, 3);
  write_volume(make_image(g, 5.0f), scratch("orient.nii.gz"));
  EXPECT_TRUE(read_volume(scratch("orient.nii.gz")).geometry.same_as(g, 1e-6));
}

TEST(Nifti, ConstantZeroVolume) {
  const ImageVolume v = make_image(centered_grid({64, 64, 64}, 1.0), 0.0f);
  write_volume(v, scratch("zero.nii.gz"));
  const ImageVolume r = read_volume(scratch("zero.nii.gz"));
  ASSERT_EQ(r.size(), v.size());
  for (float x : r.data) ASSERT_EQ(x, 0.0f);
}

TEST(Nifti, LabelRoundTripPreservesSet) {
  LabelVolume l = make_labels(centered_grid({6, 6, 6}, 1.0));
  for (std::size_t i = 0; i < l.size(); ++i) l.data[i] = std::array<std::uint16_t, 3>{0, 1, 13}[i % 3];
  write_volume(l, scratch("labels.nii.gz"));
  const LabelVolume r = read_labels(scratch("labels.nii.gz"));
  EXPECT_EQ(r.data, l.data);
  EXPECT_EQ(std::set<std::uint16_t>(r.data.begin(), r.data.end()), (std::set<std::uint16_t>{0, 1, 13}));
}

TEST(Nifti, ScaleAndIntercept) {
  GridGeometry g;
  g.dims = {2, 1, 1};
  nifti::Header h = nifti::make_header(g, nifti::kInt16, 1);
  h.scl_slope = 2.0f;
  h.scl_inter = -1024.0f;
  write_raw<std::int16_t>(scratch("scaled.nii"), h, {600, 0});
  const ImageVolume v = read_volume(scratch("scaled.nii"));
  EXPECT_FLOAT_EQ(v.data[0], 176.0f);
  EXPECT_FLOAT_EQ(v.data[1], -1024.0f);
}

TEST(Nifti, FourDimensionalPayloadRejected) {
  GridGeometry g;
  g.dims = {2, 2, 2};
  nifti::Header h = nifti::make_header(g, nifti::kFloat32, 1);
  h.dim[0] = 4;
  h.dim[4] = 3;
  write_raw<float>(scratch("four_d.nii"), h, std::vector<float>(24, 1.0f));
  try {
    read_volume(scratch("four_d.nii"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnsupportedShape);
  }
}

TEST(Nifti, MalformedHeaderIsFormatError) {
  std::ofstream(scratch("junk.nii"), std::ios::binary) << std::string(400, 'x');
  try {
    read_volume(scratch("junk.nii"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Format);
  }
}

TEST(Nifti, UnwritablePathIsIoError) {
  const ImageVolume v = make_image(centered_grid({2, 2, 2}, 1.0));
  try {
    write_volume(v, "/nonexistent_dir_xyz/out.nii.gz");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IO);
  }
}

TEST(Nifti, FieldRoundTrip) {
  DisplacementField f(centered_grid({4, 3, 5}, 2.0));
  std::mt19937 rng(2);
  std::uniform_real_distribution<float> u(-3, 3);
  for (auto& x : f.vectors) x = u(rng);
  write_field(f, scratch("field.nii.gz"));
  const DisplacementField r = read_field(scratch("field.nii.gz"));
  EXPECT_EQ(r.vectors, f.vectors);
  EXPECT_TRUE(r.geometry.same_as(f.geometry, 1e-6));
  EXPECT_THROW(read_volume(scratch("field.nii.gz")), Error);
}
