#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "ctatlas/fov_crop.hpp"

using namespace ctatlas;
namespace fs = std::filesystem;

namespace {

SliceScoreTrack linear_track(int n, double first, double step) {
  SliceScoreTrack t;
  for (int k = 0; k < n; ++k) t.scores.push_back(first + step * k);
  return t;
}

ImageVolume indexed_volume(int nz) {
  ImageVolume v = make_image(centered_grid({3, 2, nz}, 1.5));
  for (std::size_t i = 0; i < v.size(); ++i) v.data[i] = static_cast<float>(i);
  return v;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ctatlas_test_crop";
  fs::create_directories(dir);
  return dir / name;
}

void expect_code(ErrorCode code, const std::function<void()>& f) {
  try {
    f();
    ADD_FAILURE() << "no error thrown";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

// Torso with air-filled lungs in the superior slices and dense bone in the
// inferior ones; canonical orientation puts the head at high k.
ImageVolume torso(int nz) {
  ImageVolume v = make_image(centered_grid({40, 40, nz}, 2.0));
  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < 40; ++j)
      for (int i = 0; i < 40; ++i) {
        const double x = (i - 19.5) / 16.0, y = (j - 19.5) / 13.0;
        if (x * x + y * y > 1.0) continue;
        float hu = 40.0f;
        const bool lung = k >= 2 * nz / 3 && std::abs(std::abs(i - 19.5) - 8) < 5 && std::abs(j - 19.5) < 7;
        const bool bone = k < nz / 4 && std::abs(std::abs(i - 19.5) - 9) < 4 && j < 20 && j > 10;
        if (lung) hu = -850.0f;
        if (bone) hu = 700.0f;
        v.at(i, j, k) = hu;
      }
  return v;
}

}  // namespace

TEST(Scores, SidecarRoundTripAndLength) {
  const ImageVolume v = indexed_volume(434);
  save_scores(linear_track(434, -12, 24.0 / 433), scratch("a.bpr.json"));
  EXPECT_EQ(load_scores(scratch("a.bpr.json"), v).scores.size(), 434u);
  EXPECT_EQ(load_scores(scratch("a.bpr.json"), v).source, SliceScoreTrack::Source::Sidecar);
}

TEST(Scores, CountMismatchIsShapeError) {
  const ImageVolume v = indexed_volume(434);
  save_scores(linear_track(400, -12, 0.05), scratch("b.bpr.json"));
  expect_code(ErrorCode::Shape, [&] { load_scores(scratch("b.bpr.json"), v); });
}

TEST(Scores, OutOfRangeIsValidationError) {
  SliceScoreTrack t = linear_track(5, 0, 1);
  t.scores[2] = 14.2;
  save_scores(t, scratch("c.bpr.json"));
  expect_code(ErrorCode::Validation, [&] { load_scores(scratch("c.bpr.json"), 5); });
}

TEST(Scores, SidecarNaming) {
  EXPECT_EQ(volume_stem("/x/sub-01.nii.gz"), "sub-01");
  EXPECT_EQ(volume_stem("sub-02.nii"), "sub-02");
  EXPECT_EQ(sidecar_path_for("/x/sub-01.nii.gz"), fs::path("/x/sub-01.bpr.json"));
}

TEST(Estimate, LungToPelvisOrdering) {
  const int nz = 48;
  const SliceScoreTrack t = estimate_scores(torso(nz));
  ASSERT_EQ(static_cast<int>(t.scores.size()), nz);
  EXPECT_EQ(t.source, SliceScoreTrack::Source::Heuristic);
  EXPECT_FALSE(t.insufficient_anatomy);
  for (int k = 1; k < nz; ++k) EXPECT_LE(t.scores[k], t.scores[k - 1]);
  // Lung slices (high k) score below the pelvic ones (low k).
  EXPECT_LT(t.scores[nz - 1], t.scores[0]);
  EXPECT_LT(t.scores[2 * nz / 3 + 2], t.scores[nz / 4 - 2]);
  for (double s : t.scores) {
    EXPECT_GE(s, kScoreMin);
    EXPECT_LE(s, kScoreMax);
  }
}

TEST(Estimate, AllAirFallsBackToRamp) {
  const SliceScoreTrack t = estimate_scores(make_image(centered_grid({8, 8, 10}, 1.0), kAirHU));
  EXPECT_TRUE(t.insufficient_anatomy);
  for (std::size_t k = 1; k < t.scores.size(); ++k) EXPECT_LT(t.scores[k], t.scores[k - 1]);
}

TEST(Estimate, TooFewSlices) {
  expect_code(ErrorCode::InsufficientExtent, [] { estimate_scores(make_image(centered_grid({8, 8, 2}, 1.0))); });
}

TEST(Crop, TwentyFiveSliceTrack) {
  const ImageVolume v = indexed_volume(25);
  const SliceScoreTrack t = linear_track(25, -12, 1);
  const auto c = crop_by_score(v, t, -6, 5);
  EXPECT_EQ(c.record.first_slice, 6);
  EXPECT_EQ(c.record.last_slice, 17);
  EXPECT_EQ(c.record.slice_count(), 12);
  EXPECT_EQ(c.volume.dims()[2], 12);
  EXPECT_EQ(c.volume.at(0, 0, 0), v.at(0, 0, 6));
  EXPECT_EQ(c.volume.at(2, 1, 11), v.at(2, 1, 17));
}

TEST(Crop, AllInRangeIsIdentity) {
  const ImageVolume v = indexed_volume(9);
  const auto c = crop_by_score(v, linear_track(9, -4, 1), -6, 5);
  EXPECT_EQ(c.volume.data, v.data);
  EXPECT_TRUE(c.volume.geometry.same_as(v.geometry));
  EXPECT_EQ(c.record.first_slice, 0);
  EXPECT_EQ(c.record.last_slice, 8);
}

TEST(Crop, NothingInRange) {
  const ImageVolume v = indexed_volume(6);
  expect_code(ErrorCode::EmptyCrop, [&] { crop_by_score(v, linear_track(6, 6, 1), -6, 5); });
}

TEST(Crop, LongestRunWinsEarlierOnTie) {
  SliceScoreTrack t;
  t.scores = {0, 0, 9, 0, 0, 0, 9, 0, 0, 0};
  const CropRecord r = select_slices(t, -1, 1);
  EXPECT_EQ(r.first_slice, 3);
  EXPECT_EQ(r.last_slice, 5);
  t.scores = {0, 0, 9, 0, 0, 9};
  EXPECT_EQ(select_slices(t, -1, 1).first_slice, 0);
}

class CropProperty : public ::testing::TestWithParam<int> {};

TEST_P(CropProperty, IdempotentBoundedAndWorldPreserving) {
  std::mt19937 rng(static_cast<std::uint32_t>(GetParam()));
  const int n = std::uniform_int_distribution<int>(5, 60)(rng);
  const double step = std::uniform_real_distribution<double>(0.2, 1.5)(rng) *
                      (std::bernoulli_distribution(0.5)(rng) ? 1.0 : -1.0);
  const double first = std::clamp(std::uniform_real_distribution<double>(-12, 12)(rng), -12.0, 12.0);
  SliceScoreTrack t;
  for (int k = 0; k < n; ++k) t.scores.push_back(std::clamp(first + step * k, -12.0, 12.0));
  const double lo = std::uniform_real_distribution<double>(-12, 10)(rng);
  const double hi = lo + std::uniform_real_distribution<double>(0.5, 10)(rng);
  const ImageVolume v = indexed_volume(n);
  Cropped<float> c;
  try {
    c = crop_by_score(v, t, lo, hi);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyCrop);
    for (double s : t.scores) EXPECT_TRUE(s < lo || s > hi);
    return;
  }
  const auto& r = c.record;
  for (int k = r.first_slice; k <= r.last_slice; ++k) {
    EXPECT_GE(t.scores[k], lo);
    EXPECT_LE(t.scores[k], hi);
  }
  if (r.first_slice > 0) EXPECT_TRUE(t.scores[r.first_slice - 1] < lo || t.scores[r.first_slice - 1] > hi);
  if (r.last_slice < n - 1) EXPECT_TRUE(t.scores[r.last_slice + 1] < lo || t.scores[r.last_slice + 1] > hi);
  for (int k = 0; k < c.volume.dims()[2]; ++k) {
    const Vec3 a = c.volume.geometry.voxel_to_world(Vec3(1, 1, k));
    const Vec3 b = v.geometry.voxel_to_world(Vec3(1, 1, k + r.first_slice));
    EXPECT_LT((a - b).norm(), 1e-6);
  }
  const auto again = crop_by_score(c.volume, crop_track(t, r), lo, hi);
  EXPECT_EQ(again.volume.data, c.volume.data);
  EXPECT_TRUE(again.volume.geometry.same_as(c.volume.geometry));
}

INSTANTIATE_TEST_SUITE_P(RandomTracks, CropProperty, ::testing::Range(1, 41));
