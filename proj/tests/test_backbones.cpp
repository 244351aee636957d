#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <occloff/backbones.hpp>

#include <algorithm>

using namespace occloff;
using Tape = ad::Tape<double>;

namespace {

ImageU8 flat_image(int w, int h, uint8_t value) {
  ImageU8 img;
  img.width = w;
  img.height = h;
  img.chw.assign(static_cast<size_t>(3) * w * h, value);
  return img;
}

VoxelGridSpec small_grid() { return VoxelGridSpec({16, 16, 4}, 1.0, Vec3(-8, -8, 0)); }

}  // namespace

TEST_CASE("pyramid level shapes follow the ceil-halving recurrence") {
  ParamStore<double> params(1);
  ImageEncoder<double> enc(params, 32);
  Tape tape;
  auto pyr = enc.forward(tape, {flat_image(160, 120, 100)});
  REQUIRE(pyr.levels() == 3);
  CHECK(pyr.views[0][0].width == 80);
  CHECK(pyr.views[0][0].height == 60);
  CHECK(pyr.views[0][1].width == 40);
  CHECK(pyr.views[0][1].height == 30);
  CHECK(pyr.views[0][2].width == 20);
  CHECK(pyr.views[0][2].height == 15);
  for (int l = 0; l < 3; ++l) CHECK(pyr.views[0][l].map->cols() == 32);

  // odd sizes keep halving with ceil
  auto pyr2 = enc.forward(tape, {flat_image(37, 23, 0)});
  CHECK(pyr2.views[0][0].width == 19);
  CHECK(pyr2.views[0][0].height == 12);
  CHECK(pyr2.views[0][1].width == 10);
  CHECK(pyr2.views[0][1].height == 6);
  CHECK(pyr2.views[0][2].width == 5);
  CHECK(pyr2.views[0][2].height == 3);
}

TEST_CASE("zero image with zero parameters yields zero features") {
  ParamStore<double> params(1);
  ImageEncoder<double> enc(params, 16);
  for (size_t i = 0; i < params.count(); ++i)
    std::fill(params.tensor(i)->val.begin(), params.tensor(i)->val.end(), 0.0);
  Tape tape;
  auto pyr = enc.forward(tape, {flat_image(32, 16, 0)});
  for (const auto& lvl : pyr.views[0])
    for (double v : lvl.map->val) CHECK(v == 0.0);
}

TEST_CASE("doubling brightness changes the features") {
  ParamStore<double> params(3);
  ImageEncoder<double> enc(params, 16);
  Tape tape;
  auto a = enc.forward(tape, {flat_image(32, 16, 60)});
  auto b = enc.forward(tape, {flat_image(32, 16, 120)});
  double diff = 0;
  for (ad::Index i = 0; i < a.views[0][0].map->size(); ++i)
    diff = std::max(diff, std::abs(a.views[0][0].map->val[i] - b.views[0][0].map->val[i]));
  CHECK(diff > 1e-6);
}

TEST_CASE("voxel point stats: single point at the center") {
  Vec3 center(0.5, 0.5, 0.5);
  auto stats = voxel_point_stats({center}, center);
  CHECK(stats[0] == 1.0);
  CHECK(stats[1] == 0.0);
  CHECK(stats[2] == 0.0);
  CHECK(stats[3] == 0.0);
  CHECK(stats[4] == doctest::Approx(0.5));
}

TEST_CASE("lidar encoder: empty cloud keeps the empty embedding everywhere") {
  ParamStore<double> params(1);
  LidarEncoder<double> enc(params, 8);
  Tape tape;
  auto grid = small_grid();
  auto vol = enc.forward(tape, bucket_points({}, grid), grid);
  auto empty = params.get("lidar_enc.empty");
  for (int64_t v = 0; v < grid.num_voxels(); ++v) {
    CHECK_FALSE(vol.occupancy[v]);
    for (int c = 0; c < 8; ++c) CHECK(vol.features->val[v * 8 + c] == empty->val[c]);
  }
}

TEST_CASE("lidar encoder is permutation invariant in point order") {
  ParamStore<double> params(5);
  LidarEncoder<double> enc(params, 8);
  auto grid = small_grid();
  Rng rng(17);
  std::vector<Vec3> pts;
  for (int i = 0; i < 200; ++i)
    pts.emplace_back(rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(0, 4));
  auto shuffled = pts;
  for (size_t i = shuffled.size(); i > 1; --i)
    std::swap(shuffled[i - 1], shuffled[rng.uniform_index(i)]);

  Tape tape;
  auto a = enc.forward(tape, bucket_points(pts, grid), grid);
  auto b = enc.forward(tape, bucket_points(shuffled, grid), grid);
  REQUIRE(a.features->size() == b.features->size());
  for (ad::Index i = 0; i < a.features->size(); ++i)
    CHECK(a.features->val[i] == b.features->val[i]);  // bitwise
}

TEST_CASE("submanifold property: inactive voxels keep the empty embedding") {
  ParamStore<double> params(2);
  LidarEncoder<double> enc(params, 8);
  auto grid = small_grid();
  std::vector<Vec3> pts = {Vec3(0.5, 0.5, 0.5), Vec3(0.6, 0.4, 0.7), Vec3(-3.5, 2.5, 1.5)};
  Tape tape;
  auto vol = enc.forward(tape, bucket_points(pts, grid), grid);
  auto empty = params.get("lidar_enc.empty");
  int occupied = 0;
  for (int64_t v = 0; v < grid.num_voxels(); ++v) {
    if (vol.occupancy[v]) {
      occupied++;
      continue;
    }
    for (int c = 0; c < 8; ++c) CHECK(vol.features->val[v * 8 + c] == empty->val[c]);
  }
  CHECK(occupied == 2);
}

TEST_CASE("two stacked sparse convolutions: influence iff within the 5-wide window") {
  // active chain along h at w=8, z=1: h = 4,5,6,7 (plus the perturbed site)
  ParamStore<double> params(11);
  LidarEncoder<double> enc(params, 8);
  auto grid = small_grid();

  auto make_points = [&](double perturb) {
    std::vector<Vec3> pts;
    for (int h = 4; h <= 7; ++h) {
      Vec3 c = voxel_center(grid, h, 8, 1);
      pts.push_back(c + Vec3(0.1, 0.0, 0.0));
      if (h == 4) pts.push_back(c + Vec3(perturb, perturb, 0.0));
    }
    return pts;
  };

  Tape tape;
  auto base = enc.forward(tape, bucket_points(make_points(0.05), grid), grid);
  auto poked = enc.forward(tape, bucket_points(make_points(0.25), grid), grid);

  auto row_diff = [&](int h) {
    int64_t idx = grid.flatten(h, 8, 1);
    double d = 0;
    for (int c = 0; c < 8; ++c)
      d = std::max(d, std::abs(base.features->val[idx * 8 + c] - poked.features->val[idx * 8 + c]));
    return d;
  };

  CHECK(row_diff(4) > 1e-9);   // the perturbed site itself
  CHECK(row_diff(5) > 1e-9);   // one hop
  CHECK(row_diff(6) > 1e-9);   // two hops: edge of the 5x5x5 receptive field
  CHECK(row_diff(7) == 0.0);   // three hops: outside it
}

TEST_CASE("no influence across an inactive gap") {
  // clusters at h=4 and h=6 with h=5 empty: the 5-wide window covers the gap
  // but submanifold convolutions never write the gap, so nothing propagates
  ParamStore<double> params(13);
  LidarEncoder<double> enc(params, 8);
  auto grid = small_grid();

  auto make_points = [&](double perturb) {
    std::vector<Vec3> pts;
    pts.push_back(voxel_center(grid, 4, 8, 1) + Vec3(perturb, 0.0, 0.0));
    pts.push_back(voxel_center(grid, 6, 8, 1) + Vec3(0.1, 0.0, 0.0));
    return pts;
  };

  Tape tape;
  auto base = enc.forward(tape, bucket_points(make_points(0.05), grid), grid);
  auto poked = enc.forward(tape, bucket_points(make_points(0.3), grid), grid);
  int64_t far_idx = grid.flatten(6, 8, 1);
  for (int c = 0; c < 8; ++c)
    CHECK(base.features->val[far_idx * 8 + c] == poked.features->val[far_idx * 8 + c]);
}
