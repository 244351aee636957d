#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <occloff/temporal.hpp>

#include <cmath>

using namespace occloff;
using Tape = ad::Tape<double>;

namespace {

FeatureVolume<double> fill_volume(Tape& tape, const VoxelGridSpec& grid, int dim, uint64_t seed) {
  FeatureVolume<double> vol;
  vol.grid = grid;
  Rng rng(seed);
  std::vector<double> vals(grid.num_voxels() * dim);
  for (auto& v : vals) v = rng.normal();
  vol.features = tape.constant({grid.num_voxels(), dim}, vals);
  vol.occupancy.assign(grid.num_voxels(), 0);
  return vol;
}

}  // namespace

TEST_CASE("align_volume") {
  Tape tape;
  VoxelGridSpec grid({6, 6, 3}, 1.0, Vec3(-3, -3, 0));
  auto vol = fill_volume(tape, grid, 4, 7);
  EgoPose id0(0, Mat4::Identity());

  SUBCASE("identity relative pose is an exact identity") {
    auto out = align_volume(tape, vol, id0, id0);
    for (ad::Index i = 0; i < vol.features->size(); ++i)
      CHECK(out.features->val[i] == vol.features->val[i]);
  }
  SUBCASE("one-voxel translation is an exact shift with zero fill") {
    Mat4 t = Mat4::Identity();
    t(1, 3) = 1.0;  // destination ego moved one voxel along w
    auto out = align_volume(tape, vol, id0, EgoPose(1, t));
    for (int h = 0; h < 6; ++h)
      for (int w = 0; w < 6; ++w)
        for (int z = 0; z < 3; ++z)
          for (int c = 0; c < 4; ++c) {
            double got = out.features->val[grid.flatten(h, w, z) * 4 + c];
            double want = w + 1 < 6 ? vol.features->val[grid.flatten(h, w + 1, z) * 4 + c] : 0.0;
            CHECK(got == want);
          }
  }
  SUBCASE("translation beyond the grid extent zeroes the volume") {
    Mat4 t = Mat4::Identity();
    t(0, 3) = 500.0;
    auto out = align_volume(tape, vol, id0, EgoPose(1, t));
    for (ad::Index i = 0; i < out.features->size(); ++i) CHECK(out.features->val[i] == 0.0);
  }
}

TEST_CASE("temporal fusion") {
  VoxelGridSpec grid({4, 4, 2}, 1.0, Vec3(-2, -2, 0));
  const int dim = 8;
  ParamStore<double> params(3);
  TemporalFuser<double> fuser(params, dim, 2);
  EgoPose id0(0, Mat4::Identity());

  SUBCASE("single frame equals the composed value projection") {
    Tape tape;
    auto vol = fill_volume(tape, grid, dim, 11);
    auto out = fuser.forward(tape, {vol}, {id0});
    // expected: sum over heads of (F Wv_h) Wo_h
    ad::Ptr<double> want;
    for (int m = 0; m < 2; ++m) {
      auto v = tape.linear(vol.features, params.get("temporal.v" + std::to_string(m) + ".w"),
                           nullptr);
      auto o = tape.linear(v, params.get("temporal.o" + std::to_string(m) + ".w"), nullptr);
      want = want ? tape.add(want, o) : o;
    }
    for (ad::Index i = 0; i < out.features->size(); ++i)
      CHECK(out.features->val[i] == doctest::Approx(want->val[i]).epsilon(1e-12));
  }

  SUBCASE("static ego with identical frames matches the single-frame output") {
    Tape tape;
    auto vol = fill_volume(tape, grid, dim, 13);
    auto vol2 = fill_volume(tape, grid, dim, 13);  // same values, different tensor
    auto multi = fuser.forward(tape, {vol2, vol2, vol}, {id0, id0, id0});
    auto single = fuser.forward(tape, {vol}, {id0});
    for (ad::Index i = 0; i < multi.features->size(); ++i)
      CHECK(multi.features->val[i] == doctest::Approx(single.features->val[i]).epsilon(1e-12));
  }

  SUBCASE("whole-voxel ego translation aligns past frames as exact shifts") {
    Tape tape;
    auto past = fill_volume(tape, grid, dim, 17);
    Mat4 t = Mat4::Identity();
    t(0, 3) = 1.0;
    EgoPose now(1, t);
    auto aligned = align_volume(tape, past, id0, now);
    for (int h = 0; h < 4; ++h)
      for (int w = 0; w < 4; ++w)
        for (int z = 0; z < 2; ++z)
          for (int c = 0; c < dim; ++c) {
            double got = aligned.features->val[grid.flatten(h, w, z) * dim + c];
            double want =
                h + 1 < 4 ? past.features->val[grid.flatten(h + 1, w, z) * dim + c] : 0.0;
            CHECK(got == want);
          }
  }
}

TEST_CASE("decoder") {
  VoxelGridSpec coarse({8, 8, 2}, 1.0, Vec3(-4, -4, 0));
  const int dim = 8;
  ParamStore<double> params(5);
  Decoder<double> dec(params, dim, 6, 8);

  SUBCASE("x2 upsampling doubles every grid dimension") {
    Tape tape;
    auto vol = fill_volume(tape, coarse, dim, 3);
    auto out = dec.forward(tape, vol, 2);
    CHECK(out.fine.grid.dims == std::array<int, 3>{16, 16, 4});
    CHECK(out.fine.grid.voxel_size == doctest::Approx(0.5));
    CHECK(out.logits->rows() == 16 * 16 * 4);
    CHECK(out.logits->cols() == 9);
    for (double v : out.logits->val) CHECK(std::isfinite(v));
  }

  SUBCASE("upsampling a constant field is constant before the convolutions") {
    Tape tape;
    auto table = build_upsample_table(coarse, 2);
    std::vector<double> cv(coarse.num_voxels() * 3, 0.0);
    for (int64_t v = 0; v < coarse.num_voxels(); ++v)
      for (int c = 0; c < 3; ++c) cv[v * 3 + c] = 1.5 + c;
    auto x = tape.constant({coarse.num_voxels(), 3}, cv);
    std::vector<ad::Index> idx(table.indices.begin(), table.indices.end());
    auto up = tape.gather_blend(x, idx, table.weights, 8);
    for (ad::Index r = 0; r < up->rows(); ++r)
      for (int c = 0; c < 3; ++c) CHECK(up->val[r * 3 + c] == doctest::Approx(1.5 + c).epsilon(1e-12));
  }

  SUBCASE("single-voxel impulse spreads with the analytic trilinear weights") {
    Tape tape;
    auto table = build_upsample_table(coarse, 2);
    std::vector<double> iv(coarse.num_voxels(), 0.0);
    int64_t src = coarse.flatten(4, 4, 1);
    iv[src] = 1.0;
    auto x = tape.constant({coarse.num_voxels(), 1}, iv);
    std::vector<ad::Index> idx(table.indices.begin(), table.indices.end());
    auto up = tape.gather_blend(x, idx, table.weights, 8);

    VoxelGridSpec fine({16, 16, 4}, 0.5, coarse.origin);
    int checked = 0;
    for (int h = 0; h < 16; ++h)
      for (int w = 0; w < 16; ++w)
        for (int z = 0; z < 4; ++z) {
          // analytic trilinear weight of the impulse source at this fine
          // voxel; border bands use clamped extension, so skip them here
          double g[3] = {(h + 0.5) / 2 - 0.5, (w + 0.5) / 2 - 0.5, (z + 0.5) / 2 - 0.5};
          if (g[0] < 0 || g[0] > 7 || g[1] < 0 || g[1] > 7 || g[2] < 0 || g[2] > 1) continue;
          int src_idx[3] = {4, 4, 1};
          double want = 1.0;
          for (int a = 0; a < 3; ++a) {
            double d = std::abs(g[a] - src_idx[a]);
            want *= std::max(0.0, 1.0 - d);
          }
          checked++;
          CHECK(up->val[fine.flatten(h, w, z)] == doctest::Approx(want).epsilon(1e-12));
        }
    CHECK(checked > 100);
  }
}
