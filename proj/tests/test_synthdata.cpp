#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <occloff/dataset.hpp>
#include <occloff/synthdata.hpp>

#include <filesystem>
#include <map>

using namespace occloff;

namespace {

SceneSpec small_spec(uint64_t seed) {
  SceneSpec spec;
  spec.seed = seed;
  spec.n_objects = 6;
  spec.sequence_length = 2;
  spec.lidar_rays = 512;
  spec.sweeps_per_frame = 2;
  spec.grid = VoxelGridSpec({32, 32, 8}, 1.0, Vec3(-16, -16, -0.5));
  spec.upsample_ratio = 2;
  spec.rig = make_ring_rig(2, 48, 36, 100.0, 1.5);
  return spec;
}

}  // namespace

TEST_CASE("generate_sequence is bitwise deterministic in the seed") {
  auto spec = small_spec(42);
  auto a = generate_sequence(spec);
  auto b = generate_sequence(spec);
  REQUIRE(a.size() == b.size());
  for (size_t t = 0; t < a.size(); ++t) {
    CHECK(a[t].gt.labels == b[t].gt.labels);
    REQUIRE(a[t].points.size() == b[t].points.size());
    for (size_t i = 0; i < a[t].points.size(); ++i) CHECK(a[t].points[i] == b[t].points[i]);
    for (size_t v = 0; v < a[t].images.size(); ++v) CHECK(a[t].images[v].chw == b[t].images[v].chw);
    CHECK(a[t].pose.transform == b[t].pose.transform);
  }
}

TEST_CASE("zero objects leave only ground and empty labels") {
  auto spec = small_spec(7);
  spec.n_objects = 0;
  auto samples = generate_sequence(spec);
  for (uint8_t lab : samples[0].gt.labels) CHECK((lab == 0 || lab == 1));
  // the bottom layer under the ego is ground
  CHECK(samples[0].gt.at(16, 16, 0) == 1);
}

TEST_CASE("impossible placement is rejected after bounded retries") {
  auto spec = small_spec(3);
  spec.grid = VoxelGridSpec({10, 10, 8}, 1.0, Vec3(-5, -5, -0.5));  // tiny placement area
  spec.n_objects = 200;
  CHECK_THROWS_AS(generate_sequence(spec), std::runtime_error);
}

TEST_CASE("label histogram over many seeds is long-tailed with rank order preserved") {
  std::vector<int64_t> counts(9, 0);
  for (uint64_t seed = 1; seed <= 1000; ++seed) {
    auto spec = small_spec(seed);
    spec.sequence_length = 1;
    spec.lidar_rays = 0;
    spec.n_objects = 20;
    spec.grid = VoxelGridSpec({32, 32, 4}, 1.0, Vec3(-16, -16, -0.5));
    spec.rig.clear();
    auto samples = generate_sequence(spec);
    for (uint8_t lab : samples[0].gt.labels) counts[lab]++;
  }
  // semantic categories follow the prior's rank order (1 ground-boosted)
  for (int c = 1; c < 8; ++c) {
    INFO("category ", c, ": ", counts[c], " vs ", counts[c + 1]);
    CHECK(counts[c] > counts[c + 1]);
  }
  CHECK(counts[8] > 0);  // rarest category still appears across the seeds
}

TEST_CASE("lidar sampling") {
  Rng rng(5);
  EgoPose pose(0, Mat4::Identity());

  SUBCASE("no surfaces produce no points") {
    SceneWorld empty;
    empty.has_ground = false;
    CHECK(sample_lidar(empty, pose, 256, 1.5, rng).empty());
  }
  SUBCASE("n_rays = 0 produces no points") {
    SceneWorld world;
    CHECK(sample_lidar(world, pose, 0, 1.5, rng).empty());
  }
  SUBCASE("a single wall is hit at its analytic intersection") {
    SceneWorld world;
    world.has_ground = false;
    Primitive wall;
    wall.kind = Primitive::Kind::kBox;
    wall.category = 2;
    wall.center = Vec3(10.0 + 0.5, 0.0, 0.0);
    wall.half_extents = Vec3(0.5, 50.0, 50.0);  // face toward the sensor at x = 10
    world.objects.push_back(wall);
    auto pts = sample_lidar(world, pose, 512, 1.5, rng);
    REQUIRE(!pts.empty());
    for (const auto& p : pts) {
      if (p.x() < 0.0) continue;  // rays leaving backwards never hit
      CHECK(std::abs(p.x() - 10.0) < 4 * 0.02 + 1e-9);
    }
  }
}

TEST_CASE("rendering") {
  Rng rng(11);
  EgoPose pose(0, Mat4::Identity());
  auto rig = make_ring_rig(1, 48, 36, 100.0, 1.5);

  SUBCASE("empty scene renders the background color") {
    SceneWorld world;
    world.has_ground = false;
    auto images = render_views(world, rig, pose, 1.5, rng);
    auto bg = category_color(0);
    for (int c = 0; c < 3; ++c) {
      double mean = 0;
      for (int y = 0; y < 36; ++y)
        for (int x = 0; x < 48; ++x) mean += images[0].at(c, y, x) / 255.0;
      mean /= 48 * 36;
      CHECK(std::abs(mean - bg[c]) < 0.01);
    }
  }
  SUBCASE("a box filling the view dominates it with its category color") {
    SceneWorld world;
    world.has_ground = false;
    Primitive box;
    box.category = 3;
    box.center = Vec3(3.0, 0.0, 1.5);
    box.half_extents = Vec3(0.5, 20.0, 20.0);
    world.objects.push_back(box);
    auto images = render_views(world, rig, pose, 1.5, rng);
    auto color = category_color(3);
    for (int c = 0; c < 3; ++c) {
      double mean = 0;
      for (int y = 0; y < 36; ++y)
        for (int x = 0; x < 48; ++x) mean += images[0].at(c, y, x) / 255.0;
      mean /= 48 * 36;
      CHECK(std::abs(mean - color[c]) < 0.02);
    }
  }
  SUBCASE("a primitive fully behind another contributes no pixels") {
    SceneWorld world;
    world.has_ground = false;
    Primitive near_box;
    near_box.category = 2;  // red
    near_box.center = Vec3(4.0, 0.0, 1.5);
    near_box.half_extents = Vec3(0.5, 30.0, 30.0);
    Primitive far_box;
    far_box.category = 3;  // blue
    far_box.center = Vec3(8.0, 0.0, 1.5);
    far_box.half_extents = Vec3(0.5, 2.0, 2.0);
    world.objects = {near_box, far_box};
    auto images = render_views(world, rig, pose, 1.5, rng);
    auto far_color = category_color(3);
    for (int y = 0; y < 36; ++y)
      for (int x = 0; x < 48; ++x) {
        double d = 0;
        for (int c = 0; c < 3; ++c) {
          double diff = images[0].at(c, y, x) / 255.0 - far_color[c];
          d += diff * diff;
        }
        CHECK(std::sqrt(d) > 0.3);  // never anywhere near the occluded color
      }
  }
}

TEST_CASE("ray points voxelize into non-empty gt voxels within one voxel") {
  auto spec = small_spec(19);
  auto samples = generate_sequence(spec);
  for (const auto& s : samples) {
    for (const auto& p : s.points) {
      auto v = spec.grid.voxel_of(p);
      if (!v) continue;  // outside the grid
      bool ok = false;
      for (int dh = -1; dh <= 1 && !ok; ++dh)
        for (int dw = -1; dw <= 1 && !ok; ++dw)
          for (int dz = -1; dz <= 1 && !ok; ++dz) {
            int h = (*v)[0] + dh, w = (*v)[1] + dw, z = (*v)[2] + dz;
            if (spec.grid.in_range(h, w, z) && s.gt.at(h, w, z) != 0) ok = true;
          }
      CHECK(ok);
    }
  }
}

TEST_CASE("static scene: previous-frame points align with the current gt") {
  auto spec = small_spec(23);
  auto samples = generate_sequence(spec);
  REQUIRE(samples.size() == 2);
  Mat4 prev_to_cur = inverse_rigid(samples[1].pose.transform) * samples[0].pose.transform;
  int outside = 0;
  for (const auto& p : samples[0].points) {
    Vec3 q = transform_point(prev_to_cur, p);
    auto v = spec.grid.voxel_of(q);
    if (!v) {
      outside++;
      continue;
    }
    bool ok = false;
    for (int dh = -1; dh <= 1 && !ok; ++dh)
      for (int dw = -1; dw <= 1 && !ok; ++dw)
        for (int dz = -1; dz <= 1 && !ok; ++dz) {
          int h = (*v)[0] + dh, w = (*v)[1] + dw, z = (*v)[2] + dz;
          if (spec.grid.in_range(h, w, z) && samples[1].gt.at(h, w, z) != 0) ok = true;
        }
    CHECK(ok);
  }
  CHECK(outside < static_cast<int>(samples[0].points.size()));
}

TEST_CASE("coarse label downsampling prefers the majority non-empty label") {
  OccupancyGrid fine;
  fine.grid = VoxelGridSpec({2, 2, 2}, 0.5, Vec3::Zero());
  fine.labels = {0, 0, 0, 0, 0, 2, 3, 3};  // block of 8 -> one coarse voxel
  auto coarse = downsample_labels(fine, 2);
  REQUIRE(coarse.size() == 1);
  CHECK(coarse[0] == 3);  // two 3s beat one 2; zeros never win over non-empty

  fine.labels = {0, 0, 0, 0, 0, 0, 0, 0};
  CHECK(downsample_labels(fine, 2)[0] == 0);
}

TEST_CASE("dataset round trip through the manifest and raw arrays") {
  auto spec = small_spec(31);
  auto samples = generate_sequence(spec);

  auto dir = std::filesystem::temp_directory_path() / "occloff_test_ds";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);

  DatasetManifest manifest;
  manifest.spec = spec;
  SequenceMeta meta;
  write_sequence(dir, "seq_000", samples, spec, meta);
  manifest.sequences.push_back(meta);
  write_manifest(dir, manifest);

  DatasetReader reader(dir);
  REQUIRE(reader.num_sequences() == 1);
  const auto& loaded = reader.sequence(0);
  REQUIRE(loaded.size() == samples.size());
  for (size_t t = 0; t < samples.size(); ++t) {
    CHECK(loaded[t].gt.labels == samples[t].gt.labels);
    for (size_t v = 0; v < samples[t].images.size(); ++v)
      CHECK(loaded[t].images[v].chw == samples[t].images[v].chw);
    REQUIRE(loaded[t].points.size() == samples[t].points.size());
    for (size_t i = 0; i < samples[t].points.size(); ++i)
      for (int a = 0; a < 3; ++a)
        CHECK(loaded[t].points[i][a] ==
              doctest::Approx(samples[t].points[i][a]).epsilon(1e-6));
    CHECK((loaded[t].pose.transform - samples[t].pose.transform).cwiseAbs().maxCoeff() == 0.0);
  }
  std::filesystem::remove_all(dir);
}
