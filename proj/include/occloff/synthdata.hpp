#pragma once

#include <occloff/geometry.hpp>
#include <occloff/rng.hpp>
#include <occloff/scene.hpp>

#include <array>
#include <cstdint>
#include <vector>

namespace occloff {

/// Dense semantic occupancy labels over a voxel grid; label 0 = empty.
struct OccupancyGrid {
  VoxelGridSpec grid;
  std::vector<uint8_t> labels;  // flat, grid.flatten order

  uint8_t at(int h, int w, int z) const { return labels[grid.flatten(h, w, z)]; }
};

/// One rendered camera image, channel-major (3 x height x width), 8-bit.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> chw;

  uint8_t at(int c, int y, int x) const {
    return chw[(static_cast<size_t>(c) * height + y) * width + x];
  }
};

/// Everything needed to procedurally generate one labeled sequence.
struct SceneSpec {
  uint64_t seed = 1;
  int n_objects = 10;
  int n_classes = 8;  // semantic categories, excluding empty
  std::vector<double> class_frequencies = {0.55, 0.20, 0.10, 0.06, 0.04, 0.03, 0.015, 0.005};
  int sequence_length = 4;
  int lidar_rays = 2048;  // rays per sweep
  int sweeps_per_frame = 3;
  VoxelGridSpec grid{{64, 64, 16}, 0.5, Vec3(-16.0, -16.0, -0.5)};
  int upsample_ratio = 2;
  std::vector<CameraModel> rig;
  double sensor_height = 1.5;
  double frame_dt = 0.5;
  double speed = 1.0;      // m/s along the trajectory
  double yaw_rate = 0.06;  // rad/s, gentle arc

  void validate() const;
};

struct SceneSample {
  int frame_index = 0;
  std::vector<ImageU8> images;  // one per camera view
  std::vector<Vec3> points;     // accumulated sweeps, current ego frame
  OccupancyGrid gt;
  EgoPose pose;
};

/// Fixed render palette; index 0 is the background/empty tone.
std::array<float, 3> category_color(int category);

/// Ego pose on the smooth arc trajectory at a continuous time (seconds).
EgoPose pose_at(const SceneSpec& spec, double time);

/// Place the ground slab and n_objects non-overlapping primitives with
/// categories drawn from the class-frequency prior. Throws when placement
/// fails after bounded retries.
SceneWorld place_objects(const SceneSpec& spec, Rng& rng);

/// One LiDAR sweep: an azimuth/elevation fan cast from the sensor, returning
/// first-hit points with Gaussian range noise, in the sweep's ego frame.
std::vector<Vec3> sample_lidar(const SceneWorld& world, const EgoPose& pose, int n_rays,
                               double sensor_height, Rng& rng);

/// Ray-cast rendering of every camera view with per-pixel noise and depth
/// occlusion.
std::vector<ImageU8> render_views(const SceneWorld& world, const std::vector<CameraModel>& rig,
                                  const EgoPose& pose, double sensor_height, Rng& rng);

/// Ground-truth labels: each voxel takes the category containing its center.
OccupancyGrid voxelize_gt(const SceneWorld& world, const EgoPose& pose,
                          const VoxelGridSpec& grid);

/// Deterministic sequence generation (bitwise reproducible from the seed).
std::vector<SceneSample> generate_sequence(const SceneSpec& spec);

/// Majority non-empty label of each ratio^3 block, used for coarse
/// supervision targets; empty only when the whole block is empty.
std::vector<uint8_t> downsample_labels(const OccupancyGrid& fine, int ratio);

}  // namespace occloff
