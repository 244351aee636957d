#include <occloff/synthdata.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace occloff {

namespace {

constexpr double kLidarNoiseSigma = 0.02;
constexpr double kPixelNoiseSigma = 0.05;
constexpr double kElevationMinDeg = -25.0;
constexpr double kElevationMaxDeg = 3.0;

bool aabb_overlap(const Vec3& lo_a, const Vec3& hi_a, const Vec3& lo_b, const Vec3& hi_b) {
  for (int i = 0; i < 3; ++i)
    if (hi_a[i] < lo_b[i] || hi_b[i] < lo_a[i]) return false;
  return true;
}

int draw_category(const std::vector<double>& freqs, Rng& rng) {
  double u = rng.uniform();
  double acc = 0.0;
  for (size_t c = 0; c < freqs.size(); ++c) {
    acc += freqs[c];
    if (u < acc) return static_cast<int>(c) + 1;
  }
  return static_cast<int>(freqs.size());
}

}  // namespace

void SceneSpec::validate() const {
  if (sequence_length < 1) throw std::invalid_argument("SceneSpec: sequence_length must be >= 1");
  if (n_objects < 0) throw std::invalid_argument("SceneSpec: n_objects must be >= 0");
  if (static_cast<int>(class_frequencies.size()) != n_classes)
    throw std::invalid_argument("SceneSpec: class_frequencies size must equal n_classes");
  double s = 0.0;
  for (double f : class_frequencies) {
    if (f < 0.0) throw std::invalid_argument("SceneSpec: negative class frequency");
    s += f;
  }
  if (std::abs(s - 1.0) > 1e-6)
    throw std::invalid_argument("SceneSpec: class frequencies must sum to 1");
  if (lidar_rays < 0) throw std::invalid_argument("SceneSpec: lidar_rays must be >= 0");
  if (sweeps_per_frame < 1) throw std::invalid_argument("SceneSpec: sweeps_per_frame must be >= 1");
  for (int d : grid.dims)
    if (d % upsample_ratio != 0)
      throw std::invalid_argument("SceneSpec: grid dims must be divisible by upsample_ratio");
}

std::array<float, 3> category_color(int category) {
  static const std::array<std::array<float, 3>, 9> palette = {{
      {0.08f, 0.08f, 0.10f},  // 0: background / empty
      {0.55f, 0.55f, 0.50f},  // 1: ground
      {0.90f, 0.20f, 0.15f},  // 2
      {0.15f, 0.45f, 0.90f},  // 3
      {0.20f, 0.75f, 0.25f},  // 4
      {0.95f, 0.80f, 0.10f},  // 5
      {0.70f, 0.25f, 0.85f},  // 6
      {0.10f, 0.80f, 0.80f},  // 7
      {0.95f, 0.50f, 0.70f},  // 8
  }};
  if (category < 0 || category >= static_cast<int>(palette.size()))
    throw std::out_of_range("category_color: unknown category");
  return palette[category];
}

EgoPose pose_at(const SceneSpec& spec, double time) {
  double yaw = spec.yaw_rate * time;
  double x, y;
  if (std::abs(spec.yaw_rate) > 1e-9) {
    double r = spec.speed / spec.yaw_rate;
    x = r * std::sin(yaw);
    y = r * (1.0 - std::cos(yaw));
  } else {
    x = spec.speed * time;
    y = 0.0;
  }
  Mat4 t = Mat4::Identity();
  t(0, 0) = std::cos(yaw);
  t(0, 1) = -std::sin(yaw);
  t(1, 0) = std::sin(yaw);
  t(1, 1) = std::cos(yaw);
  t(0, 3) = x;
  t(1, 3) = y;
  return EgoPose(static_cast<int>(std::lround(time / spec.frame_dt)), t);
}

SceneWorld place_objects(const SceneSpec& spec, Rng& rng) {
  SceneWorld world;
  world.ground_category = 1;
  world.ground_top = 0.0;
  world.ground_thickness = 0.5;

  // keep objects inside the frame-0 grid with margin, off the ego path
  const Vec3 lo_grid = spec.grid.origin;
  const Vec3 hi_grid = spec.grid.origin + Vec3(spec.grid.dims[0], spec.grid.dims[1],
                                               spec.grid.dims[2]) *
                                              spec.grid.voxel_size;
  const double margin = 2.0;
  const double traj_span = spec.speed * spec.frame_dt * spec.sequence_length + 2.0;
  const Vec3 corridor_lo(-3.0, -2.0, -10.0);
  const Vec3 corridor_hi(traj_span, 2.0, 10.0);

  for (int i = 0; i < spec.n_objects; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      Primitive obj;
      obj.category = draw_category(spec.class_frequencies, rng);
      int kind = static_cast<int>(rng.uniform_index(3));
      obj.kind = kind == 0   ? Primitive::Kind::kBox
                 : kind == 1 ? Primitive::Kind::kCylinder
                             : Primitive::Kind::kSphere;
      switch (obj.kind) {
        case Primitive::Kind::kBox:
          obj.half_extents = Vec3(rng.uniform(0.6, 1.1), rng.uniform(0.6, 1.1),
                                  rng.uniform(0.5, 1.0));
          obj.yaw = rng.uniform(0.0, 2.0 * M_PI);
          break;
        case Primitive::Kind::kCylinder:
          obj.half_extents = Vec3(rng.uniform(0.5, 0.9), 0.0, rng.uniform(0.5, 1.0));
          break;
        case Primitive::Kind::kSphere:
          obj.half_extents = Vec3(rng.uniform(0.55, 1.0), 0.0, 0.0);
          break;
      }
      double base_z = obj.kind == Primitive::Kind::kSphere ? obj.half_extents.x()
                                                           : obj.half_extents.z();
      obj.center = Vec3(rng.uniform(lo_grid.x() + margin, hi_grid.x() - margin),
                        rng.uniform(lo_grid.y() + margin, hi_grid.y() - margin),
                        world.ground_top + base_z);
      Vec3 lo, hi;
      obj.aabb(lo, hi);
      if (aabb_overlap(lo, hi, corridor_lo, corridor_hi)) continue;
      bool collides = false;
      for (const auto& other : world.objects) {
        Vec3 lo_o, hi_o;
        other.aabb(lo_o, hi_o);
        if (aabb_overlap(lo, hi, lo_o, hi_o)) {
          collides = true;
          break;
        }
      }
      if (collides) continue;
      world.objects.push_back(obj);
      placed = true;
    }
    if (!placed)
      throw std::runtime_error("place_objects: could not place object " + std::to_string(i) +
                               " without overlap after bounded retries");
  }
  return world;
}

std::vector<Vec3> sample_lidar(const SceneWorld& world, const EgoPose& pose, int n_rays,
                               double sensor_height, Rng& rng) {
  std::vector<Vec3> points;
  if (n_rays <= 0) return points;
  int rings = n_rays >= 256 ? 16 : std::max(2, n_rays / 16);
  int azimuths = std::max(1, n_rays / rings);

  const Mat4& ego_to_world = pose.transform;
  const Mat4 world_to_ego = inverse_rigid(ego_to_world);
  const Vec3 origin_world = transform_point(ego_to_world, Vec3(0.0, 0.0, sensor_height));

  points.reserve(static_cast<size_t>(rings) * azimuths);
  for (int ring = 0; ring < rings; ++ring) {
    double el = (kElevationMinDeg +
                 (kElevationMaxDeg - kElevationMinDeg) * (rings == 1 ? 0.5 : ring / (rings - 1.0))) *
                M_PI / 180.0;
    for (int a = 0; a < azimuths; ++a) {
      double az = 2.0 * M_PI * a / azimuths;
      Vec3 dir_ego(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
      Vec3 dir_world = ego_to_world.topLeftCorner<3, 3>() * dir_ego;
      auto hit = world.raycast(origin_world, dir_world);
      if (!hit) continue;
      double range = hit->t + rng.normal(0.0, kLidarNoiseSigma);
      Vec3 p_world = origin_world + dir_world * range;
      points.push_back(transform_point(world_to_ego, p_world));
    }
  }
  return points;
}

std::vector<ImageU8> render_views(const SceneWorld& world, const std::vector<CameraModel>& rig,
                                  const EgoPose& pose, double sensor_height, Rng& rng) {
  (void)sensor_height;  // camera centers are baked into the extrinsics
  std::vector<ImageU8> images;
  images.reserve(rig.size());
  for (const auto& cam : rig) {
    ImageU8 img;
    img.width = cam.width;
    img.height = cam.height;
    img.chw.assign(static_cast<size_t>(3) * cam.width * cam.height, 0);
    const Mat4 cam_to_ego = inverse_rigid(cam.extrinsics);
    const Mat4 cam_to_world = pose.transform * cam_to_ego;
    const Vec3 origin_world = cam_to_world.topRightCorner<3, 1>();
    const Mat3 kinv = cam.intrinsics.inverse();
    for (int y = 0; y < cam.height; ++y) {
      for (int x = 0; x < cam.width; ++x) {
        Vec3 dir_cam = kinv * Vec3(x + 0.5, y + 0.5, 1.0);
        dir_cam.normalize();
        Vec3 dir_world = cam_to_world.topLeftCorner<3, 3>() * dir_cam;
        auto hit = world.raycast(origin_world, dir_world);
        auto color = category_color(hit ? hit->category : 0);
        for (int c = 0; c < 3; ++c) {
          double v = color[c] + rng.normal(0.0, kPixelNoiseSigma);
          v = std::clamp(v, 0.0, 1.0);
          img.chw[(static_cast<size_t>(c) * cam.height + y) * cam.width + x] =
              static_cast<uint8_t>(std::lround(v * 255.0));
        }
      }
    }
    images.push_back(std::move(img));
  }
  return images;
}

OccupancyGrid voxelize_gt(const SceneWorld& world, const EgoPose& pose,
                          const VoxelGridSpec& grid) {
  OccupancyGrid gt;
  gt.grid = grid;
  gt.labels.assign(static_cast<size_t>(grid.num_voxels()), 0);
  int64_t at = 0;
  for (int h = 0; h < grid.dims[0]; ++h)
    for (int w = 0; w < grid.dims[1]; ++w)
      for (int z = 0; z < grid.dims[2]; ++z, ++at) {
        Vec3 c_world = transform_point(pose.transform, voxel_center(grid, h, w, z));
        gt.labels[at] = static_cast<uint8_t>(world.category_at(c_world));
      }
  return gt;
}

std::vector<SceneSample> generate_sequence(const SceneSpec& spec) {
  spec.validate();
  Rng placement_rng = Rng::fork(spec.seed, 1);
  SceneWorld world = place_objects(spec, placement_rng);

  std::vector<SceneSample> samples;
  samples.reserve(spec.sequence_length);
  for (int t = 0; t < spec.sequence_length; ++t) {
    SceneSample s;
    s.frame_index = t;
    s.pose = pose_at(spec, t * spec.frame_dt);

    Rng render_rng = Rng::fork(spec.seed, 100 + static_cast<uint64_t>(t));
    s.images = render_views(world, spec.rig, s.pose, spec.sensor_height, render_rng);

    const Mat4 world_to_frame = inverse_rigid(s.pose.transform);
    for (int sweep = 0; sweep < spec.sweeps_per_frame; ++sweep) {
      double time = t * spec.frame_dt - sweep * spec.frame_dt / spec.sweeps_per_frame;
      EgoPose sweep_pose = pose_at(spec, time);
      Rng lidar_rng =
          Rng::fork(spec.seed, 1000 + static_cast<uint64_t>(t) * 64 + static_cast<uint64_t>(sweep));
      auto pts = sample_lidar(world, sweep_pose, spec.lidar_rays, spec.sensor_height, lidar_rng);
      const Mat4 sweep_to_frame = world_to_frame * sweep_pose.transform;
      for (const auto& p : pts) s.points.push_back(transform_point(sweep_to_frame, p));
    }

    s.gt = voxelize_gt(world, s.pose, spec.grid);
    samples.push_back(std::move(s));
  }
  return samples;
}

std::vector<uint8_t> downsample_labels(const OccupancyGrid& fine, int ratio) {
  VoxelGridSpec coarse = fine.grid.coarsened(ratio);
  std::vector<uint8_t> out(static_cast<size_t>(coarse.num_voxels()), 0);
  int64_t at = 0;
  for (int h = 0; h < coarse.dims[0]; ++h)
    for (int w = 0; w < coarse.dims[1]; ++w)
      for (int z = 0; z < coarse.dims[2]; ++z, ++at) {
        std::array<int, 16> counts{};  // labels 0..n_classes (<= 15 supported)
        for (int dh = 0; dh < ratio; ++dh)
          for (int dw = 0; dw < ratio; ++dw)
            for (int dz = 0; dz < ratio; ++dz)
              counts[fine.at(h * ratio + dh, w * ratio + dw, z * ratio + dz)]++;
        int best = 0, best_count = 0;
        for (int lab = 1; lab < 16; ++lab)  // prefer most frequent non-empty
          if (counts[lab] > best_count) {
            best = lab;
            best_count = counts[lab];
          }
        out[at] = static_cast<uint8_t>(best);
      }
  return out;
}

}  // namespace occloff
