#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

namespace occloff {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Cutoff behind the image plane; anything closer projects to "absent".
inline constexpr double kDepthEpsilon = 1e-3;

/// Axis-aligned voxel grid: dims (H, W, Z), cubic voxels, `origin` is the
/// world/ego position of the grid corner. Flat index = (h*W + w)*Z + z.
struct VoxelGridSpec {
  std::array<int, 3> dims{1, 1, 1};
  double voxel_size = 1.0;
  Vec3 origin = Vec3::Zero();

  VoxelGridSpec() = default;
  VoxelGridSpec(std::array<int, 3> d, double vs, const Vec3& o);

  int64_t num_voxels() const {
    return static_cast<int64_t>(dims[0]) * dims[1] * dims[2];
  }
  bool in_range(int h, int w, int z) const {
    return h >= 0 && h < dims[0] && w >= 0 && w < dims[1] && z >= 0 && z < dims[2];
  }
  int64_t flatten(int h, int w, int z) const {
    return (static_cast<int64_t>(h) * dims[1] + w) * dims[2] + z;
  }
  std::array<int, 3> unflatten(int64_t idx) const {
    int z = static_cast<int>(idx % dims[2]);
    int64_t hw = idx / dims[2];
    return {static_cast<int>(hw / dims[1]), static_cast<int>(hw % dims[1]), z};
  }

  /// Grid with the same extent and voxels `ratio` times larger. Dims must be
  /// divisible by the ratio.
  VoxelGridSpec coarsened(int ratio) const;

  /// Continuous grid coordinates of a point (voxel centers at integers).
  Vec3 to_grid_coords(const Vec3& p) const {
    return (p - origin) / voxel_size - Vec3(0.5, 0.5, 0.5);
  }

  /// Voxel containing a point, or nullopt when outside the grid.
  std::optional<std::array<int, 3>> voxel_of(const Vec3& p) const;
};

/// Center of a voxel: origin + (index + 0.5) * voxel_size. Throws on an
/// out-of-range index.
Vec3 voxel_center(const VoxelGridSpec& grid, int h, int w, int z);

/// Pin-hole camera. `extrinsics` maps ego coordinates to the camera frame
/// (z forward, x right, y down).
struct CameraModel {
  int view_index = 0;
  Mat3 intrinsics = Mat3::Identity();
  Mat4 extrinsics = Mat4::Identity();
  int width = 0;
  int height = 0;

  CameraModel() = default;
  CameraModel(int view, const Mat3& k, const Mat4& ego_to_cam, int w, int h);
};

/// Rigid ego-to-world transform at one frame.
struct EgoPose {
  int frame_index = 0;
  Mat4 transform = Mat4::Identity();  // ego -> world

  EgoPose() = default;
  EgoPose(int frame, const Mat4& t);
};

struct Projection {
  double u = 0.0;  // pixel column, in [0, width)
  double v = 0.0;  // pixel row, in [0, height)
  double depth = 0.0;
};

bool is_rigid(const Mat4& t, double tol = 1e-9);
Mat4 inverse_rigid(const Mat4& t);
Vec3 transform_point(const Mat4& t, const Vec3& p);

/// Project an ego-frame point; absent when behind the camera or outside the
/// image rectangle.
std::optional<Projection> project(const Vec3& p, const CameraModel& cam);

/// Ego-frame point recovered from a projection at a given depth.
Vec3 back_project(double u, double v, double depth, const CameraModel& cam);

/// Indices of all cameras whose frustum captures the point.
std::vector<int> hit_views(const Vec3& p, const std::vector<CameraModel>& rig);

/// Trilinear resampling table: for every destination voxel, the 8 source
/// corner indices (-1 when out of bounds) and their weights. Destination
/// centers are mapped dst-ego -> world -> src-ego. Integer-voxel alignments
/// snap exactly so pure shifts reproduce bit-exact values.
struct ResampleTable {
  std::vector<std::ptrdiff_t> indices;  // [N*8]
  std::vector<double> weights;          // [N*8]
};
ResampleTable build_resample_table(const VoxelGridSpec& grid, const EgoPose& pose_src,
                                   const EgoPose& pose_dst);

/// Standard test rig: `n_cameras` pin-hole cameras spaced evenly in yaw at
/// `cam_height` above the ego origin, sharing one focal length derived from
/// the horizontal field of view.
std::vector<CameraModel> make_ring_rig(int n_cameras, int width, int height, double hfov_deg,
                                       double cam_height);

}  // namespace occloff
