#include <occloff/geometry.hpp>

#include <cmath>
#include <stdexcept>

namespace occloff {

VoxelGridSpec::VoxelGridSpec(std::array<int, 3> d, double vs, const Vec3& o)
    : dims(d), voxel_size(vs), origin(o) {
  if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
    throw std::invalid_argument("VoxelGridSpec: dims must be >= 1");
  if (!(voxel_size > 0.0)) throw std::invalid_argument("VoxelGridSpec: voxel_size must be > 0");
}

VoxelGridSpec VoxelGridSpec::coarsened(int ratio) const {
  if (ratio < 1) throw std::invalid_argument("coarsened: ratio must be >= 1");
  for (int d : dims)
    if (d % ratio != 0)
      throw std::invalid_argument("coarsened: dims not divisible by ratio");
  return VoxelGridSpec({dims[0] / ratio, dims[1] / ratio, dims[2] / ratio}, voxel_size * ratio,
                       origin);
}

std::optional<std::array<int, 3>> VoxelGridSpec::voxel_of(const Vec3& p) const {
  Vec3 g = (p - origin) / voxel_size;
  int h = static_cast<int>(std::floor(g.x()));
  int w = static_cast<int>(std::floor(g.y()));
  int z = static_cast<int>(std::floor(g.z()));
  if (!in_range(h, w, z)) return std::nullopt;
  return std::array<int, 3>{h, w, z};
}

Vec3 voxel_center(const VoxelGridSpec& grid, int h, int w, int z) {
  if (!grid.in_range(h, w, z)) throw std::out_of_range("voxel_center: index out of range");
  return grid.origin + Vec3(h + 0.5, w + 0.5, z + 0.5) * grid.voxel_size;
}

bool is_rigid(const Mat4& t, double tol) {
  if (std::abs(t(3, 0)) > tol || std::abs(t(3, 1)) > tol || std::abs(t(3, 2)) > tol ||
      std::abs(t(3, 3) - 1.0) > tol)
    return false;
  Mat3 r = t.topLeftCorner<3, 3>();
  if (((r.transpose() * r) - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6) return false;
  return r.determinant() > 0.0;
}

Mat4 inverse_rigid(const Mat4& t) {
  Mat3 r = t.topLeftCorner<3, 3>();
  Vec3 p = t.topRightCorner<3, 1>();
  Mat4 inv = Mat4::Identity();
  inv.topLeftCorner<3, 3>() = r.transpose();
  inv.topRightCorner<3, 1>() = -r.transpose() * p;
  return inv;
}

Vec3 transform_point(const Mat4& t, const Vec3& p) {
  return t.topLeftCorner<3, 3>() * p + t.topRightCorner<3, 1>();
}

CameraModel::CameraModel(int view, const Mat3& k, const Mat4& ego_to_cam, int w, int h)
    : view_index(view), intrinsics(k), extrinsics(ego_to_cam), width(w), height(h) {
  if (w <= 0 || h <= 0) throw std::invalid_argument("CameraModel: bad image size");
  if (!(k(0, 0) > 0.0) || !(k(1, 1) > 0.0))
    throw std::invalid_argument("CameraModel: focal lengths must be positive");
  if (std::abs(k.determinant()) < 1e-12)
    throw std::invalid_argument("CameraModel: intrinsics not invertible");
  if (!is_rigid(ego_to_cam)) throw std::invalid_argument("CameraModel: extrinsics not rigid");
}

EgoPose::EgoPose(int frame, const Mat4& t) : frame_index(frame), transform(t) {
  if (!is_rigid(t)) throw std::invalid_argument("EgoPose: transform not rigid");
}

std::optional<Projection> project(const Vec3& p, const CameraModel& cam) {
  Vec3 pc = transform_point(cam.extrinsics, p);
  if (pc.z() <= kDepthEpsilon) return std::nullopt;
  double u = cam.intrinsics(0, 0) * pc.x() / pc.z() + cam.intrinsics(0, 2);
  double v = cam.intrinsics(1, 1) * pc.y() / pc.z() + cam.intrinsics(1, 2);
  if (u < 0.0 || u >= cam.width || v < 0.0 || v >= cam.height) return std::nullopt;
  return Projection{u, v, pc.z()};
}

Vec3 back_project(double u, double v, double depth, const CameraModel& cam) {
  Vec3 pc((u - cam.intrinsics(0, 2)) / cam.intrinsics(0, 0) * depth,
          (v - cam.intrinsics(1, 2)) / cam.intrinsics(1, 1) * depth, depth);
  return transform_point(inverse_rigid(cam.extrinsics), pc);
}

std::vector<int> hit_views(const Vec3& p, const std::vector<CameraModel>& rig) {
  std::vector<int> hits;
  for (const auto& cam : rig)
    if (project(p, cam)) hits.push_back(cam.view_index);
  return hits;
}

ResampleTable build_resample_table(const VoxelGridSpec& grid, const EgoPose& pose_src,
                                   const EgoPose& pose_dst) {
  const int64_t n = grid.num_voxels();
  ResampleTable table;
  table.indices.assign(static_cast<size_t>(n) * 8, -1);
  table.weights.assign(static_cast<size_t>(n) * 8, 0.0);

  const Mat4 dst_to_src = inverse_rigid(pose_src.transform) * pose_dst.transform;
  const bool identity = (dst_to_src - Mat4::Identity()).cwiseAbs().maxCoeff() < 1e-12;

  int64_t at = 0;
  for (int h = 0; h < grid.dims[0]; ++h)
    for (int w = 0; w < grid.dims[1]; ++w)
      for (int z = 0; z < grid.dims[2]; ++z, ++at) {
        if (identity) {
          table.indices[at * 8] = at;
          table.weights[at * 8] = 1.0;
          continue;
        }
        Vec3 c = voxel_center(grid, h, w, z);
        Vec3 src = transform_point(dst_to_src, c);
        Vec3 g = grid.to_grid_coords(src);
        // snap near-integer coordinates so whole-voxel shifts stay exact
        for (int a = 0; a < 3; ++a) {
          double r = std::round(g[a]);
          if (std::abs(g[a] - r) < 1e-9) g[a] = r;
        }
        int g0[3], g1[3];
        double f[3];
        for (int a = 0; a < 3; ++a) {
          double fl = std::floor(g[a]);
          g0[a] = static_cast<int>(fl);
          g1[a] = g0[a] + 1;
          f[a] = g[a] - fl;
        }
        int corner = 0;
        for (int dh = 0; dh < 2; ++dh)
          for (int dw = 0; dw < 2; ++dw)
            for (int dz = 0; dz < 2; ++dz, ++corner) {
              int ch = dh ? g1[0] : g0[0];
              int cw = dw ? g1[1] : g0[1];
              int cz = dz ? g1[2] : g0[2];
              double wgt = (dh ? f[0] : 1.0 - f[0]) * (dw ? f[1] : 1.0 - f[1]) *
                           (dz ? f[2] : 1.0 - f[2]);
              if (wgt == 0.0) continue;
              if (!grid.in_range(ch, cw, cz)) continue;  // zero fill
              table.indices[at * 8 + corner] = grid.flatten(ch, cw, cz);
              table.weights[at * 8 + corner] = wgt;
            }
      }
  return table;
}

std::vector<CameraModel> make_ring_rig(int n_cameras, int width, int height, double hfov_deg,
                                       double cam_height) {
  if (n_cameras < 1) throw std::invalid_argument("make_ring_rig: need at least one camera");
  const double fx = (width / 2.0) / std::tan(hfov_deg * M_PI / 180.0 / 2.0);
  Mat3 k = Mat3::Identity();
  k(0, 0) = fx;
  k(1, 1) = fx;
  k(0, 2) = width / 2.0;
  k(1, 2) = height / 2.0;

  // ego: x forward, y left, z up; camera: z forward, x right, y down
  Mat3 axes;
  axes << 0, -1, 0,  //
      0, 0, -1,      //
      1, 0, 0;

  std::vector<CameraModel> rig;
  for (int i = 0; i < n_cameras; ++i) {
    double yaw = 2.0 * M_PI * i / n_cameras;
    Mat3 r_yaw;
    r_yaw << std::cos(yaw), -std::sin(yaw), 0,  //
        std::sin(yaw), std::cos(yaw), 0,        //
        0, 0, 1;
    Mat3 r_cam_from_ego = axes * r_yaw.transpose();
    Vec3 center(0.0, 0.0, cam_height);
    Mat4 ext = Mat4::Identity();
    ext.topLeftCorner<3, 3>() = r_cam_from_ego;
    ext.topRightCorner<3, 1>() = -r_cam_from_ego * center;
    rig.emplace_back(i, k, ext, width, height);
  }
  return rig;
}

}  // namespace occloff
