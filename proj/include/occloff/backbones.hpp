#pragma once

#include <occloff/config.hpp>
#include <occloff/params.hpp>
#include <occloff/synthdata.hpp>
#include <occloff/volume.hpp>

#include <algorithm>
#include <map>
#include <string>
#include <vector>

namespace occloff {

template <typename T>
struct PyramidLevel {
  ad::Ptr<T> map;  // [height*width, channels]
  int width = 0;
  int height = 0;
};

/// Per-view, per-level feature maps; level 0 has the highest resolution and
/// the last level is the deep "top" map consumed by the geometric attention.
template <typename T>
struct ImagePyramid {
  std::vector<std::vector<PyramidLevel<T>>> views;
  int levels() const { return views.empty() ? 0 : static_cast<int>(views[0].size()); }
};

/// Three stride-2 conv stages with a 1x1 channel-unifying head per level.
template <typename T>
class ImageEncoder {
 public:
  ImageEncoder(ParamStore<T>& params, int feature_dim, const std::string& prefix = "img_enc")
      : dim_(feature_dim) {
    const ad::Index d = dim_;
    stage_w_.push_back(params.add(prefix + ".stage0.w", {9 * 3, d}, Init::kXavier, 9 * 3, d));
    stage_b_.push_back(params.add(prefix + ".stage0.b", {d}, Init::kZero));
    for (int s = 1; s < 3; ++s) {
      stage_w_.push_back(params.add(prefix + ".stage" + std::to_string(s) + ".w", {9 * d, d},
                                    Init::kXavier, 9 * d, d));
      stage_b_.push_back(params.add(prefix + ".stage" + std::to_string(s) + ".b", {d}, Init::kZero));
    }
    for (int l = 0; l < 3; ++l) {
      head_w_.push_back(params.add(prefix + ".head" + std::to_string(l) + ".w", {d, d},
                                   Init::kXavier));
      head_b_.push_back(params.add(prefix + ".head" + std::to_string(l) + ".b", {d}, Init::kZero));
    }
  }

  ImagePyramid<T> forward(ad::Tape<T>& tape, const std::vector<ImageU8>& images) const {
    ImagePyramid<T> pyr;
    for (const auto& img : images) {
      // HWC rows x 3 channels, scaled to [0, 1]
      auto x = tape.tensor({static_cast<ad::Index>(img.width) * img.height, 3}, false);
      for (int y = 0; y < img.height; ++y)
        for (int xpix = 0; xpix < img.width; ++xpix)
          for (int c = 0; c < 3; ++c)
            x->val[(static_cast<ad::Index>(y) * img.width + xpix) * 3 + c] =
                static_cast<T>(img.at(c, y, xpix) / 255.0);

      std::vector<PyramidLevel<T>> levels;
      ad::Ptr<T> cur = x;
      int h = img.height, w = img.width;
      for (int s = 0; s < 3; ++s) {
        cur = tape.silu(tape.conv3(cur, h, w, 1, 1, stage_w_[s], stage_b_[s], 2));
        h = (h + 1) / 2;
        w = (w + 1) / 2;
        PyramidLevel<T> level;
        level.map = tape.linear(cur, head_w_[s], head_b_[s]);
        level.width = w;
        level.height = h;
        levels.push_back(level);
      }
      pyr.views.push_back(std::move(levels));
    }
    return pyr;
  }

  int feature_dim() const { return dim_; }

 private:
  int dim_;
  std::vector<ad::Ptr<T>> stage_w_, stage_b_;
  std::vector<ad::Ptr<T>> head_w_, head_b_;
};

/// Points bucketed into coarse voxels, with a deterministic (sorted) order
/// inside each bucket.
struct VoxelBuckets {
  std::vector<int64_t> occupied;                // sorted flat voxel indices
  std::map<int64_t, std::vector<Vec3>> points;  // per occupied voxel
};

inline VoxelBuckets bucket_points(const std::vector<Vec3>& points, const VoxelGridSpec& grid) {
  VoxelBuckets buckets;
  for (const auto& p : points) {
    auto v = grid.voxel_of(p);
    if (!v) continue;
    buckets.points[grid.flatten((*v)[0], (*v)[1], (*v)[2])].push_back(p);
  }
  for (auto& [idx, pts] : buckets.points) {
    std::sort(pts.begin(), pts.end(), [](const Vec3& a, const Vec3& b) {
      if (a.x() != b.x()) return a.x() < b.x();
      if (a.y() != b.y()) return a.y() < b.y();
      return a.z() < b.z();
    });
    buckets.occupied.push_back(idx);
  }
  return buckets;
}

/// Pooled statistics of one voxel's points: count, mean offset from the
/// voxel center (3), mean height.
inline std::array<double, 5> voxel_point_stats(const std::vector<Vec3>& pts, const Vec3& center) {
  Vec3 mean_off = Vec3::Zero();
  double mean_z = 0.0;
  for (const auto& p : pts) {
    mean_off += p - center;
    mean_z += p.z();
  }
  if (!pts.empty()) {
    mean_off /= static_cast<double>(pts.size());
    mean_z /= static_cast<double>(pts.size());
  }
  return {static_cast<double>(pts.size()), mean_off.x(), mean_off.y(), mean_off.z(), mean_z};
}

/// Pooled point statistics embedded to D, then two submanifold 3x3x3
/// convolutions over the occupied voxels. Empty voxels hold a shared
/// learnable embedding and are never written by the convolutions.
template <typename T>
class LidarEncoder {
 public:
  LidarEncoder(ParamStore<T>& params, int feature_dim, const std::string& prefix = "lidar_enc")
      : dim_(feature_dim) {
    const ad::Index d = dim_;
    embed_w_ = params.add(prefix + ".embed.w", {5, d}, Init::kXavier);
    embed_b_ = params.add(prefix + ".embed.b", {d}, Init::kZero);
    empty_ = params.add(prefix + ".empty", {1, d}, Init::kNormalSmall);
    for (int s = 0; s < 2; ++s) {
      conv_w_.push_back(params.add(prefix + ".conv" + std::to_string(s) + ".w", {27 * d, d},
                                   Init::kXavier, 27 * d, d));
      conv_b_.push_back(params.add(prefix + ".conv" + std::to_string(s) + ".b", {d}, Init::kZero));
    }
  }

  FeatureVolume<T> forward(ad::Tape<T>& tape, const VoxelBuckets& buckets,
                           const VoxelGridSpec& grid) const {
    const int64_t n = grid.num_voxels();
    FeatureVolume<T> vol;
    vol.grid = grid;
    vol.occupancy.assign(static_cast<size_t>(n), 0);

    auto features = tape.broadcast_row(empty_, n);
    if (!buckets.occupied.empty()) {
      const ad::Index n_occ = static_cast<ad::Index>(buckets.occupied.size());
      auto stats = tape.tensor({n_occ, 5}, false);
      std::vector<ad::Index> occ_rows;
      occ_rows.reserve(buckets.occupied.size());
      for (ad::Index i = 0; i < n_occ; ++i) {
        int64_t idx = buckets.occupied[i];
        vol.occupancy[idx] = 1;
        occ_rows.push_back(idx);
        const auto& pts = buckets.points.at(idx);
        auto [h, w, z] = grid.unflatten(idx);
        auto pooled = voxel_point_stats(pts, voxel_center(grid, h, w, z));
        for (int s = 0; s < 5; ++s) stats->val[i * 5 + s] = static_cast<T>(pooled[s]);
      }
      auto rows = tape.silu(tape.linear(stats, embed_w_, embed_b_));
      features = tape.scatter_replace_rows(features, occ_rows, rows);

      auto nbr = neighbor_table_27(grid, buckets.occupied);
      for (int s = 0; s < 2; ++s) {
        auto gathered = tape.gather_rows_padded(features, nbr, 27);
        auto updated = tape.silu(tape.linear(gathered, conv_w_[s], conv_b_[s]));
        features = tape.scatter_replace_rows(features, occ_rows, updated);
      }
    }
    vol.features = features;
    return vol;
  }

  int feature_dim() const { return dim_; }

 private:
  int dim_;
  ad::Ptr<T> embed_w_, embed_b_, empty_;
  std::vector<ad::Ptr<T>> conv_w_, conv_b_;
};

}  // namespace occloff
