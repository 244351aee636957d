#pragma once

#include <occloff/geometry.hpp>
#include <occloff/tensor.hpp>

#include <cstdint>
#include <vector>

namespace occloff {

/// Feature volume over a voxel grid: one row of channels per voxel (flat
/// grid order) plus the point-occupancy mask.
template <typename T>
struct FeatureVolume {
  VoxelGridSpec grid;
  ad::Ptr<T> features;          // [num_voxels, channels]
  std::vector<char> occupancy;  // voxels containing at least one point

  ad::Index channels() const { return features ? features->cols() : 0; }
};

/// Flat 27-neighborhood indices (kernel order: dh, dw, dz) for each site in
/// `sites`; out-of-grid neighbors are -1. Feeds gather_rows_padded for
/// submanifold convolutions.
inline std::vector<ad::Index> neighbor_table_27(const VoxelGridSpec& grid,
                                                const std::vector<int64_t>& sites) {
  std::vector<ad::Index> table;
  table.reserve(sites.size() * 27);
  for (int64_t site : sites) {
    auto [h, w, z] = grid.unflatten(site);
    for (int dh = -1; dh <= 1; ++dh)
      for (int dw = -1; dw <= 1; ++dw)
        for (int dz = -1; dz <= 1; ++dz) {
          int nh = h + dh, nw = w + dw, nz = z + dz;
          table.push_back(grid.in_range(nh, nw, nz) ? grid.flatten(nh, nw, nz) : -1);
        }
  }
  return table;
}

/// Trilinear x-ratio upsampling table (fine voxel -> 8 coarse corners).
/// Fine centers map into coarse grid coordinates as (i + 0.5)/ratio - 0.5.
struct UpsampleTable {
  std::vector<ad::Index> indices;  // [n_fine * 8]
  std::vector<double> weights;
};

inline UpsampleTable build_upsample_table(const VoxelGridSpec& coarse, int ratio) {
  VoxelGridSpec fine({coarse.dims[0] * ratio, coarse.dims[1] * ratio, coarse.dims[2] * ratio},
                     coarse.voxel_size / ratio, coarse.origin);
  UpsampleTable table;
  const int64_t n = fine.num_voxels();
  table.indices.assign(static_cast<size_t>(n) * 8, -1);
  table.weights.assign(static_cast<size_t>(n) * 8, 0.0);
  int64_t at = 0;
  for (int h = 0; h < fine.dims[0]; ++h)
    for (int w = 0; w < fine.dims[1]; ++w)
      for (int z = 0; z < fine.dims[2]; ++z, ++at) {
        double g[3] = {(h + 0.5) / ratio - 0.5, (w + 0.5) / ratio - 0.5, (z + 0.5) / ratio - 0.5};
        int g0[3];
        double f[3];
        for (int a = 0; a < 3; ++a) {
          double fl = std::floor(g[a]);
          g0[a] = static_cast<int>(fl);
          f[a] = g[a] - fl;
        }
        int corner = 0;
        for (int dh = 0; dh < 2; ++dh)
          for (int dw = 0; dw < 2; ++dw)
            for (int dz = 0; dz < 2; ++dz, ++corner) {
              int ch = g0[0] + dh, cw = g0[1] + dw, cz = g0[2] + dz;
              double wgt = (dh ? f[0] : 1 - f[0]) * (dw ? f[1] : 1 - f[1]) * (dz ? f[2] : 1 - f[2]);
              if (wgt == 0.0) continue;
              // clamp to the border so constant fields stay constant
              ch = std::clamp(ch, 0, coarse.dims[0] - 1);
              cw = std::clamp(cw, 0, coarse.dims[1] - 1);
              cz = std::clamp(cz, 0, coarse.dims[2] - 1);
              table.indices[at * 8 + corner] = coarse.flatten(ch, cw, cz);
              table.weights[at * 8 + corner] = wgt;
            }
      }
  return table;
}

/// Trilinear resample of a feature volume from the source ego frame onto the
/// destination ego grid; out-of-bounds source positions yield zero features.
/// Identity relative poses reproduce the volume exactly.
template <typename T>
FeatureVolume<T> align_volume(ad::Tape<T>& tape, const FeatureVolume<T>& vol,
                              const EgoPose& pose_src, const EgoPose& pose_dst) {
  auto table = build_resample_table(vol.grid, pose_src, pose_dst);
  FeatureVolume<T> out;
  out.grid = vol.grid;
  std::vector<ad::Index> idx(table.indices.begin(), table.indices.end());
  std::vector<T> w(table.weights.size());
  for (size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(table.weights[i]);
  out.features = tape.gather_blend(vol.features, std::move(idx), std::move(w), 8);
  out.occupancy.assign(static_cast<size_t>(vol.grid.num_voxels()), 0);
  for (int64_t v = 0; v < vol.grid.num_voxels(); ++v)
    for (int corner = 0; corner < 8; ++corner) {
      auto src = table.indices[v * 8 + corner];
      if (src >= 0 && table.weights[v * 8 + corner] > 0.0 && vol.occupancy[src]) {
        out.occupancy[v] = 1;
        break;
      }
    }
  return out;
}

}  // namespace occloff
