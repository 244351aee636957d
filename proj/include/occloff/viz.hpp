#pragma once

#include <occloff/synthdata.hpp>

#include <cstdint>
#include <filesystem>
#include <set>
#include <vector>

namespace occloff {

/// Simple RGB raster (row-major, 3 bytes per pixel).
struct Raster {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> rgb;

  void set(int x, int y, const std::array<float, 3>& color);
};

/// Binary PPM (P6) writer; lossless and trivially hashable for regression.
void write_ppm(const std::filesystem::path& path, const Raster& raster);

/// Horizontal slice (fixed z) of an occupancy grid using the category
/// palette, scaled up by an integer factor for visibility.
Raster render_label_slice(const OccupancyGrid& grid, int z, int upscale);

/// Slice of a voxel selection mask: selected voxels in white over background.
Raster render_mask_slice(const VoxelGridSpec& grid, const std::vector<int64_t>& selected, int z,
                         int upscale);

}  // namespace occloff
