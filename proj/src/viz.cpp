#include <occloff/viz.hpp>

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace occloff {

void Raster::set(int x, int y, const std::array<float, 3>& color) {
  size_t at = (static_cast<size_t>(y) * width + x) * 3;
  for (int c = 0; c < 3; ++c)
    rgb[at + c] = static_cast<uint8_t>(std::lround(std::clamp(color[c], 0.0f, 1.0f) * 255.0f));
}

void write_ppm(const std::filesystem::path& path, const Raster& raster) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image " + path.string());
  out << "P6\n" << raster.width << " " << raster.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(raster.rgb.data()),
            static_cast<std::streamsize>(raster.rgb.size()));
}

Raster render_label_slice(const OccupancyGrid& grid, int z, int upscale) {
  if (z < 0 || z >= grid.grid.dims[2]) throw std::out_of_range("render_label_slice: bad z");
  Raster r;
  r.width = grid.grid.dims[1] * upscale;
  r.height = grid.grid.dims[0] * upscale;
  r.rgb.assign(static_cast<size_t>(r.width) * r.height * 3, 0);
  for (int h = 0; h < grid.grid.dims[0]; ++h)
    for (int w = 0; w < grid.grid.dims[1]; ++w) {
      auto color = category_color(grid.at(h, w, z));
      for (int dy = 0; dy < upscale; ++dy)
        for (int dx = 0; dx < upscale; ++dx) r.set(w * upscale + dx, h * upscale + dy, color);
    }
  return r;
}

Raster render_mask_slice(const VoxelGridSpec& grid, const std::vector<int64_t>& selected, int z,
                         int upscale) {
  if (z < 0 || z >= grid.dims[2]) throw std::out_of_range("render_mask_slice: bad z");
  Raster r;
  r.width = grid.dims[1] * upscale;
  r.height = grid.dims[0] * upscale;
  r.rgb.assign(static_cast<size_t>(r.width) * r.height * 3, 0);
  std::array<float, 3> off = {0.12f, 0.12f, 0.14f};
  for (int h = 0; h < grid.dims[0]; ++h)
    for (int w = 0; w < grid.dims[1]; ++w)
      for (int dy = 0; dy < upscale; ++dy)
        for (int dx = 0; dx < upscale; ++dx) r.set(w * upscale + dx, h * upscale + dy, off);
  std::array<float, 3> on = {1.0f, 1.0f, 1.0f};
  for (int64_t idx : selected) {
    auto [h, w, zz] = grid.unflatten(idx);
    if (zz != z) continue;
    for (int dy = 0; dy < upscale; ++dy)
      for (int dx = 0; dx < upscale; ++dx) r.set(w * upscale + dx, h * upscale + dy, on);
  }
  return r;
}

}  // namespace occloff
