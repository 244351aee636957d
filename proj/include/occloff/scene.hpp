#pragma once

#include <occloff/geometry.hpp>

#include <optional>
#include <vector>

namespace occloff {

/// Solid primitive with a semantic category. Extents are half-sizes for
/// boxes; cylinders are vertical with (radius, _, half_height); spheres use
/// (radius, _, _). `yaw` rotates boxes about z.
struct Primitive {
  enum class Kind { kBox, kCylinder, kSphere };
  Kind kind = Kind::kBox;
  int category = 1;
  Vec3 center = Vec3::Zero();
  Vec3 half_extents = Vec3::Ones();
  double yaw = 0.0;

  bool contains(const Vec3& p) const;
  /// World-frame axis-aligned bounds (for overlap rejection and placement).
  void aabb(Vec3& lo, Vec3& hi) const;
};

struct RayHit {
  double t = 0.0;
  int category = 0;
};

/// Static world: a ground slab (top surface at z = ground_top, thickness
/// ground_thickness) plus free-standing primitives. Everything is defined in
/// world coordinates.
struct SceneWorld {
  bool has_ground = true;
  int ground_category = 1;
  double ground_top = 0.0;
  double ground_thickness = 0.5;
  std::vector<Primitive> objects;

  /// Semantic category at a world point; 0 when empty.
  int category_at(const Vec3& p) const;

  /// Closest intersection along origin + t*dir, t > t_min.
  std::optional<RayHit> raycast(const Vec3& origin, const Vec3& dir, double t_min = 1e-6) const;
};

std::optional<double> ray_box(const Vec3& origin, const Vec3& dir, const Primitive& box);
std::optional<double> ray_cylinder(const Vec3& origin, const Vec3& dir, const Primitive& cyl);
std::optional<double> ray_sphere(const Vec3& origin, const Vec3& dir, const Primitive& sph);

}  // namespace occloff
