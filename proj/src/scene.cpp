#include <occloff/scene.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace occloff {

namespace {

Vec3 to_box_frame(const Vec3& p, const Primitive& box) {
  Vec3 d = p - box.center;
  double c = std::cos(-box.yaw), s = std::sin(-box.yaw);
  return Vec3(c * d.x() - s * d.y(), s * d.x() + c * d.y(), d.z());
}

Vec3 rotate_dir(const Vec3& d, double yaw) {
  double c = std::cos(yaw), s = std::sin(yaw);
  return Vec3(c * d.x() - s * d.y(), s * d.x() + c * d.y(), d.z());
}

}  // namespace

bool Primitive::contains(const Vec3& p) const {
  switch (kind) {
    case Kind::kBox: {
      Vec3 q = to_box_frame(p, *this);
      return std::abs(q.x()) <= half_extents.x() && std::abs(q.y()) <= half_extents.y() &&
             std::abs(q.z()) <= half_extents.z();
    }
    case Kind::kCylinder: {
      Vec3 d = p - center;
      double r2 = d.x() * d.x() + d.y() * d.y();
      return r2 <= half_extents.x() * half_extents.x() && std::abs(d.z()) <= half_extents.z();
    }
    case Kind::kSphere:
      return (p - center).squaredNorm() <= half_extents.x() * half_extents.x();
  }
  return false;
}

void Primitive::aabb(Vec3& lo, Vec3& hi) const {
  switch (kind) {
    case Kind::kBox: {
      double c = std::abs(std::cos(yaw)), s = std::abs(std::sin(yaw));
      double ex = c * half_extents.x() + s * half_extents.y();
      double ey = s * half_extents.x() + c * half_extents.y();
      lo = center - Vec3(ex, ey, half_extents.z());
      hi = center + Vec3(ex, ey, half_extents.z());
      return;
    }
    case Kind::kCylinder:
      lo = center - Vec3(half_extents.x(), half_extents.x(), half_extents.z());
      hi = center + Vec3(half_extents.x(), half_extents.x(), half_extents.z());
      return;
    case Kind::kSphere:
      lo = center - Vec3::Constant(half_extents.x());
      hi = center + Vec3::Constant(half_extents.x());
      return;
  }
}

std::optional<double> ray_box(const Vec3& origin, const Vec3& dir, const Primitive& box) {
  Vec3 o = to_box_frame(origin, box);
  Vec3 d = rotate_dir(dir, -box.yaw);
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    double e = box.half_extents[a];
    if (std::abs(d[a]) < 1e-12) {
      if (o[a] < -e || o[a] > e) return std::nullopt;
      continue;
    }
    double ta = (-e - o[a]) / d[a];
    double tb = (e - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return std::nullopt;
  }
  if (t1 < 0.0) return std::nullopt;
  return t0 >= 0.0 ? t0 : t1;
}

std::optional<double> ray_cylinder(const Vec3& origin, const Vec3& dir, const Primitive& cyl) {
  Vec3 o = origin - cyl.center;
  double r = cyl.half_extents.x(), hz = cyl.half_extents.z();
  double best = std::numeric_limits<double>::infinity();
  // lateral surface
  double a = dir.x() * dir.x() + dir.y() * dir.y();
  if (a > 1e-12) {
    double b = 2.0 * (o.x() * dir.x() + o.y() * dir.y());
    double c = o.x() * o.x() + o.y() * o.y() - r * r;
    double disc = b * b - 4 * a * c;
    if (disc >= 0.0) {
      double sq = std::sqrt(disc);
      for (double t : {(-b - sq) / (2 * a), (-b + sq) / (2 * a)}) {
        if (t < 0.0 || t >= best) continue;
        double z = o.z() + t * dir.z();
        if (std::abs(z) <= hz) best = t;
      }
    }
  }
  // caps
  if (std::abs(dir.z()) > 1e-12) {
    for (double zc : {-hz, hz}) {
      double t = (zc - o.z()) / dir.z();
      if (t < 0.0 || t >= best) continue;
      double x = o.x() + t * dir.x(), y = o.y() + t * dir.y();
      if (x * x + y * y <= r * r) best = t;
    }
  }
  if (!std::isfinite(best)) return std::nullopt;
  return best;
}

std::optional<double> ray_sphere(const Vec3& origin, const Vec3& dir, const Primitive& sph) {
  Vec3 o = origin - sph.center;
  double r = sph.half_extents.x();
  double b = 2.0 * o.dot(dir);
  double c = o.squaredNorm() - r * r;
  double disc = b * b - 4 * c;  // dir assumed unit
  if (disc < 0.0) return std::nullopt;
  double sq = std::sqrt(disc);
  double t0 = (-b - sq) / 2.0, t1 = (-b + sq) / 2.0;
  if (t1 < 0.0) return std::nullopt;
  return t0 >= 0.0 ? t0 : t1;
}

int SceneWorld::category_at(const Vec3& p) const {
  if (has_ground && p.z() <= ground_top && p.z() >= ground_top - ground_thickness)
    return ground_category;
  for (const auto& obj : objects)
    if (obj.contains(p)) return obj.category;
  return 0;
}

std::optional<RayHit> SceneWorld::raycast(const Vec3& origin, const Vec3& dir,
                                          double t_min) const {
  std::optional<RayHit> best;
  auto consider = [&](std::optional<double> t, int category) {
    if (!t || *t <= t_min) return;
    if (!best || *t < best->t) best = RayHit{*t, category};
  };
  // ground top surface
  if (has_ground && dir.z() < -1e-12) {
    consider((ground_top - origin.z()) / dir.z(), ground_category);
  }
  for (const auto& obj : objects) {
    switch (obj.kind) {
      case Primitive::Kind::kBox:
        consider(ray_box(origin, dir, obj), obj.category);
        break;
      case Primitive::Kind::kCylinder:
        consider(ray_cylinder(origin, dir, obj), obj.category);
        break;
      case Primitive::Kind::kSphere:
        consider(ray_sphere(origin, dir, obj), obj.category);
        break;
    }
  }
  return best;
}

}  // namespace occloff
