#pragma once

#include <array>
#include <vector>

namespace sdcot {

using Vec3 = std::array<double, 3>;

double wrap_angle(double a);  // into [-pi, pi)

// Oriented 3D box: full extents, rotation about the vertical (z) axis.
struct Box3D {
  Vec3 center{0, 0, 0};
  Vec3 size{1, 1, 1};   // full extents, all > 0
  double heading = 0;   // radians, [-pi, pi)
  int class_id = 0;
  double score = 1.0;   // 1.0 for ground truth
};

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<int> instance_ids;  // parallel to points; -1 = clutter

  std::size_t size() const { return points.size(); }
};

// flip_x, then rotate about z, then uniform scale.
struct PoseTransform {
  bool flip_x = false;
  double rotation = 0.0;
  double scale = 1.0;

  static PoseTransform identity() { return {}; }
  PoseTransform inverse() const;

  Vec3 apply_point(const Vec3& p) const;
  Box3D apply_box(const Box3D& b) const;
};

PointCloud apply_transform(const PoseTransform& t, const PointCloud& cloud);
std::vector<Box3D> apply_transform(const PoseTransform& t, const std::vector<Box3D>& boxes);

std::array<Vec3, 8> box_corners(const Box3D& b);

double box_volume(const Box3D& b);

// True when p lies inside b, extents inflated additively by slack per side.
bool point_in_box(const Vec3& p, const Box3D& b, double slack = 1e-9);

// Intersection over union: rotated bird's-eye-view footprint overlap
// (Sutherland-Hodgman polygon clipping) times the z-interval overlap.
double iou_3d(const Box3D& a, const Box3D& b);

// Greedy descending-score suppression; ties broken by lower input index.
// Returns kept indices in descending score order.
std::vector<int> nms_3d(const std::vector<Box3D>& boxes, double iou_threshold);

}  // namespace sdcot
