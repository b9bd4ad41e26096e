#include "sdcot/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace sdcot {

double wrap_angle(double a) {
  a = std::fmod(a + M_PI, 2.0 * M_PI);
  if (a < 0) a += 2.0 * M_PI;
  return a - M_PI;
}

PoseTransform PoseTransform::inverse() const {
  if (scale <= 0.0) throw std::invalid_argument("PoseTransform: scale must be positive");
  // (s R F)^-1 = F R(-r) / s; conjugating the rotation through the flip keeps
  // the inverse inside the flip-rotate-scale family.
  PoseTransform inv;
  inv.flip_x = flip_x;
  inv.rotation = flip_x ? rotation : -rotation;
  inv.scale = 1.0 / scale;
  return inv;
}

Vec3 PoseTransform::apply_point(const Vec3& p) const {
  double x = flip_x ? -p[0] : p[0];
  double y = p[1];
  const double c = std::cos(rotation), s = std::sin(rotation);
  const double rx = c * x - s * y;
  const double ry = s * x + c * y;
  return {scale * rx, scale * ry, scale * p[2]};
}

Box3D PoseTransform::apply_box(const Box3D& b) const {
  Box3D out = b;
  out.center = apply_point(b.center);
  out.size = {scale * b.size[0], scale * b.size[1], scale * b.size[2]};
  double h = flip_x ? M_PI - b.heading : b.heading;
  out.heading = wrap_angle(h + rotation);
  return out;
}

PointCloud apply_transform(const PoseTransform& t, const PointCloud& cloud) {
  PointCloud out;
  out.points.reserve(cloud.points.size());
  for (const auto& p : cloud.points) out.points.push_back(t.apply_point(p));
  out.instance_ids = cloud.instance_ids;
  return out;
}

std::vector<Box3D> apply_transform(const PoseTransform& t, const std::vector<Box3D>& boxes) {
  std::vector<Box3D> out;
  out.reserve(boxes.size());
  for (const auto& b : boxes) out.push_back(t.apply_box(b));
  return out;
}

std::array<Vec3, 8> box_corners(const Box3D& b) {
  const double c = std::cos(b.heading), s = std::sin(b.heading);
  const double hx = 0.5 * b.size[0], hy = 0.5 * b.size[1], hz = 0.5 * b.size[2];
  std::array<Vec3, 8> out;
  int k = 0;
  for (int sz = -1; sz <= 1; sz += 2) {
    for (int sy = -1; sy <= 1; sy += 2) {
      for (int sx = -1; sx <= 1; sx += 2) {
        const double lx = sx * hx, ly = sy * hy;
        out[k++] = {b.center[0] + c * lx - s * ly, b.center[1] + s * lx + c * ly,
                    b.center[2] + sz * hz};
      }
    }
  }
  return out;
}

double box_volume(const Box3D& b) { return b.size[0] * b.size[1] * b.size[2]; }

bool point_in_box(const Vec3& p, const Box3D& b, double slack) {
  const double dx = p[0] - b.center[0];
  const double dy = p[1] - b.center[1];
  const double dz = p[2] - b.center[2];
  const double c = std::cos(b.heading), s = std::sin(b.heading);
  const double lx = c * dx + s * dy;   // rotate into box frame
  const double ly = -s * dx + c * dy;
  return std::fabs(lx) <= 0.5 * b.size[0] + slack && std::fabs(ly) <= 0.5 * b.size[1] + slack &&
         std::fabs(dz) <= 0.5 * b.size[2] + slack;
}

namespace {

struct Pt2 {
  double x, y;
};

std::array<Pt2, 4> footprint_ccw(const Box3D& b) {
  const double c = std::cos(b.heading), s = std::sin(b.heading);
  const double hx = 0.5 * b.size[0], hy = 0.5 * b.size[1];
  // CCW order in the local frame, preserved by rotation
  const std::array<Pt2, 4> local = {{{hx, hy}, {-hx, hy}, {-hx, -hy}, {hx, -hy}}};
  std::array<Pt2, 4> out;
  for (int i = 0; i < 4; ++i) {
    out[i] = {b.center[0] + c * local[i].x - s * local[i].y,
              b.center[1] + s * local[i].x + c * local[i].y};
  }
  return out;
}

double polygon_area(const std::vector<Pt2>& poly) {
  double a = 0.0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Pt2& p = poly[i];
    const Pt2& q = poly[(i + 1) % n];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::fabs(a);
}

// Clip a convex polygon against the half-plane left of edge (a -> b).
std::vector<Pt2> clip_edge(const std::vector<Pt2>& poly, const Pt2& a, const Pt2& b) {
  std::vector<Pt2> out;
  const std::size_t n = poly.size();
  if (n == 0) return out;
  auto side = [&](const Pt2& p) {
    return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
  };
  constexpr double kEps = 1e-12;
  for (std::size_t i = 0; i < n; ++i) {
    const Pt2& cur = poly[i];
    const Pt2& nxt = poly[(i + 1) % n];
    const double sc = side(cur);
    const double sn = side(nxt);
    if (sc >= -kEps) out.push_back(cur);
    if ((sc > kEps && sn < -kEps) || (sc < -kEps && sn > kEps)) {
      const double t = sc / (sc - sn);
      out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
    }
  }
  return out;
}

double footprint_intersection_area(const Box3D& a, const Box3D& b) {
  const auto ra = footprint_ccw(a);
  const auto rb = footprint_ccw(b);
  std::vector<Pt2> poly(ra.begin(), ra.end());
  for (int i = 0; i < 4 && !poly.empty(); ++i) {
    poly = clip_edge(poly, rb[i], rb[(i + 1) % 4]);
  }
  if (poly.size() < 3) return 0.0;
  return polygon_area(poly);
}

}  // namespace

double iou_3d(const Box3D& a, const Box3D& b) {
  for (const Box3D* box : {&a, &b}) {
    if (box->size[0] <= 0.0 || box->size[1] <= 0.0 || box->size[2] <= 0.0) {
      throw std::domain_error("iou_3d: degenerate box with non-positive extent");
    }
  }
  const double za0 = a.center[2] - 0.5 * a.size[2], za1 = a.center[2] + 0.5 * a.size[2];
  const double zb0 = b.center[2] - 0.5 * b.size[2], zb1 = b.center[2] + 0.5 * b.size[2];
  const double zo = std::min(za1, zb1) - std::max(za0, zb0);
  if (zo <= 0.0) return 0.0;
  const double inter = footprint_intersection_area(a, b) * zo;
  const double uni = box_volume(a) + box_volume(b) - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

std::vector<int> nms_3d(const std::vector<Box3D>& boxes, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) {
    throw std::invalid_argument("nms_3d: threshold must be in (0, 1)");
  }
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int i, int j) {
    if (boxes[i].score != boxes[j].score) return boxes[i].score > boxes[j].score;
    return i < j;
  });
  std::vector<int> kept;
  std::vector<char> dead(boxes.size(), 0);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const int i = order[oi];
    if (dead[i]) continue;
    kept.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const int j = order[oj];
      if (dead[j]) continue;
      if (iou_3d(boxes[i], boxes[j]) > iou_threshold) dead[j] = 1;
    }
  }
  return kept;
}

}  // namespace sdcot
