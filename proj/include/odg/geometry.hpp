#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "odg/common.hpp"

namespace odg {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

/// Axis-aligned box stored as min corner plus size.
struct HorizontalBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }

  void validate() const {
    if (!(std::isfinite(x) && std::isfinite(y) && std::isfinite(w) && std::isfinite(h)))
      throw InvalidInput("HorizontalBox: non-finite field");
    if (!(w > 0.0 && h > 0.0)) throw InvalidInput("HorizontalBox: non-positive size");
  }
};

/// Wrap an angle into [-pi/2, pi/2). Exact fixed point: wrapping twice equals
/// wrapping once.
inline double wrap_half_pi(double theta) {
  double t = std::fmod(theta + M_PI / 2.0, M_PI);
  if (t < 0.0) t += M_PI;
  return t - M_PI / 2.0;
}

/// Rotated rectangle: center, side lengths, and the rotation of its x-axis
/// counterclockwise from the image x-axis. Canonical form uses the long-edge
/// convention: w >= h and theta in [-pi/2, pi/2).
struct OrientedBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 1.0;
  double h = 1.0;
  double theta = 0.0;

  static constexpr double kMinSide = 1e-6;

  void validate() const {
    if (!(std::isfinite(cx) && std::isfinite(cy) && std::isfinite(w) && std::isfinite(h) &&
          std::isfinite(theta)))
      throw InvalidInput("OrientedBox: non-finite field");
    if (!(w > kMinSide && h > kMinSide))
      throw InvalidInput("OrientedBox: degenerate side length (" + std::to_string(w) + ", " +
                         std::to_string(h) + ")");
  }

  double area() const { return w * h; }

  /// Validated, canonicalized construction. All library pathways produce
  /// boxes through here.
  static OrientedBox make(double cx, double cy, double w, double h, double theta) {
    OrientedBox b{cx, cy, w, h, theta};
    b.validate();
    return canonicalize(b);
  }

  static OrientedBox canonicalize(OrientedBox b) {
    if (b.w < b.h) {
      std::swap(b.w, b.h);
      b.theta += M_PI / 2.0;
    }
    b.theta = wrap_half_pi(b.theta);
    return b;
  }
};

/// Counterclockwise convex polygon (positive shoelace area).
struct ConvexPolygon {
  std::vector<Vec2> vertices;

  double area() const {
    double s = 0.0;
    const std::size_t n = vertices.size();
    for (std::size_t i = 0; i < n; ++i) {
      const Vec2& a = vertices[i];
      const Vec2& b = vertices[(i + 1) % n];
      s += a.x * b.y - b.x * a.y;
    }
    return 0.5 * s;
  }
};

/// Corners in counterclockwise order starting from the (-w/2, -h/2) corner of
/// the box frame. The ordering is a stable contract.
inline ConvexPolygon to_corners(const OrientedBox& b) {
  b.validate();
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  const double hw = 0.5 * b.w, hh = 0.5 * b.h;
  const double lx[4] = {-hw, hw, hw, -hw};
  const double ly[4] = {-hh, -hh, hh, hh};
  ConvexPolygon poly;
  poly.vertices.reserve(4);
  for (int i = 0; i < 4; ++i)
    poly.vertices.push_back(Vec2{b.cx + lx[i] * c - ly[i] * s, b.cy + lx[i] * s + ly[i] * c});
  return poly;
}

inline HorizontalBox aabb_hull(const OrientedBox& b) {
  const ConvexPolygon p = to_corners(b);
  double x0 = p.vertices[0].x, x1 = x0, y0 = p.vertices[0].y, y1 = y0;
  for (const Vec2& v : p.vertices) {
    x0 = std::min(x0, v.x);
    x1 = std::max(x1, v.x);
    y0 = std::min(y0, v.y);
    y1 = std::max(y1, v.y);
  }
  return HorizontalBox{x0, y0, x1 - x0, y1 - y0};
}

namespace detail {

constexpr double kCollinearTol = 1e-9;
constexpr double kEmptyAreaTol = 1e-12;

/// Sutherland-Hodgman: clip `subject` by the half-plane left of edge a->b.
inline std::vector<Vec2> clip_edge(const std::vector<Vec2>& subject, const Vec2& a, const Vec2& b) {
  std::vector<Vec2> out;
  out.reserve(subject.size() + 1);
  const double ex = b.x - a.x, ey = b.y - a.y;
  auto side = [&](const Vec2& p) { return ex * (p.y - a.y) - ey * (p.x - a.x); };
  const std::size_t n = subject.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& cur = subject[i];
    const Vec2& nxt = subject[(i + 1) % n];
    const double sc = side(cur);
    const double sn = side(nxt);
    if (sc >= -kCollinearTol) out.push_back(cur);
    if ((sc > kCollinearTol && sn < -kCollinearTol) || (sc < -kCollinearTol && sn > kCollinearTol)) {
      const double den = sc - sn;
      if (std::fabs(den) > 1e-30) {
        const double t = sc / den;
        out.push_back(Vec2{cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
      }
    }
  }
  return out;
}

}  // namespace detail

/// Intersection of two counterclockwise convex polygons.
inline ConvexPolygon intersect_convex(const ConvexPolygon& a, const ConvexPolygon& b) {
  std::vector<Vec2> cur = a.vertices;
  const std::size_t n = b.vertices.size();
  for (std::size_t i = 0; i < n && cur.size() >= 3; ++i)
    cur = detail::clip_edge(cur, b.vertices[i], b.vertices[(i + 1) % n]);
  if (cur.size() < 3) cur.clear();
  return ConvexPolygon{std::move(cur)};
}

/// Rotated IoU via polygon clipping: |a n b| / |a u b|, clamped to [0,1].
inline double rotated_iou(const OrientedBox& a, const OrientedBox& b) {
  a.validate();
  b.validate();
  // quick reject on bounding circles
  const double dx = a.cx - b.cx, dy = a.cy - b.cy;
  const double ra = 0.5 * std::hypot(a.w, a.h), rb = 0.5 * std::hypot(b.w, b.h);
  if (dx * dx + dy * dy > (ra + rb) * (ra + rb)) return 0.0;
  const ConvexPolygon inter = intersect_convex(to_corners(a), to_corners(b));
  double ai = inter.vertices.empty() ? 0.0 : inter.area();
  if (ai < detail::kEmptyAreaTol) ai = 0.0;
  const double au = a.area() + b.area() - ai;
  if (au <= 0.0) return 0.0;
  return std::clamp(ai / au, 0.0, 1.0);
}

inline double horizontal_iou(const HorizontalBox& a, const HorizontalBox& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Binary gate: 1 iff the RoI overlaps some ground-truth box with IoU >= 0.5.
inline int gate_sigma(const OrientedBox& roi, const std::vector<OrientedBox>& gts) {
  if (gts.empty()) {
    log_warn("gate_sigma: no ground-truth boxes, gating out");
    return 0;
  }
  for (const OrientedBox& gt : gts)
    if (rotated_iou(roi, gt) >= 0.5) return 1;
  return 0;
}

/// Horizontal variant: ground truths are replaced by their axis-aligned hulls.
inline int gate_sigma(const HorizontalBox& roi, const std::vector<OrientedBox>& gts) {
  roi.validate();
  if (gts.empty()) {
    log_warn("gate_sigma: no ground-truth boxes, gating out");
    return 0;
  }
  for (const OrientedBox& gt : gts)
    if (horizontal_iou(roi, aabb_hull(gt)) >= 0.5) return 1;
  return 0;
}

/// Greedy descending-score suppression; a box is dropped when its IoU with an
/// already kept box exceeds the threshold. Score ties break toward the lower
/// original index, so the result is independent of input permutation.
inline std::vector<int> rotated_nms(const std::vector<OrientedBox>& boxes,
                                    const std::vector<double>& scores, double iou_threshold) {
  if (boxes.size() != scores.size())
    throw InvalidInput("rotated_nms: " + std::to_string(boxes.size()) + " boxes vs " +
                       std::to_string(scores.size()) + " scores");
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0))
    throw InvalidInput("rotated_nms: iou_threshold must be in (0,1)");
  std::vector<int> order(boxes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)])
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    return a < b;
  });
  std::vector<int> keep;
  std::vector<char> suppressed(boxes.size(), 0);
  for (int i : order) {
    if (suppressed[static_cast<std::size_t>(i)]) continue;
    keep.push_back(i);
    for (int j : order) {
      if (j == i || suppressed[static_cast<std::size_t>(j)]) continue;
      if (rotated_iou(boxes[static_cast<std::size_t>(i)], boxes[static_cast<std::size_t>(j)]) >
          iou_threshold)
        suppressed[static_cast<std::size_t>(j)] = 1;
    }
  }
  return keep;
}

/// Same greedy rule for horizontal boxes (proposal pruning).
inline std::vector<int> horizontal_nms(const std::vector<HorizontalBox>& boxes,
                                       const std::vector<double>& scores, double iou_threshold) {
  if (boxes.size() != scores.size()) throw InvalidInput("horizontal_nms: length mismatch");
  std::vector<int> order(boxes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)])
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    return a < b;
  });
  std::vector<int> keep;
  std::vector<char> suppressed(boxes.size(), 0);
  for (int i : order) {
    if (suppressed[static_cast<std::size_t>(i)]) continue;
    keep.push_back(i);
    for (int j : order) {
      if (j == i || suppressed[static_cast<std::size_t>(j)]) continue;
      if (horizontal_iou(boxes[static_cast<std::size_t>(i)], boxes[static_cast<std::size_t>(j)]) >
          iou_threshold)
        suppressed[static_cast<std::size_t>(j)] = 1;
    }
  }
  return keep;
}

/// Wrapped angular deviation under period pi, in [0, pi/2]. A rectangle's
/// orientation is pi-periodic, so pred = gt + pi is a perfect prediction.
inline double angle_delta(double pred, double gt) {
  if (!(std::isfinite(pred) && std::isfinite(gt))) throw InvalidInput("angle_delta: non-finite input");
  double r = std::fmod(std::fabs(pred - gt), M_PI);
  return std::min(r, M_PI - r);
}

}  // namespace odg
