#pragma once

#include <cmath>
#include <span>
#include <stdexcept>

#include "trackseg/tensor.hpp"

namespace trackseg {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(dot(*this)); }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline double distance(const Vec3& a, const Vec3& b) { return (a - b).norm(); }

// Axis-aligned box given by its minimum and maximum corners.
struct Aabb {
  Vec3 mn, mx;

  bool valid() const { return mn.x <= mx.x && mn.y <= mx.y && mn.z <= mx.z; }
  double volume() const {
    if (!valid()) return 0.0;
    return (mx.x - mn.x) * (mx.y - mn.y) * (mx.z - mn.z);
  }
  Vec3 center() const { return (mn + mx) * 0.5; }
};

// Volume IoU of two axis-aligned boxes. Disjoint or fully degenerate pairs
// score 0 so that point-boxes never look like perfect matches.
inline double aabb_iou(const Aabb& a, const Aabb& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("aabb_iou: invalid box");
  const double ix = std::min(a.mx.x, b.mx.x) - std::max(a.mn.x, b.mn.x);
  const double iy = std::min(a.mx.y, b.mx.y) - std::max(a.mn.y, b.mn.y);
  const double iz = std::min(a.mx.z, b.mx.z) - std::max(a.mn.z, b.mn.z);
  if (ix <= 0.0 || iy <= 0.0 || iz <= 0.0) return 0.0;
  const double inter = ix * iy * iz;
  const double uni = a.volume() + b.volume() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

inline Vec3 centroid(std::span<const Vec3> pts) {
  if (pts.empty()) throw std::invalid_argument("empty mask");
  Vec3 s;
  for (const Vec3& p : pts) s = s + p;
  return s * (1.0 / static_cast<double>(pts.size()));
}

// Entry (i,j) is the Euclidean distance between a[i] and b[j]. Either side
// may be empty, yielding a zero-dimension matrix.
inline Tensor pairwise_distances(std::span<const Vec3> a, std::span<const Vec3> b) {
  Tensor d(static_cast<int>(a.size()), static_cast<int>(b.size()));
  for (int i = 0; i < d.rows; ++i)
    for (int j = 0; j < d.cols; ++j) d.at(i, j) = distance(a[i], b[j]);
  return d;
}

inline Aabb bounding_box(std::span<const Vec3> pts) {
  if (pts.empty()) throw std::invalid_argument("bounding_box: no points");
  Aabb b{pts[0], pts[0]};
  for (const Vec3& p : pts) {
    b.mn.x = std::min(b.mn.x, p.x);
    b.mn.y = std::min(b.mn.y, p.y);
    b.mn.z = std::min(b.mn.z, p.z);
    b.mx.x = std::max(b.mx.x, p.x);
    b.mx.y = std::max(b.mx.y, p.y);
    b.mx.z = std::max(b.mx.z, p.z);
  }
  return b;
}

}  // namespace trackseg
