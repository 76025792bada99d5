/// Shared small-scale 2D fixtures: a bump-shaped polyline template, five
/// control points spread along it, and momenta that raise and tilt the bump.
/// Scales chosen so unit-time deformations are visible but well inside the
/// diffeomorphic regime.
#pragma once

#include "longshape/kernel.hpp"
#include "longshape/shape.hpp"

#include <cmath>
#include <random>

namespace fixtures {

using longshape::ControlPointConfig;
using longshape::IMat;
using longshape::KernelConfig;
using longshape::Mat;
using longshape::MomentaVector;
using longshape::Shape;

inline KernelConfig kernel() { return KernelConfig{1.0, 2}; }

/// Open polyline y = h * exp(-x^2 / 0.8) over x in [-2, 2].
inline Shape bump_polyline(int n_vertices = 25, double height = 0.8) {
  Shape s;
  s.dim = 2;
  s.vertices.resize(n_vertices, 2);
  for (int i = 0; i < n_vertices; ++i) {
    const double x = -2.0 + 4.0 * i / (n_vertices - 1);
    s.vertices(i, 0) = x;
    s.vertices(i, 1) = height * std::exp(-x * x / 0.8);
  }
  s.cells.resize(n_vertices - 1, 2);
  for (int i = 0; i < n_vertices - 1; ++i) {
    s.cells(i, 0) = i;
    s.cells(i, 1) = i + 1;
  }
  return s;
}

inline ControlPointConfig five_control_points() {
  Mat pts(5, 2);
  pts << -2.0, 0.3, -1.0, 0.3, 0.0, 0.3, 1.0, 0.3, 2.0, 0.3;
  return ControlPointConfig{pts};
}

/// Momenta that grow the bump and sweep it slightly to the right.
inline MomentaVector growth_momenta() {
  Mat m(5, 2);
  m << 0.00, -0.02,
       0.05, 0.04,
       0.00, 0.12,
       -0.05, 0.04,
       0.00, -0.02;
  return MomentaVector{m};
}

/// Two source patterns: an antisymmetric tilt and a horizontal stretch,
/// stored column-wise as a (2 * n_cp) x 2 mixing matrix (x0 y0 x1 y1 ... layout).
inline Mat mixing_two_sources() {
  Mat a = Mat::Zero(10, 2);
  // column 0: tilt (left side up, right side down)
  a(1, 0) = 0.08;   // cp0 y
  a(3, 0) = 0.04;   // cp1 y
  a(7, 0) = -0.04;  // cp3 y
  a(9, 0) = -0.08;  // cp4 y
  // column 1: horizontal stretch
  a(0, 1) = -0.06;  // cp0 x
  a(2, 1) = -0.03;  // cp1 x
  a(6, 1) = 0.03;   // cp3 x
  a(8, 1) = 0.06;   // cp4 x
  return a;
}

inline Mat random_points(int n, int d, std::mt19937_64& rng, double scale = 2.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Mat p(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) p(i, j) = u(rng);
  return p;
}

inline Mat random_momenta(int n, int d, std::mt19937_64& rng, double scale = 0.3) {
  return random_points(n, d, rng, scale);
}

/// Proper segment-pair intersection test for the 2D diffeomorphy proxy.
inline bool segments_intersect(const Eigen::RowVector2d& a, const Eigen::RowVector2d& b,
                               const Eigen::RowVector2d& c, const Eigen::RowVector2d& d) {
  auto cross = [](const Eigen::RowVector2d& u, const Eigen::RowVector2d& v) {
    return u(0) * v(1) - u(1) * v(0);
  };
  const double d1 = cross(d - c, a - c);
  const double d2 = cross(d - c, b - c);
  const double d3 = cross(b - a, c - a);
  const double d4 = cross(b - a, d - a);
  return ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) &&
         ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0));
}

/// True if any two non-adjacent segments of the polyline cross.
inline bool polyline_self_intersects(const Shape& s) {
  for (int i = 0; i < s.n_cells(); ++i) {
    for (int j = i + 2; j < s.n_cells(); ++j) {
      if (segments_intersect(s.vertices.row(s.cells(i, 0)), s.vertices.row(s.cells(i, 1)),
                             s.vertices.row(s.cells(j, 0)), s.vertices.row(s.cells(j, 1))))
        return true;
    }
  }
  return false;
}

}  // namespace fixtures
