/// Shape containers: vertices plus connectivity (2D polyline segments or 3D
/// triangles), and the center/normal cell representation used by the
/// correspondence-free metrics.
#pragma once

#include "longshape/types.hpp"

#include <string>

namespace longshape {

struct Shape {
  Mat vertices;  // n_vertices x dim
  IMat cells;    // n_cells x 2 (dim 2, segments) or n_cells x 3 (dim 3, triangles)
  int dim = 2;

  int n_vertices() const { return static_cast<int>(vertices.rows()); }
  int n_cells() const { return static_cast<int>(cells.rows()); }

  void validate() const {
    require(dim == 2 || dim == 3, "shape dimension must be 2 or 3");
    require(vertices.cols() == dim, "vertex dimension mismatch");
    require(vertices.allFinite(), "vertices must be finite");
    const int verts_per_cell = dim == 2 ? 2 : 3;
    require(cells.cols() == verts_per_cell || cells.rows() == 0,
            "cells must have 2 (dim 2) or 3 (dim 3) vertex indices");
    for (int c = 0; c < n_cells(); ++c)
      for (int k = 0; k < static_cast<int>(cells.cols()); ++k)
        if (cells(c, k) < 0 || cells(c, k) >= n_vertices())
          throw DataError("cell " + std::to_string(c) + " references vertex " +
                          std::to_string(cells(c, k)) + " out of range");
  }
};

/// Per-cell barycenters and length/area-weighted normals:
///   dim 2: normal of segment (a, b) is the tangent b - a;
///   dim 3: normal of triangle (a, b, c) is 1/2 (b - a) x (c - a).
struct CellRepresentation {
  Mat centers;  // n_cells x dim
  Mat normals;  // n_cells x dim
};

inline CellRepresentation cell_representation(const Shape& s) {
  CellRepresentation rep;
  const int nc = s.n_cells();
  rep.centers.resize(nc, s.dim);
  rep.normals.resize(nc, s.dim);
  if (s.dim == 2) {
    for (int c = 0; c < nc; ++c) {
      const auto a = s.vertices.row(s.cells(c, 0));
      const auto b = s.vertices.row(s.cells(c, 1));
      rep.centers.row(c) = 0.5 * (a + b);
      rep.normals.row(c) = b - a;
    }
  } else {
    for (int c = 0; c < nc; ++c) {
      const Eigen::Vector3d a = s.vertices.row(s.cells(c, 0));
      const Eigen::Vector3d b = s.vertices.row(s.cells(c, 1));
      const Eigen::Vector3d d = s.vertices.row(s.cells(c, 2));
      rep.centers.row(c) = ((a + b + d) / 3.0).transpose();
      rep.normals.row(c) = (0.5 * (b - a).cross(d - a)).transpose();
    }
  }
  return rep;
}

/// Throws DataError if any cell is degenerate (zero-length segment or
/// zero-area triangle); stored shapes must be non-degenerate.
inline void check_nondegenerate(const Shape& s) {
  const CellRepresentation rep = cell_representation(s);
  for (int c = 0; c < s.n_cells(); ++c)
    if (rep.normals.row(c).squaredNorm() == 0.0)
      throw DataError("degenerate cell " + std::to_string(c));
}

}  // namespace longshape
