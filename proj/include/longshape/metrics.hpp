/// Correspondence-free residual metrics between shapes: current and varifold
/// kernel distances and their gradients with respect to the first shape's
/// vertices. Both use a Gaussian kernel k_W of configurable width on cell
/// centers; the pairing term is n_p . n_q for currents and
/// (n_p . n_q)^2 / (|n_p| |n_q|) for varifolds (unnormalized-measure
/// convention).
#pragma once

#include "longshape/shape.hpp"
#include "longshape/types.hpp"

#include <cmath>
#include <string>

namespace longshape {

enum class MetricKind { Current, Varifold };

struct MetricConfig {
  MetricKind kind = MetricKind::Current;
  double width = 1.0;

  void validate() const {
    if (!(width > 0.0) || !std::isfinite(width))
      throw std::invalid_argument("metric width must be positive and finite");
  }
};

namespace detail {

inline void check_varifold_cells(const CellRepresentation& rep, const char* which) {
  for (int c = 0; c < static_cast<int>(rep.normals.rows()); ++c)
    if (rep.normals.row(c).squaredNorm() == 0.0)
      throw DataError(std::string("varifold metric: degenerate cell ") + std::to_string(c) +
                      " in " + which + " shape");
}

/// <S, S'> = sum_pq k_W(g_p, g'_q) pairing(n_p, n'_q).
inline double metric_inner(const CellRepresentation& a, const CellRepresentation& b,
                           const MetricConfig& cfg) {
  const double inv_w2 = 1.0 / (cfg.width * cfg.width);
  double s = 0.0;
  for (int p = 0; p < static_cast<int>(a.centers.rows()); ++p) {
    for (int q = 0; q < static_cast<int>(b.centers.rows()); ++q) {
      const double kw = std::exp(-(a.centers.row(p) - b.centers.row(q)).squaredNorm() * inv_w2);
      const double ndot = a.normals.row(p).dot(b.normals.row(q));
      if (cfg.kind == MetricKind::Current) {
        s += kw * ndot;
      } else {
        s += kw * ndot * ndot / (a.normals.row(p).norm() * b.normals.row(q).norm());
      }
    }
  }
  return s;
}

/// Accumulates d<S, S'>/d(centers of S) and d<S, S'>/d(normals of S), scaled
/// by `factor`, into gc/gn (S occupying the first slot only).
inline void metric_inner_grad_slot1(const CellRepresentation& a, const CellRepresentation& b,
                                    const MetricConfig& cfg, double factor, Mat& gc, Mat& gn) {
  const double inv_w2 = 1.0 / (cfg.width * cfg.width);
  for (int p = 0; p < static_cast<int>(a.centers.rows()); ++p) {
    for (int q = 0; q < static_cast<int>(b.centers.rows()); ++q) {
      const double kw = std::exp(-(a.centers.row(p) - b.centers.row(q)).squaredNorm() * inv_w2);
      const double ndot = a.normals.row(p).dot(b.normals.row(q));
      double pairing;
      if (cfg.kind == MetricKind::Current) {
        pairing = ndot;
        gn.row(p) += factor * kw * b.normals.row(q);
      } else {
        const double na = a.normals.row(p).norm();
        const double nb = b.normals.row(q).norm();
        pairing = ndot * ndot / (na * nb);
        gn.row(p) += factor * kw *
                     (2.0 * ndot / (na * nb) * b.normals.row(q) -
                      ndot * ndot / (na * na * na * nb) * a.normals.row(p));
      }
      gc.row(p) += factor * pairing * kw * (-2.0 * inv_w2) * (a.centers.row(p) - b.centers.row(q));
    }
  }
}

/// Chain rule from (center, normal) gradients back to the vertices of s.
inline Mat cell_grads_to_vertices(const Shape& s, const Mat& gc, const Mat& gn) {
  Mat g = Mat::Zero(s.n_vertices(), s.dim);
  if (s.dim == 2) {
    for (int c = 0; c < s.n_cells(); ++c) {
      const int ia = s.cells(c, 0), ib = s.cells(c, 1);
      g.row(ia) += 0.5 * gc.row(c) - gn.row(c);
      g.row(ib) += 0.5 * gc.row(c) + gn.row(c);
    }
  } else {
    for (int c = 0; c < s.n_cells(); ++c) {
      const int ia = s.cells(c, 0), ib = s.cells(c, 1), ic = s.cells(c, 2);
      const Eigen::Vector3d va = s.vertices.row(ia);
      const Eigen::Vector3d vb = s.vertices.row(ib);
      const Eigen::Vector3d vc = s.vertices.row(ic);
      const Eigen::Vector3d gnc = gn.row(c);
      g.row(ia) += (gc.row(c) / 3.0) + (0.5 * (vb - vc).cross(gnc)).transpose();
      g.row(ib) += (gc.row(c) / 3.0) + (0.5 * (vc - va).cross(gnc)).transpose();
      g.row(ic) += (gc.row(c) / 3.0) + (0.5 * (va - vb).cross(gnc)).transpose();
    }
  }
  return g;
}

}  // namespace detail

/// Squared metric distance |s1 - s2|^2 = <s1,s1> - 2<s1,s2> + <s2,s2>.
inline double metric_dist2(const Shape& s1, const Shape& s2, const MetricConfig& cfg) {
  cfg.validate();
  require(s1.dim == s2.dim, "metric_dist2: ambient dimension mismatch");
  const CellRepresentation a = cell_representation(s1);
  const CellRepresentation b = cell_representation(s2);
  if (cfg.kind == MetricKind::Varifold) {
    detail::check_varifold_cells(a, "first");
    detail::check_varifold_cells(b, "second");
  }
  return detail::metric_inner(a, a, cfg) - 2.0 * detail::metric_inner(a, b, cfg) +
         detail::metric_inner(b, b, cfg);
}

/// Gradient of metric_dist2 with respect to the vertices of s1.
inline Mat metric_dist2_gradient(const Shape& s1, const Shape& s2, const MetricConfig& cfg) {
  cfg.validate();
  require(s1.dim == s2.dim, "metric_dist2_gradient: ambient dimension mismatch");
  const CellRepresentation a = cell_representation(s1);
  const CellRepresentation b = cell_representation(s2);
  if (cfg.kind == MetricKind::Varifold) {
    detail::check_varifold_cells(a, "first");
    detail::check_varifold_cells(b, "second");
  }
  Mat gc = Mat::Zero(s1.n_cells(), s1.dim);
  Mat gn = Mat::Zero(s1.n_cells(), s1.dim);
  // d<a,a> = 2 * slot-1 partial (pairing symmetric in (p, q)); cross term -2<a,b>.
  detail::metric_inner_grad_slot1(a, a, cfg, 2.0, gc, gn);
  detail::metric_inner_grad_slot1(a, b, cfg, -2.0, gc, gn);
  return detail::cell_grads_to_vertices(s1, gc, gn);
}

inline MetricKind metric_kind_from_string(const std::string& s) {
  if (s == "current") return MetricKind::Current;
  if (s == "varifold") return MetricKind::Varifold;
  throw ConfigError("unknown metric kind '" + s + "' (expected 'current' or 'varifold')");
}

inline std::string to_string(MetricKind k) {
  return k == MetricKind::Current ? "current" : "varifold";
}

}  // namespace longshape
