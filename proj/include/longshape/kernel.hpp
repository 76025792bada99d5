/// Gaussian-kernel algebra on control points: kernel matrices, velocity-field
/// convolution, Hamiltonian energy and its gradients.
///
/// Conventions: the kernel is the scalar Gaussian k(x, y) = exp(-|x - y|^2 / width^2)
/// (no 1/2 factor, unit amplitude). All sums are exact O(n^2) double loops;
/// control-point counts are small throughout.
#pragma once

#include "longshape/types.hpp"

#include <cmath>

namespace longshape {

struct KernelConfig {
  double width = 1.0;    // ambient-space length units
  int ambient_dim = 2;   // 2 or 3

  void validate() const {
    if (!(width > 0.0) || !std::isfinite(width))
      throw std::invalid_argument("kernel width must be positive and finite");
    if (ambient_dim != 2 && ambient_dim != 3)
      throw std::invalid_argument("ambient dimension must be 2 or 3");
  }
};

/// Positions of the n_cp control points, one per row.
struct ControlPointConfig {
  Mat points;

  int count() const { return static_cast<int>(points.rows()); }

  void validate(const KernelConfig& cfg) const {
    require(points.rows() >= 1, "need at least one control point");
    require(points.cols() == cfg.ambient_dim, "control-point dimension mismatch");
    require(points.allFinite(), "control points must be finite");
  }
};

/// One momentum vector per control point, one per row.
struct MomentaVector {
  Mat vectors;

  int count() const { return static_cast<int>(vectors.rows()); }

  void validate(const ControlPointConfig& c) const {
    require(vectors.rows() == c.points.rows(), "momenta/control-point count mismatch");
    require(vectors.cols() == c.points.cols(), "momenta dimension mismatch");
    require(vectors.allFinite(), "momenta must be finite");
  }
};

template <typename DerivedA, typename DerivedB>
inline double kernel_eval(const Eigen::MatrixBase<DerivedA>& x,
                          const Eigen::MatrixBase<DerivedB>& y,
                          const KernelConfig& cfg) {
  require(x.allFinite() && y.allFinite(), "kernel_eval: non-finite position");
  const double d2 = (x - y).squaredNorm();
  return std::exp(-d2 / (cfg.width * cfg.width));
}

/// K_c = [k(c_i, c_j)]_ij; symmetric with unit diagonal by construction.
inline Mat kernel_matrix(const Mat& points, const KernelConfig& cfg) {
  const int n = static_cast<int>(points.rows());
  const double inv_w2 = 1.0 / (cfg.width * cfg.width);
  Mat k(n, n);
  for (int i = 0; i < n; ++i) {
    k(i, i) = 1.0;
    for (int j = i + 1; j < n; ++j) {
      const double v = std::exp(-(points.row(i) - points.row(j)).squaredNorm() * inv_w2);
      k(i, j) = v;
      k(j, i) = v;
    }
  }
  return k;
}

inline Mat kernel_matrix(const ControlPointConfig& c, const KernelConfig& cfg) {
  c.validate(cfg);
  return kernel_matrix(c.points, cfg);
}

/// Velocity field at query points: v(x) = sum_k k(c_k, x) m_k.
/// Linear in the momenta.
inline Mat convolve(const Mat& points, const Mat& momenta, const Mat& queries,
                    const KernelConfig& cfg) {
  const int n = static_cast<int>(points.rows());
  const int q = static_cast<int>(queries.rows());
  const double inv_w2 = 1.0 / (cfg.width * cfg.width);
  Mat v = Mat::Zero(q, queries.cols());
  for (int j = 0; j < q; ++j) {
    for (int k = 0; k < n; ++k) {
      const double w = std::exp(-(points.row(k) - queries.row(j)).squaredNorm() * inv_w2);
      v.row(j) += w * momenta.row(k);
    }
  }
  return v;
}

inline Mat convolve(const ControlPointConfig& c, const MomentaVector& m, const Mat& queries,
                    const KernelConfig& cfg) {
  c.validate(cfg);
  m.validate(c);
  require(queries.cols() == cfg.ambient_dim, "query dimension mismatch");
  require(queries.allFinite(), "queries must be finite");
  return convolve(c.points, m.vectors, queries, cfg);
}

/// H(c, m) = 1/2 m^T K_c m, the deformation kinetic energy.
inline double hamiltonian(const Mat& points, const Mat& momenta, const KernelConfig& cfg) {
  const int n = static_cast<int>(points.rows());
  const double inv_w2 = 1.0 / (cfg.width * cfg.width);
  double h = 0.0;
  for (int i = 0; i < n; ++i) {
    h += 0.5 * momenta.row(i).squaredNorm();
    for (int j = i + 1; j < n; ++j) {
      const double kij = std::exp(-(points.row(i) - points.row(j)).squaredNorm() * inv_w2);
      h += kij * momenta.row(i).dot(momenta.row(j));
    }
  }
  return h;
}

inline double hamiltonian(const ControlPointConfig& c, const MomentaVector& m,
                          const KernelConfig& cfg) {
  c.validate(cfg);
  m.validate(c);
  return hamiltonian(c.points, m.vectors, cfg);
}

struct HamiltonianGrads {
  Mat dm;  // dH/dm = K_c m, one row per control point
  Mat dc;  // dH/dc = 1/2 grad_c(m^T K_c m), one row per control point
};

/// Writes both gradients into a caller-provided result; the hot path of the
/// geodesic integrator, kept allocation-free.
inline void hamiltonian_grads_into(const Mat& points, const Mat& momenta,
                                   const KernelConfig& cfg, HamiltonianGrads& out) {
  const int n = static_cast<int>(points.rows());
  const int d = static_cast<int>(points.cols());
  const double inv_w2 = 1.0 / (cfg.width * cfg.width);
  out.dm.setZero(n, d);
  out.dc.setZero(n, d);
  for (int i = 0; i < n; ++i) {
    out.dm.row(i) += momenta.row(i);  // k(c_i, c_i) = 1
    for (int j = i + 1; j < n; ++j) {
      const double kij = std::exp(-(points.row(i) - points.row(j)).squaredNorm() * inv_w2);
      out.dm.row(i) += kij * momenta.row(j);
      out.dm.row(j) += kij * momenta.row(i);
      // d k(c_i,c_j)/d c_i = -2/w^2 (c_i - c_j) k(c_i,c_j); the diagonal term
      // is translation-invariant and contributes nothing.
      const double mdot = momenta.row(i).dot(momenta.row(j));
      const double coef = -2.0 * inv_w2 * kij * mdot;
      out.dc.row(i) += coef * (points.row(i) - points.row(j));
      out.dc.row(j) += coef * (points.row(j) - points.row(i));
    }
  }
}

inline HamiltonianGrads hamiltonian_grads(const ControlPointConfig& c, const MomentaVector& m,
                                          const KernelConfig& cfg) {
  c.validate(cfg);
  m.validate(c);
  HamiltonianGrads g;
  hamiltonian_grads_into(c.points, m.vectors, cfg, g);
  return g;
}

/// Kernel inner product <u, v>_{K_c} = sum_ij k(c_i, c_j) u_i . v_j.
inline double kernel_inner(const Mat& points, const Mat& u, const Mat& v,
                           const KernelConfig& cfg) {
  const int n = static_cast<int>(points.rows());
  const double inv_w2 = 1.0 / (cfg.width * cfg.width);
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    s += u.row(i).dot(v.row(i));
    for (int j = i + 1; j < n; ++j) {
      const double kij = std::exp(-(points.row(i) - points.row(j)).squaredNorm() * inv_w2);
      s += kij * (u.row(i).dot(v.row(j)) + u.row(j).dot(v.row(i)));
    }
  }
  return s;
}

}  // namespace longshape
