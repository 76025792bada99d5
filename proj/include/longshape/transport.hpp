/// Parallel transport of momenta along a geodesic via the fanning scheme, and
/// exp-parallel curves built from it.
///
/// The fanning step approximates the transported vector by a central
/// difference of two perturbed geodesic endpoints (one RK4 step with momenta
/// m +- eps w), divided by 2*eps*h, mapped back to momenta through the local
/// kernel matrix. The result is then rescaled so that the kernel norm
/// w^T K_c w and the inner product m^T K_c w with the geodesic momentum are
/// conserved exactly; the pre-rescaling drift is recorded as a diagnostic.
///
/// The transport grid is the geodesic grid: one fanning step per trajectory
/// interval, no resampling of control-point states.
#pragma once

#include "longshape/geodesics.hpp"
#include "longshape/kernel.hpp"
#include "longshape/shape.hpp"
#include "longshape/types.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace longshape {

struct TransportedMomenta {
  std::vector<double> times;   // the carrying trajectory's grid
  std::vector<Mat> momenta;    // transported w at each grid time
  // Largest relative deviation of the conserved quantities before rescaling;
  // rescaling should be a small correction, not a crutch.
  double raw_norm_drift = 0.0;
  double raw_angle_drift = 0.0;

  const Mat& at(int i) const { return momenta.at(i); }
};

struct TransportOptions {
  double eps_scale = 1e-3;       // perturbation has kernel norm eps_scale
  double max_condition = 1e12;   // kernel-matrix conditioning guard
};

/// Transports w along every interval of the carrying trajectory.
inline TransportedMomenta parallel_transport(const GeodesicTrajectory& traj, const Mat& w,
                                             const TransportOptions& opt = {}) {
  const KernelConfig& cfg = traj.kernel();
  const GeodesicState& s0 = traj.state(0);
  require(w.rows() == s0.points.rows() && w.cols() == s0.points.cols(),
          "parallel_transport: momenta shape mismatch");
  require(w.allFinite(), "parallel_transport: non-finite momenta");

  TransportedMomenta out;
  out.times = traj.times();
  out.momenta.reserve(out.times.size());
  out.momenta.push_back(w);

  const int n_steps = traj.n_intervals();

  // Transport of zero momenta is exactly zero; along a stationary geodesic
  // the transport is the identity.
  if (w.isZero(0.0) || s0.momenta.isZero(0.0)) {
    for (int s = 0; s < n_steps; ++s) out.momenta.push_back(w);
    return out;
  }

  {
    Eigen::SelfAdjointEigenSolver<Mat> eig0(kernel_matrix(s0.points, cfg));
    const Vec& ev = eig0.eigenvalues();
    if (!(ev(0) > 0.0) || ev(ev.size() - 1) / ev(0) > opt.max_condition)
      throw NumericalError("parallel transport: ill-conditioned kernel matrix at t = " +
                           std::to_string(traj.times()[0]));
  }

  const double norm0_sq = kernel_inner(s0.points, w, w, cfg);
  const double angle0 = kernel_inner(s0.points, s0.momenta, w, cfg);
  const double eps = opt.eps_scale / std::sqrt(norm0_sq);

  detail::Rk4Workspace ws;
  detail::StageStates stages;
  GeodesicState plus, minus, scratch;
  Mat cur = w;
  for (int s = 0; s < n_steps; ++s) {
    const double h = traj.times()[s + 1] - traj.times()[s];
    const GeodesicState& a = traj.state(s);
    const GeodesicState& b = traj.state(s + 1);

    scratch.points = a.points;
    scratch.momenta = a.momenta + eps * cur;
    detail::rk4_step(scratch, h, cfg, ws, stages, plus);
    scratch.momenta = a.momenta - eps * cur;
    detail::rk4_step(scratch, h, cfg, ws, stages, minus);

    const Mat u = (plus.points - minus.points) / (2.0 * eps * h);

    const Mat kb = kernel_matrix(b.points, cfg);
    Eigen::SelfAdjointEigenSolver<Mat> eig(kb);
    const Vec& ev = eig.eigenvalues();
    const double lo = ev(0), hi = ev(ev.size() - 1);
    if (!(lo > 0.0) || hi / lo > opt.max_condition)
      throw NumericalError("parallel transport: ill-conditioned kernel matrix at t = " +
                           std::to_string(traj.times()[s + 1]));
    const Mat raw = eig.eigenvectors() *
                    (ev.cwiseInverse().asDiagonal() * (eig.eigenvectors().transpose() * u));

    // Double renormalization: conserve m^T K w and w^T K w exactly.
    const double m2 = kernel_inner(b.points, b.momenta, b.momenta, cfg);
    const double raw_angle = kernel_inner(b.points, b.momenta, raw, cfg);
    const double raw_norm_sq = kernel_inner(b.points, raw, raw, cfg);
    out.raw_norm_drift = std::max(out.raw_norm_drift,
                                  std::abs(std::sqrt(std::max(raw_norm_sq, 0.0) / norm0_sq) - 1.0));
    if (angle0 != 0.0)
      out.raw_angle_drift = std::max(out.raw_angle_drift, std::abs(raw_angle / angle0 - 1.0));

    const double a_coef = angle0 / m2;
    Mat perp = raw - (raw_angle / m2) * b.momenta;
    const double perp_sq = kernel_inner(b.points, perp, perp, cfg);
    const double target_perp_sq = std::max(norm0_sq - angle0 * angle0 / m2, 0.0);
    if (perp_sq > 0.0 && target_perp_sq > 0.0)
      perp *= std::sqrt(target_perp_sq / perp_sq);
    else
      perp.setZero();
    cur = a_coef * b.momenta + perp;
    out.momenta.push_back(cur);
  }
  return out;
}

struct ExpParallelSteps {
  int steps_per_unit = 10;  // carrying geodesic / transport grid density
  int unit_exp_steps = 10;  // steps of each unit-time exponential
};

/// One direction of a carrying geodesic: the trajectory plus the grid indices
/// of the requested anchor times. Anchor times are exact grid nodes.
struct CarryingLeg {
  GeodesicTrajectory traj;
  std::vector<double> anchor_times;  // includes the start time at index 0
  std::vector<int> anchor_nodes;

  bool trivial() const { return anchor_times.size() <= 1; }
};

namespace detail {

/// Grid through the sorted anchors (ascending or descending away from
/// anchors[0]); each gap is subdivided uniformly at steps_per_unit density.
inline std::vector<double> refine_anchors(const std::vector<double>& anchors, int steps_per_unit,
                                          std::vector<int>& anchor_nodes) {
  std::vector<double> grid{anchors.front()};
  anchor_nodes.assign(anchors.size(), 0);
  for (std::size_t a = 1; a < anchors.size(); ++a) {
    const double gap = std::abs(anchors[a] - anchors[a - 1]);
    if (gap < 1e-12) {
      anchor_nodes[a] = static_cast<int>(grid.size()) - 1;
      continue;
    }
    const std::vector<double> seg =
        uniform_grid(anchors[a - 1], anchors[a], default_steps(anchors[a - 1], anchors[a], steps_per_unit));
    grid.insert(grid.end(), seg.begin() + 1, seg.end());
    anchor_nodes[a] = static_cast<int>(grid.size()) - 1;
  }
  return grid;
}

}  // namespace detail

/// Builds the carrying geodesic through all anchors on one side of t0.
/// `anchors` must start at t0 and be monotone away from it.
inline CarryingLeg build_carrying_leg(const Mat& c0, const Mat& m0, std::vector<double> anchors,
                                      int steps_per_unit, const KernelConfig& cfg) {
  CarryingLeg leg;
  leg.anchor_times = std::move(anchors);
  std::vector<double> grid = detail::refine_anchors(leg.anchor_times, steps_per_unit, leg.anchor_nodes);
  leg.traj = GeodesicTrajectory({c0, m0}, std::move(grid), cfg);
  return leg;
}

/// Exp-parallel curve: at each requested time t, the unit-time exponential of
/// the transported momenta, applied to the template carried to t by the
/// geodesic flow.
struct ExpParallelCurve {
  CarryingLeg forward, backward;             // carrying geodesic, split at t0
  TransportedMomenta transported_forward, transported_backward;
  std::vector<double> eval_times;            // as requested (original order)
  std::vector<Shape> shapes;                 // curve point per eval time
};

/// Samples the exp-parallel curve on one leg: flows the template along the
/// carrying geodesic and shoots the unit-time exponential of the transported
/// momenta at every anchor. Returns one shape per anchor (the first being the
/// start time itself).
inline std::vector<Shape> sample_exp_parallel_leg(const CarryingLeg& leg,
                                                  const TransportedMomenta& tw, const Shape& y0,
                                                  int unit_exp_steps) {
  std::vector<Shape> out;
  if (leg.anchor_times.empty()) return out;
  Mat flowed = y0.vertices;
  int at_node = 0;
  for (std::size_t a = 0; a < leg.anchor_times.size(); ++a) {
    const int node = leg.anchor_nodes[a];
    flowed = leg.traj.flow_points(flowed, at_node, node);
    at_node = node;
    const ControlPointConfig cp{leg.traj.state(node).points};
    const MomentaVector mv{tw.at(node)};
    out.push_back(exp_shape(cp, mv, Shape{flowed, y0.cells, y0.dim}, 0.0, 1.0, unit_exp_steps,
                            leg.traj.kernel()));
  }
  return out;
}

inline ExpParallelCurve exp_parallel(const ControlPointConfig& c0, const MomentaVector& m0,
                                     double t0, const MomentaVector& w,
                                     const std::vector<double>& eval_times, const Shape& y0,
                                     const KernelConfig& cfg, const ExpParallelSteps& steps = {}) {
  c0.validate(cfg);
  m0.validate(c0);
  w.validate(c0);
  require(y0.dim == cfg.ambient_dim, "exp_parallel: shape dimension mismatch");
  for (double t : eval_times) require(std::isfinite(t), "exp_parallel: non-finite eval time");

  std::vector<double> fwd{t0}, bwd{t0};
  for (double t : eval_times) (t >= t0 ? fwd : bwd).push_back(t);
  std::sort(fwd.begin() + 1, fwd.end());
  std::sort(bwd.begin() + 1, bwd.end(), std::greater<>());

  ExpParallelCurve curve;
  curve.eval_times = eval_times;
  curve.forward = build_carrying_leg(c0.points, m0.vectors, fwd, steps.steps_per_unit, cfg);
  curve.backward = build_carrying_leg(c0.points, m0.vectors, bwd, steps.steps_per_unit, cfg);
  curve.transported_forward = parallel_transport(curve.forward.traj, w.vectors);
  curve.transported_backward = parallel_transport(curve.backward.traj, w.vectors);

  const std::vector<Shape> fwd_shapes = sample_exp_parallel_leg(
      curve.forward, curve.transported_forward, y0, steps.unit_exp_steps);
  const std::vector<Shape> bwd_shapes = sample_exp_parallel_leg(
      curve.backward, curve.transported_backward, y0, steps.unit_exp_steps);

  // Map each requested time back to its leg sample (anchor times are exact
  // copies of the request, so equality comparison is safe).
  curve.shapes.reserve(eval_times.size());
  for (double t : eval_times) {
    const CarryingLeg& leg = t >= t0 ? curve.forward : curve.backward;
    const std::vector<Shape>& samples = t >= t0 ? fwd_shapes : bwd_shapes;
    const auto it = std::find(leg.anchor_times.begin() + 1, leg.anchor_times.end(), t);
    curve.shapes.push_back(samples[static_cast<std::size_t>(it - leg.anchor_times.begin())]);
  }
  return curve;
}

}  // namespace longshape
