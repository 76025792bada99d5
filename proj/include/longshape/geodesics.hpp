/// Geodesics of the control-point manifold: RK4 integration of the
/// Hamiltonian equations
///     c' = K_c m ,   m' = -1/2 grad_c { m^T K_c m }
/// and the flow of arbitrary shape points along the induced velocity fields.
///
/// Shape vertices are advected jointly with the control points in one coupled
/// ODE system: the trajectory records the RK4 stage states of (c, m) so that
/// a later vertex flow reproduces exactly what a simultaneous integration
/// would have produced, without re-integrating the control points.
#pragma once

#include "longshape/kernel.hpp"
#include "longshape/shape.hpp"
#include "longshape/types.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace longshape {

struct GeodesicState {
  Mat points;   // control points, n_cp x d
  Mat momenta;  // momenta, n_cp x d
};

namespace detail {

// One RK4 stage evaluation bundle for the (c, m) system.
struct StageStates {
  GeodesicState s1, s2, s3, s4;  // states at which velocities were evaluated
};

struct Rk4Workspace {
  HamiltonianGrads g1, g2, g3, g4;
};

// Advances (c, m) by one RK4 step of size h; records the four stage states.
inline void rk4_step(const GeodesicState& in, double h, const KernelConfig& cfg,
                     Rk4Workspace& ws, StageStates& stages, GeodesicState& out) {
  stages.s1 = in;
  hamiltonian_grads_into(stages.s1.points, stages.s1.momenta, cfg, ws.g1);

  stages.s2.points = in.points + (0.5 * h) * ws.g1.dm;
  stages.s2.momenta = in.momenta - (0.5 * h) * ws.g1.dc;
  hamiltonian_grads_into(stages.s2.points, stages.s2.momenta, cfg, ws.g2);

  stages.s3.points = in.points + (0.5 * h) * ws.g2.dm;
  stages.s3.momenta = in.momenta - (0.5 * h) * ws.g2.dc;
  hamiltonian_grads_into(stages.s3.points, stages.s3.momenta, cfg, ws.g3);

  stages.s4.points = in.points + h * ws.g3.dm;
  stages.s4.momenta = in.momenta - h * ws.g3.dc;
  hamiltonian_grads_into(stages.s4.points, stages.s4.momenta, cfg, ws.g4);

  out.points = in.points + (h / 6.0) * (ws.g1.dm + 2.0 * ws.g2.dm + 2.0 * ws.g3.dm + ws.g4.dm);
  out.momenta = in.momenta - (h / 6.0) * (ws.g1.dc + 2.0 * ws.g2.dc + 2.0 * ws.g3.dc + ws.g4.dc);
}

}  // namespace detail

/// Discrete geodesic: states at every grid time, plus the RK4 stage states of
/// each interval so shapes can be flowed along it afterwards.
class GeodesicTrajectory {
 public:
  GeodesicTrajectory() = default;

  /// Integrates from `initial` over the given strictly monotone time grid
  /// (increasing or decreasing; grid[0] is the shooting time).
  GeodesicTrajectory(GeodesicState initial, std::vector<double> grid, KernelConfig cfg)
      : kernel_(cfg), times_(std::move(grid)) {
    const int n_steps = static_cast<int>(times_.size()) - 1;
    states_.reserve(times_.size());
    stages_.resize(std::max(n_steps, 0));
    states_.push_back(std::move(initial));
    detail::Rk4Workspace ws;
    for (int s = 0; s < n_steps; ++s) {
      const double h = times_[s + 1] - times_[s];
      GeodesicState next;
      detail::rk4_step(states_[s], h, kernel_, ws, stages_[s], next);
      if (!next.points.allFinite() || !next.momenta.allFinite())
        throw NumericalError("geodesic integration diverged at step " + std::to_string(s + 1) +
                             " (t = " + std::to_string(times_[s + 1]) + ")");
      states_.push_back(std::move(next));
    }
  }

  const KernelConfig& kernel() const { return kernel_; }
  const std::vector<double>& times() const { return times_; }
  const std::vector<GeodesicState>& states() const { return states_; }
  const GeodesicState& state(int i) const { return states_.at(i); }
  const GeodesicState& endpoint() const { return states_.back(); }
  int n_intervals() const { return static_cast<int>(stages_.size()); }

  /// Index of a grid time equal to t (within tolerance); -1 if absent.
  int find_time(double t, double tol = 1e-9) const {
    for (int i = 0; i < static_cast<int>(times_.size()); ++i)
      if (std::abs(times_[i] - t) <= tol) return i;
    return -1;
  }

  /// Advects the rows of `queries` along the recorded velocity fields from
  /// grid node `from` to grid node `to` (from <= to), using the stored stage
  /// states so the result matches a coupled integration.
  Mat flow_points(const Mat& queries, int from, int to) const {
    Mat x = queries;
    Mat k1, k2, k3, k4;
    for (int s = from; s < to; ++s) {
      const double h = times_[s + 1] - times_[s];
      const detail::StageStates& st = stages_[s];
      k1 = convolve(st.s1.points, st.s1.momenta, x, kernel_);
      k2 = convolve(st.s2.points, st.s2.momenta, Mat(x + (0.5 * h) * k1), kernel_);
      k3 = convolve(st.s3.points, st.s3.momenta, Mat(x + (0.5 * h) * k2), kernel_);
      k4 = convolve(st.s4.points, st.s4.momenta, Mat(x + h * k3), kernel_);
      x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      if (!x.allFinite())
        throw NumericalError("point flow diverged at step " + std::to_string(s + 1));
    }
    return x;
  }

 private:
  KernelConfig kernel_;
  std::vector<double> times_;
  std::vector<GeodesicState> states_;
  std::vector<detail::StageStates> stages_;
};

/// Uniform grid of n_steps intervals between t0 and t1 (t1 < t0 integrates
/// backward). Endpoints are exact.
inline std::vector<double> uniform_grid(double t0, double t1, int n_steps) {
  require(n_steps >= 1, "n_steps must be >= 1");
  std::vector<double> grid(static_cast<std::size_t>(n_steps) + 1);
  for (int i = 0; i <= n_steps; ++i)
    grid[i] = t0 + (t1 - t0) * (static_cast<double>(i) / n_steps);
  grid[n_steps] = t1;
  return grid;
}

/// Default step count: 10 per unit of integration time, rounded up.
inline int default_steps(double t0, double t1, int steps_per_unit = 10) {
  const double span = std::abs(t1 - t0);
  return std::max(1, static_cast<int>(std::ceil(span * steps_per_unit)));
}

/// Riemannian exponential: integrates the Hamiltonian equations from (c0, m0)
/// at t0 to t1 on a uniform grid.
inline GeodesicTrajectory shoot(const ControlPointConfig& c0, const MomentaVector& m0,
                                double t0, double t1, int n_steps, const KernelConfig& cfg) {
  c0.validate(cfg);
  m0.validate(c0);
  require(std::isfinite(t0) && std::isfinite(t1), "shoot times must be finite");
  return GeodesicTrajectory({c0.points, m0.vectors}, uniform_grid(t0, t1, n_steps), cfg);
}

/// Per-time deformed copies of a shape's vertices; connectivity shared with
/// the source shape.
struct FlowedShape {
  std::vector<double> times;
  std::vector<Mat> vertices;  // one entry per time
  IMat cells;
  int dim = 2;

  Shape at(int i) const { return Shape{vertices.at(i), cells, dim}; }
};

/// Flows every vertex of `y` along the trajectory, recording the deformed
/// shape at each grid time.
inline FlowedShape flow_shape(const GeodesicTrajectory& traj, const Shape& y) {
  require(y.dim == traj.kernel().ambient_dim, "shape/trajectory dimension mismatch");
  FlowedShape out;
  out.times = traj.times();
  out.cells = y.cells;
  out.dim = y.dim;
  out.vertices.reserve(out.times.size());
  out.vertices.push_back(y.vertices);
  for (int s = 0; s < traj.n_intervals(); ++s)
    out.vertices.push_back(traj.flow_points(out.vertices.back(), s, s + 1));
  return out;
}

/// Convenience composition shoot + flow, returning only the final shape.
inline Shape exp_shape(const ControlPointConfig& c0, const MomentaVector& m0, const Shape& y0,
                       double t0, double t1, int n_steps, const KernelConfig& cfg) {
  const GeodesicTrajectory traj = shoot(c0, m0, t0, t1, n_steps, cfg);
  require(y0.dim == cfg.ambient_dim, "shape dimension mismatch");
  return Shape{traj.flow_points(y0.vertices, 0, traj.n_intervals()), y0.cells, y0.dim};
}

}  // namespace longshape
