/// Personalization of a trained model to a new subject: derivative-free
/// maximization of log q(y_new | z, theta) + log q(z | theta) over the
/// (2 + n_s)-dimensional individual latents, with a Powell-style direction-set
/// search (per-direction golden-section line searches, replacement of the
/// direction of largest gain by the net sweep displacement) and a configurable
/// number of restarts from prior draws.
#pragma once

#include "longshape/model.hpp"
#include "longshape/parallel.hpp"
#include "longshape/rng.hpp"
#include "longshape/types.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace longshape {

struct PersonalizeConfig {
  int restarts = 3;            // zero start plus restarts-1 prior draws
  int max_sweeps = 60;         // Powell sweeps per restart
  double tol = 1e-8;           // relative objective improvement per sweep
  double line_tol = 1e-7;      // golden-section interval tolerance
  double onset_bound_sigmas = 10.0;  // onset age within t0 +- 10 sigma_tau
  double log_accel_bound = 5.0;      // xi within [-5, 5]
  std::uint64_t seed = 0;
  int threads = 1;
};

struct PersonalizationResult {
  IndividualLatents latents;
  double objective = -std::numeric_limits<double>::infinity();
  double residual_rms = 0.0;  // sqrt(total residual / total residual dimension)
  int iterations = 0;         // objective evaluations across all restarts
  bool converged = false;
};

namespace detail {

struct BoxedObjective {
  std::function<double(const Vec&)> f;
  Vec lower, upper;

  double eval(const Vec& x) const {
    for (int i = 0; i < x.size(); ++i)
      if (x(i) < lower(i) || x(i) > upper(i)) return -std::numeric_limits<double>::infinity();
    return f(x);
  }
};

inline double powell_golden(const std::function<double(double)>& f, double a, double b,
                            double tol) {
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > tol) {
    if (fc > fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = f(d);
    }
  }
  return 0.5 * (a + b);
}

/// Line maximization along `dir` from x: bracket by doubling, then golden
/// section. Returns the step length; 0 when no improvement is found.
inline double line_search(const BoxedObjective& obj, const Vec& x, const Vec& dir, double f0,
                          double scale, double tol, int& evals) {
  auto along = [&](double t) {
    ++evals;
    return obj.eval(x + t * dir);
  };
  double step = scale;
  double best_t = 0.0, best_f = f0;
  // probe both directions with doubling steps until the objective drops
  for (double sign : {1.0, -1.0}) {
    double t = sign * step;
    double prev_f = f0;
    for (int it = 0; it < 40; ++it) {
      const double ft = along(t);
      if (ft > best_f) {
        best_f = ft;
        best_t = t;
      }
      if (ft < prev_f) break;
      prev_f = ft;
      t *= 2.0;
    }
  }
  if (best_t == 0.0) {
    // local refinement around zero in case the maximum sits inside the probe
    const double t = powell_golden(along, -step, step, tol * scale);
    if (along(t) > f0) return t;
    return 0.0;
  }
  const double lo = best_t > 0 ? best_t * 0.25 : best_t * 2.0;
  const double hi = best_t > 0 ? best_t * 2.0 : best_t * 0.25;
  return powell_golden(along, std::min(lo, hi), std::max(lo, hi), tol * scale);
}

struct PowellOutcome {
  Vec x;
  double f = -std::numeric_limits<double>::infinity();
  int evals = 0;
  bool converged = false;
};

/// Classical direction-set ascent with golden-section line searches.
inline PowellOutcome powell_maximize(const BoxedObjective& obj, Vec x0, const Vec& scales,
                                     int max_sweeps, double tol, double line_tol) {
  const int n = static_cast<int>(x0.size());
  std::vector<Vec> dirs(n);
  for (int i = 0; i < n; ++i) {
    dirs[i] = Vec::Zero(n);
    dirs[i](i) = 1.0;
  }
  PowellOutcome out;
  out.x = std::move(x0);
  out.f = obj.eval(out.x);
  ++out.evals;

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    const Vec sweep_start = out.x;
    const double f_start = out.f;
    double largest_gain = 0.0;
    int largest_dir = -1;
    for (int i = 0; i < n; ++i) {
      const double scale = std::abs(dirs[i].dot(scales)) > 0 ? std::abs(dirs[i].dot(scales))
                                                             : scales.mean();
      const double t =
          line_search(obj, out.x, dirs[i], out.f, 0.25 * scale, line_tol, out.evals);
      if (t != 0.0) {
        const double f_new = obj.eval(out.x + t * dirs[i]);
        ++out.evals;
        if (f_new > out.f) {
          if (f_new - out.f > largest_gain) {
            largest_gain = f_new - out.f;
            largest_dir = i;
          }
          out.x += t * dirs[i];
          out.f = f_new;
        }
      }
    }
    // direction replacement: drop the direction of largest gain for the net
    // displacement of the sweep
    const Vec net = out.x - sweep_start;
    if (largest_dir >= 0 && net.norm() > 0.0) {
      dirs[largest_dir] = net / net.norm();
      const double t =
          line_search(obj, out.x, dirs[largest_dir], out.f, 0.25 * scales.mean(), line_tol,
                      out.evals);
      if (t != 0.0) {
        const double f_new = obj.eval(out.x + t * dirs[largest_dir]);
        ++out.evals;
        if (f_new > out.f) {
          out.x += t * dirs[largest_dir];
          out.f = f_new;
        }
      }
    }
    if (out.f - f_start <= tol * std::max(1.0, std::abs(out.f))) {
      out.converged = true;
      break;
    }
  }
  return out;
}

}  // namespace detail

/// Fits (t_i, xi_i, s_i) to one subject's observations against fixed trained
/// parameters. Restarts from the zero latents and from prior draws; returns
/// the best result.
inline PersonalizationResult personalize(const ModelParams& theta, const PriorConfig& priors,
                                         const Subject& subject, const ModelConfig& cfg,
                                         const PersonalizeConfig& pcfg,
                                         std::uint64_t restart_salt = 0) {
  theta.validate();
  require(!subject.observations.empty(), "personalize: subject has no observations");
  const int n_s = static_cast<int>(theta.mean_mixing.cols());
  const int dim = 2 + n_s;
  const PopulationLatents pop{theta.mean_template, theta.mean_control_points,
                              theta.mean_momenta, theta.mean_mixing};

  std::vector<double> times(subject.observations.size());
  double lambda_total = 0.0;
  for (std::size_t j = 0; j < times.size(); ++j) {
    times[j] = subject.observations[j].time;
    lambda_total += residual_dimension(subject.observations[j].shape);
  }

  auto unpack = [&](const Vec& x) {
    IndividualLatents ind;
    ind.onset_age = x(0);
    ind.log_acceleration = x(1);
    ind.sources = x.segment(2, n_s);
    return ind;
  };
  auto objective = [&](const Vec& x) {
    const IndividualLatents ind = unpack(x);
    try {
      return data_log_likelihood_subject(subject, pop, ind, theta.var_noise, cfg) +
             individual_log_likelihood(ind, theta);
    } catch (const NumericalError&) {
      return -std::numeric_limits<double>::infinity();
    } catch (const DataError&) {
      return -std::numeric_limits<double>::infinity();
    }
  };

  const double sigma_tau = std::sqrt(theta.var_time_shift);
  detail::BoxedObjective boxed;
  boxed.f = objective;
  boxed.lower = Vec::Constant(dim, -std::numeric_limits<double>::infinity());
  boxed.upper = Vec::Constant(dim, std::numeric_limits<double>::infinity());
  boxed.lower(0) = theta.reference_time - pcfg.onset_bound_sigmas * sigma_tau;
  boxed.upper(0) = theta.reference_time + pcfg.onset_bound_sigmas * sigma_tau;
  boxed.lower(1) = -pcfg.log_accel_bound;
  boxed.upper(1) = pcfg.log_accel_bound;
  for (int l = 0; l < n_s; ++l) {
    boxed.lower(2 + l) = -12.0;
    boxed.upper(2 + l) = 12.0;
  }

  Vec scales(dim);
  scales(0) = sigma_tau;
  scales(1) = std::sqrt(theta.var_log_accel);
  for (int l = 0; l < n_s; ++l) scales(2 + l) = 1.0;

  Vec zero_start(dim);
  zero_start(0) = theta.reference_time;
  zero_start.tail(dim - 1).setZero();

  auto rng = make_rng(pcfg.seed, RngPurpose::Personalization, restart_salt);
  std::normal_distribution<double> gauss(0.0, 1.0);

  PersonalizationResult best;
  bool any_bracketed = false;
  for (int r = 0; r < std::max(1, pcfg.restarts); ++r) {
    Vec start = zero_start;
    if (r > 0) {
      start(0) = theta.reference_time + sigma_tau * gauss(rng);
      start(1) = std::sqrt(theta.var_log_accel) * gauss(rng);
      for (int l = 0; l < n_s; ++l) start(2 + l) = gauss(rng);
    }
    const detail::PowellOutcome run = detail::powell_maximize(
        boxed, start, scales, pcfg.max_sweeps, pcfg.tol, pcfg.line_tol);
    if (std::isfinite(run.f)) any_bracketed = true;
    if (run.f > best.objective) {
      best.objective = run.f;
      best.latents = unpack(run.x);
      best.converged = run.converged;
    }
    best.iterations += run.evals;
  }
  if (!any_bracketed)
    throw NumericalError("personalize: no restart produced a finite objective for subject " +
                         subject.id);

  double residual_total = 0.0;
  const std::vector<Shape> preds = predict_subject(pop, best.latents, times, cfg);
  for (std::size_t j = 0; j < times.size(); ++j)
    residual_total += metric_dist2(subject.observations[j].shape, preds[j], cfg.metric);
  // near-identical shapes can give a tiny negative distance by cancellation
  best.residual_rms = std::sqrt(std::max(residual_total, 0.0) / lambda_total);
  return best;
}

/// Independent personalization of every subject. Every subject uses the same
/// restart stream, so identical subjects produce identical results; failures
/// are collected as non-converged placeholder rows rather than aborting the
/// batch.
inline std::vector<PersonalizationResult> batch_personalize(const ModelParams& theta,
                                                            const PriorConfig& priors,
                                                            const LongitudinalDataset& dataset,
                                                            const ModelConfig& cfg,
                                                            const PersonalizeConfig& pcfg) {
  std::vector<PersonalizationResult> results(dataset.subjects.size());
  parallel_for(dataset.n_subjects(), pcfg.threads, [&](int i) {
    try {
      results[static_cast<std::size_t>(i)] =
          personalize(theta, priors, dataset.subjects[static_cast<std::size_t>(i)], cfg, pcfg);
    } catch (const std::exception&) {
      results[static_cast<std::size_t>(i)].converged = false;  // flagged failure row
    }
  });
  return results;
}

}  // namespace longshape
