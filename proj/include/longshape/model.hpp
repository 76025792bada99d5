/// The hierarchical generative model: latent variables, fixed effects,
/// conjugate priors, affine time-warps, orthogonally-projected space-shifts,
/// prediction through exp-parallel curves, complete and tempered
/// log-likelihoods, sufficient statistics, and dataset simulation.
///
/// An observation of subject i at time t is modeled as the exp-parallel curve
/// of the population geodesic, evaluated at the warped time psi_i(t) and
/// driven by the subject's space-shift momenta, applied to the template.
/// Internally onset ages t_i = t0 + tau_i parameterize the time shifts.
///
/// All log-densities drop their 2*pi constants; only differences of
/// log-likelihoods are ever compared.
#pragma once

#include "longshape/kernel.hpp"
#include "longshape/metrics.hpp"
#include "longshape/shape.hpp"
#include "longshape/transport.hpp"
#include "longshape/types.hpp"

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace longshape {

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

/// z_pop = (y0, c0, m0, A). The mixing matrix is stored unprojected; the
/// projection onto the orthogonal complement of m0 is applied lazily wherever
/// space-shifts are formed.
struct PopulationLatents {
  Shape template_shape;  // y0
  Mat control_points;    // c0, n_cp x d
  Mat momenta;           // m0, n_cp x d
  Mat mixing;            // A, (d * n_cp) x n_s

  int n_sources() const { return static_cast<int>(mixing.cols()); }
};

/// z_i = (t_i, xi_i, s_i); the time shift is tau_i = t_i - t0.
struct IndividualLatents {
  double onset_age = 0.0;        // t_i
  double log_acceleration = 0.0; // xi_i
  Vec sources;                   // s_i, n_s entries

  double acceleration() const { return std::exp(log_acceleration); }
  double tau(double t0) const { return onset_age - t0; }
};

/// theta = (mean_y0, mean_c0, mean_m0, mean_A, t0, sigma_tau^2, sigma_xi^2,
/// sigma_eps^2), the fixed effects.
struct ModelParams {
  Shape mean_template;
  Mat mean_control_points;
  Mat mean_momenta;
  Mat mean_mixing;
  double reference_time = 0.0;  // t0
  double var_time_shift = 1.0;  // sigma_tau^2
  double var_log_accel = 1.0;   // sigma_xi^2
  double var_noise = 1.0;       // sigma_eps^2

  void validate() const {
    if (!(var_time_shift > 0.0 && var_log_accel > 0.0 && var_noise > 0.0))
      throw std::invalid_argument("model variances must be positive");
  }
};

/// Fixed small variances for the population random effects, Gaussian priors
/// on the fixed-effect means, and inverse-gamma priors on the variances.
struct PriorConfig {
  // sigma_y^2, sigma_c^2, sigma_m^2, sigma_A^2 ("arbitrarily small")
  double fixed_var_template = 1e-4;
  double fixed_var_control_points = 1e-4;
  double fixed_var_momenta = 1e-4;
  double fixed_var_mixing = 1e-4;

  Shape prior_mean_template;
  Mat prior_mean_control_points;
  Mat prior_mean_momenta;
  Mat prior_mean_mixing;
  double prior_mean_reference_time = 0.0;

  double prior_var_template = 1.0;
  double prior_var_control_points = 1.0;
  double prior_var_momenta = 1.0;
  double prior_var_mixing = 1.0;
  double prior_var_reference_time = 1.0;

  // inverse-gamma weights and scales
  double ig_weight_time_shift = 1.0;
  double ig_scale_time_shift = 1.0;
  double ig_weight_log_accel = 1.0;
  double ig_scale_log_accel = 0.01;
  double ig_weight_noise = 1.0;
  double ig_scale_noise = 0.01;

  void validate() const {
    for (double v : {fixed_var_template, fixed_var_control_points, fixed_var_momenta,
                     fixed_var_mixing, prior_var_template, prior_var_control_points,
                     prior_var_momenta, prior_var_mixing, prior_var_reference_time,
                     ig_weight_time_shift, ig_scale_time_shift, ig_weight_log_accel,
                     ig_scale_log_accel, ig_weight_noise, ig_scale_noise})
      if (!(v > 0.0)) throw std::invalid_argument("prior variances and weights must be positive");
  }
};

struct Observation {
  double time = 0.0;
  Shape shape;
};

struct Subject {
  std::string id;
  std::vector<Observation> observations;

  int n_obs() const { return static_cast<int>(observations.size()); }
};

struct LongitudinalDataset {
  std::vector<Subject> subjects;
  int ambient_dim = 2;

  int n_subjects() const { return static_cast<int>(subjects.size()); }
  int total_observations() const {
    int n = 0;
    for (const auto& s : subjects) n += s.n_obs();
    return n;
  }

  void validate() const {
    for (const auto& s : subjects) {
      if (s.observations.empty()) throw DataError("subject " + s.id + " has no observations");
      for (std::size_t j = 0; j < s.observations.size(); ++j) {
        if (!std::isfinite(s.observations[j].time))
          throw DataError("subject " + s.id + " has a non-finite time");
        if (j > 0 && !(s.observations[j].time > s.observations[j - 1].time))
          throw DataError("subject " + s.id + " times must be strictly increasing");
        if (s.observations[j].shape.dim != ambient_dim)
          throw DataError("subject " + s.id + " shape dimension mismatch");
        s.observations[j].shape.validate();
      }
    }
  }
};

/// Geometry and discretization knobs shared by prediction, likelihood and
/// simulation.
struct ModelConfig {
  KernelConfig kernel;
  MetricConfig metric;
  ExpParallelSteps steps;  // carrying-grid density and unit-exponential steps
};

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

/// psi_i(t) = exp(xi_i) (t - t_i) + t0, strictly increasing in t.
inline double time_warp(const IndividualLatents& ind, double t0, double t) {
  require(std::isfinite(t), "time_warp: non-finite time");
  return ind.acceleration() * (t - ind.onset_age) + t0;
}

/// Reshapes one flat mixing column (x0 y0 x1 y1 ...) into n_cp momenta rows.
inline Mat column_to_momenta(const Vec& col, int n_cp, int d) {
  require(col.size() == n_cp * d, "mixing column has wrong length");
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
             col.data(), n_cp, d)
      .eval();
}

inline Vec momenta_to_column(const Mat& m) {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  return Eigen::Map<const Vec>(rm.data(), rm.size()).eval();
}

/// Projects every column of A on the hyperplane orthogonal to m0 for the
/// metric K_c0. Undefined for zero mean momenta.
inline Mat project_mixing(const Mat& mixing, const Mat& c0, const Mat& m0,
                          const KernelConfig& cfg) {
  const int n_cp = static_cast<int>(c0.rows());
  const int d = static_cast<int>(c0.cols());
  require(mixing.rows() == n_cp * d, "mixing row count must be d * n_cp");
  const double m_norm_sq = kernel_inner(c0, m0, m0, cfg);
  if (!(m_norm_sq > 0.0))
    throw std::invalid_argument("project_mixing: undefined for zero mean momenta");
  Mat projected = mixing;
  for (int l = 0; l < mixing.cols(); ++l) {
    const Mat a = column_to_momenta(mixing.col(l), n_cp, d);
    const double coef = kernel_inner(c0, m0, a, cfg) / m_norm_sq;
    projected.col(l) = momenta_to_column(a - coef * m0);
  }
  return projected;
}

/// A with the orthogonality constraint applied when it is defined (the
/// projection is skipped for exactly-zero mean momenta, where every
/// space-shift is trivially orthogonal).
inline Mat effective_mixing(const PopulationLatents& pop, const KernelConfig& cfg) {
  if (pop.momenta.isZero(0.0)) return pop.mixing;
  return project_mixing(pop.mixing, pop.control_points, pop.momenta, cfg);
}

/// w_i = A_perp s_i, reshaped to one momentum row per control point.
inline Mat space_shift(const PopulationLatents& pop, const Vec& sources,
                       const KernelConfig& cfg) {
  require(sources.size() == pop.mixing.cols(), "source count mismatch");
  const Vec flat = effective_mixing(pop, cfg) * sources;
  return column_to_momenta(flat, static_cast<int>(pop.control_points.rows()),
                           static_cast<int>(pop.control_points.cols()));
}

/// Warped observation time in centered coordinates: psi_i(t) - t0 written as
/// alpha_i (t - t_i), which does not involve t0 at all. Prediction uses this
/// form together with the identity eta_{c0,m0,t0,psi} = eta_{c0,m0,0,psi-t0},
/// so the geometry never depends on the reference time.
inline double centered_warp(const IndividualLatents& ind, double t) {
  require(std::isfinite(t), "centered_warp: non-finite time");
  return ind.acceleration() * (t - ind.onset_age);
}

/// Noise-free model predictions for one subject at the given observation
/// times.
inline std::vector<Shape> predict_subject(const PopulationLatents& pop,
                                          const IndividualLatents& ind,
                                          const std::vector<double>& times,
                                          const ModelConfig& cfg) {
  const Mat w = space_shift(pop, ind.sources, cfg.kernel);
  std::vector<double> eval_times(times.size());
  for (std::size_t j = 0; j < times.size(); ++j) eval_times[j] = centered_warp(ind, times[j]);
  const ExpParallelCurve curve =
      exp_parallel(ControlPointConfig{pop.control_points}, MomentaVector{pop.momenta}, 0.0,
                   MomentaVector{w}, eval_times, pop.template_shape, cfg.kernel, cfg.steps);
  return curve.shapes;
}

/// Single-time convenience form of predict_subject.
inline Shape predict(const PopulationLatents& pop, const IndividualLatents& ind, double t,
                     const ModelConfig& cfg) {
  return predict_subject(pop, ind, {t}, cfg).front();
}

// ---------------------------------------------------------------------------
// Log-likelihood terms (each "-2 log q" up to its additive constant)
// ---------------------------------------------------------------------------

/// Residual dimension of one observation: number of cells times ambient
/// dimension (the configurable convention for Lambda).
inline double residual_dimension(const Shape& observed) {
  return static_cast<double>(observed.n_cells()) * observed.dim;
}

/// log q(y_i | z, theta) for one subject: residuals of the predictions under
/// the configured metric, with noise variance inflated by the temperature.
inline double data_log_likelihood_subject(const Subject& subject, const PopulationLatents& pop,
                                          const IndividualLatents& ind, double var_noise,
                                          const ModelConfig& cfg, double temperature = 1.0) {
  std::vector<double> times(subject.observations.size());
  for (std::size_t j = 0; j < times.size(); ++j) times[j] = subject.observations[j].time;
  const std::vector<Shape> preds = predict_subject(pop, ind, times, cfg);
  const double var = temperature * var_noise;
  double ll = 0.0;
  for (std::size_t j = 0; j < times.size(); ++j) {
    const double res = metric_dist2(subject.observations[j].shape, preds[j], cfg.metric);
    ll += -0.5 * (residual_dimension(subject.observations[j].shape) * std::log(var) + res / var);
  }
  return ll;
}

/// log q(z_pop | theta), with the four fixed variances inflated by the
/// temperature.
inline double population_log_likelihood(const PopulationLatents& pop, const ModelParams& params,
                                        const PriorConfig& priors, double temperature = 1.0) {
  require(pop.template_shape.n_vertices() == params.mean_template.n_vertices(),
          "template vertex count mismatch");
  const double vy = temperature * priors.fixed_var_template;
  const double vc = temperature * priors.fixed_var_control_points;
  const double vm = temperature * priors.fixed_var_momenta;
  const double va = temperature * priors.fixed_var_mixing;
  const double ny = static_cast<double>(pop.template_shape.vertices.size());
  const double nc = static_cast<double>(pop.control_points.size());
  const double nm = static_cast<double>(pop.momenta.size());
  const double na = static_cast<double>(pop.mixing.size());
  double m2 = 0.0;
  m2 += ny * std::log(vy) +
        (pop.template_shape.vertices - params.mean_template.vertices).squaredNorm() / vy;
  m2 += nc * std::log(vc) + (pop.control_points - params.mean_control_points).squaredNorm() / vc;
  m2 += nm * std::log(vm) + (pop.momenta - params.mean_momenta).squaredNorm() / vm;
  m2 += na * std::log(va) + (pop.mixing - params.mean_mixing).squaredNorm() / va;
  return -0.5 * m2;
}

/// log q(z_i | theta): Gaussian onset age, log-acceleration and sources.
inline double individual_log_likelihood(const IndividualLatents& ind, const ModelParams& params) {
  const double dt = ind.onset_age - params.reference_time;
  return -0.5 * (std::log(params.var_time_shift) + dt * dt / params.var_time_shift +
                 std::log(params.var_log_accel) +
                 ind.log_acceleration * ind.log_acceleration / params.var_log_accel +
                 ind.sources.squaredNorm());
}

/// log q(theta): Gaussian priors on the means and t0, inverse-gamma priors on
/// the three estimated variances.
inline double params_log_prior(const ModelParams& params, const PriorConfig& priors) {
  double m2 = 0.0;
  m2 += (params.mean_template.vertices - priors.prior_mean_template.vertices).squaredNorm() /
        priors.prior_var_template;
  m2 += (params.mean_control_points - priors.prior_mean_control_points).squaredNorm() /
        priors.prior_var_control_points;
  m2 += (params.mean_momenta - priors.prior_mean_momenta).squaredNorm() /
        priors.prior_var_momenta;
  m2 += (params.mean_mixing - priors.prior_mean_mixing).squaredNorm() / priors.prior_var_mixing;
  const double dt = params.reference_time - priors.prior_mean_reference_time;
  m2 += dt * dt / priors.prior_var_reference_time;
  m2 += priors.ig_weight_time_shift * std::log(params.var_time_shift) +
        priors.ig_weight_time_shift * priors.ig_scale_time_shift / params.var_time_shift;
  m2 += priors.ig_weight_log_accel * std::log(params.var_log_accel) +
        priors.ig_weight_log_accel * priors.ig_scale_log_accel / params.var_log_accel;
  m2 += priors.ig_weight_noise * std::log(params.var_noise) +
        priors.ig_weight_noise * priors.ig_scale_noise / params.var_noise;
  return -0.5 * m2;
}

/// Full latent state z = (z_pop, z_1..z_N).
struct LatentState {
  PopulationLatents population;
  std::vector<IndividualLatents> individuals;
};

/// Tempered complete log-likelihood log q_T(y, z, theta); the individual and
/// parameter-prior terms are never tempered. T = 1 recovers the plain
/// complete log-likelihood exactly.
inline double tempered_log_likelihood(const LongitudinalDataset& dataset, const LatentState& z,
                                      const ModelParams& params, const PriorConfig& priors,
                                      const ModelConfig& cfg, double temperature) {
  require(temperature >= 1.0, "temperature must be >= 1");
  params.validate();
  priors.validate();
  require(z.individuals.size() == dataset.subjects.size(),
          "latent state / dataset subject count mismatch");
  double ll = 0.0;
  for (std::size_t i = 0; i < dataset.subjects.size(); ++i)
    ll += data_log_likelihood_subject(dataset.subjects[i], z.population, z.individuals[i],
                                      params.var_noise, cfg, temperature);
  ll += population_log_likelihood(z.population, params, priors, temperature);
  for (const auto& ind : z.individuals) ll += individual_log_likelihood(ind, params);
  ll += params_log_prior(params, priors);
  return ll;
}

inline double complete_log_likelihood(const LongitudinalDataset& dataset, const LatentState& z,
                                      const ModelParams& params, const PriorConfig& priors,
                                      const ModelConfig& cfg) {
  return tempered_log_likelihood(dataset, z, params, priors, cfg, 1.0);
}

// ---------------------------------------------------------------------------
// Sufficient statistics
// ---------------------------------------------------------------------------

struct SufficientStats {
  Mat s1;        // template vertices y0
  Mat s2;        // control points c0
  Mat s3;        // momenta m0
  Mat s4;        // mixing A
  double s5 = 0; // sum of onset ages
  double s6 = 0; // sum of squared onset ages
  double s7 = 0; // sum of squared log-accelerations
  double s8 = 0; // total squared residual under the configured metric
};

inline SufficientStats sufficient_statistics(const LongitudinalDataset& dataset,
                                             const LatentState& z, const ModelConfig& cfg) {
  SufficientStats s;
  s.s1 = z.population.template_shape.vertices;
  s.s2 = z.population.control_points;
  s.s3 = z.population.momenta;
  s.s4 = z.population.mixing;
  for (std::size_t i = 0; i < dataset.subjects.size(); ++i) {
    const IndividualLatents& ind = z.individuals[i];
    s.s5 += ind.onset_age;
    s.s6 += ind.onset_age * ind.onset_age;
    s.s7 += ind.log_acceleration * ind.log_acceleration;
    const Subject& subject = dataset.subjects[i];
    std::vector<double> times(subject.observations.size());
    for (std::size_t j = 0; j < times.size(); ++j) times[j] = subject.observations[j].time;
    const std::vector<Shape> preds = predict_subject(z.population, ind, times, cfg);
    for (std::size_t j = 0; j < times.size(); ++j)
      s.s8 += metric_dist2(subject.observations[j].shape, preds[j], cfg.metric);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

struct SimulateOptions {
  int n_subjects = 100;
  int n_obs = 5;                  // observations per subject
  double obs_window_halfwidth = 2.0;
  double obs_center_jitter = 2.0; // subject window centers drawn in t0 +- this
  double noise_sd = 0.0;          // i.i.d. Gaussian vertex displacement
  std::uint64_t seed = 0;
};

struct SimulationResult {
  LongitudinalDataset dataset;
  std::vector<IndividualLatents> true_latents;
};

/// Draws individual latents from the priors implied by `truth`, builds the
/// noiseless observations with predict_subject, then displaces every vertex
/// with i.i.d. Gaussian noise of the requested standard deviation.
/// Deterministic given the seed.
inline SimulationResult simulate(const ModelParams& truth, const ModelConfig& cfg,
                                 const SimulateOptions& opt) {
  truth.validate();
  require(opt.n_subjects >= 0 && opt.n_obs >= 1, "simulate: invalid cohort sizes");
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);

  const PopulationLatents pop{truth.mean_template, truth.mean_control_points,
                              truth.mean_momenta, truth.mean_mixing};
  const int n_s = pop.n_sources();

  SimulationResult out;
  out.dataset.ambient_dim = cfg.kernel.ambient_dim;
  out.dataset.subjects.reserve(opt.n_subjects);
  out.true_latents.reserve(opt.n_subjects);

  for (int i = 0; i < opt.n_subjects; ++i) {
    IndividualLatents ind;
    ind.onset_age = truth.reference_time + std::sqrt(truth.var_time_shift) * gauss(rng);
    ind.log_acceleration = std::sqrt(truth.var_log_accel) * gauss(rng);
    ind.sources.resize(n_s);
    for (int l = 0; l < n_s; ++l) ind.sources(l) = gauss(rng);

    std::vector<double> times(opt.n_obs);
    while (true) {
      const double center = truth.reference_time + opt.obs_center_jitter * uni(rng);
      for (int j = 0; j < opt.n_obs; ++j)
        times[j] = center + opt.obs_window_halfwidth * uni(rng);
      std::sort(times.begin(), times.end());
      bool strict = true;
      for (int j = 1; j < opt.n_obs; ++j) strict = strict && times[j] > times[j - 1];
      if (strict) break;  // ties have probability zero; redraw if they happen
    }

    const std::vector<Shape> preds = predict_subject(pop, ind, times, cfg);

    Subject subject;
    subject.id = "subject_" + std::to_string(i);
    subject.observations.resize(opt.n_obs);
    for (int j = 0; j < opt.n_obs; ++j) {
      subject.observations[j].time = times[j];
      Shape obs = preds[j];
      if (opt.noise_sd > 0.0) {
        for (int v = 0; v < obs.n_vertices(); ++v)
          for (int k = 0; k < obs.dim; ++k) obs.vertices(v, k) += opt.noise_sd * gauss(rng);
      }
      subject.observations[j].shape = std::move(obs);
    }
    out.dataset.subjects.push_back(std::move(subject));
    out.true_latents.push_back(std::move(ind));
  }
  return out;
}

}  // namespace longshape
