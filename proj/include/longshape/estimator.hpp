/// MCMC-SAEM estimation of the longitudinal shape model: blockwise
/// Metropolis-Hastings-within-Gibbs simulation with adaptive proposal
/// variances, geometric template proposals, likelihood tempering, stochastic
/// approximation of the sufficient statistics, and the closed-form M-step.
///
/// The latent blocks are { y0, c0, m0, each mixing column, each subject's
/// (t_i, xi_i, s_i) }. Per-subject geometry is cached in three stages so a
/// block move recomputes only what it invalidates:
///   stage A - carrying geodesic through the subject's warped times
///             (depends on c0, m0 and the subject's time variables),
///   stage B - parallel transport of the space-shift (adds A, s_i),
///   stage C - template flow, unit exponentials and residuals (adds y0).
#pragma once

#include "longshape/model.hpp"
#include "longshape/parallel.hpp"
#include "longshape/rng.hpp"
#include "longshape/types.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace longshape {

// ---------------------------------------------------------------------------
// Sampler pieces
// ---------------------------------------------------------------------------

enum class BlockType { Template, ControlPoints, Momenta, MixingColumn, Subject };

struct BlockSpec {
  BlockType type = BlockType::Template;
  int index = -1;  // mixing column or subject index
  double sigma = 0.1;
  std::vector<char> history;  // acceptance record, one entry per iteration

  std::string name() const {
    switch (type) {
      case BlockType::Template: return "template";
      case BlockType::ControlPoints: return "control_points";
      case BlockType::Momenta: return "momenta";
      case BlockType::MixingColumn: return "mixing_col" + std::to_string(index);
      case BlockType::Subject: return "subject" + std::to_string(index);
    }
    return "?";
  }

  /// Mean acceptance over the last `window` proposals (1.0 when empty).
  double recent_rate(int window) const {
    if (history.empty()) return 1.0;
    const int n = std::min<int>(window, static_cast<int>(history.size()));
    int acc = 0;
    for (int i = static_cast<int>(history.size()) - n; i < static_cast<int>(history.size()); ++i)
      acc += history[i];
    return static_cast<double>(acc) / n;
  }
};

struct SamplerConfig {
  int n_adapt = 10;
  int n_detect = 10;
  double delta = 0.51;       // adaptation step-size exponent, > 0.5
  double target_ar = 0.30;
  double sigma_init = 0.1;   // initial proposal std, in each block's units
  double sigma_floor = 1e-10;
};

/// Proposal control points and variance for the template block: displacement
/// fields are convolutions of random momenta on a pre-selected, regularly
/// spaced subset of template vertices.
struct TemplateProposalConfig {
  Mat points;  // n_p x d, fixed for the whole run

  static TemplateProposalConfig from_template(const Shape& y0, int stride = 0) {
    if (stride <= 0) stride = (y0.n_vertices() + 9) / 10;  // every ceil(n/10)-th vertex
    std::vector<int> idx;
    for (int v = 0; v < y0.n_vertices(); v += stride) idx.push_back(v);
    TemplateProposalConfig cfg;
    cfg.points.resize(static_cast<int>(idx.size()), y0.dim);
    for (std::size_t r = 0; r < idx.size(); ++r) cfg.points.row(r) = y0.vertices.row(idx[r]);
    return cfg;
  }
};

/// y0 + v where v is the convolution of N(0, sigma^2) momenta drawn on the
/// proposal control points; a symmetric proposal with covariance
/// sigma^2 D D^T per coordinate.
inline Shape propose_template(const TemplateProposalConfig& cfg, double sigma, const Shape& y0,
                              const KernelConfig& kernel, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Mat momenta(cfg.points.rows(), cfg.points.cols());
  for (int i = 0; i < momenta.rows(); ++i)
    for (int j = 0; j < momenta.cols(); ++j) momenta(i, j) = sigma * gauss(rng);
  Shape out = y0;
  out.vertices += convolve(cfg.points, momenta, y0.vertices, kernel);
  return out;
}

/// Draws the candidate state for one block; every other block's variables are
/// left bitwise untouched. All proposals are symmetric.
inline LatentState propose_block(const BlockSpec& block, const LatentState& z,
                                 const TemplateProposalConfig& template_proposal,
                                 const KernelConfig& kernel, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  LatentState cand = z;
  switch (block.type) {
    case BlockType::Template:
      cand.population.template_shape =
          propose_template(template_proposal, block.sigma, z.population.template_shape, kernel, rng);
      break;
    case BlockType::ControlPoints:
      for (int i = 0; i < cand.population.control_points.rows(); ++i)
        for (int j = 0; j < cand.population.control_points.cols(); ++j)
          cand.population.control_points(i, j) += block.sigma * gauss(rng);
      break;
    case BlockType::Momenta:
      for (int i = 0; i < cand.population.momenta.rows(); ++i)
        for (int j = 0; j < cand.population.momenta.cols(); ++j)
          cand.population.momenta(i, j) += block.sigma * gauss(rng);
      break;
    case BlockType::MixingColumn:
      for (int r = 0; r < cand.population.mixing.rows(); ++r)
        cand.population.mixing(r, block.index) += block.sigma * gauss(rng);
      break;
    case BlockType::Subject: {
      IndividualLatents& ind = cand.individuals[static_cast<std::size_t>(block.index)];
      ind.onset_age += block.sigma * gauss(rng);
      ind.log_acceleration += block.sigma * gauss(rng);
      for (int l = 0; l < ind.sources.size(); ++l) ind.sources(l) += block.sigma * gauss(rng);
      break;
    }
  }
  return cand;
}

/// Accept with probability min(1, exp(delta_log)).
inline bool metropolis_accept(double delta_log, std::mt19937_64& rng) {
  if (!std::isfinite(delta_log)) return false;  // non-finite candidates auto-reject
  if (delta_log >= 0.0) return true;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  return uni(rng) < std::exp(delta_log);
}

/// One proposal-std update:
///   sigma += k^-delta (ar - ar*) / [(1 - ar*) if ar >= ar* else ar*].
inline double adapt_sigma(double sigma, double mean_ar, int k, const SamplerConfig& cfg) {
  const double denom = mean_ar >= cfg.target_ar ? (1.0 - cfg.target_ar) : cfg.target_ar;
  const double updated =
      sigma + std::pow(static_cast<double>(k), -cfg.delta) * (mean_ar - cfg.target_ar) / denom;
  return std::max(updated, cfg.sigma_floor);
}

/// Updates every block's proposal std from its recent acceptance rate.
inline void adapt_proposals(std::vector<BlockSpec>& blocks, int k, const SamplerConfig& cfg) {
  for (BlockSpec& b : blocks) b.sigma = adapt_sigma(b.sigma, b.recent_rate(cfg.n_detect), k, cfg);
}

// ---------------------------------------------------------------------------
// Tempering and step sizes
// ---------------------------------------------------------------------------

/// Constant plateau, then geometric decay clamped at exactly 1.
struct TemperatureSchedule {
  double t_init = 1.0;   // 1 disables tempering
  int plateau = 0;       // iterations at t_init
  double decay = 0.9;    // geometric rate in (0, 1)

  void validate() const {
    if (!(t_init >= 1.0) || !(decay > 0.0 && decay < 1.0) || plateau < 0)
      throw ConfigError("temperature schedule requires t_init >= 1, decay in (0,1), plateau >= 0");
  }
};

inline double temperature(int k, const TemperatureSchedule& schedule) {
  schedule.validate();
  if (k <= schedule.plateau) return schedule.t_init;
  const double t = schedule.t_init * std::pow(schedule.decay, k - schedule.plateau);
  return std::max(1.0, t);
}

/// Step sizes for the stochastic approximation. The default holds rho = 1
/// through a burn-in, then decays polynomially so that the sums diverge as
/// SAEM convergence requires; the geometric mode follows a plain geometric
/// sequence instead.
struct StepSizePolicy {
  enum class Mode { BurnInPolynomial, Geometric };
  Mode mode = Mode::BurnInPolynomial;
  int burn_in = 0;
  double exponent = 0.65;       // polynomial decay after burn-in
  double geometric_rate = 0.98; // geometric mode only

  double rho(int k) const {
    if (mode == Mode::Geometric) return std::pow(geometric_rate, k - 1);
    if (k <= burn_in) return 1.0;
    return std::pow(static_cast<double>(k - burn_in), -exponent);
  }
};

// ---------------------------------------------------------------------------
// Stochastic approximation and M-step
// ---------------------------------------------------------------------------

/// S += rho (S_new - S), componentwise.
inline void sa_update(SufficientStats& s, const SufficientStats& s_new, double rho) {
  require(rho > 0.0 && rho <= 1.0, "sa_update: rho must be in (0, 1]");
  if (rho == 1.0) {
    s = s_new;
    return;
  }
  s.s1 += rho * (s_new.s1 - s.s1);
  s.s2 += rho * (s_new.s2 - s.s2);
  s.s3 += rho * (s_new.s3 - s.s3);
  s.s4 += rho * (s_new.s4 - s.s4);
  s.s5 += rho * (s_new.s5 - s.s5);
  s.s6 += rho * (s_new.s6 - s.s6);
  s.s7 += rho * (s_new.s7 - s.s7);
  s.s8 += rho * (s_new.s8 - s.s8);
}

/// Closed-form M-step. The coupled (t0, sigma_tau^2) pair is solved by
/// iterative replacement until both move by less than 1e-10 relative.
/// `lambda` is the residual dimension of one observation and `mean_n_obs` the
/// average number of observations per subject.
inline ModelParams m_step(const SufficientStats& s, const PriorConfig& priors, int n_subjects,
                          double mean_n_obs, double lambda) {
  priors.validate();
  require(n_subjects >= 1, "m_step: need at least one subject");
  ModelParams p;

  auto blend = [](const Mat& stat, const Mat& prior_mean, double prior_var, double fixed_var) {
    return Mat(((prior_var * stat) + (fixed_var * prior_mean)) / (prior_var + fixed_var));
  };
  p.mean_template = priors.prior_mean_template;
  p.mean_template.vertices = blend(s.s1, priors.prior_mean_template.vertices,
                                   priors.prior_var_template, priors.fixed_var_template);
  p.mean_control_points = blend(s.s2, priors.prior_mean_control_points,
                                priors.prior_var_control_points, priors.fixed_var_control_points);
  p.mean_momenta = blend(s.s3, priors.prior_mean_momenta, priors.prior_var_momenta,
                         priors.fixed_var_momenta);
  p.mean_mixing = blend(s.s4, priors.prior_mean_mixing, priors.prior_var_mixing,
                        priors.fixed_var_mixing);

  const double n = static_cast<double>(n_subjects);
  double t0 = s.s5 / n;
  double var_tau = std::max((s.s6 - 2.0 * t0 * s.s5 + n * t0 * t0 +
                             priors.ig_weight_time_shift * priors.ig_scale_time_shift) /
                                (n + priors.ig_weight_time_shift),
                            1e-300);
  bool converged = false;
  for (int round = 0; round < 100; ++round) {
    const double t0_new =
        (priors.prior_var_reference_time * s.s5 + var_tau * priors.prior_mean_reference_time) /
        (n * priors.prior_var_reference_time + var_tau);
    const double var_new = (s.s6 - 2.0 * t0_new * s.s5 + n * t0_new * t0_new +
                            priors.ig_weight_time_shift * priors.ig_scale_time_shift) /
                           (n + priors.ig_weight_time_shift);
    const double dt = std::abs(t0_new - t0) / std::max(std::abs(t0), 1e-12);
    const double dv = std::abs(var_new - var_tau) / std::max(var_tau, 1e-12);
    t0 = t0_new;
    var_tau = var_new;
    if (dt < 1e-10 && dv < 1e-10) {
      converged = true;
      break;
    }
  }
  if (!converged)
    throw NumericalError("m_step: t0 / sigma_tau^2 replacement did not converge in 100 rounds");
  p.reference_time = t0;
  p.var_time_shift = var_tau;

  p.var_log_accel = (s.s7 + priors.ig_weight_log_accel * priors.ig_scale_log_accel) /
                    (n + priors.ig_weight_log_accel);
  p.var_noise = (s.s8 + priors.ig_weight_noise * priors.ig_scale_noise) /
                (lambda * n * mean_n_obs + priors.ig_weight_noise);
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// The SAEM engine
// ---------------------------------------------------------------------------

struct EstimatorConfig {
  int iterations = 1000;
  std::uint64_t seed = 0;
  int threads = 1;
  SamplerConfig sampler;
  TemperatureSchedule temperature_schedule;
  StepSizePolicy step_size;
  int template_proposal_stride = 0;  // 0: every ceil(n_vertices/10)-th vertex
  int checkpoint_every = 0;          // 0 disables the checkpoint hook
  bool self_check_deltas = false;    // compare cached deltas to full recomputes
  // optional early stop: all theta components move < threshold (relative) over
  // the trailing window
  bool early_stop = false;
  double early_stop_threshold = 1e-5;
  int early_stop_window = 200;
};

/// Complete serializable snapshot of a run; resuming from it reproduces the
/// uninterrupted run bitwise.
struct SaemState {
  int iteration = 0;
  LatentState z;
  ModelParams params;
  SufficientStats stats;
  double temperature = 1.0;
  double rho = 1.0;
  Mat template_proposal_points;
  std::vector<double> block_sigmas;
  std::vector<std::vector<char>> block_histories;
  std::string proposal_rng;
  std::string accept_rng;
};

struct RunResult {
  ModelParams params;
  LatentState final_state;
  // posterior means of the individual latents over the averaging window
  std::vector<IndividualLatents> mean_individuals;
  std::vector<std::string> trace_header;
  std::vector<std::vector<double>> trace;
  std::vector<BlockSpec> blocks;
  int iterations_run = 0;
  double max_delta_self_check_error = 0.0;  // populated when self-checking
};

class SaemEngine {
 public:
  SaemEngine(const LongitudinalDataset& dataset, ModelParams initial_params,
             LatentState initial_state, PriorConfig priors, ModelConfig model_cfg,
             EstimatorConfig cfg)
      : data_(dataset),
        cfg_(std::move(cfg)),
        model_cfg_(std::move(model_cfg)),
        priors_(std::move(priors)),
        params_(std::move(initial_params)),
        z_(std::move(initial_state)),
        proposal_rng_(make_rng(cfg_.seed, RngPurpose::Proposals)),
        accept_rng_(make_rng(cfg_.seed, RngPurpose::Acceptance)) {
    data_.validate();
    params_.validate();
    priors_.validate();
    require(z_.individuals.size() == data_.subjects.size(),
            "initial latent state / dataset size mismatch");
    template_proposal_ = TemplateProposalConfig::from_template(z_.population.template_shape,
                                                               cfg_.template_proposal_stride);
    build_blocks();
    geom_.resize(data_.subjects.size());
    for (std::size_t i = 0; i < geom_.size(); ++i) geom_[i] = compute_subject(z_, static_cast<int>(i));
    stats_ = stats_from_cache();
    lambda_per_obs_ = data_.subjects.empty()
                          ? 0.0
                          : residual_dimension(data_.subjects[0].observations[0].shape);
    mean_n_obs_ = data_.subjects.empty()
                      ? 0.0
                      : static_cast<double>(data_.total_observations()) / data_.n_subjects();
  }

  // hooks; both optional
  std::function<void(const SaemEngine&)> on_checkpoint;
  std::function<void(const std::vector<double>&)> on_trace_row;

  const ModelParams& params() const { return params_; }
  const LatentState& state() const { return z_; }
  const SufficientStats& stats() const { return stats_; }
  const std::vector<BlockSpec>& blocks() const { return blocks_; }
  int iteration() const { return iteration_; }
  double current_temperature() const { return temp_; }
  double current_rho() const { return rho_; }

  SaemState snapshot() const {
    SaemState s;
    s.iteration = iteration_;
    s.z = z_;
    s.params = params_;
    s.stats = stats_;
    s.temperature = temp_;
    s.rho = rho_;
    s.template_proposal_points = template_proposal_.points;
    for (const auto& b : blocks_) {
      s.block_sigmas.push_back(b.sigma);
      s.block_histories.push_back(b.history);
    }
    s.proposal_rng = serialize_rng(proposal_rng_);
    s.accept_rng = serialize_rng(accept_rng_);
    return s;
  }

  void restore(const SaemState& s) {
    require(s.block_sigmas.size() == blocks_.size(), "snapshot block count mismatch");
    iteration_ = s.iteration;
    z_ = s.z;
    params_ = s.params;
    stats_ = s.stats;
    temp_ = s.temperature;
    rho_ = s.rho;
    if (s.template_proposal_points.size() > 0)
      template_proposal_.points = s.template_proposal_points;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      blocks_[b].sigma = s.block_sigmas[b];
      blocks_[b].history = s.block_histories[b];
    }
    proposal_rng_ = deserialize_rng(s.proposal_rng);
    accept_rng_ = deserialize_rng(s.accept_rng);
    for (std::size_t i = 0; i < geom_.size(); ++i) geom_[i] = compute_subject(z_, static_cast<int>(i));
  }

  std::vector<std::string> trace_header() const {
    std::vector<std::string> h{"k", "T", "rho", "log_likelihood", "t0", "sigma_tau2",
                               "sigma_xi2", "sigma_eps2"};
    auto add_matrix = [&h](const std::string& prefix, const Mat& m) {
      for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c)
          h.push_back(prefix + "_" + std::to_string(r) + "_" + std::to_string(c));
    };
    add_matrix("y0", params_.mean_template.vertices);
    add_matrix("c0", params_.mean_control_points);
    add_matrix("m0", params_.mean_momenta);
    add_matrix("A", params_.mean_mixing);
    for (const auto& b : blocks_) h.push_back("ar_" + b.name());
    return h;
  }

  /// One full Algorithm-1 iteration: block sweep, stochastic approximation,
  /// maximization, adaptation.
  std::vector<double> iterate() {
    ++iteration_;
    temp_ = temperature(iteration_, cfg_.temperature_schedule);
    rho_ = cfg_.step_size.rho(iteration_);

    for (BlockSpec& block : blocks_) {
      const bool accepted = mh_step(block);
      block.history.push_back(accepted ? 1 : 0);
    }

    sa_update(stats_, stats_from_cache(), rho_);
    params_ = m_step(stats_, priors_, data_.n_subjects(), mean_n_obs_, lambda_per_obs_);

    if (iteration_ % cfg_.sampler.n_adapt == 0)
      adapt_proposals(blocks_, iteration_, cfg_.sampler);

    return trace_row();
  }

  RunResult run() {
    RunResult result;
    result.trace_header = trace_header();
    latent_sum_.assign(data_.subjects.size(), IndividualLatents{});
    for (auto& acc : latent_sum_) acc.sources = Vec::Zero(z_.population.n_sources());
    latent_sum_count_ = 0;
    const int avg_start = cfg_.iterations - std::max(1, cfg_.iterations / 4);

    try {
      while (iteration_ < cfg_.iterations) {
        std::vector<double> row = iterate();
        if (on_trace_row) on_trace_row(row);
        result.trace.push_back(std::move(row));

        if (iteration_ > avg_start) accumulate_latents();
        if (cfg_.checkpoint_every > 0 && on_checkpoint &&
            iteration_ % cfg_.checkpoint_every == 0)
          on_checkpoint(*this);
        if (cfg_.early_stop && theta_stalled(result.trace)) break;
      }
    } catch (...) {
      if (on_checkpoint) on_checkpoint(*this);  // best-effort state dump
      throw;
    }

    result.params = params_;
    result.final_state = z_;
    result.blocks = blocks_;
    result.iterations_run = iteration_;
    result.max_delta_self_check_error = max_delta_error_;
    result.mean_individuals = z_.individuals;
    if (latent_sum_count_ > 0) {
      for (std::size_t i = 0; i < latent_sum_.size(); ++i) {
        result.mean_individuals[i].onset_age =
            latent_sum_[i].onset_age / latent_sum_count_;
        result.mean_individuals[i].log_acceleration =
            latent_sum_[i].log_acceleration / latent_sum_count_;
        result.mean_individuals[i].sources = latent_sum_[i].sources / latent_sum_count_;
      }
    }
    return result;
  }

  /// Tempered joint of the current state, assembled from the cache.
  double cached_tempered_joint() const {
    double ll = params_log_prior(params_, priors_);
    ll += population_log_likelihood(z_.population, params_, priors_, temp_);
    for (std::size_t i = 0; i < data_.subjects.size(); ++i) {
      ll += data_ll_from_residuals(static_cast<int>(i), geom_[i].residuals, temp_);
      ll += individual_log_likelihood(z_.individuals[i], params_);
    }
    return ll;
  }

 private:
  // --- per-subject geometry cache ------------------------------------------

  struct LegPair {
    CarryingLeg fwd, bwd;
    // observation j of this subject maps to anchor obs_anchor[j] of the leg
    // selected by obs_on_fwd[j]
    std::vector<char> obs_on_fwd;
    std::vector<int> obs_anchor;
  };
  struct TransportPair {
    TransportedMomenta fwd, bwd;
  };
  struct SubjectGeom {
    std::shared_ptr<const LegPair> legs;
    std::shared_ptr<const TransportPair> transports;
    std::vector<double> residuals;
    double residual_sum = 0.0;
  };

  std::shared_ptr<const LegPair> build_legs(const LatentState& z, int i) const {
    const Subject& subject = data_.subjects[static_cast<std::size_t>(i)];
    const IndividualLatents& ind = z.individuals[static_cast<std::size_t>(i)];
    auto legs = std::make_shared<LegPair>();
    std::vector<double> fwd{0.0}, bwd{0.0};
    std::vector<double> eval(subject.observations.size());
    for (std::size_t j = 0; j < subject.observations.size(); ++j) {
      eval[j] = centered_warp(ind, subject.observations[j].time);
      (eval[j] >= 0.0 ? fwd : bwd).push_back(eval[j]);
    }
    std::sort(fwd.begin() + 1, fwd.end());
    std::sort(bwd.begin() + 1, bwd.end(), std::greater<>());
    legs->fwd = build_carrying_leg(z.population.control_points, z.population.momenta, fwd,
                                   model_cfg_.steps.steps_per_unit, model_cfg_.kernel);
    legs->bwd = build_carrying_leg(z.population.control_points, z.population.momenta, bwd,
                                   model_cfg_.steps.steps_per_unit, model_cfg_.kernel);
    legs->obs_on_fwd.resize(eval.size());
    legs->obs_anchor.resize(eval.size());
    for (std::size_t j = 0; j < eval.size(); ++j) {
      const bool on_fwd = eval[j] >= 0.0;
      const CarryingLeg& leg = on_fwd ? legs->fwd : legs->bwd;
      const auto it = std::find(leg.anchor_times.begin() + 1, leg.anchor_times.end(), eval[j]);
      legs->obs_on_fwd[j] = on_fwd;
      legs->obs_anchor[j] = static_cast<int>(it - leg.anchor_times.begin());
    }
    return legs;
  }

  std::shared_ptr<const TransportPair> build_transports(const LatentState& z,
                                                        const LegPair& legs, int i) const {
    const Mat w =
        space_shift(z.population, z.individuals[static_cast<std::size_t>(i)].sources,
                    model_cfg_.kernel);
    auto tp = std::make_shared<TransportPair>();
    tp->fwd = parallel_transport(legs.fwd.traj, w);
    tp->bwd = parallel_transport(legs.bwd.traj, w);
    return tp;
  }

  void compute_residuals(const LatentState& z, int i, SubjectGeom& geom) const {
    const Subject& subject = data_.subjects[static_cast<std::size_t>(i)];
    const std::vector<Shape> fwd_shapes =
        sample_exp_parallel_leg(geom.legs->fwd, geom.transports->fwd,
                                z.population.template_shape, model_cfg_.steps.unit_exp_steps);
    const std::vector<Shape> bwd_shapes =
        sample_exp_parallel_leg(geom.legs->bwd, geom.transports->bwd,
                                z.population.template_shape, model_cfg_.steps.unit_exp_steps);
    geom.residuals.resize(subject.observations.size());
    geom.residual_sum = 0.0;
    for (std::size_t j = 0; j < subject.observations.size(); ++j) {
      const Shape& pred = geom.legs->obs_on_fwd[j]
                              ? fwd_shapes[static_cast<std::size_t>(geom.legs->obs_anchor[j])]
                              : bwd_shapes[static_cast<std::size_t>(geom.legs->obs_anchor[j])];
      geom.residuals[j] =
          metric_dist2(subject.observations[j].shape, pred, model_cfg_.metric);
      geom.residual_sum += geom.residuals[j];
    }
  }

  SubjectGeom compute_subject(const LatentState& z, int i) const {
    SubjectGeom geom;
    geom.legs = build_legs(z, i);
    geom.transports = build_transports(z, *geom.legs, i);
    compute_residuals(z, i, geom);
    return geom;
  }

  /// Candidate geometry for one subject, reusing the stages a block type does
  /// not invalidate.
  SubjectGeom compute_candidate_subject(const LatentState& cand, int i, BlockType type) const {
    const SubjectGeom& cur = geom_[static_cast<std::size_t>(i)];
    SubjectGeom geom;
    switch (type) {
      case BlockType::ControlPoints:
      case BlockType::Momenta:
      case BlockType::Subject:
        return compute_subject(cand, i);
      case BlockType::MixingColumn:
        geom.legs = cur.legs;
        geom.transports = build_transports(cand, *geom.legs, i);
        break;
      case BlockType::Template:
        geom.legs = cur.legs;
        geom.transports = cur.transports;
        break;
    }
    compute_residuals(cand, i, geom);
    return geom;
  }

  double data_ll_from_residuals(int i, const std::vector<double>& residuals,
                                double temperature_value) const {
    const Subject& subject = data_.subjects[static_cast<std::size_t>(i)];
    const double var = temperature_value * params_.var_noise;
    double ll = 0.0;
    for (std::size_t j = 0; j < residuals.size(); ++j)
      ll += -0.5 * (residual_dimension(subject.observations[j].shape) * std::log(var) +
                    residuals[j] / var);
    return ll;
  }

  // --- sampler --------------------------------------------------------------

  void build_blocks() {
    blocks_.clear();
    blocks_.push_back({BlockType::Template, -1, cfg_.sampler.sigma_init, {}});
    blocks_.push_back({BlockType::ControlPoints, -1, cfg_.sampler.sigma_init, {}});
    blocks_.push_back({BlockType::Momenta, -1, cfg_.sampler.sigma_init, {}});
    for (int l = 0; l < z_.population.n_sources(); ++l)
      blocks_.push_back({BlockType::MixingColumn, l, cfg_.sampler.sigma_init, {}});
    for (int i = 0; i < data_.n_subjects(); ++i)
      blocks_.push_back({BlockType::Subject, i, cfg_.sampler.sigma_init, {}});
  }

  bool population_block(BlockType t) const { return t != BlockType::Subject; }

  bool mh_step(BlockSpec& block) {
    const LatentState cand =
        propose_block(block, z_, template_proposal_, model_cfg_.kernel, proposal_rng_);

    double delta = 0.0;
    std::vector<SubjectGeom> cand_geom;
    std::vector<int> affected;
    bool failed = false;

    if (population_block(block.type)) {
      affected.resize(data_.subjects.size());
      for (std::size_t i = 0; i < affected.size(); ++i) affected[i] = static_cast<int>(i);
      cand_geom.resize(affected.size());
      std::atomic<bool> any_failure{false};
      parallel_for(static_cast<int>(affected.size()), cfg_.threads, [&](int idx) {
        if (any_failure.load(std::memory_order_relaxed)) return;
        try {
          cand_geom[static_cast<std::size_t>(idx)] =
              compute_candidate_subject(cand, affected[static_cast<std::size_t>(idx)], block.type);
        } catch (const NumericalError&) {
          any_failure.store(true, std::memory_order_relaxed);
        } catch (const std::invalid_argument&) {
          any_failure.store(true, std::memory_order_relaxed);
        }
      });
      failed = any_failure.load();
      if (!failed) {
        delta += population_log_likelihood(cand.population, params_, priors_, temp_) -
                 population_log_likelihood(z_.population, params_, priors_, temp_);
        for (std::size_t a = 0; a < affected.size(); ++a)
          delta += data_ll_from_residuals(affected[a], cand_geom[a].residuals, temp_) -
                   data_ll_from_residuals(affected[a], geom_[static_cast<std::size_t>(affected[a])].residuals,
                                          temp_);
      }
    } else {
      affected.push_back(block.index);
      cand_geom.resize(1);
      try {
        cand_geom[0] = compute_candidate_subject(cand, block.index, block.type);
        delta += data_ll_from_residuals(block.index, cand_geom[0].residuals, temp_) -
                 data_ll_from_residuals(block.index,
                                        geom_[static_cast<std::size_t>(block.index)].residuals, temp_);
        delta += individual_log_likelihood(cand.individuals[static_cast<std::size_t>(block.index)],
                                           params_) -
                 individual_log_likelihood(z_.individuals[static_cast<std::size_t>(block.index)],
                                           params_);
      } catch (const NumericalError&) {
        failed = true;
      } catch (const std::invalid_argument&) {
        failed = true;
      }
    }
    if (failed) {  // non-finite or invalid candidate: auto-reject
      ++auto_rejects_;
      return false;
    }

    if (cfg_.self_check_deltas) self_check(cand, delta);

    const bool accepted = metropolis_accept(delta, accept_rng_);
    if (accepted) {
      z_ = cand;
      for (std::size_t a = 0; a < affected.size(); ++a)
        geom_[static_cast<std::size_t>(affected[a])] = std::move(cand_geom[a]);
    }
    return accepted;
  }

  void self_check(const LatentState& cand, double cached_delta) {
    std::vector<SubjectGeom> full(geom_.size());
    double cand_ll = params_log_prior(params_, priors_) +
                     population_log_likelihood(cand.population, params_, priors_, temp_);
    for (std::size_t i = 0; i < geom_.size(); ++i) {
      full[i] = compute_subject(cand, static_cast<int>(i));
      cand_ll += data_ll_from_residuals(static_cast<int>(i), full[i].residuals, temp_) +
                 individual_log_likelihood(cand.individuals[i], params_);
    }
    const double full_delta = cand_ll - cached_tempered_joint();
    max_delta_error_ = std::max(max_delta_error_, std::abs(full_delta - cached_delta));
  }

  // --- bookkeeping ----------------------------------------------------------

  SufficientStats stats_from_cache() const {
    SufficientStats s;
    s.s1 = z_.population.template_shape.vertices;
    s.s2 = z_.population.control_points;
    s.s3 = z_.population.momenta;
    s.s4 = z_.population.mixing;
    for (std::size_t i = 0; i < geom_.size(); ++i) {
      const IndividualLatents& ind = z_.individuals[i];
      s.s5 += ind.onset_age;
      s.s6 += ind.onset_age * ind.onset_age;
      s.s7 += ind.log_acceleration * ind.log_acceleration;
      s.s8 += geom_[i].residual_sum;
    }
    return s;
  }

  std::vector<double> trace_row() const {
    std::vector<double> row{static_cast<double>(iteration_), temp_, rho_,
                            cached_complete_log_likelihood(), params_.reference_time,
                            params_.var_time_shift, params_.var_log_accel, params_.var_noise};
    auto add_matrix = [&row](const Mat& m) {
      for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    };
    add_matrix(params_.mean_template.vertices);
    add_matrix(params_.mean_control_points);
    add_matrix(params_.mean_momenta);
    add_matrix(params_.mean_mixing);
    for (const auto& b : blocks_) row.push_back(b.recent_rate(cfg_.sampler.n_detect));
    return row;
  }

  double cached_complete_log_likelihood() const {
    double ll = params_log_prior(params_, priors_) +
                population_log_likelihood(z_.population, params_, priors_, 1.0);
    for (std::size_t i = 0; i < geom_.size(); ++i)
      ll += data_ll_from_residuals(static_cast<int>(i), geom_[i].residuals, 1.0) +
            individual_log_likelihood(z_.individuals[i], params_);
    return ll;
  }

  void accumulate_latents() {
    ++latent_sum_count_;
    for (std::size_t i = 0; i < latent_sum_.size(); ++i) {
      latent_sum_[i].onset_age += z_.individuals[i].onset_age;
      latent_sum_[i].log_acceleration += z_.individuals[i].log_acceleration;
      latent_sum_[i].sources += z_.individuals[i].sources;
    }
  }

  bool theta_stalled(const std::vector<std::vector<double>>& trace) const {
    const int w = cfg_.early_stop_window;
    if (static_cast<int>(trace.size()) <= w) return false;
    const std::vector<double>& now = trace.back();
    const std::vector<double>& then = trace[trace.size() - 1 - static_cast<std::size_t>(w)];
    const std::size_t theta_begin = 4;
    const std::size_t theta_end = now.size() - blocks_.size();
    for (std::size_t c = theta_begin; c < theta_end; ++c) {
      const double denom = std::max(std::abs(then[c]), 1e-8);
      if (std::abs(now[c] - then[c]) / denom >= cfg_.early_stop_threshold) return false;
    }
    return true;
  }

  LongitudinalDataset data_;
  EstimatorConfig cfg_;
  ModelConfig model_cfg_;
  PriorConfig priors_;
  ModelParams params_;
  LatentState z_;
  TemplateProposalConfig template_proposal_;
  std::vector<BlockSpec> blocks_;
  std::vector<SubjectGeom> geom_;
  SufficientStats stats_;
  std::mt19937_64 proposal_rng_;
  std::mt19937_64 accept_rng_;
  double lambda_per_obs_ = 0.0;
  double mean_n_obs_ = 0.0;
  int iteration_ = 0;
  double temp_ = 1.0;
  double rho_ = 1.0;
  long auto_rejects_ = 0;
  double max_delta_error_ = 0.0;
  std::vector<IndividualLatents> latent_sum_;
  int latent_sum_count_ = 0;
};

/// Runs Algorithm 1 to the configured budget. A zero budget echoes the
/// initialization with an empty trace.
inline RunResult run_estimation(const LongitudinalDataset& dataset, const ModelParams& theta0,
                                const LatentState& z0, const PriorConfig& priors,
                                const ModelConfig& model_cfg, const EstimatorConfig& cfg) {
  SaemEngine engine(dataset, theta0, z0, priors, model_cfg, cfg);
  return engine.run();
}

}  // namespace longshape
