#include "longshape/estimator.hpp"

#include "support/fixtures.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <random>

using namespace longshape;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

ModelConfig small_model_config() {
  ModelConfig cfg;
  cfg.kernel = fixtures::kernel();
  cfg.metric = MetricConfig{MetricKind::Current, 0.5};
  cfg.steps = ExpParallelSteps{10, 10};
  return cfg;
}

ModelParams small_truth() {
  ModelParams p;
  p.mean_template = fixtures::bump_polyline(13);
  p.mean_control_points = fixtures::five_control_points().points;
  p.mean_momenta = fixtures::growth_momenta().vectors;
  p.mean_mixing = fixtures::mixing_two_sources();
  p.reference_time = 70.0;
  p.var_time_shift = 1.0;
  p.var_log_accel = 0.01;
  p.var_noise = 1e-4;
  return p;
}

PriorConfig small_priors(const ModelParams& p) {
  PriorConfig pr;
  pr.prior_mean_template = p.mean_template;
  pr.prior_mean_control_points = p.mean_control_points;
  pr.prior_mean_momenta = Mat::Zero(5, 2);
  pr.prior_mean_mixing = Mat::Zero(10, 2);
  pr.prior_mean_reference_time = 70.0;
  pr.prior_var_template = 4.0;
  pr.prior_var_control_points = 4.0;
  pr.prior_var_momenta = 4.0;
  pr.prior_var_mixing = 4.0;
  pr.prior_var_reference_time = 25.0;
  pr.ig_scale_time_shift = 1.0;
  pr.ig_scale_log_accel = 0.01;
  pr.ig_scale_noise = 1e-4;
  return pr;
}

LatentState truth_state(const ModelParams& p, const std::vector<IndividualLatents>& inds) {
  return LatentState{
      PopulationLatents{p.mean_template, p.mean_control_points, p.mean_momenta, p.mean_mixing},
      inds};
}

// --- independent numerical maximizer for the theta-terms --------------------

struct ThetaTerms {
  SufficientStats s;
  PriorConfig priors;
  int n_subjects;
  double lambda_total;

  // the terms of the complete log-likelihood that depend on theta, z fixed
  double operator()(const ModelParams& p) const {
    const double n = n_subjects;
    double m2 = 0.0;
    m2 += (s.s1 - p.mean_template.vertices).squaredNorm() / priors.fixed_var_template;
    m2 += (s.s2 - p.mean_control_points).squaredNorm() / priors.fixed_var_control_points;
    m2 += (s.s3 - p.mean_momenta).squaredNorm() / priors.fixed_var_momenta;
    m2 += (s.s4 - p.mean_mixing).squaredNorm() / priors.fixed_var_mixing;
    m2 += n * std::log(p.var_time_shift) +
          (s.s6 - 2.0 * p.reference_time * s.s5 + n * p.reference_time * p.reference_time) /
              p.var_time_shift;
    m2 += n * std::log(p.var_log_accel) + s.s7 / p.var_log_accel;
    m2 += lambda_total * std::log(p.var_noise) + s.s8 / p.var_noise;
    m2 += (p.mean_template.vertices - priors.prior_mean_template.vertices).squaredNorm() /
          priors.prior_var_template;
    m2 += (p.mean_control_points - priors.prior_mean_control_points).squaredNorm() /
          priors.prior_var_control_points;
    m2 += (p.mean_momenta - priors.prior_mean_momenta).squaredNorm() / priors.prior_var_momenta;
    m2 += (p.mean_mixing - priors.prior_mean_mixing).squaredNorm() / priors.prior_var_mixing;
    const double dt = p.reference_time - priors.prior_mean_reference_time;
    m2 += dt * dt / priors.prior_var_reference_time;
    m2 += priors.ig_weight_time_shift * std::log(p.var_time_shift) +
          priors.ig_weight_time_shift * priors.ig_scale_time_shift / p.var_time_shift;
    m2 += priors.ig_weight_log_accel * std::log(p.var_log_accel) +
          priors.ig_weight_log_accel * priors.ig_scale_log_accel / p.var_log_accel;
    m2 += priors.ig_weight_noise * std::log(p.var_noise) +
          priors.ig_weight_noise * priors.ig_scale_noise / p.var_noise;
    return -0.5 * m2;
  }
};

// coordinates: all mean entries, t0, then the log of each variance
struct ThetaVector {
  ModelParams proto;

  int size() const {
    return static_cast<int>(proto.mean_template.vertices.size() +
                            proto.mean_control_points.size() + proto.mean_momenta.size() +
                            proto.mean_mixing.size()) +
           4;
  }

  ModelParams unpack(const Vec& x) const {
    ModelParams p = proto;
    int at = 0;
    auto fill = [&x, &at](Mat& m) {
      for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) m(r, c) = x(at++);
    };
    fill(p.mean_template.vertices);
    fill(p.mean_control_points);
    fill(p.mean_momenta);
    fill(p.mean_mixing);
    p.reference_time = x(at++);
    p.var_time_shift = std::exp(x(at++));
    p.var_log_accel = std::exp(x(at++));
    p.var_noise = std::exp(x(at++));
    return p;
  }

  Vec pack(const ModelParams& p) const {
    Vec x(size());
    int at = 0;
    auto grab = [&x, &at](const Mat& m) {
      for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) x(at++) = m(r, c);
    };
    grab(p.mean_template.vertices);
    grab(p.mean_control_points);
    grab(p.mean_momenta);
    grab(p.mean_mixing);
    x(at++) = p.reference_time;
    x(at++) = std::log(p.var_time_shift);
    x(at++) = std::log(p.var_log_accel);
    x(at++) = std::log(p.var_noise);
    return x;
  }
};

double golden_max(const std::function<double(double)>& f, double a, double b, double tol) {
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

double maximize_coordinate(const std::function<double(double)>& f, double x0, double scale) {
  double a = x0 - scale, b = x0 + scale;
  for (int expand = 0; expand < 80; ++expand) {
    const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
    if (fa > fm)
      a -= (b - a);
    else if (fb > fm)
      b += (b - a);
    else
      break;
  }
  return golden_max(f, a, b, 1e-11 * std::max(1.0, std::abs(x0)));
}

/// Cyclic coordinate-ascent maximizer, independent of the closed forms.
ModelParams numeric_m_step(const ThetaTerms& obj, const ModelParams& start) {
  ThetaVector coords{start};
  Vec x = coords.pack(start);
  double best = obj(coords.unpack(x));
  for (int sweep = 0; sweep < 60; ++sweep) {
    for (int c = 0; c < coords.size(); ++c) {
      auto along = [&](double v) {
        Vec y = x;
        y(c) = v;
        return obj(coords.unpack(y));
      };
      x(c) = maximize_coordinate(along, x(c), 0.5);
    }
    const double now = obj(coords.unpack(x));
    if (now - best < 1e-12 * std::max(1.0, std::abs(now))) break;
    best = now;
  }
  return coords.unpack(x);
}

SufficientStats random_stats(std::mt19937_64& rng, int n_subjects) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  SufficientStats s;
  s.s1 = fixtures::random_points(3, 2, rng, 1.0);
  s.s2 = fixtures::random_points(2, 2, rng, 1.0);
  s.s3 = fixtures::random_points(2, 2, rng, 0.5);
  s.s4 = fixtures::random_points(4, 2, rng, 0.5);
  double sum_t = 0.0, sum_t2 = 0.0, sum_xi2 = 0.0;
  for (int i = 0; i < n_subjects; ++i) {
    const double t = 70.0 + g(rng);
    sum_t += t;
    sum_t2 += t * t;
    const double xi = 0.1 * g(rng);
    sum_xi2 += xi * xi;
  }
  s.s5 = sum_t;
  s.s6 = sum_t2;
  s.s7 = sum_xi2;
  s.s8 = u(rng);
  return s;
}

PriorConfig stats_priors() {
  PriorConfig pr;
  pr.prior_mean_template.dim = 2;
  pr.prior_mean_template.vertices = Mat::Zero(3, 2);
  pr.prior_mean_template.cells.resize(2, 2);
  pr.prior_mean_template.cells << 0, 1, 1, 2;
  pr.prior_mean_control_points = Mat::Zero(2, 2);
  pr.prior_mean_momenta = Mat::Zero(2, 2);
  pr.prior_mean_mixing = Mat::Zero(4, 2);
  pr.prior_mean_reference_time = 70.0;
  pr.prior_var_template = 2.0;
  pr.prior_var_control_points = 3.0;
  pr.prior_var_momenta = 1.5;
  pr.prior_var_mixing = 2.5;
  pr.prior_var_reference_time = 16.0;
  pr.fixed_var_template = 1e-3;
  pr.fixed_var_control_points = 2e-3;
  pr.fixed_var_momenta = 1e-3;
  pr.fixed_var_mixing = 4e-3;
  pr.ig_weight_time_shift = 2.0;
  pr.ig_scale_time_shift = 0.5;
  pr.ig_weight_log_accel = 1.5;
  pr.ig_scale_log_accel = 0.02;
  pr.ig_weight_noise = 1.0;
  pr.ig_scale_noise = 0.05;
  return pr;
}

}  // namespace

TEST_CASE("propose_block") {
  ModelParams truth = small_truth();
  std::vector<IndividualLatents> inds(3);
  for (auto& ind : inds) {
    ind.onset_age = 70.0;
    ind.sources = Vec::Zero(2);
  }
  LatentState z = truth_state(truth, inds);
  const TemplateProposalConfig tmpl =
      TemplateProposalConfig::from_template(z.population.template_shape);
  auto kernel = fixtures::kernel();

  SECTION("vanishing proposal std reproduces the current state") {
    auto rng = make_rng(1, RngPurpose::Proposals);
    for (BlockType type : {BlockType::Template, BlockType::ControlPoints, BlockType::Momenta,
                           BlockType::MixingColumn, BlockType::Subject}) {
      BlockSpec block;
      block.type = type;
      block.index = type == BlockType::MixingColumn ? 1 : (type == BlockType::Subject ? 0 : -1);
      block.sigma = 0.0;
      const LatentState cand = propose_block(block, z, tmpl, kernel, rng);
      CHECK(cand.population.template_shape.vertices == z.population.template_shape.vertices);
      CHECK(cand.population.control_points == z.population.control_points);
      CHECK(cand.population.momenta == z.population.momenta);
      CHECK(cand.population.mixing == z.population.mixing);
      for (int i = 0; i < 3; ++i) {
        CHECK(cand.individuals[i].onset_age == z.individuals[i].onset_age);
        CHECK(cand.individuals[i].sources == z.individuals[i].sources);
      }
    }
  }

  SECTION("a subject block perturbs exactly its 2 + n_s scalars") {
    // four sources so the block holds six scalars
    LatentState z4 = z;
    z4.population.mixing = Mat::Zero(10, 4);
    for (auto& ind : z4.individuals) ind.sources = Vec::Zero(4);
    auto rng = make_rng(2, RngPurpose::Proposals);
    BlockSpec block;
    block.type = BlockType::Subject;
    block.index = 1;
    block.sigma = 0.3;
    const LatentState cand = propose_block(block, z4, tmpl, kernel, rng);

    CHECK(cand.population.template_shape.vertices == z4.population.template_shape.vertices);
    CHECK(cand.population.control_points == z4.population.control_points);
    CHECK(cand.population.momenta == z4.population.momenta);
    CHECK(cand.population.mixing == z4.population.mixing);
    int changed = 0;
    for (int i = 0; i < 3; ++i) {
      changed += cand.individuals[i].onset_age != z4.individuals[i].onset_age;
      changed += cand.individuals[i].log_acceleration != z4.individuals[i].log_acceleration;
      for (int l = 0; l < 4; ++l)
        changed += cand.individuals[i].sources(l) != z4.individuals[i].sources(l);
      if (i != 1) {
        CHECK(cand.individuals[i].onset_age == z4.individuals[i].onset_age);
        CHECK(cand.individuals[i].sources == z4.individuals[i].sources);
      }
    }
    CHECK(changed == 6);
  }

  SECTION("proposal increments have the configured std") {
    auto rng = make_rng(3, RngPurpose::Proposals);
    BlockSpec block;
    block.type = BlockType::ControlPoints;
    block.sigma = 0.25;
    double sum = 0.0, sq = 0.0;
    int n = 0;
    for (int rep = 0; rep < 1000; ++rep) {
      const LatentState cand = propose_block(block, z, tmpl, kernel, rng);
      const Mat inc = cand.population.control_points - z.population.control_points;
      for (int i = 0; i < inc.size(); ++i) {
        sum += inc.data()[i];
        sq += inc.data()[i] * inc.data()[i];
        ++n;
      }
    }
    const double std_inc = std::sqrt(sq / n - (sum / n) * (sum / n));
    CHECK_THAT(std_inc, WithinRel(0.25, 0.03));
  }
}

TEST_CASE("propose_template") {
  auto kernel = fixtures::kernel();
  const Shape y0 = fixtures::bump_polyline(13);

  SECTION("single proposal point displaces every vertex along one direction") {
    TemplateProposalConfig cfg;
    cfg.points.resize(1, 2);
    cfg.points << 0.0, 0.4;
    auto rng = make_rng(4, RngPurpose::Proposals);
    const Shape cand = propose_template(cfg, 0.2, y0, kernel, rng);
    const Mat disp = cand.vertices - y0.vertices;
    int nearest = 0;
    (y0.vertices.rowwise() - cfg.points.row(0)).rowwise().squaredNorm().minCoeff(&nearest);
    const Eigen::RowVector2d dir = disp.row(nearest).normalized();
    for (int v = 0; v < y0.n_vertices(); ++v) {
      if (disp.row(v).norm() < 1e-14) continue;
      const double cross = disp(v, 0) * dir(1) - disp(v, 1) * dir(0);
      CHECK(std::abs(cross) < 1e-12);  // parallel to the drawn momentum
    }
    for (int v = 1; v < y0.n_vertices(); ++v) {
      const double d_prev = (y0.vertices.row(v - 1) - cfg.points.row(0)).norm();
      const double d_cur = (y0.vertices.row(v) - cfg.points.row(0)).norm();
      if (d_cur > d_prev) CHECK(disp.row(v).norm() <= disp.row(v - 1).norm() + 1e-12);
    }
  }

  SECTION("Monte Carlo covariance matches sigma^2 D D^T") {
    const TemplateProposalConfig cfg = TemplateProposalConfig::from_template(y0, 4);
    const double sigma = 0.15;
    const int n_draws = 10000;
    auto rng = make_rng(5, RngPurpose::Proposals);

    const int nv = y0.n_vertices();
    Mat cov = Mat::Zero(nv, nv);  // x-displacement covariance
    for (int rep = 0; rep < n_draws; ++rep) {
      const Shape cand = propose_template(cfg, sigma, y0, kernel, rng);
      const Vec dx = (cand.vertices - y0.vertices).col(0);
      cov += dx * dx.transpose();
    }
    cov /= n_draws;

    Mat d(nv, static_cast<int>(cfg.points.rows()));
    for (int v = 0; v < nv; ++v)
      for (int p = 0; p < cfg.points.rows(); ++p)
        d(v, p) = kernel_eval(y0.vertices.row(v), cfg.points.row(p), kernel);
    const Mat expected = sigma * sigma * d * d.transpose();
    const double tol = 0.05 * expected.cwiseAbs().maxCoeff();
    CHECK((cov - expected).cwiseAbs().maxCoeff() < tol);
  }
}

TEST_CASE("metropolis_accept") {
  auto rng = make_rng(6, RngPurpose::Acceptance);

  SECTION("identical candidate is always accepted") {
    for (int rep = 0; rep < 100; ++rep) CHECK(metropolis_accept(0.0, rng));
  }

  SECTION("a fifty-log-unit drop is essentially never accepted") {
    int accepts = 0;
    for (int rep = 0; rep < 10000; ++rep) accepts += metropolis_accept(-50.0, rng);
    CHECK(accepts == 0);
  }

  SECTION("non-finite deltas auto-reject") {
    CHECK_FALSE(metropolis_accept(std::nan(""), rng));
    CHECK_FALSE(metropolis_accept(-std::numeric_limits<double>::infinity(), rng));
  }

  SECTION("intermediate deltas accept at the Metropolis rate") {
    const double delta = std::log(0.5);
    int accepts = 0;
    const int n = 20000;
    for (int rep = 0; rep < n; ++rep) accepts += metropolis_accept(delta, rng);
    CHECK_THAT(static_cast<double>(accepts) / n, WithinAbs(0.5, 0.02));
  }
}

TEST_CASE("adapt_sigma follows the adaptation rule exactly") {
  SamplerConfig cfg;

  SECTION("on-target acceptance leaves sigma unchanged") {
    CHECK(adapt_sigma(0.37, cfg.target_ar, 5, cfg) == 0.37);
  }

  SECTION("full acceptance at k = 1 adds exactly one") {
    CHECK_THAT(adapt_sigma(0.2, 1.0, 1, cfg), WithinAbs(1.2, 1e-15));
  }

  SECTION("zero acceptance at k = 16 subtracts 16^-0.51") {
    const double drop = std::pow(16.0, -0.51);
    CHECK_THAT(drop, WithinAbs(0.243, 1e-3));
    CHECK_THAT(adapt_sigma(1.0, 0.0, 16, cfg), WithinAbs(1.0 - drop, 1e-15));
  }

  SECTION("sigma is floored") {
    CHECK(adapt_sigma(1e-11, 0.0, 2, cfg) == cfg.sigma_floor);
  }
}

TEST_CASE("sa_update") {
  SufficientStats s;
  s.s1 = Mat::Constant(2, 2, 2.0);
  s.s2 = Mat::Zero(1, 2);
  s.s3 = Mat::Zero(1, 2);
  s.s4 = Mat::Zero(2, 1);
  s.s5 = 2.0;

  SufficientStats target = s;
  target.s1 = Mat::Constant(2, 2, 4.0);
  target.s5 = 4.0;

  SECTION("rho = 1 replaces the statistics") {
    SufficientStats x = s;
    sa_update(x, target, 1.0);
    CHECK(x.s1 == target.s1);
    CHECK(x.s5 == 4.0);
  }

  SECTION("rho = 1/2 averages") {
    SufficientStats x = s;
    sa_update(x, target, 0.5);
    CHECK(x.s5 == 3.0);
    CHECK(x.s1(0, 0) == 3.0);
  }

  SECTION("fixed target is approached geometrically") {
    SufficientStats x = s;
    double prev_gap = std::abs(x.s5 - target.s5);
    for (int k = 0; k < 100; ++k) {
      sa_update(x, target, 0.3);
      const double gap = std::abs(x.s5 - target.s5);
      CHECK(gap <= 0.7 * prev_gap + 1e-15);
      prev_gap = gap;
    }
    CHECK(prev_gap < 1e-12);
  }

  SECTION("rho outside (0, 1] is rejected") {
    SufficientStats x = s;
    CHECK_THROWS_AS(sa_update(x, target, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(sa_update(x, target, 1.5), std::invalid_argument);
  }
}

TEST_CASE("temperature schedule") {
  SECTION("unit init disables tempering") {
    TemperatureSchedule sched{1.0, 100, 0.5};
    for (int k = 0; k < 1000; ++k) CHECK(temperature(k, sched) == 1.0);
  }

  SECTION("geometric decay reaching exactly one") {
    TemperatureSchedule sched{16.0, 0, 0.5};
    CHECK(temperature(0, sched) == 16.0);
    CHECK(temperature(1, sched) == 8.0);
    CHECK(temperature(2, sched) == 4.0);
    CHECK(temperature(3, sched) == 2.0);
    CHECK(temperature(4, sched) == 1.0);
    CHECK(temperature(5, sched) == 1.0);
  }

  SECTION("nonincreasing and at least one over a long horizon") {
    TemperatureSchedule sched{12.5, 37, 0.999};
    double prev = temperature(0, sched);
    for (int k = 1; k < 100000; ++k) {
      const double t = temperature(k, sched);
      CHECK(t <= prev);
      CHECK(t >= 1.0);
      prev = t;
    }
    CHECK(prev == 1.0);
  }

  SECTION("invalid schedules are rejected") {
    CHECK_THROWS_AS(temperature(1, TemperatureSchedule{0.5, 0, 0.5}), ConfigError);
    CHECK_THROWS_AS(temperature(1, TemperatureSchedule{2.0, 0, 1.5}), ConfigError);
    CHECK_THROWS_AS(temperature(1, TemperatureSchedule{2.0, -3, 0.5}), ConfigError);
  }
}

TEST_CASE("m_step") {
  const PriorConfig pr = stats_priors();

  SECTION("log-acceleration variance closed form") {
    PriorConfig p = pr;
    p.ig_weight_log_accel = 1.0;
    p.ig_scale_log_accel = 0.01;
    std::mt19937_64 rng(50);
    SufficientStats s = random_stats(rng, 99);
    s.s7 = 0.0;
    const ModelParams out = m_step(s, p, 99, 5.0, 4.0);
    CHECK_THAT(out.var_log_accel, WithinAbs(1e-4, 1e-18));
  }

  SECTION("data-dominated template limit") {
    PriorConfig p = pr;
    p.fixed_var_template = 1e-8;
    p.prior_var_template = 1.0;  // sigma_y^2 / varsigma_y^2 = 1e-8
    std::mt19937_64 rng(51);
    const SufficientStats s = random_stats(rng, 10);
    const ModelParams out = m_step(s, p, 10, 5.0, 4.0);
    const double rel = (out.mean_template.vertices - s.s1).norm() / s.s1.norm();
    CHECK(rel < 1e-7);
  }

  SECTION("matches the coordinate-ascent numerical maximizer") {
    std::mt19937_64 rng(52);
    for (int rep = 0; rep < 5; ++rep) {
      const int n = 20;
      const SufficientStats s = random_stats(rng, n);
      const double lambda = 4.0;
      const double mean_n = 5.0;
      const ModelParams closed = m_step(s, pr, n, mean_n, lambda);

      ModelParams start = closed;
      start.reference_time += 0.5;
      start.var_time_shift *= 1.7;
      start.var_noise *= 0.6;
      start.mean_momenta.array() += 0.2;
      const ThetaTerms obj{s, pr, n, lambda * n * mean_n};
      const ModelParams numeric = numeric_m_step(obj, start);

      CHECK_THAT(numeric.reference_time, WithinRel(closed.reference_time, 1e-4));
      CHECK_THAT(numeric.var_time_shift, WithinRel(closed.var_time_shift, 1e-4));
      CHECK_THAT(numeric.var_log_accel, WithinRel(closed.var_log_accel, 1e-4));
      CHECK_THAT(numeric.var_noise, WithinRel(closed.var_noise, 1e-4));
      CHECK((numeric.mean_template.vertices - closed.mean_template.vertices)
                .cwiseAbs()
                .maxCoeff() < 1e-4 * std::max(1.0, closed.mean_template.vertices.cwiseAbs().maxCoeff()));
      CHECK((numeric.mean_mixing - closed.mean_mixing).cwiseAbs().maxCoeff() <
            1e-4 * std::max(1.0, closed.mean_mixing.cwiseAbs().maxCoeff()));

      // stationarity of the closed form under numerical differentiation
      ThetaVector coords{closed};
      const Vec x = coords.pack(closed);
      const double f0 = obj(closed);
      for (int c = 0; c < coords.size(); ++c) {
        const double h = 1e-5 * std::max(1.0, std::abs(x(c)));
        Vec xp = x, xm = x;
        xp(c) += h;
        xm(c) -= h;
        const double g = (obj(coords.unpack(xp)) - obj(coords.unpack(xm))) / (2 * h);
        CHECK(std::abs(g * h) < 1e-6 * std::max(1.0, std::abs(f0)));
      }
    }
  }
}

TEST_CASE("SAEM engine") {
  ModelParams truth = small_truth();
  ModelConfig mcfg = small_model_config();
  const PriorConfig priors = small_priors(truth);

  SimulateOptions opt;
  opt.n_subjects = 4;
  opt.n_obs = 3;
  opt.noise_sd = 0.01;
  opt.seed = 60;
  const SimulationResult sim = simulate(truth, mcfg, opt);

  LatentState z0 = truth_state(truth, sim.true_latents);
  EstimatorConfig cfg;
  cfg.iterations = 8;
  cfg.seed = 61;
  cfg.temperature_schedule = TemperatureSchedule{4.0, 2, 0.5};
  cfg.step_size.burn_in = 4;

  SECTION("zero budget echoes the initialization") {
    EstimatorConfig zero = cfg;
    zero.iterations = 0;
    const RunResult r = run_estimation(sim.dataset, truth, z0, priors, mcfg, zero);
    CHECK(r.trace.empty());
    CHECK(r.params.reference_time == truth.reference_time);
    CHECK(r.params.mean_template.vertices == truth.mean_template.vertices);
  }

  SECTION("cached deltas equal full recomputations") {
    EstimatorConfig checked = cfg;
    checked.iterations = 4;
    checked.self_check_deltas = true;
    const RunResult r = run_estimation(sim.dataset, truth, z0, priors, mcfg, checked);
    CHECK(r.max_delta_self_check_error < 1e-10);
  }

  SECTION("same seed gives bitwise-identical traces") {
    const RunResult a = run_estimation(sim.dataset, truth, z0, priors, mcfg, cfg);
    const RunResult b = run_estimation(sim.dataset, truth, z0, priors, mcfg, cfg);
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) CHECK(a.trace[i] == b.trace[i]);
  }

  SECTION("multithreaded run is bitwise identical to serial") {
    EstimatorConfig threaded = cfg;
    threaded.threads = 2;
    const RunResult a = run_estimation(sim.dataset, truth, z0, priors, mcfg, cfg);
    const RunResult b = run_estimation(sim.dataset, truth, z0, priors, mcfg, threaded);
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) CHECK(a.trace[i] == b.trace[i]);
  }

  SECTION("snapshot and restore resume the run bitwise") {
    const RunResult straight = run_estimation(sim.dataset, truth, z0, priors, mcfg, cfg);

    SaemEngine first(sim.dataset, truth, z0, priors, mcfg, cfg);
    for (int k = 0; k < 4; ++k) first.iterate();
    const SaemState snap = first.snapshot();

    SaemEngine resumed(sim.dataset, truth, z0, priors, mcfg, cfg);
    resumed.restore(snap);
    std::vector<std::vector<double>> tail;
    for (int k = 4; k < cfg.iterations; ++k) tail.push_back(resumed.iterate());

    REQUIRE(tail.size() + 4 == straight.trace.size());
    for (std::size_t i = 0; i < tail.size(); ++i) CHECK(tail[i] == straight.trace[i + 4]);
  }

  SECTION("trace layout matches the header") {
    const RunResult r = run_estimation(sim.dataset, truth, z0, priors, mcfg, cfg);
    REQUIRE(!r.trace.empty());
    CHECK(r.trace_header.size() == r.trace[0].size());
    CHECK(static_cast<int>(r.trace.size()) == cfg.iterations);
    for (std::size_t i = 0; i < r.trace.size(); ++i)
      CHECK(r.trace[i][0] == static_cast<double>(i + 1));
  }
}
