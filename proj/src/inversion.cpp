#include "gliocal/inversion.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <utility>

#include "gliocal/errors.hpp"
#include "gliocal/rng.hpp"

namespace gliocal {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  return seed ^ (0x9E3779B97F4A7C15ULL * (stream + 1));
}

}  // namespace

void MisfitContext::validate() const {
  if (!grid) throw ValidationError("misfit context has no grid");
  require_same_grid(grid, u0.grid(), "misfit initial condition");
  if (days.empty()) throw ValidationError("misfit context needs at least the day-0 entry");
  for (std::size_t i = 1; i < days.size(); ++i) {
    if (!(days[i] > days[i - 1]))
      throw ValidationError("misfit observation days must be strictly increasing");
  }
  if (data.size() + 1 != days.size())
    throw DimensionMismatch("misfit needs one data field per day after day 0");
  for (const auto& d : data) require_same_grid(grid, d.grid(), "misfit data field");
  if (!(sigma2_noise > 0.0)) throw NonpositiveHyper("noise variance must be positive");
}

MisfitContext misfit_from_observations(const GridPtr& grid, const ScalarField& u0,
                                       const ObservationSeries& obs, double sigma2_noise,
                                       const SolverConfig& solver) {
  if (obs.days.size() != obs.fields.size())
    throw DimensionMismatch("observation series days/fields length mismatch");
  if (obs.days.empty()) throw ValidationError("observation series is empty");
  MisfitContext ctx{grid,
                    u0,
                    obs.days,
                    {obs.fields.begin() + 1, obs.fields.end()},
                    sigma2_noise,
                    solver,
                    true};
  ctx.validate();
  return ctx;
}

TumorMisfit::TumorMisfit(MisfitContext ctx) : ctx_(std::move(ctx)) { ctx_.validate(); }

double TumorMisfit::evaluate(const Vec& theta, bool keep) {
  if (theta.size() != dim()) throw DimensionMismatch("misfit parameter vector size");
  ParameterFields th = unstack_fields(ctx_.grid, theta);
  Trajectory traj = solve_forward(ctx_.grid, th, ctx_.u0, ctx_.days, ctx_.solver);
  const double w = 0.5 * ctx_.factor() / ctx_.sigma2_noise * ctx_.grid->cell_area();
  double c = 0.0;
  std::vector<Vec> res(ctx_.data.size());
  for (std::size_t i = 1; i < ctx_.days.size(); ++i) {
    Vec r = traj.states[traj.obs_step[i]] - ctx_.data[i - 1].compact();
    c += w * r.squaredNorm();
    res[i - 1] = std::move(r);
  }
  if (keep) {
    traj_ = std::move(traj);
    point_ = std::move(th);
    residuals_ = std::move(res);
  }
  return c;
}

double TumorMisfit::cost(const Vec& theta) { return evaluate(theta, false); }

double TumorMisfit::linearize(const Vec& theta) { return evaluate(theta, true); }

const Trajectory& TumorMisfit::trajectory() const {
  if (!traj_) throw std::logic_error("misfit used before linearize()");
  return *traj_;
}

Vec TumorMisfit::grad() {
  if (!traj_) throw std::logic_error("misfit used before linearize()");
  const double scale = ctx_.factor() / ctx_.sigma2_noise;
  std::vector<ScalarField> sources;
  sources.reserve(ctx_.days.size());
  sources.emplace_back(ctx_.grid);  // day 0 carries no data
  for (std::size_t i = 0; i < residuals_.size(); ++i) {
    ScalarField s(ctx_.grid);
    s.set_compact(scale * residuals_[i]);
    sources.push_back(std::move(s));
  }
  ParameterFields g = adjoint_solve(*traj_, *point_, sources, ctx_.solver);
  return stack_fields(g);
}

Vec TumorMisfit::gn_apply(const Vec& v) {
  if (!traj_) throw std::logic_error("misfit used before linearize()");
  if (v.size() != dim()) throw DimensionMismatch("misfit direction vector size");
  ParameterFields dth = unstack_fields(ctx_.grid, v);
  std::vector<ScalarField> du = tangent_solve(*traj_, *point_, dth, ctx_.solver);
  const double scale = ctx_.factor() / ctx_.sigma2_noise;
  std::vector<ScalarField> sources;
  sources.reserve(du.size());
  sources.emplace_back(ctx_.grid);
  for (std::size_t i = 1; i < du.size(); ++i) {
    ScalarField s(ctx_.grid);
    s.set_compact(scale * du[i].compact());
    sources.push_back(std::move(s));
  }
  ParameterFields hv = adjoint_solve(*traj_, *point_, sources, ctx_.solver);
  return stack_fields(hv);
}

double misfit_cost_grad(const MisfitContext& ctx, const ParameterFields& theta,
                        ParameterFields& grad_out) {
  TumorMisfit m(ctx);
  double c = m.linearize(stack_fields(theta));
  grad_out = unstack_fields(ctx.grid, m.grad());
  return c;
}

ParameterFields gn_hessian_apply(const MisfitContext& ctx, const ParameterFields& theta,
                                 const ParameterFields& v) {
  TumorMisfit m(ctx);
  m.linearize(stack_fields(theta));
  return unstack_fields(ctx.grid, m.gn_apply(stack_fields(v)));
}

void NewtonConfig::validate() const {
  if (max_iters < 1) throw ValidationError("newton max_iters must be at least 1");
  if (!(grad_rtol > 0.0)) throw ValidationError("newton grad_rtol must be positive");
  if (!(grad_atol >= 0.0)) throw ValidationError("newton grad_atol must be nonnegative");
  if (cg_max_iters < 1) throw ValidationError("newton cg_max_iters must be at least 1");
  if (!(forcing_max > 0.0 && forcing_max <= 1.0))
    throw ValidationError("newton forcing_max must lie in (0,1]");
  if (!(forcing_exponent > 0.0)) throw ValidationError("newton forcing_exponent must be positive");
  if (!(armijo_c1 > 0.0 && armijo_c1 < 1.0))
    throw ValidationError("newton armijo_c1 must lie in (0,1)");
  if (!(backtrack > 0.0 && backtrack < 1.0))
    throw ValidationError("newton backtrack factor must lie in (0,1)");
  if (max_backtracks < 0) throw ValidationError("newton max_backtracks must be nonnegative");
}

namespace {

// CG on (H_gn + R) p = -g in the Gamma_pr inner product; returns the step and
// the iteration count. Stops at ||residual|| <= eta * ||g||.
std::pair<Vec, int> newton_pcg(MisfitModel& misfit, const PriorPair& prior, const Vec& g,
                               double eta, int max_iters) {
  const double target = eta * g.norm();
  Vec x = Vec::Zero(g.size());
  Vec r = -g;
  if (r.norm() == 0.0) return {x, 0};
  Vec z = prior.covariance_apply(r);
  Vec p = z;
  double rz = r.dot(z);
  int k = 0;
  while (k < max_iters) {
    Vec hp = misfit.gn_apply(p) + prior.precision_apply(p);
    const double php = p.dot(hp);
    if (!(php > 0.0)) {
      // The operator is positive definite up to roundoff; keep what we have,
      // or fall back to the preconditioned gradient on a first-step failure.
      if (k == 0) x = z;
      break;
    }
    const double alpha = rz / php;
    x += alpha * p;
    r -= alpha * hp;
    ++k;
    if (r.norm() <= target) break;
    Vec z2 = prior.covariance_apply(r);
    const double rz2 = r.dot(z2);
    p = z2 + (rz2 / rz) * p;
    rz = rz2;
  }
  return {x, k};
}

}  // namespace

std::pair<Vec, NewtonReport> compute_map(MisfitModel& misfit, const PriorPair& prior,
                                         const NewtonConfig& cfg) {
  cfg.validate();
  if (misfit.dim() != prior.n())
    throw DimensionMismatch("misfit and prior disagree on the unknown size");

  Vec theta = prior.stacked_mean();
  double phi = misfit.linearize(theta) + prior.cost(theta);
  if (!std::isfinite(phi)) throw NonFiniteCost("objective is not finite at the prior mean");
  Vec g = misfit.grad() + prior.grad(theta);

  NewtonReport rep;
  rep.initial_grad_norm = g.norm();
  rep.iterations.push_back({phi, g.norm(), 0, 0.0, 0.0, 0});

  const double tol = std::max(cfg.grad_rtol * rep.initial_grad_norm, cfg.grad_atol);
  std::string stop;
  for (int it = 0; it < cfg.max_iters; ++it) {
    const double gnorm = g.norm();
    if (gnorm <= tol) {
      stop = "converged";
      break;
    }
    const double eta =
        std::min(cfg.forcing_max, std::pow(gnorm / rep.initial_grad_norm, cfg.forcing_exponent));
    auto [p, cg_iters] = newton_pcg(misfit, prior, g, eta, cfg.cg_max_iters);
    rep.total_cg_iters += cg_iters;
    double dir = g.dot(p);
    if (!(dir < 0.0)) {
      p = -prior.covariance_apply(g);
      dir = g.dot(p);
    }

    double alpha = 1.0;
    int backtracks = 0;
    bool accepted = false;
    Vec theta_try;
    double phi_try = kInf;
    while (backtracks <= cfg.max_backtracks) {
      theta_try = theta + alpha * p;
      try {
        phi_try = misfit.cost(theta_try) + prior.cost(theta_try);
      } catch (const NumericalError&) {
        phi_try = kInf;
      }
      if (std::isfinite(phi_try) && phi_try <= phi + cfg.armijo_c1 * alpha * dir) {
        accepted = true;
        break;
      }
      alpha *= cfg.backtrack;
      ++backtracks;
    }
    if (!accepted)
      throw LineSearchFailure("no acceptable step after " + std::to_string(backtracks) +
                              " backtracks");

    theta = theta_try;
    phi = misfit.linearize(theta) + prior.cost(theta);
    g = misfit.grad() + prior.grad(theta);
    rep.iterations.push_back({phi, g.norm(), cg_iters, eta, alpha, backtracks});
  }
  if (stop.empty()) stop = (g.norm() <= tol) ? "converged" : "max_iters";

  rep.stop_reason = stop;
  rep.final_grad_norm = g.norm();
  rep.final_cost = phi;
  return {std::move(theta), std::move(rep)};
}

namespace {

// CGS2 orthonormalization of Y against the prior precision inner product.
Mat precision_orthonormalize(const Mat& Y, const PriorPair& prior) {
  const Eigen::Index n = Y.rows();
  const Eigen::Index l = Y.cols();
  Mat Q(n, l);
  for (Eigen::Index j = 0; j < l; ++j) {
    Vec v = Y.col(j);
    Vec w = prior.precision_apply(v);
    const double n0 = std::sqrt(v.dot(w));
    if (!(n0 > 0.0) || !std::isfinite(n0))
      throw RankDeficiency("range basis column " + std::to_string(j) + " vanished");
    for (int sweep = 0; sweep < 2; ++sweep) {
      if (j == 0) break;
      Vec coeff = Q.leftCols(j).transpose() * w;
      v -= Q.leftCols(j) * coeff;
      w = prior.precision_apply(v);
    }
    const double nrm = std::sqrt(v.dot(w));
    if (!(nrm > 1e-12 * n0) || !std::isfinite(nrm))
      throw RankDeficiency("range basis column " + std::to_string(j) +
                           " collapsed during orthonormalization");
    Q.col(j) = v / nrm;
  }
  return Q;
}

}  // namespace

GhepResult randomized_ghep(const std::function<Vec(const Vec&)>& h_apply,
                           const PriorPair& prior, int r, int oversample, int power_iters,
                           std::uint64_t seed) {
  const int n = prior.n();
  if (r < 0) throw ValidationError("requested eigenpair count must be nonnegative");
  if (oversample < 0) throw ValidationError("oversampling must be nonnegative");
  if (power_iters < 0) throw ValidationError("power iteration count must be nonnegative");
  if (r > n) throw ValidationError("requested eigenpair count exceeds the unknown size");
  if (r == 0) return {Vec(0), Mat(n, 0)};

  const int l = std::min(r + oversample, n);
  Rng rng = Rng::derive(seed, 0x6EC5u);
  Mat omega(n, l);
  for (Eigen::Index j = 0; j < l; ++j)
    for (Eigen::Index i = 0; i < n; ++i) omega(i, j) = rng.gaussian();

  Mat Y(n, l);
  for (Eigen::Index j = 0; j < l; ++j) Y.col(j) = prior.covariance_apply(h_apply(omega.col(j)));
  for (int q = 0; q < power_iters; ++q)
    for (Eigen::Index j = 0; j < l; ++j) Y.col(j) = prior.covariance_apply(h_apply(Y.col(j)));

  Mat Q = precision_orthonormalize(Y, prior);
  Mat HQ(n, l);
  for (Eigen::Index j = 0; j < l; ++j) HQ.col(j) = h_apply(Q.col(j));
  Mat T = Q.transpose() * HQ;
  T = 0.5 * (T + T.transpose()).eval();

  Eigen::SelfAdjointEigenSolver<Mat> es(T);
  if (es.info() != Eigen::Success)
    throw NumericalError("projected eigenproblem failed to converge");

  GhepResult out;
  out.lambda.resize(r);
  out.V.resize(n, r);
  Mat ritz = Q * es.eigenvectors();
  for (int i = 0; i < r; ++i) {
    const int src = l - 1 - i;  // Eigen sorts ascending
    out.lambda[i] = es.eigenvalues()[src];
    out.V.col(i) = ritz.col(src);
  }
  return out;
}

void LowRankPosterior::validate() const {
  if (!prior) throw ValidationError("posterior has no prior");
  if (theta_map.size() != prior->n())
    throw DimensionMismatch("posterior center size does not match the prior");
  const int r = rank();
  if (V.rows() != theta_map.size() || V.cols() != r)
    throw DimensionMismatch("posterior basis has inconsistent shape");
  for (int i = 0; i + 1 < r; ++i) {
    if (lambda[i] < lambda[i + 1])
      throw ValidationError("posterior eigenvalues must be sorted descending");
  }
  if (r > 0 && lambda[r - 1] <= -0.9)
    throw NumericalError("posterior eigenvalue too close to -1; update is not damping");
  if (r > 0) {
    Mat g(r, r);
    for (int j = 0; j < r; ++j) g.col(j) = V.transpose() * prior->precision_apply(V.col(j));
    const double err = (g - Mat::Identity(r, r)).cwiseAbs().maxCoeff();
    if (!(err < 1e-8))
      throw NumericalError("posterior basis lost precision-orthonormality (max deviation " +
                           format_double(err) + ")");
  }
}

ParameterFields LowRankPosterior::map_fields() const {
  return unstack_fields(prior->grid(), theta_map);
}

LowRankPosterior laplace_posterior(MisfitModel& misfit, std::shared_ptr<const PriorPair> prior,
                                   const Vec& theta_map, const LaplaceConfig& cfg) {
  if (!prior) throw ValidationError("laplace approximation needs a prior");
  if (cfg.oversample < 0) throw ValidationError("oversampling must be nonnegative");
  if (cfg.max_rank < 0) throw ValidationError("rank cap must be nonnegative");
  if (!(cfg.lambda_cut > 0.0)) throw ValidationError("eigenvalue cutoff must be positive");
  const int n = prior->n();
  misfit.linearize(theta_map);

  int request = cfg.rank >= 0 ? cfg.rank : std::min(cfg.max_rank, n / 4);
  request = std::min(request, n);
  auto h = [&misfit](const Vec& v) { return misfit.gn_apply(v); };
  GhepResult gh = randomized_ghep(h, *prior, request, cfg.oversample, cfg.power_iters, cfg.seed);

  int keep = static_cast<int>(gh.lambda.size());
  if (cfg.rank < 0) {
    keep = 0;
    while (keep < static_cast<int>(gh.lambda.size()) && gh.lambda[keep] >= cfg.lambda_cut) ++keep;
  }

  LowRankPosterior lrp;
  lrp.theta_map = theta_map;
  lrp.lambda = gh.lambda.head(keep);
  lrp.V = gh.V.leftCols(keep);
  lrp.prior = std::move(prior);
  lrp.validate();
  return lrp;
}

Vec posterior_sample_vec(const LowRankPosterior& lrp, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, 0xA5u);
  Vec s = lrp.prior->sample_fluctuation(rng);
  const int r = lrp.rank();
  if (r > 0) {
    Vec c = lrp.V.transpose() * lrp.prior->precision_apply(s);
    Vec damp(r);
    for (int i = 0; i < r; ++i) damp[i] = 1.0 - 1.0 / std::sqrt(1.0 + lrp.lambda[i]);
    s -= lrp.V * damp.cwiseProduct(c).eval();
  }
  return lrp.theta_map + s;
}

ParameterFields posterior_sample(const LowRankPosterior& lrp, std::uint64_t seed) {
  return unstack_fields(lrp.prior->grid(), posterior_sample_vec(lrp, seed));
}

std::pair<ScalarField, ScalarField> pointwise_posterior_variance(const LowRankPosterior& lrp,
                                                                 int n_samples,
                                                                 std::uint64_t seed) {
  if (n_samples < 2)
    throw ValidationError("pointwise variance needs at least 2 samples");
  const GridPtr& grid = lrp.prior->grid();
  const Eigen::Index n = lrp.theta_map.size();
  Vec sum = Vec::Zero(n);
  Vec sumsq = Vec::Zero(n);
  for (int i = 0; i < n_samples; ++i) {
    Vec y = posterior_sample_vec(lrp, mix_seed(seed, static_cast<std::uint64_t>(i)));
    y -= lrp.theta_map;
    sum += y;
    sumsq += y.cwiseProduct(y);
  }
  Vec var = (sumsq - sum.cwiseProduct(sum) / double(n_samples)) / double(n_samples - 1);
  const int nd = grid->n_dof();
  ScalarField vd(grid);
  ScalarField vg(grid);
  vd.set_compact(var.head(nd));
  vg.set_compact(var.tail(nd));
  return {std::move(vd), std::move(vg)};
}

PredictionEnsemble predict(const LowRankPosterior& lrp, const MisfitContext& ctx,
                           const std::vector<double>& horizon_days, int n_samples,
                           double cutoff, std::uint64_t seed, int threads) {
  ctx.validate();
  require_same_grid(lrp.prior->grid(), ctx.grid, "prediction");
  if (horizon_days.empty()) throw ValidationError("prediction needs at least one horizon day");
  for (std::size_t i = 0; i < horizon_days.size(); ++i) {
    const double prev = i == 0 ? ctx.days.back() : horizon_days[i - 1];
    if (!(horizon_days[i] > prev))
      throw ValidationError("horizon days must be strictly increasing past the last data day");
  }
  if (n_samples < 0) throw ValidationError("sample count must be nonnegative");
  if (!(cutoff > 0.0 && cutoff < 1.0)) throw ValidationError("cutoff must lie in (0,1)");
  if (threads < 1) threads = 1;

  std::vector<double> all_days = ctx.days;
  all_days.insert(all_days.end(), horizon_days.begin(), horizon_days.end());
  const std::size_t first_horizon = ctx.days.size();

  auto run_one = [&](const ParameterFields& th, std::vector<ScalarField>& fields,
                     std::vector<BinaryMask>& ind) {
    Trajectory traj = solve_forward(ctx.grid, th, ctx.u0, all_days, ctx.solver);
    fields.clear();
    ind.clear();
    for (std::size_t k = 0; k < horizon_days.size(); ++k) {
      ScalarField f = traj.state_at_obs(static_cast<int>(first_horizon + k));
      ind.push_back(tumor_indicator(f, cutoff));
      fields.push_back(std::move(f));
    }
  };

  PredictionEnsemble out;
  out.horizon_days = horizon_days;
  out.cutoff = cutoff;
  run_one(lrp.map_fields(), out.map_fields, out.map_indicator);

  out.sample_fields.resize(n_samples);
  out.sample_indicator.resize(n_samples);
  if (n_samples > 0) {
    auto run_sample = [&](int s) {
      ParameterFields th = unstack_fields(ctx.grid, posterior_sample_vec(
                                              lrp, mix_seed(seed, static_cast<std::uint64_t>(s))));
      run_one(th, out.sample_fields[s], out.sample_indicator[s]);
    };
    const int workers = std::min(threads, n_samples);
    if (workers <= 1) {
      for (int s = 0; s < n_samples; ++s) run_sample(s);
    } else {
      std::atomic<int> next{0};
      std::exception_ptr first_error;
      std::mutex err_mutex;
      std::vector<std::thread> pool;
      pool.reserve(workers);
      for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
          while (true) {
            const int s = next.fetch_add(1);
            if (s >= n_samples) break;
            try {
              run_sample(s);
            } catch (...) {
              std::lock_guard<std::mutex> lock(err_mutex);
              if (!first_error) first_error = std::current_exception();
            }
          }
        });
      }
      for (auto& t : pool) t.join();
      if (first_error) std::rethrow_exception(first_error);
    }
  }
  return out;
}

}  // namespace gliocal
