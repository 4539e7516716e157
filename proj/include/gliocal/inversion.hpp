#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gliocal/forward.hpp"
#include "gliocal/grid.hpp"
#include "gliocal/metrics.hpp"
#include "gliocal/phantom.hpp"
#include "gliocal/prior.hpp"

namespace gliocal {

using Mat = Eigen::MatrixXd;

// Observations after day 0; day 0 supplies the initial condition only. An
// empty day list is allowed (the posterior is then the prior).
struct MisfitContext {
  GridPtr grid;
  ScalarField u0;
  std::vector<double> days;        // days[0] = u0 day; days[1..] carry data
  std::vector<ScalarField> data;   // size days.size() - 1
  double sigma2_noise = 3.9e-3;
  SolverConfig solver;
  // Misfit = (factor/2) * sigma^-2 * sum_i integral (u_i - d_i)^2 dx with
  // factor 1 under the default half convention, 2 under the alternative.
  bool half_convention = true;

  double factor() const { return half_convention ? 1.0 : 2.0; }
  void validate() const;
};

MisfitContext misfit_from_observations(const GridPtr& grid, const ScalarField& u0,
                                       const ObservationSeries& obs, double sigma2_noise,
                                       const SolverConfig& solver);

// Objective seen by the Newton solver. The tumor misfit implements it with
// forward/tangent/adjoint sweeps; tests substitute closed-form surrogates.
class MisfitModel {
public:
  virtual ~MisfitModel() = default;
  virtual int dim() const = 0;
  // Cost only; used by the line search.
  virtual double cost(const Vec& theta) = 0;
  // Cost plus preparation of grad()/gn_apply() at theta.
  virtual double linearize(const Vec& theta) = 0;
  virtual Vec grad() = 0;
  virtual Vec gn_apply(const Vec& v) = 0;
};

class TumorMisfit : public MisfitModel {
public:
  explicit TumorMisfit(MisfitContext ctx);

  int dim() const override { return 2 * ctx_.grid->n_dof(); }
  double cost(const Vec& theta) override;
  double linearize(const Vec& theta) override;
  Vec grad() override;
  Vec gn_apply(const Vec& v) override;

  const MisfitContext& ctx() const { return ctx_; }
  const Trajectory& trajectory() const;

private:
  double evaluate(const Vec& theta, bool keep);

  MisfitContext ctx_;
  std::optional<Trajectory> traj_;
  std::optional<ParameterFields> point_;
  std::vector<Vec> residuals_;  // u_i - d_i at observation days 1..m
};

double misfit_cost_grad(const MisfitContext& ctx, const ParameterFields& theta,
                        ParameterFields& grad_out);
ParameterFields gn_hessian_apply(const MisfitContext& ctx, const ParameterFields& theta,
                                 const ParameterFields& v);

struct NewtonConfig {
  int max_iters = 50;
  double grad_rtol = 1e-6;
  double grad_atol = 1e-11;
  int cg_max_iters = 200;
  double forcing_max = 0.5;
  double forcing_exponent = 0.5;
  double armijo_c1 = 1e-4;
  double backtrack = 0.5;
  int max_backtracks = 30;

  void validate() const;
};

struct NewtonIterRecord {
  double cost = 0.0;
  double grad_norm = 0.0;
  int cg_iters = 0;
  double forcing = 0.0;
  double step = 0.0;
  int backtracks = 0;
};

struct NewtonReport {
  std::vector<NewtonIterRecord> iterations;
  std::string stop_reason;
  double initial_grad_norm = 0.0;
  double final_grad_norm = 0.0;
  double final_cost = 0.0;
  int total_cg_iters = 0;
};

// Inexact Newton-CG on misfit + prior, preconditioned by the prior
// covariance, Armijo backtracking, initial iterate = prior mean.
std::pair<Vec, NewtonReport> compute_map(MisfitModel& misfit, const PriorPair& prior,
                                         const NewtonConfig& cfg);

struct GhepResult {
  Vec lambda;  // descending
  Mat V;       // columns R-orthonormal, R = prior precision
};

// Double-pass randomized solver for H v = lambda * R v with R-orthonormal V.
GhepResult randomized_ghep(const std::function<Vec(const Vec&)>& h_apply,
                           const PriorPair& prior, int r, int oversample, int power_iters,
                           std::uint64_t seed);

struct LowRankPosterior {
  Vec theta_map;
  Vec lambda;
  Mat V;
  std::shared_ptr<const PriorPair> prior;

  int rank() const { return static_cast<int>(lambda.size()); }
  void validate() const;
  ParameterFields map_fields() const;
};

struct LaplaceConfig {
  int rank = -1;  // -1: keep modes with lambda >= lambda_cut, up to the cap
  int oversample = 10;
  int power_iters = 1;
  double lambda_cut = 0.1;
  int max_rank = 200;
  std::uint64_t seed = 0;
};

LowRankPosterior laplace_posterior(MisfitModel& misfit, std::shared_ptr<const PriorPair> prior,
                                   const Vec& theta_map, const LaplaceConfig& cfg);

Vec posterior_sample_vec(const LowRankPosterior& lrp, std::uint64_t seed);
ParameterFields posterior_sample(const LowRankPosterior& lrp, std::uint64_t seed);

std::pair<ScalarField, ScalarField> pointwise_posterior_variance(const LowRankPosterior& lrp,
                                                                 int n_samples,
                                                                 std::uint64_t seed);

struct PredictionEnsemble {
  std::vector<double> horizon_days;
  double cutoff = 0.5;
  std::vector<ScalarField> map_fields;                  // per horizon day
  std::vector<BinaryMask> map_indicator;                // per horizon day
  std::vector<std::vector<ScalarField>> sample_fields;  // [sample][day]
  std::vector<std::vector<BinaryMask>> sample_indicator;
};

PredictionEnsemble predict(const LowRankPosterior& lrp, const MisfitContext& ctx,
                           const std::vector<double>& horizon_days, int n_samples,
                           double cutoff, std::uint64_t seed, int threads = 1);

}  // namespace gliocal
