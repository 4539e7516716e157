#pragma once

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/Sparse>
#include <map>
#include <memory>
#include <vector>

#include "gliocal/grid.hpp"
#include "gliocal/prior.hpp"

namespace gliocal {

struct SolverConfig {
  double dt = 0.05;        // day
  double lin_tol = 1e-12;  // relative residual for the per-step CG solve
  int max_cg_iters = 500;
};

// Backward-Euler diffusion matrix B = I - dt*L_D on compact dofs, solved by
// CG with an incomplete-Cholesky preconditioner. Face diffusivity is the
// harmonic mean of the two cell values; mask/domain boundary faces carry zero
// flux. D is exp(logD) clamped below at 1e-12.
class DiffusionSolve {
public:
  DiffusionSolve(GridPtr grid, const Vec& diffusivity, double dt, const SolverConfig& cfg);

  Vec solve(const Vec& rhs) const;
  Vec apply(const Vec& v) const { return B_ * v; }
  const SpMat& matrix() const { return B_; }

private:
  GridPtr grid_;
  SpMat B_;
  mutable Eigen::ConjugateGradient<SpMat, Eigen::Lower | Eigen::Upper,
                                   Eigen::IncompleteCholesky<double>>
      cg_;
};

// Every time step is checkpointed: the adjoint sweep needs the full history.
// `solvers` caches the factored diffusion solve per distinct step size so the
// tangent and adjoint sweeps reuse them.
struct Trajectory {
  GridPtr grid;
  std::vector<double> times;    // size n_steps+1, times[0] = obs_days[0]
  std::vector<Vec> states;      // compact states, aligned with times
  std::vector<double> step_dt;  // size n_steps
  std::vector<double> obs_days;
  std::vector<int> obs_step;  // index into times per observation day
  std::uint64_t stamp = 0;    // fingerprint of (theta, schedule, tolerance)
  std::shared_ptr<const std::map<double, DiffusionSolve>> solvers;

  ScalarField state_at_obs(int obs_index) const;
};

Vec clamped_diffusivity(const ScalarField& logD);
Vec growth_rate(const ScalarField& logG);

ScalarField imex_step(const ScalarField& u, const ParameterFields& theta, double dt,
                      const SolverConfig& cfg);

Trajectory solve_forward(const GridPtr& grid, const ParameterFields& theta,
                         const ScalarField& u0, const std::vector<double>& obs_days,
                         const SolverConfig& cfg);

// Directional derivative of the observed states with respect to theta, one
// field per observation day (the day-0 entry is identically zero).
std::vector<ScalarField> tangent_solve(const Trajectory& traj, const ParameterFields& theta,
                                       const ParameterFields& dtheta,
                                       const SolverConfig& cfg);

// Exact transpose of tangent_solve against the area-weighted inner product:
// with sources s_i the result satisfies
//   <adjoint(s), dtheta> = sum_i <s_i, tangent(dtheta)_i> * hx*hy.
// With s_i = (u_i - d_i)/sigma^2 this is the gradient of
// (1/2) sigma^-2 sum_i integral (u_i - d_i)^2 dx.
ParameterFields adjoint_solve(const Trajectory& traj, const ParameterFields& theta,
                              const std::vector<ScalarField>& sources,
                              const SolverConfig& cfg);

std::uint64_t fnv1a64(const void* data, std::size_t nbytes, std::uint64_t h = 1469598103934665603ULL);
std::uint64_t trajectory_stamp(const ParameterFields& theta, const std::vector<double>& step_dt,
                               const SolverConfig& cfg);

}  // namespace gliocal
