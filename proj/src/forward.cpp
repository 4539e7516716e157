#include "gliocal/forward.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace gliocal {

namespace {
constexpr double kDfloor = 1e-12;

double harmonic(double a, double b) { return 2.0 * a * b / (a + b); }

struct StepOperators {
  // Explicit logistic half of the IMEX step and its linearization.
  static Vec reaction(const Vec& u, const Vec& G, double dt) {
    return u + dt * G.cwiseProduct(u).cwiseProduct(Vec::Ones(u.size()) - u);
  }
};

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t nbytes, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < nbytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t trajectory_stamp(const ParameterFields& theta, const std::vector<double>& step_dt,
                               const SolverConfig& cfg) {
  std::uint64_t h = 1469598103934665603ULL;
  const Vec d = theta.logD.compact();
  const Vec g = theta.logG.compact();
  h = fnv1a64(d.data(), sizeof(double) * d.size(), h);
  h = fnv1a64(g.data(), sizeof(double) * g.size(), h);
  if (!step_dt.empty()) {
    h = fnv1a64(step_dt.data(), sizeof(double) * step_dt.size(), h);
  }
  h = fnv1a64(&cfg.lin_tol, sizeof(double), h);
  return h;
}

Vec clamped_diffusivity(const ScalarField& logD) {
  Vec D = logD.compact();
  for (int i = 0; i < D.size(); ++i) D[i] = std::max(std::exp(D[i]), kDfloor);
  return D;
}

Vec growth_rate(const ScalarField& logG) {
  Vec G = logG.compact();
  for (int i = 0; i < G.size(); ++i) G[i] = std::exp(G[i]);
  return G;
}

DiffusionSolve::DiffusionSolve(GridPtr grid, const Vec& diffusivity, double dt,
                               const SolverConfig& cfg)
    : grid_(std::move(grid)) {
  const int n = grid_->n_dof();
  if (diffusivity.size() != n) throw DimensionMismatch("diffusivity vector size mismatch");
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<size_t>(5) * n);
  Vec diag = Vec::Ones(n);
  const double cx = dt / (grid_->hx() * grid_->hx());
  const double cy = dt / (grid_->hy() * grid_->hy());
  auto add_faces = [&](const std::vector<Grid::Face>& faces, double c) {
    for (const auto& f : faces) {
      const double w = c * harmonic(diffusivity[f.a], diffusivity[f.b]);
      diag[f.a] += w;
      diag[f.b] += w;
      trip.emplace_back(f.a, f.b, -w);
      trip.emplace_back(f.b, f.a, -w);
    }
  };
  add_faces(grid_->faces_x(), cx);
  add_faces(grid_->faces_y(), cy);
  for (int d = 0; d < n; ++d) trip.emplace_back(d, d, diag[d]);
  B_.resize(n, n);
  B_.setFromTriplets(trip.begin(), trip.end());
  B_.makeCompressed();
  cg_.setTolerance(cfg.lin_tol);
  cg_.setMaxIterations(cfg.max_cg_iters);
  cg_.compute(B_);
  if (cg_.info() != Eigen::Success) {
    throw LinearSolveFailure("diffusion preconditioner setup failed");
  }
}

Vec DiffusionSolve::solve(const Vec& rhs) const {
  Vec x = cg_.solve(rhs);
  if (cg_.info() != Eigen::Success) {
    throw LinearSolveFailure("diffusion solve did not converge (error " +
                             std::to_string(cg_.error()) + ")");
  }
  return x;
}

ScalarField Trajectory::state_at_obs(int obs_index) const {
  if (obs_index < 0 || obs_index >= static_cast<int>(obs_days.size())) {
    throw DimensionMismatch("observation index out of range");
  }
  ScalarField f(grid);
  f.set_compact(states[obs_step[obs_index]]);
  return f;
}

ScalarField imex_step(const ScalarField& u, const ParameterFields& theta, double dt,
                      const SolverConfig& cfg) {
  require_same_grid(u.grid(), theta.logD.grid(), "imex_step");
  require_same_grid(u.grid(), theta.logG.grid(), "imex_step");
  if (!(dt > 0.0)) throw StepSizeError("imex_step needs dt > 0");
  const GridPtr& grid = u.grid();
  const Vec D = clamped_diffusivity(theta.logD);
  const Vec G = growth_rate(theta.logG);
  DiffusionSolve ds(grid, D, dt, cfg);
  const Vec rhs = StepOperators::reaction(u.compact(), G, dt);
  ScalarField out(grid);
  out.set_compact(ds.solve(rhs));
  return out;
}

namespace {

// Observation days define the step schedule: full cfg.dt steps, with the last
// sub-step of each gap shrunk to land on the day exactly.
std::vector<double> build_schedule(const std::vector<double>& obs_days, double dt,
                                   std::vector<int>& obs_step) {
  if (obs_days.empty()) throw StepSizeError("need at least the initial observation day");
  if (!(dt > 0.0)) throw StepSizeError("dt must be positive");
  std::vector<double> step_dt;
  obs_step.assign(obs_days.size(), 0);
  for (size_t i = 0; i + 1 < obs_days.size(); ++i) {
    const double gap = obs_days[i + 1] - obs_days[i];
    if (!(gap > 0.0)) throw StepSizeError("observation days must be strictly increasing");
    const int n_full = static_cast<int>(std::floor(gap / dt + 1e-9));
    const double rem = gap - n_full * dt;
    for (int k = 0; k < n_full; ++k) step_dt.push_back(dt);
    if (rem > 1e-9 * std::max(1.0, dt) || n_full == 0) {
      step_dt.push_back(n_full == 0 ? gap : rem);
    }
    obs_step[i + 1] = static_cast<int>(step_dt.size());
  }
  return step_dt;
}

void check_stamp(const Trajectory& traj, const ParameterFields& theta,
                 const SolverConfig& cfg, const char* where) {
  if (trajectory_stamp(theta, traj.step_dt, cfg) != traj.stamp) {
    throw TrajectoryMismatch(std::string(where) +
                             ": trajectory was produced with different parameters");
  }
}

// dD_f = (D_f^2/2)(p_a/D_a + p_b/D_b) for the harmonic face mean; these two
// sweeps are exact transposes of each other.
void apply_dL(const Grid& grid, const Vec& D, const Vec& p, const Vec& v, double scale,
              Vec& out) {
  const double ihx2 = scale / (grid.hx() * grid.hx());
  const double ihy2 = scale / (grid.hy() * grid.hy());
  auto sweep = [&](const std::vector<Grid::Face>& faces, double ih2) {
    for (const auto& f : faces) {
      const double Df = harmonic(D[f.a], D[f.b]);
      const double dDf = 0.5 * Df * Df * (p[f.a] / D[f.a] + p[f.b] / D[f.b]);
      const double flux = dDf * (v[f.b] - v[f.a]) * ih2;
      out[f.a] += flux;
      out[f.b] -= flux;
    }
  };
  sweep(grid.faces_x(), ihx2);
  sweep(grid.faces_y(), ihy2);
}

void apply_dL_transpose(const Grid& grid, const Vec& D, const Vec& v, const Vec& nu,
                        double scale, Vec& out_p) {
  const double ihx2 = scale / (grid.hx() * grid.hx());
  const double ihy2 = scale / (grid.hy() * grid.hy());
  auto sweep = [&](const std::vector<Grid::Face>& faces, double ih2) {
    for (const auto& f : faces) {
      const double Df = harmonic(D[f.a], D[f.b]);
      const double common = 0.5 * Df * Df * (v[f.b] - v[f.a]) * (nu[f.a] - nu[f.b]) * ih2;
      out_p[f.a] += common / D[f.a];
      out_p[f.b] += common / D[f.b];
    }
  };
  sweep(grid.faces_x(), ihx2);
  sweep(grid.faces_y(), ihy2);
}

}  // namespace

Trajectory solve_forward(const GridPtr& grid, const ParameterFields& theta,
                         const ScalarField& u0, const std::vector<double>& obs_days,
                         const SolverConfig& cfg) {
  require_same_grid(grid, theta.logD.grid(), "solve_forward");
  require_same_grid(grid, theta.logG.grid(), "solve_forward");
  require_same_grid(grid, u0.grid(), "solve_forward");

  const Vec D = clamped_diffusivity(theta.logD);
  const Vec G = growth_rate(theta.logG);
  const double maxG = G.size() ? G.maxCoeff() : 0.0;
  if (obs_days.size() > 1 && maxG > 0.0 && cfg.dt > 0.5 / maxG) {
    throw StepSizeError("dt " + std::to_string(cfg.dt) + " exceeds the stability guard " +
                        std::to_string(0.5 / maxG));
  }

  Trajectory traj;
  traj.grid = grid;
  traj.obs_days = obs_days;
  traj.step_dt = build_schedule(obs_days, cfg.dt, traj.obs_step);
  traj.stamp = trajectory_stamp(theta, traj.step_dt, cfg);

  auto solvers = std::make_shared<std::map<double, DiffusionSolve>>();
  for (double dt : traj.step_dt) {
    solvers->try_emplace(dt, grid, D, dt, cfg);
  }

  const Vec u0c = u0.compact();
  const bool monotone = (u0c.size() == 0) ||
                        (u0c.minCoeff() >= 0.0 && u0c.maxCoeff() <= 1.0);
  const double band = 10.0 * cfg.lin_tol;

  traj.times.reserve(traj.step_dt.size() + 1);
  traj.states.reserve(traj.step_dt.size() + 1);
  traj.times.push_back(obs_days[0]);
  traj.states.push_back(u0c);
  Vec u = u0c;
  for (double dt : traj.step_dt) {
    const Vec rhs = StepOperators::reaction(u, G, dt);
    u = solvers->at(dt).solve(rhs);
    if (monotone && dt * maxG <= 1.0) {
      if (u.minCoeff() < -band || u.maxCoeff() > 1.0 + band) {
        throw NumericalError("maximum principle violated at t=" +
                             std::to_string(traj.times.back() + dt));
      }
    }
    traj.times.push_back(traj.times.back() + dt);
    traj.states.push_back(u);
  }
  // Snap observation times to the exact day values.
  for (size_t i = 0; i < obs_days.size(); ++i) traj.times[traj.obs_step[i]] = obs_days[i];
  traj.solvers = std::move(solvers);
  return traj;
}

std::vector<ScalarField> tangent_solve(const Trajectory& traj, const ParameterFields& theta,
                                       const ParameterFields& dtheta,
                                       const SolverConfig& cfg) {
  require_same_grid(traj.grid, theta.logD.grid(), "tangent_solve");
  require_same_grid(traj.grid, dtheta.logD.grid(), "tangent_solve");
  check_stamp(traj, theta, cfg, "tangent_solve");

  const Grid& grid = *traj.grid;
  const Vec D = clamped_diffusivity(theta.logD);
  const Vec G = growth_rate(theta.logG);
  const Vec p = dtheta.logD.compact();
  const Vec dG = G.cwiseProduct(dtheta.logG.compact());

  const int n_steps = static_cast<int>(traj.step_dt.size());
  Vec du = Vec::Zero(grid.n_dof());
  std::vector<Vec> du_at_obs(traj.obs_days.size(), Vec::Zero(grid.n_dof()));

  int next_obs = 0;
  while (next_obs < static_cast<int>(traj.obs_days.size()) && traj.obs_step[next_obs] == 0) {
    ++next_obs;  // day-0 derivative is zero
  }
  for (int k = 0; k < n_steps; ++k) {
    const double dt = traj.step_dt[k];
    const Vec& u_prev = traj.states[k];
    const Vec& u_next = traj.states[k + 1];
    const Vec one_minus = Vec::Ones(u_prev.size()) - u_prev;
    Vec rhs = du + dt * (G.cwiseProduct(Vec::Ones(u_prev.size()) - 2.0 * u_prev)
                             .cwiseProduct(du) +
                         dG.cwiseProduct(u_prev).cwiseProduct(one_minus));
    apply_dL(grid, D, p, u_next, dt, rhs);
    du = traj.solvers->at(dt).solve(rhs);
    while (next_obs < static_cast<int>(traj.obs_days.size()) &&
           traj.obs_step[next_obs] == k + 1) {
      du_at_obs[next_obs] = du;
      ++next_obs;
    }
  }

  std::vector<ScalarField> out;
  out.reserve(du_at_obs.size());
  for (const auto& v : du_at_obs) {
    ScalarField f(traj.grid);
    f.set_compact(v);
    out.push_back(std::move(f));
  }
  return out;
}

ParameterFields adjoint_solve(const Trajectory& traj, const ParameterFields& theta,
                              const std::vector<ScalarField>& sources,
                              const SolverConfig& cfg) {
  require_same_grid(traj.grid, theta.logD.grid(), "adjoint_solve");
  check_stamp(traj, theta, cfg, "adjoint_solve");
  if (sources.size() != traj.obs_days.size()) {
    throw DimensionMismatch("adjoint_solve needs one source per observation day");
  }
  for (const auto& s : sources) require_same_grid(traj.grid, s.grid(), "adjoint_solve");

  const Grid& grid = *traj.grid;
  const int n = grid.n_dof();
  const Vec D = clamped_diffusivity(theta.logD);
  const Vec G = growth_rate(theta.logG);
  const double area = grid.cell_area();

  // Map step index -> observation source (day 0 carries no dependence on theta).
  std::vector<int> source_at_step(traj.step_dt.size() + 1, -1);
  for (size_t i = 1; i < traj.obs_days.size(); ++i) {
    source_at_step[traj.obs_step[i]] = static_cast<int>(i);
  }

  Vec acc = Vec::Zero(n);
  Vec grad_p = Vec::Zero(n);
  Vec grad_q = Vec::Zero(n);
  for (int k = static_cast<int>(traj.step_dt.size()); k >= 1; --k) {
    Vec w = acc;
    if (source_at_step[k] >= 0) {
      w += area * sources[source_at_step[k]].compact();
    }
    const double dt = traj.step_dt[k - 1];
    const Vec nu = traj.solvers->at(dt).solve(w);
    const Vec& u_prev = traj.states[k - 1];
    const Vec& u_next = traj.states[k];
    const Vec one_minus = Vec::Ones(n) - u_prev;
    apply_dL_transpose(grid, D, u_next, nu, dt, grad_p);
    grad_q += dt * G.cwiseProduct(u_prev).cwiseProduct(one_minus).cwiseProduct(nu);
    acc = nu + dt * G.cwiseProduct(Vec::Ones(n) - 2.0 * u_prev).cwiseProduct(nu);
  }

  ParameterFields grad{ScalarField(traj.grid), ScalarField(traj.grid)};
  grad.logD.set_compact(grad_p);
  grad.logG.set_compact(grad_q);
  return grad;
}

}  // namespace gliocal
