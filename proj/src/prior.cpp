#include "gliocal/prior.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace gliocal {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

MaternCoeffs hyper_to_coeffs(double sigma, double rho) {
  if (!(sigma > 0.0) || !(rho > 0.0)) {
    throw NonpositiveHyper("hyper_to_coeffs needs sigma > 0 and rho > 0");
  }
  MaternCoeffs c;
  c.delta = std::sqrt(2.0) / (sigma * rho * std::sqrt(kPi));
  c.gamma = rho / (4.0 * sigma * std::sqrt(2.0 * kPi));
  c.beta = std::sqrt(c.delta * c.gamma) / 1.42;
  return c;
}

double matern_correlation(double r, double rho) {
  if (r <= 0.0) return 1.0;
  const double kappa = std::sqrt(8.0) / rho;
  return kappa * r * std::cyl_bessel_k(1, kappa * r);
}

void RegionHyper::validate() const {
  auto check_field = [](const FieldHyper& f, const char* name) {
    if (!(f.var_gm > 0.0) || !(f.var_wm > 0.0)) {
      throw NonpositiveHyper(std::string(name) + ": variance must be positive");
    }
    if (!std::isfinite(f.mean_gm) || !std::isfinite(f.mean_wm)) {
      throw MissingRegionHyper(std::string(name) + ": region mean missing or non-finite");
    }
  };
  check_field(logD, "logD");
  check_field(logG, "logG");
  if (!(rho_gm > 0.0) || !(rho_wm > 0.0) || !(rho_interface > 0.0)) {
    throw NonpositiveHyper("correlation lengths must be positive");
  }
  if (rho_interface > std::min(rho_gm, rho_wm)) {
    throw ValidationError("rho_interface must not exceed min(rho_gm, rho_wm)");
  }
  if (!(sigma2_noise > 0.0)) {
    throw NonpositiveHyper("sigma2_noise must be positive");
  }
}

RegionHyper RegionHyper::defaults() {
  RegionHyper h;
  h.logD = {-0.9937, -0.3006, 0.2336, 0.2336};
  h.logG = {-0.7800, -0.8419, 0.0682, 0.0682};
  h.rho_gm = 6.0;
  h.rho_wm = 12.0;
  h.rho_interface = 0.6;
  h.sigma2_noise = 3.9e-3;
  return h;
}

SpdeOperator::SpdeOperator(GridPtr grid, Vec delta, Vec gamma, Vec beta)
    : grid_(std::move(grid)),
      delta_(std::move(delta)),
      gamma_(std::move(gamma)),
      beta_(std::move(beta)) {
  const int n = grid_->n_dof();
  if (delta_.size() != n || gamma_.size() != n || beta_.size() != n) {
    throw DimensionMismatch("SPDE coefficient vectors must have one entry per dof");
  }
  for (int d = 0; d < n; ++d) {
    if (!(delta_[d] > 0.0) || !(gamma_[d] > 0.0) || beta_[d] < 0.0) {
      throw NonpositiveHyper("SPDE coefficients must be positive on brain cells");
    }
  }

  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<size_t>(5) * n);
  Vec diag = delta_;
  const double ihx2 = 1.0 / (grid_->hx() * grid_->hx());
  const double ihy2 = 1.0 / (grid_->hy() * grid_->hy());
  auto add_faces = [&](const std::vector<Grid::Face>& faces, double ih2) {
    for (const auto& f : faces) {
      const double gf = 2.0 * gamma_[f.a] * gamma_[f.b] / (gamma_[f.a] + gamma_[f.b]);
      const double w = gf * ih2;
      diag[f.a] += w;
      diag[f.b] += w;
      trip.emplace_back(f.a, f.b, -w);
      trip.emplace_back(f.b, f.a, -w);
    }
  };
  add_faces(grid_->faces_x(), ihx2);
  add_faces(grid_->faces_y(), ihy2);
  for (int d = 0; d < n; ++d) {
    diag[d] += grid_->boundary_faces_x()[d] * beta_[d] / grid_->hx();
    diag[d] += grid_->boundary_faces_y()[d] * beta_[d] / grid_->hy();
    trip.emplace_back(d, d, diag[d]);
  }
  A_.resize(n, n);
  A_.setFromTriplets(trip.begin(), trip.end());
  A_.makeCompressed();
  llt_.compute(A_);
  if (llt_.info() != Eigen::Success) {
    throw LinearSolveFailure("SPDE operator factorization failed");
  }
}

Vec SpdeOperator::apply(const Vec& v) const {
  if (v.size() != A_.rows()) throw DimensionMismatch("SpdeOperator::apply size mismatch");
  return A_ * v;
}

Vec SpdeOperator::solve(const Vec& rhs) const {
  if (rhs.size() != A_.rows()) throw DimensionMismatch("SpdeOperator::solve size mismatch");
  Vec x = llt_.solve(rhs);
  if (llt_.info() != Eigen::Success) {
    throw LinearSolveFailure("SPDE operator solve failed");
  }
  return x;
}

Vec SpdeOperator::precision_apply(const Vec& v) const {
  return mass_weight() * apply(apply(v));
}

Vec SpdeOperator::covariance_apply(const Vec& v) const {
  return solve(solve(v) / mass_weight());
}

Vec SpdeOperator::sample_fluctuation(Rng& rng) const {
  const int n = grid_->n_dof();
  const double scale = 1.0 / std::sqrt(mass_weight());
  Vec w(n);
  for (int d = 0; d < n; ++d) w[d] = scale * rng.gaussian();
  return solve(w);
}

CoefficientFields spde_coefficients(const RegionLabels& labels, const RegionHyper& hyper,
                                    Param param) {
  hyper.validate();
  const GridPtr& grid = labels.grid;
  const FieldHyper& fh = (param == Param::logD) ? hyper.logD : hyper.logG;
  const int n = grid->n_dof();

  CoefficientFields cf;
  cf.delta.resize(n);
  cf.gamma.resize(n);
  cf.beta.resize(n);
  cf.mean.resize(n);
  cf.sigma2.resize(n);
  cf.rho.resize(n);

  // Distance from each dof to the nearest plain GM / WM cell, for the
  // interface blend. Brute force over cells is fine at the grid sizes used.
  std::vector<int> gm_cells, wm_cells;
  for (int d = 0; d < n; ++d) {
    const int c = grid->dof_cells()[d];
    if (labels.label[c] == Region::gm) gm_cells.push_back(c);
    if (labels.label[c] == Region::wm) wm_cells.push_back(c);
  }
  auto min_dist = [&](int cell, const std::vector<int>& pool) {
    if (pool.empty()) return std::numeric_limits<double>::infinity();
    const double x = grid->cx(cell % grid->nx());
    const double y = grid->cy(cell / grid->nx());
    double best = std::numeric_limits<double>::infinity();
    for (int p : pool) {
      const double dx = x - grid->cx(p % grid->nx());
      const double dy = y - grid->cy(p / grid->nx());
      best = std::min(best, dx * dx + dy * dy);
    }
    return std::sqrt(best);
  };

  for (int d = 0; d < n; ++d) {
    const int c = grid->dof_cells()[d];
    double mean, s2, rho;
    switch (labels.label[c]) {
      case Region::gm:
        mean = fh.mean_gm;
        s2 = fh.var_gm;
        rho = hyper.rho_gm;
        break;
      case Region::wm:
        mean = fh.mean_wm;
        s2 = fh.var_wm;
        rho = hyper.rho_wm;
        break;
      case Region::interface_band: {
        const double dg = min_dist(c, gm_cells);
        const double dw = min_dist(c, wm_cells);
        double wg = 0.5;
        if (std::isfinite(dg) && std::isfinite(dw)) {
          wg = (dg + dw > 0.0) ? dw / (dg + dw) : 0.5;
        } else if (std::isfinite(dg)) {
          wg = 1.0;
        } else if (std::isfinite(dw)) {
          wg = 0.0;
        }
        mean = wg * fh.mean_gm + (1.0 - wg) * fh.mean_wm;
        s2 = wg * fh.var_gm + (1.0 - wg) * fh.var_wm;
        rho = hyper.rho_interface;
        break;
      }
      default:
        throw MissingRegionHyper("labels mark a brain cell as outside");
    }
    const MaternCoeffs mc = hyper_to_coeffs(std::sqrt(s2), rho);
    cf.delta[d] = mc.delta;
    cf.gamma[d] = mc.gamma;
    cf.beta[d] = mc.beta;
    cf.mean[d] = mean;
    cf.sigma2[d] = s2;
    cf.rho[d] = rho;
  }
  return cf;
}

SpdeOperatorPtr assemble_spde_operator(const GridPtr& grid, const RegionLabels& labels,
                                       const RegionHyper& hyper, Param param) {
  require_same_grid(grid, labels.grid, "assemble_spde_operator");
  const CoefficientFields cf = spde_coefficients(labels, hyper, param);
  return std::make_shared<const SpdeOperator>(grid, cf.delta, cf.gamma, cf.beta);
}

ScalarField prior_mean_field(const RegionLabels& labels, const RegionHyper& hyper,
                             Param param) {
  const CoefficientFields cf = spde_coefficients(labels, hyper, param);
  ScalarField f(labels.grid);
  f.set_compact(cf.mean);
  return f;
}

ScalarField prior_sample(const SpdeOperator& op, const ScalarField& mean,
                         std::uint64_t seed) {
  require_same_grid(op.grid(), mean.grid(), "prior_sample");
  Rng rng(seed);
  ScalarField out(op.grid());
  out.set_compact(mean.compact() + op.sample_fluctuation(rng));
  return out;
}

ScalarField apply_precision(const SpdeOperator& op, const ScalarField& mean,
                            const ScalarField& theta) {
  require_same_grid(op.grid(), mean.grid(), "apply_precision");
  require_same_grid(op.grid(), theta.grid(), "apply_precision");
  ScalarField out(op.grid());
  out.set_compact(op.precision_apply(theta.compact() - mean.compact()));
  return out;
}

double prior_cost(const SpdeOperator& op, const ScalarField& mean,
                  const ScalarField& theta) {
  require_same_grid(op.grid(), mean.grid(), "prior_cost");
  require_same_grid(op.grid(), theta.grid(), "prior_cost");
  const Vec r = theta.compact() - mean.compact();
  return 0.5 * r.dot(op.precision_apply(r));
}

ScalarField prior_grad(const SpdeOperator& op, const ScalarField& mean,
                       const ScalarField& theta) {
  return apply_precision(op, mean, theta);
}

ScalarField pointwise_marginal_variance(const SpdeOperator& op, int n_samples,
                                        std::uint64_t seed) {
  if (n_samples < 100) throw ValidationError("pointwise_marginal_variance needs >= 100 samples");
  const int n = op.grid()->n_dof();
  Vec sum = Vec::Zero(n);
  Vec sum2 = Vec::Zero(n);
  for (int s = 0; s < n_samples; ++s) {
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(s));
    const Vec x = op.sample_fluctuation(rng);
    sum += x;
    sum2 += x.cwiseProduct(x);
  }
  const Vec meanv = sum / n_samples;
  Vec var = (sum2 / n_samples - meanv.cwiseProduct(meanv)) *
            (static_cast<double>(n_samples) / (n_samples - 1));
  ScalarField out(op.grid());
  out.set_compact(var);
  return out;
}

Vec PriorPair::stacked_mean() const {
  const int nd = grid()->n_dof();
  Vec m(2 * nd);
  m.head(nd) = meanD.compact();
  m.tail(nd) = meanG.compact();
  return m;
}

Vec PriorPair::precision_apply(const Vec& v) const {
  const int nd = grid()->n_dof();
  if (v.size() != 2 * nd) throw DimensionMismatch("PriorPair::precision_apply size mismatch");
  Vec out(2 * nd);
  out.head(nd) = opD->precision_apply(v.head(nd));
  out.tail(nd) = opG->precision_apply(v.tail(nd));
  return out;
}

Vec PriorPair::covariance_apply(const Vec& v) const {
  const int nd = grid()->n_dof();
  if (v.size() != 2 * nd) throw DimensionMismatch("PriorPair::covariance_apply size mismatch");
  Vec out(2 * nd);
  out.head(nd) = opD->covariance_apply(v.head(nd));
  out.tail(nd) = opG->covariance_apply(v.tail(nd));
  return out;
}

Vec PriorPair::sample_fluctuation(Rng& rng) const {
  const int nd = grid()->n_dof();
  Vec out(2 * nd);
  out.head(nd) = opD->sample_fluctuation(rng);
  out.tail(nd) = opG->sample_fluctuation(rng);
  return out;
}

double PriorPair::cost(const Vec& theta) const {
  const Vec r = theta - stacked_mean();
  return 0.5 * r.dot(precision_apply(r));
}

Vec PriorPair::grad(const Vec& theta) const {
  return precision_apply(theta - stacked_mean());
}

PriorPair make_prior_pair(const RegionLabels& labels, const RegionHyper& hyper) {
  PriorPair p{assemble_spde_operator(labels.grid, labels, hyper, Param::logD),
              assemble_spde_operator(labels.grid, labels, hyper, Param::logG),
              prior_mean_field(labels, hyper, Param::logD),
              prior_mean_field(labels, hyper, Param::logG)};
  return p;
}

ParameterFields unstack_fields(const GridPtr& grid, const Vec& stacked) {
  const int nd = grid->n_dof();
  if (stacked.size() != 2 * nd) throw DimensionMismatch("unstack_fields size mismatch");
  ParameterFields f{ScalarField(grid), ScalarField(grid)};
  f.logD.set_compact(stacked.head(nd));
  f.logG.set_compact(stacked.tail(nd));
  return f;
}

Vec stack_fields(const ParameterFields& f) {
  require_same_grid(f.logD.grid(), f.logG.grid(), "stack_fields");
  const int nd = f.logD.grid()->n_dof();
  Vec v(2 * nd);
  v.head(nd) = f.logD.compact();
  v.tail(nd) = f.logG.compact();
  return v;
}

}  // namespace gliocal
