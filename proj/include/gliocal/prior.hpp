#pragma once

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <memory>

#include "gliocal/grid.hpp"
#include "gliocal/rng.hpp"

namespace gliocal {

using SpMat = Eigen::SparseMatrix<double>;

enum class Param { logD, logG };

struct MaternCoeffs {
  double delta;
  double gamma;
  double beta;
};

// Matern nu=1 field with pointwise std sigma and correlation length rho (mm):
// delta = sqrt(2)/(sigma*rho*sqrt(pi)), gamma = rho/(4*sigma*sqrt(2*pi)),
// beta = sqrt(delta*gamma)/1.42 damps the variance inflation at the mask
// boundary. Marginal variance of the continuum model is 1/(4*pi*delta*gamma)
// = sigma^2 exactly.
MaternCoeffs hyper_to_coeffs(double sigma, double rho);

// Analytic Matern nu=1 correlation at distance r for correlation length rho.
double matern_correlation(double r, double rho);

// Hyperparameters for one log-parameter field.
struct FieldHyper {
  double mean_gm = 0.0;
  double mean_wm = 0.0;
  double var_gm = 0.0;
  double var_wm = 0.0;
};

struct RegionHyper {
  FieldHyper logD;
  FieldHyper logG;
  double rho_gm = 0.0;
  double rho_wm = 0.0;
  double rho_interface = 0.0;
  double sigma2_noise = 0.0;

  void validate() const;
  static RegionHyper defaults();  // rat-study estimates
};

// Elliptic operator A = -div(gamma grad) + delta with Robin closure
// gamma*dn(theta) + beta*theta = 0 on mask-boundary faces, discretized with
// cell-centered finite differences (face gamma by harmonic mean). A is
// symmetric positive definite; covariance of the induced Gaussian field is
// C = A^-1 M^-1 A^-1 with mass weight M = (hx*hy) I.
class SpdeOperator {
public:
  SpdeOperator(GridPtr grid, Vec delta, Vec gamma, Vec beta);

  const GridPtr& grid() const { return grid_; }
  const SpMat& matrix() const { return A_; }
  double mass_weight() const { return grid_->cell_area(); }
  const Vec& delta() const { return delta_; }
  const Vec& gamma() const { return gamma_; }

  Vec apply(const Vec& v) const;       // A v
  Vec solve(const Vec& rhs) const;     // A^-1 rhs (exact sparse Cholesky)
  Vec precision_apply(const Vec& v) const;   // (hx*hy) * A(A v)
  Vec covariance_apply(const Vec& v) const;  // A^-1(M^-1(A^-1 v))
  Vec sample_fluctuation(Rng& rng) const;    // A^-1 w, w white with var 1/(hx*hy)

private:
  GridPtr grid_;
  Vec delta_;
  Vec gamma_;
  Vec beta_;
  SpMat A_;
  Eigen::SimplicialLLT<SpMat> llt_;
};

using SpdeOperatorPtr = std::shared_ptr<const SpdeOperator>;

// Per-cell coefficient construction: GM/WM cells take their region's values;
// interface cells take rho_interface, with variance and mean blended by
// distance to the nearest plain GM and WM cell.
struct CoefficientFields {
  Vec delta;
  Vec gamma;
  Vec beta;
  Vec mean;
  Vec sigma2;
  Vec rho;
};

CoefficientFields spde_coefficients(const RegionLabels& labels, const RegionHyper& hyper,
                                    Param param);

SpdeOperatorPtr assemble_spde_operator(const GridPtr& grid, const RegionLabels& labels,
                                       const RegionHyper& hyper, Param param);

ScalarField prior_mean_field(const RegionLabels& labels, const RegionHyper& hyper,
                             Param param);

ScalarField prior_sample(const SpdeOperator& op, const ScalarField& mean,
                         std::uint64_t seed);

// Gamma_pr^-1 (theta - mean) as a field.
ScalarField apply_precision(const SpdeOperator& op, const ScalarField& mean,
                            const ScalarField& theta);
double prior_cost(const SpdeOperator& op, const ScalarField& mean,
                  const ScalarField& theta);
ScalarField prior_grad(const SpdeOperator& op, const ScalarField& mean,
                       const ScalarField& theta);

// Monte Carlo estimate of the per-cell marginal variance.
ScalarField pointwise_marginal_variance(const SpdeOperator& op, int n_samples,
                                        std::uint64_t seed);

// Independent priors for logD and logG stacked as one unknown
// [logD; logG] of size 2*n_dof.
struct PriorPair {
  SpdeOperatorPtr opD;
  SpdeOperatorPtr opG;
  ScalarField meanD;
  ScalarField meanG;

  const GridPtr& grid() const { return opD->grid(); }
  int n() const { return 2 * grid()->n_dof(); }
  Vec stacked_mean() const;
  Vec precision_apply(const Vec& v) const;
  Vec covariance_apply(const Vec& v) const;
  Vec sample_fluctuation(Rng& rng) const;  // zero-mean joint draw
  double cost(const Vec& theta) const;
  Vec grad(const Vec& theta) const;
};

PriorPair make_prior_pair(const RegionLabels& labels, const RegionHyper& hyper);

struct ParameterFields {
  ScalarField logD;
  ScalarField logG;
};

ParameterFields unstack_fields(const GridPtr& grid, const Vec& stacked);
Vec stack_fields(const ParameterFields& f);

}  // namespace gliocal
