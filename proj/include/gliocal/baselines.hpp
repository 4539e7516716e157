#pragma once

#include <array>
#include <functional>
#include <vector>

#include "gliocal/inversion.hpp"
#include "gliocal/prior.hpp"

namespace gliocal {

// Averages the GM and WM hyperparameters (means, variances, correlation
// lengths) into one tissue class; the interface length is set to the same
// average so the prior operator is uniform over the brain.
RegionHyper shp_hyper(const RegionHyper& hyper);

// Piecewise-constant comparison model: one scalar per tissue per field.
struct PcpParams {
  double logD_gm = 0.0;
  double logD_wm = 0.0;
  double logG_gm = 0.0;
  double logG_wm = 0.0;

  Vec to_vec() const;
  static PcpParams from_vec(const Vec& v);
  bool finite() const;
};

struct ScalarGaussian {
  double mean = 0.0;
  double var = 1.0;
};

struct PcpPrior {
  // Order matches PcpParams: logD_gm, logD_wm, logG_gm, logG_wm.
  std::array<ScalarGaussian, 4> comp;

  static PcpPrior from_hyper(const RegionHyper& hyper);
  double log_density(const PcpParams& p) const;
};

// Assign each interface cell to the majority side of its already-decided
// neighbors, sweeping outward from the plain GM/WM cells; ties pick GM.
// The painted fields are region-wise constant.
ParameterFields pcp_paint(const RegionLabels& labels, const PcpParams& p);

// Log-likelihood (half convention per ctx) plus independent Gaussian
// log-priors on the four scalars. Non-finite parameters give -inf; solver
// failures propagate.
double pcp_log_posterior(const MisfitContext& ctx, const RegionLabels& labels,
                         const PcpPrior& prior4, const PcpParams& p);

// Same target wrapped for MCMC use: numerical failures become -inf.
std::function<double(const PcpParams&)> pcp_target(const MisfitContext& ctx,
                                                   const RegionLabels& labels,
                                                   const PcpPrior& prior4);

struct DramConfig {
  Vec x0;
  Mat cov0;                 // initial proposal covariance
  int adapt_start = 1000;   // iterations before covariance adaptation kicks in
  int adapt_interval = 100;
  double shrink = 0.2;      // delayed-rejection proposal scale factor
  double eps = 1e-10;       // covariance regularization

  void validate() const;
};

struct Chain {
  Mat samples;   // one row per iteration
  Vec log_post;  // aligned with samples
  int accepted_stage1 = 0;
  int accepted_stage2 = 0;
  int post_adapt_total = 0;
  int post_adapt_accepted = 0;
  std::vector<double> proposal_trace;  // trace(C) at each adaptation event

  int length() const { return static_cast<int>(samples.rows()); }
  double acceptance_rate() const;
  double post_adapt_acceptance_rate() const;
};

// Adaptive Metropolis (empirical covariance scaled by 2.38^2/d) with one
// delayed-rejection stage. Non-finite targets are treated as rejections.
Chain dram_sample(const std::function<double(const Vec&)>& log_target, int n,
                  const DramConfig& cfg, std::uint64_t seed);

}  // namespace gliocal
