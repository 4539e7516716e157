#include "gliocal/baselines.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <limits>

#include "gliocal/errors.hpp"
#include "gliocal/rng.hpp"

namespace gliocal {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLog2Pi = 1.8378770664093454836;
}  // namespace

RegionHyper shp_hyper(const RegionHyper& hyper) {
  hyper.validate();
  RegionHyper out = hyper;
  auto pool = [](FieldHyper& f) {
    const double mean = 0.5 * (f.mean_gm + f.mean_wm);
    const double var = 0.5 * (f.var_gm + f.var_wm);
    f.mean_gm = f.mean_wm = mean;
    f.var_gm = f.var_wm = var;
  };
  pool(out.logD);
  pool(out.logG);
  const double rho = 0.5 * (hyper.rho_gm + hyper.rho_wm);
  out.rho_gm = out.rho_wm = out.rho_interface = rho;
  out.validate();
  return out;
}

Vec PcpParams::to_vec() const {
  Vec v(4);
  v << logD_gm, logD_wm, logG_gm, logG_wm;
  return v;
}

PcpParams PcpParams::from_vec(const Vec& v) {
  if (v.size() != 4) throw DimensionMismatch("piecewise-constant parameter vector must have 4 entries");
  return {v[0], v[1], v[2], v[3]};
}

bool PcpParams::finite() const {
  return std::isfinite(logD_gm) && std::isfinite(logD_wm) && std::isfinite(logG_gm) &&
         std::isfinite(logG_wm);
}

PcpPrior PcpPrior::from_hyper(const RegionHyper& hyper) {
  hyper.validate();
  PcpPrior p;
  p.comp[0] = {hyper.logD.mean_gm, hyper.logD.var_gm};
  p.comp[1] = {hyper.logD.mean_wm, hyper.logD.var_wm};
  p.comp[2] = {hyper.logG.mean_gm, hyper.logG.var_gm};
  p.comp[3] = {hyper.logG.mean_wm, hyper.logG.var_wm};
  return p;
}

double PcpPrior::log_density(const PcpParams& p) const {
  const Vec v = p.to_vec();
  double lp = 0.0;
  for (int i = 0; i < 4; ++i) {
    if (!(comp[i].var > 0.0)) throw NonpositiveHyper("scalar prior variance must be positive");
    const double r = v[i] - comp[i].mean;
    lp += -0.5 * (kLog2Pi + std::log(comp[i].var) + r * r / comp[i].var);
  }
  return lp;
}

namespace {

// Side assignment for painting: plain cells keep their label; interface cells
// take the majority label among already-decided neighbors, swept outward in
// rounds so the result is deterministic and independent of cell order.
std::vector<Region> paint_sides(const RegionLabels& labels) {
  const GridPtr& grid = labels.grid;
  const int nx = grid->nx();
  const int ny = grid->ny();
  std::vector<Region> side(grid->size(), Region::outside);
  std::vector<int> pending;
  for (int c = 0; c < grid->size(); ++c) {
    if (!grid->inside(c)) continue;
    switch (labels.label[c]) {
      case Region::gm:
      case Region::wm:
        side[c] = labels.label[c];
        break;
      case Region::interface_band:
        pending.push_back(c);
        break;
      case Region::outside:
        throw NotAPartition("brain cell labeled outside");
    }
  }
  while (!pending.empty()) {
    std::vector<int> still;
    std::vector<std::pair<int, Region>> decided;
    for (int c : pending) {
      const int i = c % nx;
      const int j = c / nx;
      int gm = 0;
      int wm = 0;
      const int nb[4] = {i > 0 ? c - 1 : -1, i + 1 < nx ? c + 1 : -1, j > 0 ? c - nx : -1,
                         j + 1 < ny ? c + nx : -1};
      for (int b : nb) {
        if (b < 0 || !grid->inside(b)) continue;
        if (side[b] == Region::gm) ++gm;
        if (side[b] == Region::wm) ++wm;
      }
      if (gm == 0 && wm == 0) {
        still.push_back(c);
      } else {
        decided.emplace_back(c, gm >= wm ? Region::gm : Region::wm);
      }
    }
    if (decided.empty())
      throw DisconnectedMask("interface cells unreachable from any plain tissue cell");
    for (const auto& [c, r] : decided) side[c] = r;
    pending = std::move(still);
  }
  return side;
}

}  // namespace

ParameterFields pcp_paint(const RegionLabels& labels, const PcpParams& p) {
  const std::vector<Region> side = paint_sides(labels);
  ParameterFields out{ScalarField(labels.grid), ScalarField(labels.grid)};
  for (int c = 0; c < labels.grid->size(); ++c) {
    if (!labels.grid->inside(c)) continue;
    const bool gm = side[c] == Region::gm;
    out.logD.values()[c] = gm ? p.logD_gm : p.logD_wm;
    out.logG.values()[c] = gm ? p.logG_gm : p.logG_wm;
  }
  return out;
}

double pcp_log_posterior(const MisfitContext& ctx, const RegionLabels& labels,
                         const PcpPrior& prior4, const PcpParams& p) {
  if (!p.finite()) return kNegInf;
  require_same_grid(ctx.grid, labels.grid, "piecewise-constant painting");
  TumorMisfit misfit(ctx);
  const double cost = misfit.cost(stack_fields(pcp_paint(labels, p)));
  return -cost + prior4.log_density(p);
}

std::function<double(const PcpParams&)> pcp_target(const MisfitContext& ctx,
                                                   const RegionLabels& labels,
                                                   const PcpPrior& prior4) {
  return [ctx, labels, prior4](const PcpParams& p) -> double {
    try {
      return pcp_log_posterior(ctx, labels, prior4, p);
    } catch (const NumericalError&) {
      return kNegInf;
    }
  };
}

void DramConfig::validate() const {
  if (x0.size() < 1) throw ValidationError("chain needs a starting point");
  if (cov0.rows() != x0.size() || cov0.cols() != x0.size())
    throw DimensionMismatch("initial proposal covariance shape");
  if (adapt_start < 1) throw ValidationError("adaptation start must be at least 1");
  if (adapt_interval < 1) throw ValidationError("adaptation interval must be at least 1");
  if (!(shrink > 0.0 && shrink < 1.0))
    throw ValidationError("delayed-rejection shrink factor must lie in (0,1)");
  if (!(eps > 0.0)) throw ValidationError("covariance regularization must be positive");
}

namespace {

double finite_or_neg_inf(double v) { return std::isfinite(v) ? v : kNegInf; }

}  // namespace

double Chain::acceptance_rate() const {
  const int n = length();
  return n > 0 ? double(accepted_stage1 + accepted_stage2) / double(n) : 0.0;
}

double Chain::post_adapt_acceptance_rate() const {
  return post_adapt_total > 0 ? double(post_adapt_accepted) / double(post_adapt_total) : 0.0;
}

Chain dram_sample(const std::function<double(const Vec&)>& log_target, int n,
                  const DramConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (n < 1) throw ValidationError("chain length must be at least 1");
  const int d = static_cast<int>(cfg.x0.size());
  const double sd = 2.38 * 2.38 / double(d);

  Rng rng = Rng::derive(seed, 0xD7A3u);
  auto draw = [&](int k) {
    Vec z(k);
    for (int i = 0; i < k; ++i) z[i] = rng.gaussian();
    return z;
  };

  Chain chain;
  chain.samples.resize(n, d);
  chain.log_post.resize(n);

  Vec x = cfg.x0;
  double lpx = finite_or_neg_inf(log_target(x));

  Mat prop_cov = cfg.cov0;
  Eigen::LLT<Mat> llt(prop_cov);
  if (llt.info() != Eigen::Success)
    throw LinearSolveFailure("initial proposal covariance is not positive definite");

  // Running first/second moments of the chain for adaptive-Metropolis updates.
  Vec mean = Vec::Zero(d);
  Mat scatter = Mat::Zero(d, d);
  long count = 0;
  auto absorb = [&](const Vec& v) {
    ++count;
    mean += (v - mean) / double(count);
    scatter += v * v.transpose();
  };

  // Squared Mahalanobis norm under the current proposal covariance.
  auto mahal2 = [&](const Vec& v) {
    Vec y = llt.matrixL().solve(v);
    return y.squaredNorm();
  };

  // log alpha1(from, to) = min(0, lp_to - lp_from), with the -inf/-inf corner
  // resolved as "always leave a dead point".
  auto log_alpha1 = [](double lp_from, double lp_to) {
    if (lp_to == kNegInf) return kNegInf;
    if (lp_from == kNegInf) return 0.0;
    return std::min(0.0, lp_to - lp_from);
  };

  for (int t = 0; t < n; ++t) {
    const Mat L = llt.matrixL();
    const Vec y1 = x + L * draw(d);
    const double lp1 = finite_or_neg_inf(log_target(y1));
    const bool adapting_done = t >= cfg.adapt_start;
    if (adapting_done) ++chain.post_adapt_total;

    bool moved = false;
    if (std::log(rng.uniform()) < log_alpha1(lpx, lp1)) {
      x = y1;
      lpx = lp1;
      ++chain.accepted_stage1;
      moved = true;
    } else {
      // Delayed rejection: a shrunk proposal, accepted with the two-stage
      // ratio that preserves detailed balance.
      const Vec y2 = x + cfg.shrink * (L * draw(d));
      const double lp2 = finite_or_neg_inf(log_target(y2));
      if (lp2 > kNegInf) {
        const double a1_fwd = log_alpha1(lpx, lp1);  // < 0 here: stage 1 rejected
        const double a1_rev = log_alpha1(lp2, lp1);
        double log_num = kNegInf;
        if (a1_rev < 0.0) {
          log_num = lp2 - 0.5 * mahal2(y1 - y2) + std::log1p(-std::exp(a1_rev));
        }
        const double log_den = lpx == kNegInf
                                   ? kNegInf
                                   : lpx - 0.5 * mahal2(y1 - x) + std::log1p(-std::exp(a1_fwd));
        if (log_den == kNegInf || std::log(rng.uniform()) < log_num - log_den) {
          x = y2;
          lpx = lp2;
          ++chain.accepted_stage2;
          moved = true;
        }
      }
    }
    if (adapting_done && moved) ++chain.post_adapt_accepted;

    chain.samples.row(t) = x.transpose();
    chain.log_post[t] = lpx;
    absorb(x);

    if (t + 1 >= cfg.adapt_start && (t + 1 - cfg.adapt_start) % cfg.adapt_interval == 0 &&
        count >= 2) {
      Mat emp = (scatter - double(count) * mean * mean.transpose()) / double(count - 1);
      Mat cand = sd * emp + cfg.eps * Mat::Identity(d, d);
      Eigen::LLT<Mat> cand_llt(cand);
      if (cand_llt.info() == Eigen::Success) {
        prop_cov = cand;
        llt = cand_llt;
        chain.proposal_trace.push_back(prop_cov.trace());
      }
    }
  }
  return chain;
}

}  // namespace gliocal
