#include "gliocal/phantom.hpp"

#include <algorithm>
#include <cmath>

namespace gliocal {

namespace {

constexpr double kPi = 3.14159265358979323846;

double smooth01(double t) {
  if (t <= 0.0) return 0.0;
  if (t >= 1.0) return 1.0;
  return t * t * (3.0 - 2.0 * t);
}

struct Geometry {
  const PhantomSpec& s;

  double ellipse_q(double x, double y) const {
    const double ex = (x - s.brain_cx) / s.brain_rx;
    const double ey = (y - s.brain_cy) / s.brain_ry;
    return ex * ex + ey * ey;
  }
  bool in_brain(double x, double y) const { return ellipse_q(x, y) <= 1.0; }

  bool in_wm(double x, double y) const {
    const double r = std::hypot(x - s.wm_cx, y - s.wm_cy);
    if (std::abs(r - s.wm_radius) > 0.5 * s.wm_thickness) return false;
    double ang = std::atan2(y - s.wm_cy, x - s.wm_cx) * 180.0 / kPi;
    if (ang < 0.0) ang += 360.0;
    return ang >= s.wm_angle0_deg && ang <= s.wm_angle1_deg;
  }

  // Smooth intensity model shared by subject and atlas frames.
  double intensity(double x, double y) const {
    const double w = std::max(s.edge_smoothness, 1e-6);
    const double brain = smooth01((1.0 - ellipse_q(x, y)) / (w / std::min(s.brain_rx, s.brain_ry)));
    const double r = std::hypot(x - s.wm_cx, y - s.wm_cy);
    const double radial = smooth01((0.5 * s.wm_thickness - std::abs(r - s.wm_radius)) / w + 0.5);
    double ang = std::atan2(y - s.wm_cy, x - s.wm_cx) * 180.0 / kPi;
    if (ang < 0.0) ang += 360.0;
    const double ang_w = w / std::max(s.wm_radius, 1e-6) * 180.0 / kPi;
    const double angular = smooth01((ang - s.wm_angle0_deg) / ang_w + 0.5) *
                           smooth01((s.wm_angle1_deg - ang) / ang_w + 0.5);
    return 0.15 + 0.55 * brain + 0.25 * radial * angular;
  }

  int region_at(double x, double y) const {
    if (!in_brain(x, y)) return 0;
    return in_wm(x, y) ? 2 : 1;
  }

  // Analytic atlas deformation T(x) = x + delta(x), mm units; amplitude is
  // small enough to keep T injective on the domain.
  void deform(double x, double y, double Lx, double Ly, double& ddx, double& ddy) const {
    const double amp = s.deform_amplitude_px * s.hx;
    ddx = amp * std::sin(2.0 * kPi * y / Ly) * std::sin(kPi * x / Lx);
    ddy = amp * std::sin(2.0 * kPi * x / Lx) * std::sin(kPi * y / Ly);
  }
};

}  // namespace

void PhantomSpec::validate() const {
  if (nx < 4 || ny < 4 || !(hx > 0.0) || !(hy > 0.0)) {
    throw DimensionMismatch("phantom grid must be at least 4x4 with positive spacing");
  }
  if (!(brain_rx > 0.0) || !(brain_ry > 0.0)) {
    throw ValidationError("brain ellipse radii must be positive");
  }
  if (!(wm_radius > 0.0) || !(wm_thickness > 0.0) || wm_angle1_deg <= wm_angle0_deg) {
    throw ValidationError("white-matter arc geometry invalid");
  }
  if (tumor_radius < 0.0 || !(tumor_peak > 0.0) || tumor_peak > 1.0) {
    throw ValidationError("tumor bump needs radius >= 0 and peak in (0,1]");
  }
  if (days.empty()) throw ValidationError("need at least one observation day");
  for (size_t i = 0; i + 1 < days.size(); ++i) {
    if (!(days[i] < days[i + 1])) {
      throw ValidationError("observation days must be strictly increasing");
    }
  }
  if (sigma2_noise < 0.0) throw ValidationError("noise variance must be >= 0");
  if (atlas_factor < 1) throw ValidationError("atlas_factor must be >= 1");
  if (band_halfwidth < 0.0) throw ValidationError("band_halfwidth must be >= 0");
}

Phantom make_brain_phantom(const PhantomSpec& spec) {
  spec.validate();
  const Geometry geo{spec};

  std::vector<std::uint8_t> mask(static_cast<size_t>(spec.nx) * spec.ny, 0);
  for (int j = 0; j < spec.ny; ++j) {
    for (int i = 0; i < spec.nx; ++i) {
      const double x = (i + 0.5) * spec.hx;
      const double y = (j + 0.5) * spec.hy;
      mask[static_cast<size_t>(j) * spec.nx + i] = geo.in_brain(x, y) ? 1 : 0;
    }
  }
  GridPtr grid = make_grid(spec.nx, spec.ny, spec.hx, spec.hy, std::move(mask));

  BinaryMask gm(grid), wm(grid);
  for (int d = 0; d < grid->n_dof(); ++d) {
    const int c = grid->dof_cells()[d];
    const double x = grid->cx(c % spec.nx);
    const double y = grid->cy(c / spec.nx);
    if (geo.in_wm(x, y)) {
      wm.on[c] = 1;
    } else {
      gm.on[c] = 1;
    }
  }
  // The analytic shapes must not poke outside the brain outline.
  for (int j = 0; j < spec.ny; ++j) {
    for (int i = 0; i < spec.nx; ++i) {
      const double x = grid->cx(i);
      const double y = grid->cy(j);
      if (geo.in_wm(x, y) && !geo.in_brain(x, y)) {
        throw GeometryOutOfBounds("white-matter structure exits the brain outline");
      }
      const double rt = std::hypot(x - spec.tumor_cx, y - spec.tumor_cy);
      if (spec.tumor_radius > 0.0 && rt <= spec.tumor_radius && !geo.in_brain(x, y)) {
        throw GeometryOutOfBounds("initial tumor exits the brain outline");
      }
    }
  }
  RegionLabels labels = labels_from_masks(gm, wm, spec.band_halfwidth);

  ScalarField u0(grid);
  if (spec.tumor_radius > 0.0) {
    for (int d = 0; d < grid->n_dof(); ++d) {
      const int c = grid->dof_cells()[d];
      const double x = grid->cx(c % spec.nx);
      const double y = grid->cy(c / spec.nx);
      const double r = std::hypot(x - spec.tumor_cx, y - spec.tumor_cy);
      if (r < spec.tumor_radius) {
        const double t = 1.0 - (r / spec.tumor_radius) * (r / spec.tumor_radius);
        u0.values()[c] = spec.tumor_peak * t * t;
      }
    }
  }

  Image subject(spec.nx, spec.ny);
  for (int j = 0; j < spec.ny; ++j) {
    for (int i = 0; i < spec.nx; ++i) {
      subject.at(i, j) = geo.intensity(grid->cx(i), grid->cy(j));
    }
  }

  const int aw = spec.nx * spec.atlas_factor;
  const int ah = spec.ny * spec.atlas_factor;
  const double ahx = spec.hx / spec.atlas_factor;
  const double ahy = spec.hy / spec.atlas_factor;
  const double Lx = spec.nx * spec.hx;
  const double Ly = spec.ny * spec.hy;
  Image atlas(aw, ah);
  LabelImage atlas_labels(aw, ah);
  DisplacementField deform_mm(aw, ah);
  for (int j = 0; j < ah; ++j) {
    for (int i = 0; i < aw; ++i) {
      const double x = (i + 0.5) * ahx;
      const double y = (j + 0.5) * ahy;
      double ddx = 0.0, ddy = 0.0;
      geo.deform(x, y, Lx, Ly, ddx, ddy);
      atlas.at(i, j) = geo.intensity(x + ddx, y + ddy);
      atlas_labels.at(i, j) = geo.region_at(x + ddx, y + ddy);
      deform_mm.dx[deform_mm.idx(i, j)] = ddx;
      deform_mm.dy[deform_mm.idx(i, j)] = ddy;
    }
  }

  return Phantom{grid,  std::move(labels),        std::move(u0),
                 subject, std::move(atlas), std::move(atlas_labels),
                 std::move(deform_mm)};
}

ParameterFields draw_truth_fields(const PriorPair& prior, std::uint64_t seed) {
  Rng rng(seed);
  const Vec theta = prior.stacked_mean() + prior.sample_fluctuation(rng);
  return unstack_fields(prior.grid(), theta);
}

ParameterFields off_prior_truth_fields(const RegionLabels& labels, const RegionHyper& hyper) {
  hyper.validate();
  const GridPtr& grid = labels.grid;
  ParameterFields f{prior_mean_field(labels, hyper, Param::logD),
                    prior_mean_field(labels, hyper, Param::logG)};
  // Smooth bump on logD, centered in the domain, not representable as a
  // region-wise constant and unlikely under the Matern prior.
  const double cx = 0.5 * grid->extent_x();
  const double cy = 0.5 * grid->extent_y();
  const double R = 0.25 * std::min(grid->extent_x(), grid->extent_y());
  const double amp = std::sqrt(hyper.logD.var_gm);
  for (int d = 0; d < grid->n_dof(); ++d) {
    const int c = grid->dof_cells()[d];
    const double r = std::hypot(grid->cx(c % grid->nx()) - cx, grid->cy(c / grid->nx()) - cy);
    if (r < R) {
      const double t = 1.0 - (r / R) * (r / R);
      f.logD.values()[c] += amp * t * t;
    }
  }
  return f;
}

ObservationSeries synthesize_observations(const GridPtr& grid, const ParameterFields& theta,
                                          const ScalarField& u0,
                                          const std::vector<double>& days,
                                          double sigma2_noise, std::uint64_t seed,
                                          bool clamp, const SolverConfig& cfg) {
  if (sigma2_noise < 0.0) throw ValidationError("noise variance must be >= 0");
  const Trajectory traj = solve_forward(grid, theta, u0, days, cfg);
  const double sd = std::sqrt(sigma2_noise);

  ObservationSeries obs;
  obs.days = days;
  obs.fields.reserve(days.size());
  for (size_t i = 0; i < days.size(); ++i) {
    ScalarField d = traj.state_at_obs(static_cast<int>(i));
    if (sd > 0.0) {
      Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(i));
      for (int k = 0; k < grid->n_dof(); ++k) {
        d.values()[grid->dof_cells()[k]] += sd * rng.gaussian();
      }
    }
    if (clamp) {
      for (int k = 0; k < grid->n_dof(); ++k) {
        double& v = d.values()[grid->dof_cells()[k]];
        v = std::clamp(v, 0.0, 1.0);
      }
    }
    obs.fields.push_back(std::move(d));
  }
  return obs;
}

}  // namespace gliocal
