#pragma once

#include <vector>

#include "gliocal/forward.hpp"
#include "gliocal/grid.hpp"
#include "gliocal/prior.hpp"
#include "gliocal/registration_types.hpp"

namespace gliocal {

// Synthetic subject: elliptic brain outline, an annular-arc white-matter
// structure, and a radial-bump initial tumor. All geometry in mm.
struct PhantomSpec {
  int nx = 41;
  int ny = 61;
  double hx = 0.25;
  double hy = 0.25;

  double brain_cx = 5.125;
  double brain_cy = 7.625;
  double brain_rx = 4.3;
  double brain_ry = 6.8;

  double wm_cx = 5.125;
  double wm_cy = 5.625;
  double wm_radius = 3.2;
  double wm_thickness = 1.2;
  double wm_angle0_deg = 30.0;
  double wm_angle1_deg = 150.0;

  double tumor_cx = 6.125;
  double tumor_cy = 9.125;
  double tumor_radius = 1.2;
  double tumor_peak = 0.75;

  std::vector<double> days = {0.0, 2.0, 4.0, 6.0, 8.0};
  double sigma2_noise = 3.9e-3;
  std::uint64_t seed = 1;

  int atlas_factor = 2;           // atlas resolution multiple of the subject grid
  double deform_amplitude_px = 2.0;  // analytic atlas deformation, subject pixels
  double band_halfwidth = 0.6;       // mm, GM/WM interface band
  double edge_smoothness = 0.4;      // mm, intensity transition width

  void validate() const;
};

struct Phantom {
  GridPtr grid;
  RegionLabels labels;
  ScalarField u0;
  Image subject_image;      // intensities at subject resolution
  Image atlas_image;        // deformed copy at atlas resolution
  LabelImage atlas_labels;  // 0/1/2 labels in the atlas frame
  // True atlas-frame deformation T(x) = x + delta(x) in mm; transferring
  // labels through the ideal registration reproduces `labels` exactly, which
  // is the oracle for the registration pipeline.
  DisplacementField true_deform_mm;
};

Phantom make_brain_phantom(const PhantomSpec& spec);

struct ObservationSeries {
  std::vector<double> days;
  std::vector<ScalarField> fields;
};

// One draw of (logD, logG) from the modeling prior.
ParameterFields draw_truth_fields(const PriorPair& prior, std::uint64_t seed);

// Robustness variant that is not a prior sample: region-wise constants plus a
// smooth bump perturbation on logD.
ParameterFields off_prior_truth_fields(const RegionLabels& labels, const RegionHyper& hyper);

ObservationSeries synthesize_observations(const GridPtr& grid, const ParameterFields& theta,
                                          const ScalarField& u0,
                                          const std::vector<double>& days,
                                          double sigma2_noise, std::uint64_t seed,
                                          bool clamp, const SolverConfig& cfg);

}  // namespace gliocal
