#pragma once

#include <array>
#include <limits>
#include <optional>
#include <vector>

#include "gliocal/grid.hpp"

namespace gliocal {

BinaryMask tumor_indicator(const ScalarField& u, double cutoff);

// 2|a n b| / (|a| + |b|); both masks empty counts as perfect agreement.
double dice(const BinaryMask& a, const BinaryMask& b);

// Normalized tumor area and the two NTA discrepancy readings: the symmetric
// difference over brain area, and the relative gap |nta_m - nta_d| / nta_d
// (infinity when the data mask is empty but the model mask is not).
double nta(const BinaryMask& mask, const BinaryMask& brain);
double nta_indicator_error(const BinaryMask& model, const BinaryMask& data,
                           const BinaryMask& brain);
double nta_relative_gap(const BinaryMask& model, const BinaryMask& data,
                        const BinaryMask& brain);

struct Boundary {
  std::vector<std::vector<std::array<double, 2>>> loops;  // closed, mm coords
  bool empty() const { return loops.empty(); }
};

// Marching-squares iso-contour of u at the given level over the cell-center
// lattice, padded below level outside the domain so every loop closes.
// Saddle squares resolve by comparing the cell average against the level.
Boundary extract_boundary(const ScalarField& u, double level);

double boundary_length(const Boundary& b);
bool point_inside(const Boundary& b, double x, double y);

// Mean distance from sample-boundary vertices to the nearest reference
// segment, averaged over samples; samples with empty boundaries are skipped.
double boundary_margin(const std::vector<Boundary>& samples, const Boundary& reference);

struct KdeCurve {
  std::vector<double> x;
  std::vector<double> density;
  double bandwidth = 0.0;
};

// Gaussian KDE with Silverman's bandwidth unless one is given.
KdeCurve kde(const std::vector<double>& values, std::optional<double> bandwidth = {});

struct MetricsReport {
  double dice = 0.0;
  double nta_model = 0.0;
  double nta_data = 0.0;
  double nta_error = 0.0;
  double nta_relative_gap = 0.0;
  double boundary_margin_mm = std::numeric_limits<double>::quiet_NaN();
  int n_samples = 0;
  double dice_mean = std::numeric_limits<double>::quiet_NaN();
  double dice_std = std::numeric_limits<double>::quiet_NaN();
  double nta_error_mean = std::numeric_limits<double>::quiet_NaN();
  double nta_error_std = std::numeric_limits<double>::quiet_NaN();
};

struct MetricsCutoffs {
  double model = 0.5;
  double data_dice = 0.5;
  double data_nta = 0.0;  // data > 0 convention: cells strictly above this value
};

// Data masks: >= data_dice for Dice, > data_nta for NTA.
MetricsReport compare_fields(const ScalarField& model, const ScalarField& data,
                             const MetricsCutoffs& cut);

BinaryMask threshold_mask(const ScalarField& f, double cutoff, bool strict);

}  // namespace gliocal
