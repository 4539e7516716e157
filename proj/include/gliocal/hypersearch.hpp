#pragma once

#include <string>
#include <vector>

#include "gliocal/inversion.hpp"
#include "gliocal/metrics.hpp"
#include "gliocal/phantom.hpp"
#include "gliocal/prior.hpp"

namespace gliocal {

// Cross-validation search axes: GM correlation length, the GM/WM length
// ratio k = rho_gm/rho_wm, and the noise standard deviation.
struct SearchSpace {
  std::vector<double> rho_gm;       // mm
  std::vector<double> k;            // rho_gm / rho_wm
  std::vector<double> sigma_noise;  // std, not variance

  static SearchSpace defaults();  // 5 x 3 x 4 linear grids over
                                  // [2,10] x [0.5,1] x [0.015,0.5]
  void validate() const;
  int n_cells() const;
};

// One subject's split: training series (day 0 supplies the initial
// condition) and a single held-out day.
struct SubjectBundle {
  GridPtr grid;
  RegionLabels labels;
  ObservationSeries train;
  double test_day = 0.0;
  ScalarField test_data;

  void validate() const;
};

struct SearchOptions {
  RegionHyper base_hyper = RegionHyper::defaults();
  NewtonConfig newton;
  SolverConfig solver;
  MetricsCutoffs cutoffs;
  bool half_convention = true;
  int threads = 1;
};

struct CellResult {
  double rho_gm = 0.0;
  double k = 0.0;
  double sigma_noise = 0.0;
  bool valid = false;
  std::string error;
  std::vector<double> dice;     // per subject
  std::vector<double> nta_err;  // per subject
  double mean_dice = 0.0;
  double mean_nta_err = 0.0;
  bool on_front = false;
};

struct SearchResult {
  std::vector<CellResult> cells;
  int chosen = -1;  // index into cells, always on the front
};

// Replace the correlation lengths and noise level of `base`; the interface
// length is clipped to stay no larger than the tissue lengths.
RegionHyper hyper_at(const RegionHyper& base, double rho_gm, double k, double sigma_noise);

// Indices of the non-dominated points under (dice: maximize, nta: minimize).
std::vector<int> pareto_front(const std::vector<std::pair<double, double>>& points);

// Exhaustive evaluation: one MAP calibration per cell and subject on the
// training days, scored at the held-out day, objectives averaged over
// subjects. Failing cells are recorded and skipped.
SearchResult grid_search(const SearchSpace& space, const std::vector<SubjectBundle>& subjects,
                         const SearchOptions& opt);

// Collapse rule: maximize Dice, ties by minimal NTA error, then minimal
// rho_gm (then k, then sigma for full determinism).
int select_hyper(const SearchResult& result);

}  // namespace gliocal
