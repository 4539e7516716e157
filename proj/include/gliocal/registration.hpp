#pragma once

#include <vector>

#include "gliocal/grid.hpp"
#include "gliocal/registration_types.hpp"

namespace gliocal {

enum class Interp { bilinear, nearest };

struct DemonsParams {
  int iterations = 300;
  double smoothing_sigma = 1.5;  // pixels
  double max_step = 0.5;         // pixels per iteration
  double mse_rel_tol = 1e-4;
};

// Per-iteration mean-squared intensity error, for the monotonicity check.
struct DemonsTrace {
  std::vector<double> mse;
};

Image downsample_image(const Image& img, int fx, int fy);
LabelImage downsample_labels(const LabelImage& img, int fx, int fy);

// out(x) = img(x + disp(x)); samples outside the image clamp to the border.
Image warp_image(const Image& img, const DisplacementField& disp, Interp interp);
LabelImage warp_labels(const LabelImage& img, const DisplacementField& disp);

// Thirion demons: passive force from the static image gradient, additive
// accumulation, Gaussian smoothing of the total field each iteration.
DisplacementField demons_register(const Image& static_img, const Image& moving,
                                  const DemonsParams& p, DemonsTrace* trace = nullptr);

// Warp atlas labels onto the grid, fill brain cells the warp left unlabeled
// from their nearest labeled neighbor, then rebuild the interface band.
RegionLabels transfer_labels(const LabelImage& atlas_labels, const DisplacementField& disp,
                             const GridPtr& target_grid, double band_halfwidth);

}  // namespace gliocal
