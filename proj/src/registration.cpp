#include "gliocal/registration.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

namespace gliocal {

namespace {

double sample_bilinear(const Image& img, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  const int x0 = std::min(static_cast<int>(x), img.width - 2);
  const int y0 = std::min(static_cast<int>(y), img.height - 2);
  const double tx = x - x0;
  const double ty = y - y0;
  return (1 - tx) * (1 - ty) * img.at(x0, y0) + tx * (1 - ty) * img.at(x0 + 1, y0) +
         (1 - tx) * ty * img.at(x0, y0 + 1) + tx * ty * img.at(x0 + 1, y0 + 1);
}

template <typename Raster, typename T>
T sample_nearest(const Raster& img, double x, double y) {
  const int xi = std::clamp(static_cast<int>(std::lround(x)), 0, img.width - 1);
  const int yi = std::clamp(static_cast<int>(std::lround(y)), 0, img.height - 1);
  return img.at(xi, yi);
}

// Separable Gaussian blur with border replication; sigma = 0 is the identity.
void gaussian_smooth(std::vector<double>& v, int w, int h, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
    sum += kernel[k + radius];
  }
  for (auto& kv : kernel) kv /= sum;

  std::vector<double> tmp(v.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        acc += kernel[k + radius] * v[static_cast<size_t>(y) * w + std::clamp(x + k, 0, w - 1)];
      }
      tmp[static_cast<size_t>(y) * w + x] = acc;
    }
  }
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        acc += kernel[k + radius] * tmp[static_cast<size_t>(std::clamp(y + k, 0, h - 1)) * w + x];
      }
      v[static_cast<size_t>(y) * w + x] = acc;
    }
  }
}

double mse(const Image& a, const Image& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    const double d = a.v[i] - b.v[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.v.size());
}

}  // namespace

Image downsample_image(const Image& img, int fx, int fy) {
  if (fx < 1 || fy < 1) throw ValidationError("downsample factors must be >= 1");
  if (fx == 1 && fy == 1) return img;
  const int ow = (img.width + fx - 1) / fx;
  const int oh = (img.height + fy - 1) / fy;
  Image out(ow, oh);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int by = 0; by < fy; ++by) {
        for (int bx = 0; bx < fx; ++bx) {
          // Pad by replication when the factor does not divide the dims.
          const int sx = std::min(x * fx + bx, img.width - 1);
          const int sy = std::min(y * fy + by, img.height - 1);
          acc += img.at(sx, sy);
        }
      }
      out.at(x, y) = acc / (fx * fy);
    }
  }
  return out;
}

LabelImage downsample_labels(const LabelImage& img, int fx, int fy) {
  if (fx < 1 || fy < 1) throw ValidationError("downsample factors must be >= 1");
  if (fx == 1 && fy == 1) return img;
  const int ow = (img.width + fx - 1) / fx;
  const int oh = (img.height + fy - 1) / fy;
  LabelImage out(ow, oh);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      int counts[3] = {0, 0, 0};
      for (int by = 0; by < fy; ++by) {
        for (int bx = 0; bx < fx; ++bx) {
          const int sx = std::min(x * fx + bx, img.width - 1);
          const int sy = std::min(y * fy + by, img.height - 1);
          const int lab = img.at(sx, sy);
          if (lab < 0 || lab > 2) throw UnknownLabelValue("atlas label outside 0..2");
          ++counts[lab];
        }
      }
      // Majority vote; ties resolve to the smaller label value.
      int best = 0;
      for (int lab = 1; lab < 3; ++lab) {
        if (counts[lab] > counts[best]) best = lab;
      }
      out.at(x, y) = best;
    }
  }
  return out;
}

Image warp_image(const Image& img, const DisplacementField& disp, Interp interp) {
  if (disp.width != img.width || disp.height != img.height) {
    throw DimensionMismatch("displacement field dims differ from image dims");
  }
  Image out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double sx = x + disp.dx[disp.idx(x, y)];
      const double sy = y + disp.dy[disp.idx(x, y)];
      out.at(x, y) = (interp == Interp::bilinear)
                         ? sample_bilinear(img, sx, sy)
                         : sample_nearest<Image, double>(img, sx, sy);
    }
  }
  return out;
}

LabelImage warp_labels(const LabelImage& img, const DisplacementField& disp) {
  if (disp.width != img.width || disp.height != img.height) {
    throw DimensionMismatch("displacement field dims differ from label image dims");
  }
  LabelImage out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      out.at(x, y) = sample_nearest<LabelImage, int>(img, x + disp.dx[disp.idx(x, y)],
                                                     y + disp.dy[disp.idx(x, y)]);
    }
  }
  return out;
}

DisplacementField demons_register(const Image& static_img, const Image& moving,
                                  const DemonsParams& p, DemonsTrace* trace) {
  if (static_img.width != moving.width || static_img.height != moving.height) {
    throw DimensionMismatch("demons_register: image dims differ");
  }
  if (p.iterations < 1) throw ValidationError("demons iterations must be >= 1");
  if (p.smoothing_sigma < 0.0) throw ValidationError("smoothing_sigma must be >= 0");
  const int w = static_img.width;
  const int h = static_img.height;

  // Static-image gradient, central differences (one-sided at the border).
  std::vector<double> gx(static_cast<size_t>(w) * h), gy(gx.size());
  double max_grad = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int xm = std::max(x - 1, 0), xp = std::min(x + 1, w - 1);
      const int ym = std::max(y - 1, 0), yp = std::min(y + 1, h - 1);
      const double dgx = (static_img.at(xp, y) - static_img.at(xm, y)) / (xp - xm);
      const double dgy = (static_img.at(x, yp) - static_img.at(x, ym)) / (yp - ym);
      gx[static_cast<size_t>(y) * w + x] = dgx;
      gy[static_cast<size_t>(y) * w + x] = dgy;
      max_grad = std::max(max_grad, std::abs(dgx) + std::abs(dgy));
    }
  }
  if (max_grad == 0.0) throw DegenerateImage("static image has no gradient anywhere");

  DisplacementField disp(w, h);
  double prev_mse = mse(warp_image(moving, disp, Interp::bilinear), static_img);
  if (trace) trace->mse.push_back(prev_mse);

  for (int it = 0; it < p.iterations; ++it) {
    const Image warped = warp_image(moving, disp, Interp::bilinear);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const size_t k = static_cast<size_t>(y) * w + x;
        const double diff = warped.at(x, y) - static_img.at(x, y);
        const double den = gx[k] * gx[k] + gy[k] * gy[k] + diff * diff;
        if (den < 1e-12) continue;
        // Descent direction for the intensity mismatch under the
        // out(x)=img(x+disp) warp convention.
        double ux = -diff * gx[k] / den;
        double uy = -diff * gy[k] / den;
        const double norm = std::hypot(ux, uy);
        if (norm > p.max_step) {
          ux *= p.max_step / norm;
          uy *= p.max_step / norm;
        }
        disp.dx[k] += ux;
        disp.dy[k] += uy;
      }
    }
    gaussian_smooth(disp.dx, w, h, p.smoothing_sigma);
    gaussian_smooth(disp.dy, w, h, p.smoothing_sigma);

    const double cur = mse(warp_image(moving, disp, Interp::bilinear), static_img);
    if (trace) trace->mse.push_back(cur);
    if (std::abs(prev_mse - cur) <= p.mse_rel_tol * std::max(prev_mse, 1e-30)) {
      prev_mse = cur;
      break;
    }
    prev_mse = cur;
  }
  return disp;
}

RegionLabels transfer_labels(const LabelImage& atlas_labels, const DisplacementField& disp,
                             const GridPtr& target_grid, double band_halfwidth) {
  if (disp.width != target_grid->nx() || disp.height != target_grid->ny()) {
    throw DimensionMismatch("displacement field dims differ from target grid");
  }
  if (atlas_labels.width != disp.width || atlas_labels.height != disp.height) {
    throw DimensionMismatch("atlas label dims differ from displacement field");
  }
  for (int lab : atlas_labels.v) {
    if (lab < 0 || lab > 2) throw UnknownLabelValue("atlas label outside 0..2");
  }
  const LabelImage warped = warp_labels(atlas_labels, disp);

  const Grid& g = *target_grid;
  std::vector<int> lab(g.size(), 0);
  std::queue<int> frontier;
  for (int j = 0; j < g.ny(); ++j) {
    for (int i = 0; i < g.nx(); ++i) {
      const int c = g.idx(i, j);
      if (!g.inside(c)) continue;
      lab[c] = warped.at(i, j);
      if (lab[c] != 0) frontier.push(c);
    }
  }
  // Brain cells the atlas leaves unlabeled inherit the nearest assigned label
  // (breadth-first, deterministic scan order).
  while (!frontier.empty()) {
    const int c = frontier.front();
    frontier.pop();
    const int i = c % g.nx();
    const int j = c / g.nx();
    const int nb[4][2] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
    for (auto& n : nb) {
      if (n[0] < 0 || n[0] >= g.nx() || n[1] < 0 || n[1] >= g.ny()) continue;
      const int cn = g.idx(n[0], n[1]);
      if (g.inside(cn) && lab[cn] == 0) {
        lab[cn] = lab[c];
        frontier.push(cn);
      }
    }
  }

  BinaryMask gm(target_grid), wm(target_grid);
  for (int c = 0; c < g.size(); ++c) {
    if (!g.inside(c)) continue;
    if (lab[c] == 0) {
      throw NotAPartition("atlas transfer produced no label for a brain region");
    }
    (lab[c] == 1 ? gm : wm).on[c] = 1;
  }
  return labels_from_masks(gm, wm, band_halfwidth);
}

}  // namespace gliocal
