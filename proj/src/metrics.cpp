#include "gliocal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace gliocal {

BinaryMask threshold_mask(const ScalarField& f, double cutoff, bool strict) {
  const GridPtr& grid = f.grid();
  BinaryMask m(grid);
  for (int d = 0; d < grid->n_dof(); ++d) {
    const int c = grid->dof_cells()[d];
    const double v = f.values()[c];
    m.on[c] = (strict ? v > cutoff : v >= cutoff) ? 1 : 0;
  }
  return m;
}

BinaryMask tumor_indicator(const ScalarField& u, double cutoff) {
  if (!(cutoff > 0.0) || !(cutoff < 1.0)) {
    throw ValidationError("tumor_indicator cutoff must lie in (0,1)");
  }
  return threshold_mask(u, cutoff, /*strict=*/false);
}

double dice(const BinaryMask& a, const BinaryMask& b) {
  require_same_grid(a.grid, b.grid, "dice");
  long na = 0, nb = 0, nab = 0;
  for (size_t c = 0; c < a.on.size(); ++c) {
    na += a.on[c] ? 1 : 0;
    nb += b.on[c] ? 1 : 0;
    nab += (a.on[c] && b.on[c]) ? 1 : 0;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(nab) / static_cast<double>(na + nb);
}

double nta(const BinaryMask& mask, const BinaryMask& brain) {
  require_same_grid(mask.grid, brain.grid, "nta");
  const int nb = brain.count();
  if (nb == 0) throw EmptyBrain("nta needs a nonempty brain mask");
  return static_cast<double>(mask.count()) / static_cast<double>(nb);
}

double nta_indicator_error(const BinaryMask& model, const BinaryMask& data,
                           const BinaryMask& brain) {
  require_same_grid(model.grid, data.grid, "nta_indicator_error");
  require_same_grid(model.grid, brain.grid, "nta_indicator_error");
  const int nb = brain.count();
  if (nb == 0) throw EmptyBrain("nta_indicator_error needs a nonempty brain mask");
  long sym = 0;
  for (size_t c = 0; c < model.on.size(); ++c) {
    sym += ((model.on[c] != 0) != (data.on[c] != 0)) ? 1 : 0;
  }
  return static_cast<double>(sym) / static_cast<double>(nb);
}

double nta_relative_gap(const BinaryMask& model, const BinaryMask& data,
                        const BinaryMask& brain) {
  const double nm = nta(model, brain);
  const double nd = nta(data, brain);
  if (nd == 0.0) {
    return (nm == 0.0) ? 0.0 : std::numeric_limits<double>::infinity();
  }
  return std::abs(nm - nd) / nd;
}

namespace {

// Iso-contouring runs on the cell-center lattice extended by one ring of
// below-level nodes, so contours never dangle at the domain edge.
struct ContourBuilder {
  const Grid& grid;
  const Vec& u;
  double level;
  int nx, ny;

  double node(int i, int j) const {
    if (i < 0 || i >= nx || j < 0 || j >= ny) return level - 1.0;
    return u[grid.idx(i, j)];
  }
  bool hot(int i, int j) const { return node(i, j) >= level; }
  double nodex(int i) const { return grid.cx(i); }
  double nodey(int j) const { return grid.cy(j); }

  // Edge ids: horizontal edge keyed by its left node, vertical by its bottom
  // node. Crossing coordinates are computed once per edge, so shared segment
  // endpoints match bitwise.
  long hedge(int i, int j) const { return 2L * ((j + 1) * (nx + 2L) + (i + 1)); }
  long vedge(int i, int j) const { return hedge(i, j) + 1; }

  std::array<double, 2> cross_h(int i, int j) const {
    const double v0 = node(i, j), v1 = node(i + 1, j);
    const double t = (level - v0) / (v1 - v0);
    return {nodex(i) + t * grid.hx(), nodey(j)};
  }
  std::array<double, 2> cross_v(int i, int j) const {
    const double v0 = node(i, j), v1 = node(i, j + 1);
    const double t = (level - v0) / (v1 - v0);
    return {nodex(i), nodey(j) + t * grid.hy()};
  }
};

}  // namespace

Boundary extract_boundary(const ScalarField& u, double level) {
  if (!(level > 0.0) || !(level < 1.0)) {
    throw ValidationError("extract_boundary level must lie in (0,1)");
  }
  const Grid& grid = *u.grid();
  ContourBuilder cb{grid, u.values(), level, grid.nx(), grid.ny()};

  std::map<long, std::array<double, 2>> verts;
  std::vector<std::pair<long, long>> segs;
  auto emit = [&](long e0, std::array<double, 2> p0, long e1, std::array<double, 2> p1) {
    verts.emplace(e0, p0);
    verts.emplace(e1, p1);
    segs.emplace_back(e0, e1);
  };

  for (int j = -1; j < grid.ny(); ++j) {
    for (int i = -1; i < grid.nx(); ++i) {
      const bool b0 = cb.hot(i, j), b1 = cb.hot(i + 1, j);
      const bool b2 = cb.hot(i + 1, j + 1), b3 = cb.hot(i, j + 1);
      const int code = (b0 ? 1 : 0) | (b1 ? 2 : 0) | (b2 ? 4 : 0) | (b3 ? 8 : 0);
      if (code == 0 || code == 15) continue;
      const long eb = cb.hedge(i, j), er = cb.vedge(i + 1, j);
      const long et = cb.hedge(i, j + 1), el = cb.vedge(i, j);
      auto pb = [&] { return cb.cross_h(i, j); };
      auto pr = [&] { return cb.cross_v(i + 1, j); };
      auto pt = [&] { return cb.cross_h(i, j + 1); };
      auto pl = [&] { return cb.cross_v(i, j); };
      switch (code) {
        case 1: case 14: emit(el, pl(), eb, pb()); break;
        case 2: case 13: emit(eb, pb(), er, pr()); break;
        case 4: case 11: emit(er, pr(), et, pt()); break;
        case 8: case 7:  emit(et, pt(), el, pl()); break;
        case 3: case 12: emit(el, pl(), er, pr()); break;
        case 6: case 9:  emit(eb, pb(), et, pt()); break;
        case 5: case 10: {
          const double avg = 0.25 * (cb.node(i, j) + cb.node(i + 1, j) +
                                     cb.node(i + 1, j + 1) + cb.node(i, j + 1));
          const bool center_hot = avg >= level;
          // code 5: corners (i,j) and (i+1,j+1) hot; code 10: the other pair.
          const bool connect_lb = (code == 5) ? !center_hot : center_hot;
          if (connect_lb) {
            emit(el, pl(), eb, pb());
            emit(er, pr(), et, pt());
          } else {
            emit(eb, pb(), er, pr());
            emit(et, pt(), el, pl());
          }
          break;
        }
        default: break;
      }
    }
  }

  // Each crossing vertex has exactly two incident segments; the segment graph
  // is a union of cycles, walked here into closed polylines.
  std::map<long, std::vector<size_t>> incident;
  for (size_t s = 0; s < segs.size(); ++s) {
    incident[segs[s].first].push_back(s);
    incident[segs[s].second].push_back(s);
  }
  std::vector<bool> used(segs.size(), false);
  Boundary out;
  for (size_t s0 = 0; s0 < segs.size(); ++s0) {
    if (used[s0]) continue;
    std::vector<std::array<double, 2>> loop;
    long start = segs[s0].first;
    long cur = start;
    size_t seg = s0;
    while (true) {
      used[seg] = true;
      loop.push_back(verts.at(cur));
      const long nxt = (segs[seg].first == cur) ? segs[seg].second : segs[seg].first;
      if (nxt == start) break;
      const auto& inc = incident.at(nxt);
      size_t other = inc[0] == seg ? inc[1] : inc[0];
      cur = nxt;
      seg = other;
    }
    if (loop.size() >= 3) out.loops.push_back(std::move(loop));
  }
  return out;
}

double boundary_length(const Boundary& b) {
  double total = 0.0;
  for (const auto& loop : b.loops) {
    for (size_t k = 0; k < loop.size(); ++k) {
      const auto& p = loop[k];
      const auto& q = loop[(k + 1) % loop.size()];
      total += std::hypot(q[0] - p[0], q[1] - p[1]);
    }
  }
  return total;
}

bool point_inside(const Boundary& b, double x, double y) {
  // Even-odd rule over all loops.
  bool inside = false;
  for (const auto& loop : b.loops) {
    for (size_t k = 0; k < loop.size(); ++k) {
      const auto& p = loop[k];
      const auto& q = loop[(k + 1) % loop.size()];
      if ((p[1] <= y) != (q[1] <= y)) {
        const double t = (y - p[1]) / (q[1] - p[1]);
        if (x < p[0] + t * (q[0] - p[0])) inside = !inside;
      }
    }
  }
  return inside;
}

namespace {

double point_segment_distance(double x, double y, const std::array<double, 2>& a,
                              const std::array<double, 2>& b) {
  const double vx = b[0] - a[0], vy = b[1] - a[1];
  const double wx = x - a[0], wy = y - a[1];
  const double vv = vx * vx + vy * vy;
  const double t = (vv > 0.0) ? std::clamp((wx * vx + wy * vy) / vv, 0.0, 1.0) : 0.0;
  return std::hypot(wx - t * vx, wy - t * vy);
}

}  // namespace

double boundary_margin(const std::vector<Boundary>& samples, const Boundary& reference) {
  if (reference.empty()) throw EmptyReference("boundary_margin needs a nonempty reference");
  double total = 0.0;
  int used_samples = 0;
  for (const auto& sample : samples) {
    double acc = 0.0;
    long nv = 0;
    for (const auto& loop : sample.loops) {
      for (const auto& v : loop) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& rl : reference.loops) {
          for (size_t k = 0; k < rl.size(); ++k) {
            best = std::min(best, point_segment_distance(v[0], v[1], rl[k],
                                                         rl[(k + 1) % rl.size()]));
          }
        }
        acc += best;
        ++nv;
      }
    }
    if (nv > 0) {
      total += acc / static_cast<double>(nv);
      ++used_samples;
    }
  }
  if (used_samples == 0) return std::numeric_limits<double>::quiet_NaN();
  return total / used_samples;
}

KdeCurve kde(const std::vector<double>& values, std::optional<double> bandwidth) {
  if (values.size() < 2) throw ValidationError("kde needs at least 2 values");
  const int n = static_cast<int>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= (n - 1);
  if (var == 0.0 && !bandwidth) {
    throw DegenerateData("kde: all values equal (point mass)");
  }
  double bw = bandwidth ? *bandwidth : 1.06 * std::sqrt(var) * std::pow(n, -0.2);
  if (!(bw > 0.0)) throw ValidationError("kde bandwidth must be positive");

  const double lo = *std::min_element(values.begin(), values.end()) - 5.0 * bw;
  const double hi = *std::max_element(values.begin(), values.end()) + 5.0 * bw;
  const int npts = 401;
  KdeCurve curve;
  curve.bandwidth = bw;
  curve.x.resize(npts);
  curve.density.resize(npts);
  const double norm = 1.0 / (n * bw * std::sqrt(2.0 * 3.14159265358979323846));
  for (int k = 0; k < npts; ++k) {
    const double x = lo + (hi - lo) * k / (npts - 1);
    double acc = 0.0;
    for (double v : values) {
      const double z = (x - v) / bw;
      acc += std::exp(-0.5 * z * z);
    }
    curve.x[k] = x;
    curve.density[k] = norm * acc;
  }
  return curve;
}

MetricsReport compare_fields(const ScalarField& model, const ScalarField& data,
                             const MetricsCutoffs& cut) {
  require_same_grid(model.grid(), data.grid(), "compare_fields");
  const BinaryMask brain = brain_mask(model.grid());
  const BinaryMask m = tumor_indicator(model, cut.model);
  const BinaryMask d_dice = threshold_mask(data, cut.data_dice, /*strict=*/false);
  const BinaryMask d_nta = threshold_mask(data, cut.data_nta, /*strict=*/true);
  MetricsReport r;
  r.dice = dice(m, d_dice);
  r.nta_model = nta(m, brain);
  r.nta_data = nta(d_nta, brain);
  r.nta_error = nta_indicator_error(m, d_nta, brain);
  r.nta_relative_gap = nta_relative_gap(m, d_nta, brain);
  return r;
}

}  // namespace gliocal
