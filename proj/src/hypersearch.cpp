#include "gliocal/hypersearch.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>

#include "gliocal/errors.hpp"

namespace gliocal {

namespace {

std::vector<double> linspace(double lo, double hi, int n) {
  std::vector<double> v(n);
  for (int i = 0; i < n; ++i) v[i] = n == 1 ? lo : lo + (hi - lo) * i / double(n - 1);
  return v;
}

}  // namespace

SearchSpace SearchSpace::defaults() {
  SearchSpace s;
  s.rho_gm = linspace(2.0, 10.0, 5);
  s.k = linspace(0.5, 1.0, 3);
  s.sigma_noise = linspace(0.015, 0.5, 4);
  return s;
}

void SearchSpace::validate() const {
  if (rho_gm.empty() || k.empty() || sigma_noise.empty())
    throw ValidationError("search space axes must be nonempty");
  for (double v : rho_gm)
    if (!(v > 0.0)) throw NonpositiveHyper("search rho_gm values must be positive");
  for (double v : k)
    if (!(v > 0.0)) throw NonpositiveHyper("search k values must be positive");
  for (double v : sigma_noise)
    if (!(v > 0.0)) throw NonpositiveHyper("search noise values must be positive");
}

int SearchSpace::n_cells() const {
  return static_cast<int>(rho_gm.size() * k.size() * sigma_noise.size());
}

void SubjectBundle::validate() const {
  if (!grid) throw ValidationError("subject bundle has no grid");
  require_same_grid(grid, labels.grid, "subject labels");
  require_same_grid(grid, test_data.grid(), "subject test data");
  if (train.days.size() != train.fields.size() || train.days.size() < 2)
    throw ValidationError("subject training series needs day 0 plus at least one data day");
  for (const auto& f : train.fields) require_same_grid(grid, f.grid(), "subject training field");
  if (!(test_day > train.days.back()))
    throw ValidationError("held-out day must come after the last training day");
}

RegionHyper hyper_at(const RegionHyper& base, double rho_gm, double k, double sigma_noise) {
  if (!(rho_gm > 0.0) || !(k > 0.0) || !(sigma_noise > 0.0))
    throw NonpositiveHyper("search cell hyperparameters must be positive");
  RegionHyper h = base;
  h.rho_gm = rho_gm;
  h.rho_wm = rho_gm / k;
  h.rho_interface = std::min(base.rho_interface, std::min(h.rho_gm, h.rho_wm));
  h.sigma2_noise = sigma_noise * sigma_noise;
  h.validate();
  return h;
}

std::vector<int> pareto_front(const std::vector<std::pair<double, double>>& points) {
  if (points.empty()) throw NoValidPoints("no valid points to build a front from");
  std::vector<int> front;
  for (std::size_t i = 0; i < points.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < points.size() && !dominated; ++j) {
      if (j == i) continue;
      const bool geq = points[j].first >= points[i].first && points[j].second <= points[i].second;
      const bool strict =
          points[j].first > points[i].first || points[j].second < points[i].second;
      dominated = geq && strict;
    }
    if (!dominated) front.push_back(static_cast<int>(i));
  }
  return front;
}

namespace {

void evaluate_cell(CellResult& cell, const std::vector<SubjectBundle>& subjects,
                   const SearchOptions& opt) {
  try {
    const RegionHyper hyper = hyper_at(opt.base_hyper, cell.rho_gm, cell.k, cell.sigma_noise);
    double dice_sum = 0.0;
    double nta_sum = 0.0;
    for (const auto& subj : subjects) {
      auto prior = make_prior_pair(subj.labels, hyper);
      MisfitContext ctx = misfit_from_observations(subj.grid, subj.train.fields[0], subj.train,
                                                   hyper.sigma2_noise, opt.solver);
      ctx.half_convention = opt.half_convention;
      TumorMisfit misfit(ctx);
      auto [theta_map, report] = compute_map(misfit, prior, opt.newton);
      (void)report;

      std::vector<double> all_days = subj.train.days;
      all_days.push_back(subj.test_day);
      Trajectory traj = solve_forward(subj.grid, unstack_fields(subj.grid, theta_map),
                                      ctx.u0, all_days, opt.solver);
      ScalarField model = traj.state_at_obs(static_cast<int>(all_days.size()) - 1);
      MetricsReport m = compare_fields(model, subj.test_data, opt.cutoffs);
      cell.dice.push_back(m.dice);
      cell.nta_err.push_back(m.nta_error);
      dice_sum += m.dice;
      nta_sum += m.nta_error;
    }
    cell.mean_dice = dice_sum / double(subjects.size());
    cell.mean_nta_err = nta_sum / double(subjects.size());
    cell.valid = true;
  } catch (const std::exception& e) {
    cell.valid = false;
    cell.error = e.what();
    cell.dice.clear();
    cell.nta_err.clear();
  }
}

}  // namespace

SearchResult grid_search(const SearchSpace& space, const std::vector<SubjectBundle>& subjects,
                         const SearchOptions& opt) {
  space.validate();
  if (subjects.empty()) throw ValidationError("grid search needs at least one subject");
  for (const auto& s : subjects) s.validate();
  opt.newton.validate();

  SearchResult result;
  result.cells.reserve(space.n_cells());
  for (double r : space.rho_gm)
    for (double kk : space.k)
      for (double s : space.sigma_noise) {
        CellResult c;
        c.rho_gm = r;
        c.k = kk;
        c.sigma_noise = s;
        result.cells.push_back(std::move(c));
      }

  const int n = static_cast<int>(result.cells.size());
  const int workers = std::min(std::max(opt.threads, 1), n);
  if (workers <= 1) {
    for (auto& cell : result.cells) evaluate_cell(cell, subjects, opt);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        while (true) {
          const int i = next.fetch_add(1);
          if (i >= n) break;
          evaluate_cell(result.cells[i], subjects, opt);
        }
      });
    }
    for (auto& t : pool) t.join();
  }

  std::vector<std::pair<double, double>> pts;
  std::vector<int> valid_ids;
  for (int i = 0; i < n; ++i) {
    if (result.cells[i].valid) {
      pts.emplace_back(result.cells[i].mean_dice, result.cells[i].mean_nta_err);
      valid_ids.push_back(i);
    }
  }
  for (int f : pareto_front(pts)) result.cells[valid_ids[f]].on_front = true;
  result.chosen = select_hyper(result);
  return result;
}

int select_hyper(const SearchResult& result) {
  int best = -1;
  for (int i = 0; i < static_cast<int>(result.cells.size()); ++i) {
    const CellResult& c = result.cells[i];
    if (!c.on_front) continue;
    if (best < 0) {
      best = i;
      continue;
    }
    const CellResult& b = result.cells[best];
    auto key = [](const CellResult& x) {
      return std::make_tuple(-x.mean_dice, x.mean_nta_err, x.rho_gm, x.k, x.sigma_noise);
    };
    if (key(c) < key(b)) best = i;
  }
  if (best < 0) throw NoValidPoints("empty front");
  return best;
}

}  // namespace gliocal
