#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gliocal/baselines.hpp"
#include "gliocal/hypersearch.hpp"
#include "test_util.hpp"

using namespace gliocal;

TEST_CASE("default search space: linear grids with the documented endpoints") {
  SearchSpace s = SearchSpace::defaults();
  REQUIRE(s.rho_gm.size() == 5);
  REQUIRE(s.k.size() == 3);
  REQUIRE(s.sigma_noise.size() == 4);
  CHECK(s.n_cells() == 60);

  const double rho_expect[5] = {2.0, 4.0, 6.0, 8.0, 10.0};
  for (int i = 0; i < 5; ++i) CHECK(s.rho_gm[i] == doctest::Approx(rho_expect[i]));
  const double k_expect[3] = {0.5, 0.75, 1.0};
  for (int i = 0; i < 3; ++i) CHECK(s.k[i] == doctest::Approx(k_expect[i]));
  CHECK(s.sigma_noise[0] == doctest::Approx(0.015));
  CHECK(s.sigma_noise[1] == doctest::Approx(0.015 + 0.485 / 3.0));
  CHECK(s.sigma_noise[2] == doctest::Approx(0.015 + 2.0 * 0.485 / 3.0));
  CHECK(s.sigma_noise[3] == doctest::Approx(0.5));

  SearchSpace bad = s;
  bad.k.clear();
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = s;
  bad.sigma_noise[0] = 0.0;
  CHECK_THROWS_AS(bad.validate(), NonpositiveHyper);
}

TEST_CASE("hyper_at fills the dependent hyperparameters") {
  RegionHyper base = RegionHyper::defaults();
  RegionHyper h = hyper_at(base, 4.0, 0.5, 0.1);
  CHECK(h.rho_gm == doctest::Approx(4.0));
  CHECK(h.rho_wm == doctest::Approx(8.0));
  CHECK(h.rho_interface == doctest::Approx(base.rho_interface));  // 0.6 < 4
  CHECK(h.sigma2_noise == doctest::Approx(0.01));
  // Means and variances ride along unchanged.
  CHECK(h.logD.mean_gm == base.logD.mean_gm);
  CHECK(h.logG.var_wm == base.logG.var_wm);

  // The interface length is clipped to the smallest tissue length.
  RegionHyper tight = hyper_at(base, 0.3, 1.0, 0.1);
  CHECK(tight.rho_interface == doctest::Approx(0.3));

  CHECK_THROWS_AS(hyper_at(base, -1.0, 0.5, 0.1), NonpositiveHyper);
  CHECK_THROWS_AS(hyper_at(base, 4.0, 0.5, 0.0), NonpositiveHyper);
  // Denormal noise underflows to zero variance and is rejected.
  CHECK_THROWS_AS(hyper_at(base, 4.0, 0.5, 1e-300), NonpositiveHyper);
}

TEST_CASE("pareto front: hand examples") {
  using P = std::pair<double, double>;
  // (dice maximize, nta minimize)
  std::vector<P> pts = {{0.9, 0.2}, {0.8, 0.1}, {0.7, 0.3}, {0.9, 0.25}};
  std::vector<int> front = pareto_front(pts);
  CHECK(front == std::vector<int>{0, 1});  // 2 dominated by 1; 3 dominated by 0

  // Exact duplicates do not dominate each other.
  std::vector<P> dup = {{0.5, 0.5}, {0.5, 0.5}};
  CHECK(pareto_front(dup) == std::vector<int>{0, 1});

  // A single point is its own front.
  CHECK(pareto_front({{0.1, 0.9}}) == std::vector<int>{0});

  CHECK_THROWS_AS(pareto_front({}), NoValidPoints);
}

TEST_CASE("pareto front: dominance properties on random sets") {
  Rng rng(17);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<std::pair<double, double>> pts;
    const int n = 3 + static_cast<int>(rng.uniform() * 25);
    for (int i = 0; i < n; ++i) {
      // Quantize to force ties.
      pts.emplace_back(std::floor(rng.uniform() * 8) / 8.0,
                       std::floor(rng.uniform() * 8) / 8.0);
    }
    std::vector<int> front = pareto_front(pts);
    REQUIRE_FALSE(front.empty());
    std::vector<bool> on(n, false);
    for (int f : front) on[f] = true;

    auto dominates = [&](int j, int i) {
      return pts[j].first >= pts[i].first && pts[j].second <= pts[i].second &&
             (pts[j].first > pts[i].first || pts[j].second < pts[i].second);
    };
    for (int i = 0; i < n; ++i) {
      bool dominated = false;
      for (int j = 0; j < n && !dominated; ++j)
        if (j != i && dominates(j, i)) dominated = true;
      // Front membership is exactly non-dominance.
      CHECK(on[i] == !dominated);
    }
  }
}

TEST_CASE("selection: dice first, then nta, then the axis order") {
  SearchResult r;
  auto add = [&](double dice, double nta, double rho, double k, double s, bool front) {
    CellResult c;
    c.mean_dice = dice;
    c.mean_nta_err = nta;
    c.rho_gm = rho;
    c.k = k;
    c.sigma_noise = s;
    c.valid = true;
    c.on_front = front;
    r.cells.push_back(c);
  };

  SUBCASE("max dice wins") {
    add(0.80, 0.10, 2, 1, 0.1, true);
    add(0.90, 0.20, 4, 1, 0.1, true);
    add(0.95, 0.05, 6, 1, 0.1, false);  // off-front cells are ignored
    CHECK(select_hyper(r) == 1);
  }
  SUBCASE("dice tie: min nta") {
    add(0.90, 0.20, 2, 1, 0.1, true);
    add(0.90, 0.10, 4, 1, 0.1, true);
    CHECK(select_hyper(r) == 1);
  }
  SUBCASE("dice and nta tie: smallest rho then k then sigma") {
    add(0.90, 0.10, 6, 1.0, 0.1, true);
    add(0.90, 0.10, 4, 1.0, 0.2, true);
    add(0.90, 0.10, 4, 0.5, 0.3, true);
    CHECK(select_hyper(r) == 2);
  }
  SUBCASE("no front") {
    add(0.90, 0.10, 4, 1, 0.1, false);
    CHECK_THROWS_AS(select_hyper(r), NoValidPoints);
  }
}

TEST_CASE("grid search: evaluates, scores, and skips broken cells") {
  // One small subject with a known piecewise-constant truth.
  GridPtr grid = test::ellipse_grid(20, 26, 0.5);
  RegionLabels labels = test::split_labels(grid, 0.6);
  PcpParams truth{-0.9, -0.4, -0.5, -0.6};
  ParameterFields theta = pcp_paint(labels, truth);

  ScalarField u0(grid);
  for (int j = 0; j < grid->ny(); ++j)
    for (int i = 0; i < grid->nx(); ++i) {
      const double dx = grid->cx(i) - 0.45 * grid->extent_x();
      const double dy = grid->cy(j) - 0.55 * grid->extent_y();
      const double rr = std::sqrt(dx * dx + dy * dy);
      u0(i, j) = rr < 1.4 ? 0.6 * 0.5 * (1.0 + std::cos(M_PI * rr / 1.4)) : 0.0;
    }
  u0.clean();

  SolverConfig solver;
  solver.dt = 0.2;
  const double s2 = 0.0625 * 0.0625;
  std::vector<double> days = {0.0, 2.0, 4.0};
  ObservationSeries all = synthesize_observations(grid, theta, u0, days, s2, 5, true, solver);
  ObservationSeries train{{0.0, 2.0}, {all.fields[0], all.fields[1]}};
  SubjectBundle subj{grid, labels, train, 4.0, all.fields[2]};
  subj.validate();

  SearchOptions opt;
  opt.solver = solver;
  opt.newton.max_iters = 4;
  opt.newton.grad_rtol = 1e-2;
  opt.newton.cg_max_iters = 30;

  SearchSpace space;
  space.rho_gm = {6.0};
  space.k = {1.0};
  space.sigma_noise = {0.0625, 1e-300};  // the second cell must fail cleanly

  SearchResult res = grid_search(space, {subj}, opt);
  REQUIRE(res.cells.size() == 2);
  CHECK(res.cells[0].valid);
  CHECK(res.cells[0].on_front);
  CHECK(res.cells[0].dice.size() == 1);
  CHECK(res.cells[0].mean_dice == doctest::Approx(res.cells[0].dice[0]));
  CHECK(res.cells[0].mean_dice > 0.5);  // calibrated model must beat chance
  CHECK_FALSE(res.cells[1].valid);
  CHECK_FALSE(res.cells[1].on_front);
  CHECK_FALSE(res.cells[1].error.empty());
  CHECK(res.chosen == 0);

  // Bitwise determinism, also across worker counts.
  SearchResult res2 = grid_search(space, {subj}, opt);
  CHECK(res2.cells[0].mean_dice == res.cells[0].mean_dice);
  CHECK(res2.cells[0].mean_nta_err == res.cells[0].mean_nta_err);
  SearchOptions opt4 = opt;
  opt4.threads = 4;
  SearchResult res4 = grid_search(space, {subj}, opt4);
  CHECK(res4.cells[0].mean_dice == res.cells[0].mean_dice);
  CHECK(res4.chosen == res.chosen);

  // Subject validation catches a held-out day inside the training window.
  SubjectBundle bad = subj;
  bad.test_day = 1.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK_THROWS_AS(grid_search(space, {}, opt), ValidationError);
}
