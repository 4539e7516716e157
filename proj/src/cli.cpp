#include "gliocal/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "gliocal/baselines.hpp"
#include "gliocal/config.hpp"
#include "gliocal/errors.hpp"
#include "gliocal/hypersearch.hpp"
#include "gliocal/inversion.hpp"
#include "gliocal/metrics.hpp"
#include "gliocal/phantom.hpp"
#include "gliocal/registration.hpp"
#include "gliocal/rundir.hpp"

namespace gliocal {

using nlohmann::json;

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  return seed ^ (0x9E3779B97F4A7C15ULL * (stream + 1));
}

std::string indexed_name(const char* prefix, int i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s%03d.%s", prefix, i, ext);
  return buf;
}

void add_input(RunManifest& m, const std::string& name, const std::string& path) {
  m.input_digests[name] = file_digest_hex(path);
}

// --- shared option plumbing -------------------------------------------------

struct CommonOpts {
  std::string config_path;
  int threads = 0;
  bool seed_set = false;
  std::uint64_t seed = 0;

  PipelineConfig resolve() const {
    PipelineConfig cfg = config_path.empty() ? PipelineConfig{} : load_config(config_path);
    if (threads > 0) cfg.threads = threads;
    if (seed_set) cfg.seed = seed;
    cfg.validate();
    return cfg;
  }
};

void attach_common(CLI::App* sub, CommonOpts& c) {
  sub->add_option("--config", c.config_path, "Pipeline config JSON");
  sub->add_option("--threads", c.threads, "Worker thread cap (overrides config/env)");
  sub->add_option("--seed", c.seed, "Seed override")->each([&c](const std::string&) {
    c.seed_set = true;
  });
}

// --- raster conversion helpers ----------------------------------------------

Image image_from_raw(const RawField& raw) {
  Image img(raw.nx, raw.ny);
  for (long c = 0; c < raw.values.size(); ++c) img.v[c] = raw.values[c];
  return img;
}

RawField raw_from_image(const Image& img, double hx, double hy) {
  RawField raw;
  raw.nx = img.width;
  raw.ny = img.height;
  raw.hx = hx;
  raw.hy = hy;
  raw.values.resize(static_cast<long>(img.width) * img.height);
  for (long c = 0; c < raw.values.size(); ++c) raw.values[c] = img.v[c];
  return raw;
}

LabelImage labels_from_raw(const RawField& raw, const std::string& path) {
  LabelImage li(raw.nx, raw.ny);
  for (long c = 0; c < raw.values.size(); ++c) {
    const double v = raw.values[c];
    if (v != 0.0 && v != 1.0 && v != 2.0)
      throw UnknownLabelValue(path + ": atlas labels must be 0, 1 or 2");
    li.v[c] = static_cast<int>(v);
  }
  return li;
}

void write_binary_mask(const BinaryMask& b, const std::string& path) {
  RawField raw;
  raw.nx = b.grid->nx();
  raw.ny = b.grid->ny();
  raw.hx = b.grid->hx();
  raw.hy = b.grid->hy();
  raw.values.resize(b.grid->size());
  for (int c = 0; c < b.grid->size(); ++c) raw.values[c] = b.on[c] ? 1.0 : 0.0;
  write_raw_field(raw, "MASK", path);
}

// --- indicator matrices (one row per posterior sample) -----------------------

void write_indicator_matrix(const std::vector<std::vector<std::uint8_t>>& rows, int cols,
                            const std::string& path) {
  std::ofstream os(path);
  if (!os) throw FormatError(path + ": cannot open for writing");
  os << "IMAT 1\n";
  os << "rows " << rows.size() << " cols " << cols << '\n';
  for (const auto& r : rows) {
    for (int c = 0; c < cols; ++c) {
      if (c) os << ' ';
      os << int(r[c]);
    }
    os << '\n';
  }
  if (!os) throw FormatError(path + ": write failed");
}

std::vector<std::vector<std::uint8_t>> read_indicator_matrix(const std::string& path,
                                                             int expect_cols) {
  std::ifstream in(path);
  if (!in) throw FormatError(path + ": cannot open");
  std::string magic;
  int version = 0;
  std::string rw, cw;
  long rows = 0, cols = 0;
  if (!(in >> magic >> version >> rw >> rows >> cw >> cols) || magic != "IMAT" ||
      version != 1 || rw != "rows" || cw != "cols" || rows < 0 || cols <= 0)
    throw FormatError(path + ": bad indicator matrix header");
  if (expect_cols > 0 && cols != expect_cols)
    throw DimensionMismatch(path + ": indicator columns do not match the grid");
  std::vector<std::vector<std::uint8_t>> out(rows, std::vector<std::uint8_t>(cols));
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) {
      int v = 0;
      if (!(in >> v) || (v != 0 && v != 1))
        throw FormatError(path + ": indicator entries must be 0 or 1");
      out[r][c] = static_cast<std::uint8_t>(v);
    }
  return out;
}

// --- posterior basis serialization -------------------------------------------

void write_basis(const Mat& V, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw FormatError(path + ": cannot open for writing");
  os << "BASIS 1\n";
  os << "rows " << V.rows() << " cols " << V.cols() << '\n';
  for (Eigen::Index i = 0; i < V.rows(); ++i) {
    for (Eigen::Index j = 0; j < V.cols(); ++j) {
      if (j) os << ' ';
      os << format_double(V(i, j));
    }
    os << '\n';
  }
  if (!os) throw FormatError(path + ": write failed");
}

Mat read_basis(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path + ": cannot open");
  std::string magic, rw, cw;
  int version = 0;
  long rows = 0, cols = 0;
  if (!(in >> magic >> version >> rw >> rows >> cw >> cols) || magic != "BASIS" ||
      version != 1 || rw != "rows" || cw != "cols" || rows < 0 || cols < 0)
    throw FormatError(path + ": bad basis header");
  Mat V(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) {
      double v = 0.0;
      if (!(in >> v)) throw FormatError(path + ": basis data truncated");
      V(i, j) = v;
    }
  return V;
}

// --- data directory contract --------------------------------------------------

struct DataDir {
  GridPtr grid;
  RegionLabels labels;
  std::vector<double> days;
  std::vector<ScalarField> obs;
};

DataDir load_data_dir(const std::string& dir, RunManifest& m, const std::string& tag) {
  DataDir d;
  const std::string mask_path = dir + "/mask.mask";
  const std::string labels_path = dir + "/labels.labels";
  const std::string days_path = dir + "/days.json";
  d.grid = read_grid_mask(mask_path);
  d.labels = read_labels_file(labels_path, d.grid);
  add_input(m, tag + ".mask", mask_path);
  add_input(m, tag + ".labels", labels_path);
  add_input(m, tag + ".days", days_path);
  const json dj = read_json_file(days_path);
  if (!dj.is_object() || !dj.contains("days") || !dj.at("days").is_array())
    throw FormatError(days_path + ": expected {\"days\": [...]}");
  for (const auto& e : dj.at("days")) {
    if (!e.is_number()) throw FormatError(days_path + ": day entries must be numbers");
    d.days.push_back(e.get<double>());
  }
  if (d.days.empty()) throw ValidationError(days_path + ": day list is empty");
  for (std::size_t i = 0; i < d.days.size(); ++i) {
    const std::string p = dir + "/" + indexed_name("obs_", static_cast<int>(i), "sfield");
    d.obs.push_back(read_scalar_field(p, d.grid));
    add_input(m, tag + "." + indexed_name("obs_", static_cast<int>(i), "sfield"), p);
  }
  return d;
}

ObservationSeries series_of(const DataDir& d) { return {d.days, d.obs}; }

// --- prediction output writer --------------------------------------------------

void write_prediction_outputs(RunDir& rd, const GridPtr& grid,
                              const std::vector<double>& horizon_days, double cutoff,
                              const std::vector<ScalarField>& map_fields,
                              const std::vector<BinaryMask>& map_ind,
                              const std::vector<std::vector<ScalarField>>& sample_fields,
                              const std::vector<std::vector<BinaryMask>>& sample_ind) {
  const int n_days = static_cast<int>(horizon_days.size());
  const int n_samples = static_cast<int>(sample_fields.size());
  for (int k = 0; k < n_days; ++k) {
    write_scalar_field(map_fields[k], rd.file(indexed_name("pred_map_", k, "sfield")));
    write_binary_mask(map_ind[k], rd.file(indexed_name("pred_map_ind_", k, "mask")));
    if (n_samples > 0) {
      ScalarField mean(grid);
      ScalarField var(grid);
      for (int s = 0; s < n_samples; ++s) {
        mean.values() += sample_fields[s][k].values();
      }
      mean.values() /= double(n_samples);
      for (int s = 0; s < n_samples; ++s) {
        Vec dv = sample_fields[s][k].values() - mean.values();
        var.values() += dv.cwiseProduct(dv);
      }
      var.values() /= double(std::max(1, n_samples - 1));
      ScalarField sd(grid, var.values().cwiseSqrt());
      mean.clean();
      sd.clean();
      write_scalar_field(mean, rd.file(indexed_name("pred_mean_", k, "sfield")));
      write_scalar_field(sd, rd.file(indexed_name("pred_std_", k, "sfield")));

      std::vector<std::vector<std::uint8_t>> rows;
      rows.reserve(n_samples);
      for (int s = 0; s < n_samples; ++s) {
        const BinaryMask& bm = sample_ind[s][k];
        std::vector<std::uint8_t> row(grid->n_dof());
        for (int dof = 0; dof < grid->n_dof(); ++dof)
          row[dof] = bm.on[grid->dof_cells()[dof]];
        rows.push_back(std::move(row));
      }
      write_indicator_matrix(rows, grid->n_dof(),
                             rd.file(indexed_name("samples_ind_", k, "imat")));
    }
  }
  json pj;
  pj["horizon_days"] = horizon_days;
  pj["cutoff"] = cutoff;
  pj["n_samples"] = n_samples;
  write_json_file(rd.file("prediction.json"), pj);
}

// --- newton report serialization -------------------------------------------------

json newton_report_json(const NewtonReport& r) {
  json j;
  j["stop_reason"] = r.stop_reason;
  j["initial_grad_norm"] = r.initial_grad_norm;
  j["final_grad_norm"] = r.final_grad_norm;
  j["final_cost"] = r.final_cost;
  j["total_cg_iters"] = r.total_cg_iters;
  j["iterations"] = json::array();
  for (const auto& it : r.iterations) {
    j["iterations"].push_back({{"cost", it.cost},
                               {"grad_norm", it.grad_norm},
                               {"cg_iters", it.cg_iters},
                               {"forcing", it.forcing},
                               {"step", it.step},
                               {"backtracks", it.backtracks}});
  }
  return j;
}

// --- subcommand implementations ----------------------------------------------

struct PhantomOpts {
  CommonOpts common;
  std::string out;
  std::string days_csv;
  std::string truth = "prior";
  bool no_clamp = false;
};

void cmd_phantom(const PhantomOpts& o) {
  PipelineConfig cfg = o.common.resolve();
  if (o.truth != "prior" && o.truth != "off-prior")
    throw ValidationError("--truth must be 'prior' or 'off-prior'");

  PhantomSpec spec;
  if (!o.days_csv.empty()) spec.days = parse_day_list(o.days_csv);
  spec.sigma2_noise = cfg.hyper.sigma2_noise;
  spec.seed = cfg.seed;
  spec.band_halfwidth = cfg.band_halfwidth;
  spec.validate();

  const Phantom ph = make_brain_phantom(spec);
  ParameterFields truth = o.truth == "prior"
                              ? draw_truth_fields(make_prior_pair(ph.labels, cfg.hyper), cfg.seed)
                              : off_prior_truth_fields(ph.labels, cfg.hyper);
  const ObservationSeries obs =
      synthesize_observations(ph.grid, truth, ph.u0, spec.days, spec.sigma2_noise,
                              mix_seed(cfg.seed, 1), !o.no_clamp, cfg.solver);

  RunDir rd(o.out);
  write_mask_file(ph.grid, rd.file("mask.mask"));
  write_labels_file(ph.labels, rd.file("labels.labels"));
  write_scalar_field(ph.u0, rd.file("u0.sfield"));
  write_scalar_field(truth.logD, rd.file("truth_logd.sfield"));
  write_scalar_field(truth.logG, rd.file("truth_logg.sfield"));
  write_raw_field(raw_from_image(ph.subject_image, ph.grid->hx(), ph.grid->hy()), "SFIELD",
                  rd.file("subject_image.sfield"));
  const double ahx = ph.grid->hx() / spec.atlas_factor;
  const double ahy = ph.grid->hy() / spec.atlas_factor;
  write_raw_field(raw_from_image(ph.atlas_image, ahx, ahy), "SFIELD",
                  rd.file("atlas_image.sfield"));
  RawField alab;
  alab.nx = ph.atlas_labels.width;
  alab.ny = ph.atlas_labels.height;
  alab.hx = ahx;
  alab.hy = ahy;
  alab.values.resize(static_cast<long>(alab.nx) * alab.ny);
  for (long c = 0; c < alab.values.size(); ++c) alab.values[c] = ph.atlas_labels.v[c];
  write_raw_field(alab, "LABELS", rd.file("atlas_labels.labels"));
  write_json_file(rd.file("days.json"), json{{"days", spec.days}});
  for (std::size_t i = 0; i < obs.fields.size(); ++i)
    write_scalar_field(obs.fields[i], rd.file(indexed_name("obs_", static_cast<int>(i), "sfield")));

  RunManifest m;
  m.subcommand = "phantom";
  m.code_path = "phantom.synthetic";
  m.seed = cfg.seed;
  m.config_echo = config_to_json(cfg);
  m.extra["truth"] = o.truth;
  m.extra["clamp"] = !o.no_clamp;
  m.extra["days"] = spec.days;
  rd.write_manifest(m);
  rd.finalize();
}

struct SegmentOpts {
  CommonOpts common;
  std::string subject, atlas, atlas_labels, mask, out;
};

void cmd_segment(const SegmentOpts& o) {
  PipelineConfig cfg = o.common.resolve();
  RunManifest m;
  m.subcommand = "segment";
  m.code_path = "registration.demons+transfer";
  m.seed = cfg.seed;
  m.config_echo = config_to_json(cfg);
  add_input(m, "subject", o.subject);
  add_input(m, "atlas", o.atlas);
  add_input(m, "atlas_labels", o.atlas_labels);
  add_input(m, "mask", o.mask);

  const GridPtr grid = read_grid_mask(o.mask);
  const Image subject = image_from_raw(read_sfield_raw(o.subject));
  if (subject.width != grid->nx() || subject.height != grid->ny())
    throw DimensionMismatch("subject image dims differ from the grid mask");
  const Image atlas = image_from_raw(read_sfield_raw(o.atlas));
  const LabelImage atlas_lab =
      labels_from_raw(read_raw_file(o.atlas_labels, "LABELS"), o.atlas_labels);
  if (atlas.width != atlas_lab.width || atlas.height != atlas_lab.height)
    throw DimensionMismatch("atlas image and atlas labels disagree on dims");
  if (atlas.width % subject.width != 0 || atlas.height % subject.height != 0)
    throw DimensionMismatch("atlas dims must be integer multiples of the subject dims");
  const int fx = atlas.width / subject.width;
  const int fy = atlas.height / subject.height;

  const Image moving = downsample_image(atlas, fx, fy);
  const LabelImage moving_lab = downsample_labels(atlas_lab, fx, fy);
  DemonsTrace trace;
  const DisplacementField disp = demons_register(subject, moving, cfg.registration, &trace);
  const RegionLabels labels = transfer_labels(moving_lab, disp, grid, cfg.band_halfwidth);

  RunDir rd(o.out);
  write_labels_file(labels, rd.file("labels.labels"));
  RawField dxr{grid->nx(), grid->ny(), grid->hx(), grid->hy(), Vec(grid->size())};
  RawField dyr = dxr;
  for (int c = 0; c < grid->size(); ++c) {
    dxr.values[c] = disp.dx[c];
    dyr.values[c] = disp.dy[c];
  }
  write_raw_field(dxr, "SFIELD", rd.file("disp_x.sfield"));
  write_raw_field(dyr, "SFIELD", rd.file("disp_y.sfield"));
  write_json_file(rd.file("trace.json"), json{{"mse", trace.mse}});
  m.extra["demons_iterations_run"] = trace.mse.size();
  m.extra["downsample"] = {{"fx", fx}, {"fy", fy}};
  rd.write_manifest(m);
  rd.finalize();
}

struct SamplePriorOpts {
  CommonOpts common;
  std::string mask, labels, out;
  int n = 4;
  int var_samples = 0;
};

void cmd_sample_prior(const SamplePriorOpts& o) {
  PipelineConfig cfg = o.common.resolve();
  if (o.n < 0) throw ValidationError("--n must be nonnegative");
  RunManifest m;
  m.subcommand = "sample-prior";
  m.code_path = "prior.spde_sample";
  m.seed = cfg.seed;
  m.config_echo = config_to_json(cfg);
  add_input(m, "mask", o.mask);
  add_input(m, "labels", o.labels);

  const GridPtr grid = read_grid_mask(o.mask);
  const RegionLabels labels = read_labels_file(o.labels, grid);
  const PriorPair prior = make_prior_pair(labels, cfg.hyper);

  RunDir rd(o.out);
  write_scalar_field(prior.meanD, rd.file("mean_logd.sfield"));
  write_scalar_field(prior.meanG, rd.file("mean_logg.sfield"));
  for (int i = 0; i < o.n; ++i) {
    const ScalarField sd = prior_sample(*prior.opD, prior.meanD, mix_seed(cfg.seed, 2 * i));
    const ScalarField sg = prior_sample(*prior.opG, prior.meanG, mix_seed(cfg.seed, 2 * i + 1));
    write_scalar_field(sd, rd.file(indexed_name("sample_logd_", i, "sfield")));
    write_scalar_field(sg, rd.file(indexed_name("sample_logg_", i, "sfield")));
  }
  if (o.var_samples > 0) {
    write_scalar_field(pointwise_marginal_variance(*prior.opD, o.var_samples, mix_seed(cfg.seed, 101)),
                       rd.file("var_logd.sfield"));
    write_scalar_field(pointwise_marginal_variance(*prior.opG, o.var_samples, mix_seed(cfg.seed, 102)),
                       rd.file("var_logg.sfield"));
  }
  m.extra["n_samples"] = o.n;
  m.extra["var_samples"] = o.var_samples;
  rd.write_manifest(m);
  rd.finalize();
}

struct ForwardOpts {
  CommonOpts common;
  std::string mask, logd, logg, u0, days_csv, out;
};

void cmd_forward(const ForwardOpts& o) {
  PipelineConfig cfg = o.common.resolve();
  RunManifest m;
  m.subcommand = "forward";
  m.code_path = "forward.imex";
  m.seed = cfg.seed;
  m.config_echo = config_to_json(cfg);
  add_input(m, "mask", o.mask);
  add_input(m, "logd", o.logd);
  add_input(m, "logg", o.logg);
  add_input(m, "u0", o.u0);

  const GridPtr grid = read_grid_mask(o.mask);
  ParameterFields theta{read_scalar_field(o.logd, grid), read_scalar_field(o.logg, grid)};
  const ScalarField u0 = read_scalar_field(o.u0, grid);
  const std::vector<double> days = parse_day_list(o.days_csv);

  const Trajectory traj = solve_forward(grid, theta, u0, days, cfg.solver);
  RunDir rd(o.out);
  for (std::size_t i = 0; i < days.size(); ++i)
    write_scalar_field(traj.state_at_obs(static_cast<int>(i)),
                       rd.file(indexed_name("u_", static_cast<int>(i), "sfield")));
  m.extra["days"] = days;
  m.extra["steps"] = traj.step_dt.size();
  rd.write_manifest(m);
  rd.finalize();
}

struct CalibrateOpts {
  CommonOpts common;
  std::string data, out;
  std::string method;  // empty: use config
};

void cmd_calibrate(const CalibrateOpts& o) {
  PipelineConfig cfg = o.common.resolve();
  if (!o.method.empty()) cfg.method = o.method;
  cfg.validate();

  RunManifest m;
  m.subcommand = "calibrate";
  m.seed = cfg.seed;
  m.config_echo = config_to_json(cfg);
  if (!o.common.config_path.empty()) add_input(m, "config", o.common.config_path);
  const DataDir d = load_data_dir(o.data, m, "data");

  RunDir rd(o.out);
  const RegionHyper eff_hyper = cfg.method == "shp" ? shp_hyper(cfg.hyper) : cfg.hyper;
  MisfitContext ctx = misfit_from_observations(d.grid, d.obs[0], series_of(d),
                                               eff_hyper.sigma2_noise, cfg.solver);
  ctx.half_convention = cfg.half_convention;

  json post;
  post["method"] = cfg.method;
  post["likelihood"] = cfg.half_convention ? "half" : "full";
  post["sigma2_noise"] = eff_hyper.sigma2_noise;
  post["days"] = d.days;

  if (cfg.method == "bayes" || cfg.method == "shp") {
    m.code_path = "inversion.newton_cg+ghep";
    auto prior = std::make_shared<const PriorPair>(make_prior_pair(d.labels, eff_hyper));
    TumorMisfit misfit(ctx);
    auto [theta_map, report] = compute_map(misfit, *prior, cfg.newton);

    LaplaceConfig lap = cfg.laplace;
    lap.seed = mix_seed(cfg.seed, 2);
    const LowRankPosterior lrp = laplace_posterior(misfit, prior, theta_map, lap);

    const ParameterFields mf = lrp.map_fields();
    write_scalar_field(mf.logD, rd.file("map_logd.sfield"));
    write_scalar_field(mf.logG, rd.file("map_logg.sfield"));
    write_json_file(rd.file("newton.json"), newton_report_json(report));
    write_basis(lrp.V, rd.file("basis.txt"));

    post["hyper"] = region_hyper_to_json(eff_hyper);
    post["lambda"] = std::vector<double>(lrp.lambda.data(), lrp.lambda.data() + lrp.lambda.size());
    post["basis_file"] = "basis.txt";
    post["map_files"] = {"map_logd.sfield", "map_logg.sfield"};
    m.extra["newton_stop"] = report.stop_reason;
    m.extra["newton_iterations"] = report.iterations.size() - 1;
    m.extra["posterior_rank"] = lrp.rank();
  } else {
    m.code_path = "baselines.dram";
    const PcpPrior prior4 = PcpPrior::from_hyper(eff_hyper);
    auto target_p = pcp_target(ctx, d.labels, prior4);
    auto target = [&target_p](const Vec& v) { return target_p(PcpParams::from_vec(v)); };

    DramConfig dc;
    dc.x0 = Vec(4);
    dc.x0 << prior4.comp[0].mean, prior4.comp[1].mean, prior4.comp[2].mean, prior4.comp[3].mean;
    dc.cov0 = cfg.pcp.init_step * cfg.pcp.init_step * Mat::Identity(4, 4);
    dc.adapt_start = cfg.pcp.adapt_start;
    dc.adapt_interval = cfg.pcp.adapt_interval;
    dc.shrink = cfg.pcp.shrink;
    const Chain chain = dram_sample(target, cfg.pcp.chain_length, dc, mix_seed(cfg.seed, 4));

    std::ofstream csv(rd.file("chain.csv"));
    if (!csv) throw FormatError("chain.csv: cannot open for writing");
    csv << "logD_gm,logD_wm,logG_gm,logG_wm,log_post\n";
    for (int t = 0; t < chain.length(); ++t) {
      for (int c = 0; c < 4; ++c) csv << format_double(chain.samples(t, c)) << ',';
      csv << format_double(chain.log_post[t]) << '\n';
    }
    if (!csv) throw FormatError("chain.csv: write failed");

    const int burn = static_cast<int>(cfg.pcp.burn_in * chain.length());
    Vec mean = Vec::Zero(4);
    for (int t = burn; t < chain.length(); ++t) mean += chain.samples.row(t).transpose();
    const int kept = std::max(1, chain.length() - burn);
    mean /= double(kept);
    const ParameterFields painted = pcp_paint(d.labels, PcpParams::from_vec(mean));
    write_scalar_field(painted.logD, rd.file("map_logd.sfield"));
    write_scalar_field(painted.logG, rd.file("map_logg.sfield"));

    json summary;
    summary["acceptance_rate"] = chain.acceptance_rate();
    summary["post_adapt_acceptance_rate"] = chain.post_adapt_acceptance_rate();
    summary["accepted_stage1"] = chain.accepted_stage1;
    summary["accepted_stage2"] = chain.accepted_stage2;
    summary["burn_in_samples"] = burn;
    summary["params_mean"] = std::vector<double>(mean.data(), mean.data() + 4);
    write_json_file(rd.file("pcp_summary.json"), summary);

    post["hyper"] = region_hyper_to_json(eff_hyper);
    post["chain_file"] = "chain.csv";
    post["burn_in"] = cfg.pcp.burn_in;
    post["params_mean"] = std::vector<double>(mean.data(), mean.data() + 4);
    m.extra["chain_length"] = chain.length();
    m.extra["acceptance_rate"] = chain.acceptance_rate();
  }
  write_json_file(rd.file("posterior.json"), post);
  rd.write_manifest(m);
  rd.finalize();
}

struct PredictOpts {
  CommonOpts common;
  std::string data, calib, out, days_csv;
  int n_samples = -1;      // -1: config default
  double cutoff = -1.0;    // <0: config default
};

void cmd_predict(const PredictOpts& o) {
  PipelineConfig cfg = o.common.resolve();
  const int n_samples = o.n_samples >= 0 ? o.n_samples : cfg.prediction.n_samples;
  const double cutoff = o.cutoff > 0.0 ? o.cutoff : cfg.prediction.cutoff;
  std::vector<double> horizon =
      o.days_csv.empty() ? cfg.prediction.horizon_days : parse_day_list(o.days_csv);
  if (horizon.empty()) throw ValidationError("prediction needs horizon days (--days)");

  RunManifest m;
  m.subcommand = "predict";
  m.seed = cfg.seed;
  m.config_echo = config_to_json(cfg);
  const DataDir d = load_data_dir(o.data, m, "data");
  const std::string post_path = o.calib + "/posterior.json";
  add_input(m, "posterior", post_path);
  const json post = read_json_file(post_path);
  if (!post.is_object() || !post.contains("method"))
    throw FormatError(post_path + ": missing method");
  const std::string method = post.at("method").get<std::string>();
  const RegionHyper eff_hyper =
      region_hyper_from_json(post.at("hyper"), "posterior.hyper", RegionHyper::defaults());
  const double sigma2 = post.at("sigma2_noise").get<double>();
  const bool half = post.at("likelihood").get<std::string>() == "half";

  MisfitContext ctx =
      misfit_from_observations(d.grid, d.obs[0], series_of(d), sigma2, cfg.solver);
  ctx.half_convention = half;

  RunDir rd(o.out);
  const GridPtr grid = d.grid;
  if (method == "bayes" || method == "shp") {
    m.code_path = "inversion.low_rank_predict";
    auto prior = std::make_shared<const PriorPair>(make_prior_pair(d.labels, eff_hyper));
    const std::string mapd_path = o.calib + "/map_logd.sfield";
    const std::string mapg_path = o.calib + "/map_logg.sfield";
    add_input(m, "map_logd", mapd_path);
    add_input(m, "map_logg", mapg_path);
    ParameterFields mf{read_scalar_field(mapd_path, grid), read_scalar_field(mapg_path, grid)};

    LowRankPosterior lrp;
    lrp.theta_map = stack_fields(mf);
    const auto& lam = post.at("lambda");
    lrp.lambda.resize(lam.size());
    for (std::size_t i = 0; i < lam.size(); ++i) lrp.lambda[i] = lam.at(i).get<double>();
    const std::string basis_path = o.calib + "/" + post.at("basis_file").get<std::string>();
    add_input(m, "basis", basis_path);
    lrp.V = read_basis(basis_path);
    lrp.prior = prior;
    lrp.validate();

    const PredictionEnsemble ens = predict(lrp, ctx, horizon, n_samples, cutoff,
                                           mix_seed(cfg.seed, 3), resolve_threads(cfg.threads));
    write_prediction_outputs(rd, grid, horizon, cutoff, ens.map_fields, ens.map_indicator,
                             ens.sample_fields, ens.sample_indicator);
  } else if (method == "pcp") {
    m.code_path = "baselines.pcp_predict";
    const std::string chain_path = o.calib + "/" + post.at("chain_file").get<std::string>();
    add_input(m, "chain", chain_path);

    std::ifstream csv(chain_path);
    if (!csv) throw FormatError(chain_path + ": cannot open");
    std::string line;
    if (!std::getline(csv, line)) throw FormatError(chain_path + ": empty chain");
    std::vector<Vec> rows;
    while (std::getline(csv, line)) {
      if (line.empty()) continue;
      Vec row(4);
      std::replace(line.begin(), line.end(), ',', ' ');
      std::istringstream ls(line);
      double lp = 0.0;
      if (!(ls >> row[0] >> row[1] >> row[2] >> row[3] >> lp))
        throw FormatError(chain_path + ": bad chain row");
      rows.push_back(row);
    }
    if (rows.empty()) throw ValidationError(chain_path + ": chain has no samples");
    const double burn_frac = post.at("burn_in").get<double>();
    const int burn = static_cast<int>(burn_frac * rows.size());
    const int avail = static_cast<int>(rows.size()) - burn;
    if (avail < 1) throw ValidationError("burn-in removes the whole chain");

    std::vector<double> all_days = d.days;
    all_days.insert(all_days.end(), horizon.begin(), horizon.end());
    const std::size_t first_h = d.days.size();
    auto run_params = [&](const Vec& v, std::vector<ScalarField>& fields,
                          std::vector<BinaryMask>& ind) {
      const ParameterFields th = pcp_paint(d.labels, PcpParams::from_vec(v));
      const Trajectory traj = solve_forward(grid, th, ctx.u0, all_days, cfg.solver);
      for (std::size_t k = 0; k < horizon.size(); ++k) {
        ScalarField f = traj.state_at_obs(static_cast<int>(first_h + k));
        ind.push_back(tumor_indicator(f, cutoff));
        fields.push_back(std::move(f));
      }
    };

    Vec mean = Vec::Zero(4);
    for (int t = burn; t < static_cast<int>(rows.size()); ++t) mean += rows[t];
    mean /= double(avail);
    std::vector<ScalarField> map_fields;
    std::vector<BinaryMask> map_ind;
    run_params(mean, map_fields, map_ind);

    const int k_samples = std::min(n_samples, avail);
    std::vector<std::vector<ScalarField>> sf(k_samples);
    std::vector<std::vector<BinaryMask>> si(k_samples);
    for (int s = 0; s < k_samples; ++s) {
      const int idx = burn + static_cast<int>((s + 0.5) * avail / k_samples);
      run_params(rows[std::min<std::size_t>(idx, rows.size() - 1)], sf[s], si[s]);
    }
    write_prediction_outputs(rd, grid, horizon, cutoff, map_fields, map_ind, sf, si);
  } else {
    throw FormatError(post_path + ": unknown method '" + method + "'");
  }
  m.extra["method"] = method;
  m.extra["n_samples"] = n_samples;
  rd.write_manifest(m);
  rd.finalize();
}

struct MetricsOpts {
  CommonOpts common;
  std::string mask, model, data, out, samples;
};

void cmd_metrics(const MetricsOpts& o) {
  PipelineConfig cfg = o.common.resolve();
  RunManifest m;
  m.subcommand = "metrics";
  m.code_path = "metrics.compare";
  m.seed = cfg.seed;
  m.config_echo = config_to_json(cfg);
  add_input(m, "mask", o.mask);
  add_input(m, "model", o.model);
  add_input(m, "data", o.data);

  const GridPtr grid = read_grid_mask(o.mask);
  const ScalarField model = read_scalar_field(o.model, grid);
  const ScalarField data = read_scalar_field(o.data, grid);
  MetricsReport rep = compare_fields(model, data, cfg.cutoffs);

  const Boundary data_boundary = extract_boundary(data, cfg.cutoffs.data_dice);
  const Boundary model_boundary = extract_boundary(model, cfg.cutoffs.model);
  if (!data_boundary.empty())
    rep.boundary_margin_mm = boundary_margin({model_boundary}, data_boundary);

  json extra_kde;
  if (!o.samples.empty()) {
    add_input(m, "samples", o.samples);
    const auto rows = read_indicator_matrix(o.samples, grid->n_dof());
    const BinaryMask data_mask = threshold_mask(data, cfg.cutoffs.data_dice, false);
    const BinaryMask data_nta_mask = threshold_mask(data, cfg.cutoffs.data_nta, true);
    const BinaryMask brain = brain_mask(grid);
    std::vector<double> dices, ntaerrs;
    for (const auto& row : rows) {
      BinaryMask bm(grid);
      for (int dof = 0; dof < grid->n_dof(); ++dof)
        bm.on[grid->dof_cells()[dof]] = row[dof];
      dices.push_back(dice(bm, data_mask));
      ntaerrs.push_back(nta_indicator_error(bm, data_nta_mask, brain));
    }
    rep.n_samples = static_cast<int>(rows.size());
    auto mean_std = [](const std::vector<double>& v) {
      double mu = 0.0;
      for (double x : v) mu += x;
      mu /= double(v.size());
      double s2 = 0.0;
      for (double x : v) s2 += (x - mu) * (x - mu);
      const double sd = v.size() > 1 ? std::sqrt(s2 / double(v.size() - 1)) : 0.0;
      return std::make_pair(mu, sd);
    };
    if (!dices.empty()) {
      std::tie(rep.dice_mean, rep.dice_std) = mean_std(dices);
      std::tie(rep.nta_error_mean, rep.nta_error_std) = mean_std(ntaerrs);
      try {
        const KdeCurve k = kde(dices);
        extra_kde = {{"x", k.x}, {"density", k.density}, {"bandwidth", k.bandwidth}};
      } catch (const DegenerateData&) {
        extra_kde = {{"degenerate", true}};
      } catch (const ValidationError&) {
        extra_kde = {{"degenerate", true}};
      }
    }
  }

  json out;
  out["dice"] = rep.dice;
  out["nta_model"] = rep.nta_model;
  out["nta_data"] = rep.nta_data;
  out["nta_error"] = rep.nta_error;
  out["nta_relative_gap"] =
      std::isfinite(rep.nta_relative_gap) ? json(rep.nta_relative_gap) : json("inf");
  if (std::isfinite(rep.boundary_margin_mm)) out["boundary_margin_mm"] = rep.boundary_margin_mm;
  if (rep.n_samples > 0) {
    out["n_samples"] = rep.n_samples;
    out["dice_mean"] = rep.dice_mean;
    out["dice_std"] = rep.dice_std;
    out["nta_error_mean"] = rep.nta_error_mean;
    out["nta_error_std"] = rep.nta_error_std;
    if (!extra_kde.is_null()) out["dice_kde"] = extra_kde;
  }
  RunDir rd(o.out);
  write_json_file(rd.file("metrics.json"), out);
  rd.write_manifest(m);
  rd.finalize();
}

struct GridsearchOpts {
  CommonOpts common;
  std::vector<std::string> subjects;
  std::string train_csv, out, space_path;
  double test_day = 0.0;
  bool test_day_set = false;
};

void cmd_gridsearch(const GridsearchOpts& o) {
  PipelineConfig cfg = o.common.resolve();
  if (o.subjects.empty()) throw ValidationError("gridsearch needs at least one --subject");
  if (!o.test_day_set) throw ValidationError("gridsearch needs --test-day");
  const std::vector<double> train_days = parse_day_list(o.train_csv);

  RunManifest m;
  m.subcommand = "gridsearch";
  m.code_path = "hypersearch.grid+pareto";
  m.seed = cfg.seed;
  m.config_echo = config_to_json(cfg);

  SearchSpace space = SearchSpace::defaults();
  if (!o.space_path.empty()) {
    add_input(m, "space", o.space_path);
    const json sj = read_json_file(o.space_path);
    if (!sj.is_object()) throw ConfigError(o.space_path + ": search space must be an object");
    for (const auto& item : sj.items()) {
      if (item.key() != "rho_gm" && item.key() != "k" && item.key() != "sigma_noise")
        throw ConfigError(o.space_path + ": unknown search space key '" + item.key() + "'");
    }
    auto axis = [&](const char* key, std::vector<double> def) {
      if (!sj.contains(key)) return def;
      std::vector<double> v;
      for (const auto& e : sj.at(key)) {
        if (!e.is_number()) throw ConfigError(o.space_path + ": axis entries must be numbers");
        v.push_back(e.get<double>());
      }
      return v;
    };
    space.rho_gm = axis("rho_gm", space.rho_gm);
    space.k = axis("k", space.k);
    space.sigma_noise = axis("sigma_noise", space.sigma_noise);
  }

  std::vector<SubjectBundle> bundles;
  for (std::size_t si = 0; si < o.subjects.size(); ++si) {
    const std::string tag = "subject" + std::to_string(si);
    const DataDir d = load_data_dir(o.subjects[si], m, tag);
    ObservationSeries train;
    int test_idx = -1;
    for (std::size_t i = 0; i < d.days.size(); ++i) {
      const bool is_train =
          std::find(train_days.begin(), train_days.end(), d.days[i]) != train_days.end();
      if (is_train) {
        train.days.push_back(d.days[i]);
        train.fields.push_back(d.obs[i]);
      }
      if (d.days[i] == o.test_day) test_idx = static_cast<int>(i);
    }
    if (train.days.size() != train_days.size())
      throw ValidationError(o.subjects[si] + ": training days missing from the data");
    if (test_idx < 0) throw ValidationError(o.subjects[si] + ": test day missing from the data");
    bundles.push_back(
        SubjectBundle{d.grid, d.labels, std::move(train), o.test_day, d.obs[test_idx]});
  }

  SearchOptions opt;
  opt.base_hyper = cfg.hyper;
  opt.newton = cfg.newton;
  opt.solver = cfg.solver;
  opt.cutoffs = cfg.cutoffs;
  opt.half_convention = cfg.half_convention;
  opt.threads = resolve_threads(cfg.threads);
  const SearchResult result = grid_search(space, bundles, opt);

  json cells = json::array();
  for (const auto& c : result.cells) {
    json cj;
    cj["rho_gm"] = c.rho_gm;
    cj["k"] = c.k;
    cj["sigma_noise"] = c.sigma_noise;
    cj["valid"] = c.valid;
    if (c.valid) {
      cj["dice"] = c.dice;
      cj["nta_err"] = c.nta_err;
      cj["mean_dice"] = c.mean_dice;
      cj["mean_nta_err"] = c.mean_nta_err;
      cj["on_front"] = c.on_front;
    } else {
      cj["error"] = c.error;
    }
    cells.push_back(std::move(cj));
  }
  const CellResult& chosen = result.cells[result.chosen];
  json chosen_j = {{"rho_gm", chosen.rho_gm},
                   {"k", chosen.k},
                   {"rho_wm", chosen.rho_gm / chosen.k},
                   {"sigma_noise", chosen.sigma_noise},
                   {"sigma2_noise", chosen.sigma_noise * chosen.sigma_noise},
                   {"mean_dice", chosen.mean_dice},
                   {"mean_nta_err", chosen.mean_nta_err}};

  RunDir rd(o.out);
  write_json_file(rd.file("search.json"),
                  json{{"cells", cells}, {"chosen_index", result.chosen}, {"chosen", chosen_j}});
  write_json_file(rd.file("chosen_hyper.json"), chosen_j);
  std::ostringstream csv;
  csv << "rho_gm,k,sigma_noise,valid,mean_dice,mean_nta_err,on_front\n";
  for (const auto& c : result.cells) {
    csv << format_double(c.rho_gm) << ',' << format_double(c.k) << ','
        << format_double(c.sigma_noise) << ',' << (c.valid ? 1 : 0) << ','
        << (c.valid ? format_double(c.mean_dice) : "") << ','
        << (c.valid ? format_double(c.mean_nta_err) : "") << ',' << (c.on_front ? 1 : 0)
        << '\n';
  }
  write_text_file(rd.file("search.csv"), csv.str());
  m.extra["n_cells"] = result.cells.size();
  m.extra["chosen_index"] = result.chosen;
  rd.write_manifest(m);
  rd.finalize();
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

std::vector<double> parse_day_list(const std::string& csv) {
  std::vector<double> out;
  std::string tok;
  std::istringstream in(csv);
  while (std::getline(in, tok, ',')) {
    if (tok.empty()) throw ValidationError("empty entry in day list '" + csv + "'");
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size())
      throw ValidationError("bad day value '" + tok + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ValidationError("day list is empty");
  return out;
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Spatially heterogeneous tumor-growth calibration and prediction"};
  app.require_subcommand(0, 1);
  bool print_schema = false;
  app.add_flag("--print-config-schema", print_schema, "Print the config JSON schema and exit");

  PhantomOpts ph;
  auto* sub_ph = app.add_subcommand("phantom", "Generate a synthetic subject and observations");
  attach_common(sub_ph, ph.common);
  sub_ph->add_option("--out", ph.out, "Output run directory")->required();
  sub_ph->add_option("--days", ph.days_csv, "Observation days, comma separated");
  sub_ph->add_option("--truth", ph.truth, "Truth fields: prior | off-prior");
  sub_ph->add_flag("--no-clamp", ph.no_clamp, "Do not clamp noisy observations to [0,1]");

  SegmentOpts sg;
  auto* sub_sg = app.add_subcommand("segment", "Register the atlas and transfer tissue labels");
  attach_common(sub_sg, sg.common);
  sub_sg->add_option("--subject", sg.subject, "Subject image (SFIELD)")->required();
  sub_sg->add_option("--atlas", sg.atlas, "Atlas image (SFIELD)")->required();
  sub_sg->add_option("--atlas-labels", sg.atlas_labels, "Atlas labels (LABELS)")->required();
  sub_sg->add_option("--mask", sg.mask, "Subject brain mask (MASK)")->required();
  sub_sg->add_option("--out", sg.out, "Output run directory")->required();

  SamplePriorOpts sp;
  auto* sub_sp = app.add_subcommand("sample-prior", "Draw samples from the parameter prior");
  attach_common(sub_sp, sp.common);
  sub_sp->add_option("--mask", sp.mask, "Brain mask (MASK)")->required();
  sub_sp->add_option("--labels", sp.labels, "Tissue labels (LABELS)")->required();
  sub_sp->add_option("--out", sp.out, "Output run directory")->required();
  sub_sp->add_option("--n", sp.n, "Number of samples");
  sub_sp->add_option("--var-samples", sp.var_samples,
                     "Monte Carlo draws for the marginal variance (0: skip)");

  ForwardOpts fw;
  auto* sub_fw = app.add_subcommand("forward", "Run the growth model forward");
  attach_common(sub_fw, fw.common);
  sub_fw->add_option("--mask", fw.mask, "Brain mask (MASK)")->required();
  sub_fw->add_option("--logd", fw.logd, "log-diffusivity field (SFIELD)")->required();
  sub_fw->add_option("--logg", fw.logg, "log-growth field (SFIELD)")->required();
  sub_fw->add_option("--u0", fw.u0, "Initial cell density (SFIELD)")->required();
  sub_fw->add_option("--days", fw.days_csv, "Output days, comma separated")->required();
  sub_fw->add_option("--out", fw.out, "Output run directory")->required();

  CalibrateOpts cb;
  auto* sub_cb = app.add_subcommand("calibrate", "Calibrate parameter fields from observations");
  attach_common(sub_cb, cb.common);
  sub_cb->add_option("--data", cb.data, "Data directory (phantom output layout)")->required();
  sub_cb->add_option("--out", cb.out, "Output run directory")->required();
  sub_cb->add_option("--method", cb.method, "bayes | shp | pcp (default from config)");

  PredictOpts pr;
  auto* sub_pr = app.add_subcommand("predict", "Predict tumor shape at future days");
  attach_common(sub_pr, pr.common);
  sub_pr->add_option("--data", pr.data, "Data directory")->required();
  sub_pr->add_option("--calib", pr.calib, "Calibration run directory")->required();
  sub_pr->add_option("--out", pr.out, "Output run directory")->required();
  sub_pr->add_option("--days", pr.days_csv, "Horizon days, comma separated");
  sub_pr->add_option("--n-samples", pr.n_samples, "Posterior samples (default from config)");
  sub_pr->add_option("--cutoff", pr.cutoff, "Indicator cutoff (default from config)");

  MetricsOpts mt;
  auto* sub_mt = app.add_subcommand("metrics", "Compare a model field against data");
  attach_common(sub_mt, mt.common);
  sub_mt->add_option("--mask", mt.mask, "Brain mask (MASK)")->required();
  sub_mt->add_option("--model", mt.model, "Model field (SFIELD)")->required();
  sub_mt->add_option("--data", mt.data, "Data field (SFIELD)")->required();
  sub_mt->add_option("--out", mt.out, "Output run directory")->required();
  sub_mt->add_option("--samples", mt.samples, "Sample indicator matrix (IMAT) for ensemble stats");

  GridsearchOpts gs;
  auto* sub_gs = app.add_subcommand("gridsearch", "Cross-validate hyperparameters");
  attach_common(sub_gs, gs.common);
  sub_gs->add_option("--subject", gs.subjects, "Subject data directory (repeatable)");
  sub_gs->add_option("--train-days", gs.train_csv, "Training days, comma separated")->required();
  sub_gs->add_option("--test-day", gs.test_day, "Held-out day")->each([&gs](const std::string&) {
    gs.test_day_set = true;
  });
  sub_gs->add_option("--space", gs.space_path, "Search space JSON");
  sub_gs->add_option("--out", gs.out, "Output run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    std::cerr << "gliocal: error: usage: " << one_line(e.what()) << '\n';
    return 1;
  }

  try {
    if (print_schema) {
      std::cout << config_schema_json();
      return 0;
    }
    if (sub_ph->parsed()) {
      cmd_phantom(ph);
    } else if (sub_sg->parsed()) {
      cmd_segment(sg);
    } else if (sub_sp->parsed()) {
      cmd_sample_prior(sp);
    } else if (sub_fw->parsed()) {
      cmd_forward(fw);
    } else if (sub_cb->parsed()) {
      cmd_calibrate(cb);
    } else if (sub_pr->parsed()) {
      cmd_predict(pr);
    } else if (sub_mt->parsed()) {
      cmd_metrics(mt);
    } else if (sub_gs->parsed()) {
      cmd_gridsearch(gs);
    } else {
      std::cerr << "gliocal: error: usage: a subcommand is required (see --help)\n";
      return 1;
    }
    return 0;
  } catch (const ValidationError& e) {
    std::cerr << "gliocal: error: validation: " << one_line(e.what()) << '\n';
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "gliocal: error: numerical: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "gliocal: error: validation: " << one_line(e.what()) << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "gliocal: error: internal: " << one_line(e.what()) << '\n';
    return 2;
  }
}

}  // namespace gliocal
