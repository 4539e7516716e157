#pragma once

#include <cstdint>
#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

#include "gliocal/forward.hpp"
#include "gliocal/inversion.hpp"
#include "gliocal/metrics.hpp"
#include "gliocal/prior.hpp"
#include "gliocal/registration.hpp"

namespace gliocal {

struct PredictionConfig {
  std::vector<double> horizon_days;
  int n_samples = 200;
  double cutoff = 0.5;
};

struct PcpConfig {
  int chain_length = 50000;
  double burn_in = 0.2;  // fraction of the chain dropped from summaries
  int adapt_start = 1000;
  int adapt_interval = 100;
  double shrink = 0.2;
  double init_step = 0.1;  // initial proposal std per coordinate
};

// Everything a run needs beyond its input files. Defaults reproduce the
// reference rat-study estimates, so a zero-config run is meaningful.
struct PipelineConfig {
  RegionHyper hyper = RegionHyper::defaults();
  SolverConfig solver;
  NewtonConfig newton;
  LaplaceConfig laplace;
  PredictionConfig prediction;
  MetricsCutoffs cutoffs;
  PcpConfig pcp;
  DemonsParams registration;
  std::string method = "bayes";  // bayes | shp | pcp
  bool half_convention = true;   // misfit carries the 1/2 factor
  std::uint64_t seed = 1;
  int threads = 0;  // 0: resolve from the environment, else 1
  double band_halfwidth = 0.6;

  void validate() const;
};

// Strict parse: every key must be known (unknown keys raise ConfigError with
// the dotted path), every value type-checked.
PipelineConfig config_from_json(const nlohmann::json& j);
PipelineConfig load_config(const std::string& path);
nlohmann::json config_to_json(const PipelineConfig& c);

nlohmann::json region_hyper_to_json(const RegionHyper& h);
RegionHyper region_hyper_from_json(const nlohmann::json& j, const std::string& path,
                                   RegionHyper defaults);

// JSON Schema document describing the accepted config shape; shipped in the
// repository and embedded here so the binary can emit it.
std::string config_schema_json();

int resolve_threads(int configured);

}  // namespace gliocal
