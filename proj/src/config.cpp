#include "gliocal/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>

#include "gliocal/errors.hpp"

namespace gliocal {

using nlohmann::json;

namespace {

std::string join_path(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

void require_object(const json& j, const std::string& path) {
  if (!j.is_object())
    throw ConfigError((path.empty() ? std::string("config root") : path) + " must be an object");
}

void check_keys(const json& j, const std::string& path,
                std::initializer_list<const char*> allowed) {
  require_object(j, path);
  for (const auto& item : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* k) {
          return item.key() == k;
        }) == allowed.end()) {
      throw ConfigError("unknown config key '" + join_path(path, item.key()) + "'");
    }
  }
}

double get_num(const json& j, const std::string& path, const char* key, double def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number()) throw ConfigError("'" + join_path(path, key) + "' must be a number");
  return v.get<double>();
}

int get_int(const json& j, const std::string& path, const char* key, int def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number_integer())
    throw ConfigError("'" + join_path(path, key) + "' must be an integer");
  return v.get<int>();
}

std::uint64_t get_u64(const json& j, const std::string& path, const char* key,
                      std::uint64_t def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
    throw ConfigError("'" + join_path(path, key) + "' must be a nonnegative integer");
  return v.get<std::uint64_t>();
}

std::string get_str(const json& j, const std::string& path, const char* key,
                    const std::string& def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_string()) throw ConfigError("'" + join_path(path, key) + "' must be a string");
  return v.get<std::string>();
}

std::vector<double> get_darray(const json& j, const std::string& path, const char* key,
                               std::vector<double> def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_array()) throw ConfigError("'" + join_path(path, key) + "' must be an array");
  std::vector<double> out;
  out.reserve(v.size());
  for (const auto& e : v) {
    if (!e.is_number())
      throw ConfigError("'" + join_path(path, key) + "' entries must be numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

FieldHyper parse_field_hyper(const json& j, const std::string& path, FieldHyper def) {
  check_keys(j, path, {"mean_gm", "mean_wm", "var_gm", "var_wm"});
  def.mean_gm = get_num(j, path, "mean_gm", def.mean_gm);
  def.mean_wm = get_num(j, path, "mean_wm", def.mean_wm);
  def.var_gm = get_num(j, path, "var_gm", def.var_gm);
  def.var_wm = get_num(j, path, "var_wm", def.var_wm);
  return def;
}

}  // namespace

RegionHyper region_hyper_from_json(const json& j, const std::string& path,
                                   RegionHyper defaults) {
  check_keys(j, path, {"logD", "logG", "rho_gm", "rho_wm", "rho_interface", "sigma2_noise"});
  RegionHyper h = defaults;
  if (j.contains("logD"))
    h.logD = parse_field_hyper(j.at("logD"), join_path(path, "logD"), h.logD);
  if (j.contains("logG"))
    h.logG = parse_field_hyper(j.at("logG"), join_path(path, "logG"), h.logG);
  h.rho_gm = get_num(j, path, "rho_gm", h.rho_gm);
  h.rho_wm = get_num(j, path, "rho_wm", h.rho_wm);
  h.rho_interface = get_num(j, path, "rho_interface", h.rho_interface);
  h.sigma2_noise = get_num(j, path, "sigma2_noise", h.sigma2_noise);
  return h;
}

json region_hyper_to_json(const RegionHyper& h) {
  return {{"logD",
           {{"mean_gm", h.logD.mean_gm},
            {"mean_wm", h.logD.mean_wm},
            {"var_gm", h.logD.var_gm},
            {"var_wm", h.logD.var_wm}}},
          {"logG",
           {{"mean_gm", h.logG.mean_gm},
            {"mean_wm", h.logG.mean_wm},
            {"var_gm", h.logG.var_gm},
            {"var_wm", h.logG.var_wm}}},
          {"rho_gm", h.rho_gm},
          {"rho_wm", h.rho_wm},
          {"rho_interface", h.rho_interface},
          {"sigma2_noise", h.sigma2_noise}};
}

void PipelineConfig::validate() const {
  hyper.validate();
  newton.validate();
  if (!(solver.dt > 0.0)) throw ConfigError("'solver.dt' must be positive");
  if (!(solver.lin_tol > 0.0)) throw ConfigError("'solver.lin_tol' must be positive");
  if (solver.max_cg_iters < 1) throw ConfigError("'solver.max_cg_iters' must be at least 1");
  if (laplace.oversample < 0) throw ConfigError("'laplace.oversample' must be nonnegative");
  if (laplace.power_iters < 0) throw ConfigError("'laplace.power_iters' must be nonnegative");
  if (laplace.max_rank < 0) throw ConfigError("'laplace.max_rank' must be nonnegative");
  if (!(laplace.lambda_cut > 0.0)) throw ConfigError("'laplace.lambda_cut' must be positive");
  if (prediction.n_samples < 0) throw ConfigError("'prediction.n_samples' must be nonnegative");
  if (!(prediction.cutoff > 0.0 && prediction.cutoff < 1.0))
    throw ConfigError("'prediction.cutoff' must lie in (0,1)");
  for (std::size_t i = 1; i < prediction.horizon_days.size(); ++i) {
    if (!(prediction.horizon_days[i] > prediction.horizon_days[i - 1]))
      throw ConfigError("'prediction.horizon_days' must be strictly increasing");
  }
  if (!(cutoffs.model > 0.0 && cutoffs.model < 1.0))
    throw ConfigError("'metrics.model_cutoff' must lie in (0,1)");
  if (!(cutoffs.data_dice > 0.0 && cutoffs.data_dice < 1.0))
    throw ConfigError("'metrics.data_dice_cutoff' must lie in (0,1)");
  if (!(cutoffs.data_nta >= 0.0 && cutoffs.data_nta < 1.0))
    throw ConfigError("'metrics.data_nta_cutoff' must lie in [0,1)");
  if (registration.iterations < 1)
    throw ConfigError("'registration.iterations' must be at least 1");
  if (!(registration.smoothing_sigma >= 0.0))
    throw ConfigError("'registration.smoothing_sigma' must be nonnegative");
  if (!(registration.max_step > 0.0))
    throw ConfigError("'registration.max_step' must be positive");
  if (!(registration.mse_rel_tol >= 0.0))
    throw ConfigError("'registration.mse_rel_tol' must be nonnegative");
  if (pcp.chain_length < 1) throw ConfigError("'pcp.chain_length' must be at least 1");
  if (!(pcp.burn_in >= 0.0 && pcp.burn_in < 1.0))
    throw ConfigError("'pcp.burn_in' must lie in [0,1)");
  if (pcp.adapt_start < 1) throw ConfigError("'pcp.adapt_start' must be at least 1");
  if (pcp.adapt_interval < 1) throw ConfigError("'pcp.adapt_interval' must be at least 1");
  if (!(pcp.shrink > 0.0 && pcp.shrink < 1.0))
    throw ConfigError("'pcp.shrink' must lie in (0,1)");
  if (!(pcp.init_step > 0.0)) throw ConfigError("'pcp.init_step' must be positive");
  if (method != "bayes" && method != "shp" && method != "pcp")
    throw ConfigError("'method' must be one of bayes, shp, pcp");
  if (threads < 0) throw ConfigError("'threads' must be nonnegative");
  if (!(band_halfwidth > 0.0)) throw ConfigError("'band_halfwidth' must be positive");
}

PipelineConfig config_from_json(const json& j) {
  check_keys(j, "",
             {"hyper", "solver", "newton", "laplace", "prediction", "metrics", "pcp",
              "registration", "method", "likelihood", "seed", "threads", "band_halfwidth"});
  PipelineConfig c;

  if (j.contains("hyper")) c.hyper = region_hyper_from_json(j.at("hyper"), "hyper", c.hyper);
  if (j.contains("solver")) {
    const json& s = j.at("solver");
    check_keys(s, "solver", {"dt", "lin_tol", "max_cg_iters"});
    c.solver.dt = get_num(s, "solver", "dt", c.solver.dt);
    c.solver.lin_tol = get_num(s, "solver", "lin_tol", c.solver.lin_tol);
    c.solver.max_cg_iters = get_int(s, "solver", "max_cg_iters", c.solver.max_cg_iters);
  }
  if (j.contains("newton")) {
    const json& nw = j.at("newton");
    check_keys(nw, "newton",
               {"max_iters", "grad_rtol", "grad_atol", "cg_max_iters", "forcing_max",
                "forcing_exponent", "armijo_c1", "backtrack", "max_backtracks"});
    c.newton.max_iters = get_int(nw, "newton", "max_iters", c.newton.max_iters);
    c.newton.grad_rtol = get_num(nw, "newton", "grad_rtol", c.newton.grad_rtol);
    c.newton.grad_atol = get_num(nw, "newton", "grad_atol", c.newton.grad_atol);
    c.newton.cg_max_iters = get_int(nw, "newton", "cg_max_iters", c.newton.cg_max_iters);
    c.newton.forcing_max = get_num(nw, "newton", "forcing_max", c.newton.forcing_max);
    c.newton.forcing_exponent =
        get_num(nw, "newton", "forcing_exponent", c.newton.forcing_exponent);
    c.newton.armijo_c1 = get_num(nw, "newton", "armijo_c1", c.newton.armijo_c1);
    c.newton.backtrack = get_num(nw, "newton", "backtrack", c.newton.backtrack);
    c.newton.max_backtracks = get_int(nw, "newton", "max_backtracks", c.newton.max_backtracks);
  }
  if (j.contains("laplace")) {
    const json& l = j.at("laplace");
    check_keys(l, "laplace", {"rank", "oversample", "power_iters", "lambda_cut", "max_rank"});
    c.laplace.rank = get_int(l, "laplace", "rank", c.laplace.rank);
    c.laplace.oversample = get_int(l, "laplace", "oversample", c.laplace.oversample);
    c.laplace.power_iters = get_int(l, "laplace", "power_iters", c.laplace.power_iters);
    c.laplace.lambda_cut = get_num(l, "laplace", "lambda_cut", c.laplace.lambda_cut);
    c.laplace.max_rank = get_int(l, "laplace", "max_rank", c.laplace.max_rank);
  }
  if (j.contains("prediction")) {
    const json& p = j.at("prediction");
    check_keys(p, "prediction", {"horizon_days", "n_samples", "cutoff"});
    c.prediction.horizon_days =
        get_darray(p, "prediction", "horizon_days", c.prediction.horizon_days);
    c.prediction.n_samples = get_int(p, "prediction", "n_samples", c.prediction.n_samples);
    c.prediction.cutoff = get_num(p, "prediction", "cutoff", c.prediction.cutoff);
  }
  if (j.contains("metrics")) {
    const json& m = j.at("metrics");
    check_keys(m, "metrics", {"model_cutoff", "data_dice_cutoff", "data_nta_cutoff"});
    c.cutoffs.model = get_num(m, "metrics", "model_cutoff", c.cutoffs.model);
    c.cutoffs.data_dice = get_num(m, "metrics", "data_dice_cutoff", c.cutoffs.data_dice);
    c.cutoffs.data_nta = get_num(m, "metrics", "data_nta_cutoff", c.cutoffs.data_nta);
  }
  if (j.contains("pcp")) {
    const json& p = j.at("pcp");
    check_keys(p, "pcp",
               {"chain_length", "burn_in", "adapt_start", "adapt_interval", "shrink",
                "init_step"});
    c.pcp.chain_length = get_int(p, "pcp", "chain_length", c.pcp.chain_length);
    c.pcp.burn_in = get_num(p, "pcp", "burn_in", c.pcp.burn_in);
    c.pcp.adapt_start = get_int(p, "pcp", "adapt_start", c.pcp.adapt_start);
    c.pcp.adapt_interval = get_int(p, "pcp", "adapt_interval", c.pcp.adapt_interval);
    c.pcp.shrink = get_num(p, "pcp", "shrink", c.pcp.shrink);
    c.pcp.init_step = get_num(p, "pcp", "init_step", c.pcp.init_step);
  }
  if (j.contains("registration")) {
    const json& r = j.at("registration");
    check_keys(r, "registration", {"iterations", "smoothing_sigma", "max_step", "mse_rel_tol"});
    c.registration.iterations = get_int(r, "registration", "iterations", c.registration.iterations);
    c.registration.smoothing_sigma =
        get_num(r, "registration", "smoothing_sigma", c.registration.smoothing_sigma);
    c.registration.max_step = get_num(r, "registration", "max_step", c.registration.max_step);
    c.registration.mse_rel_tol =
        get_num(r, "registration", "mse_rel_tol", c.registration.mse_rel_tol);
  }
  c.method = get_str(j, "", "method", c.method);
  const std::string lik = get_str(j, "", "likelihood", c.half_convention ? "half" : "full");
  if (lik == "half") {
    c.half_convention = true;
  } else if (lik == "full") {
    c.half_convention = false;
  } else {
    throw ConfigError("'likelihood' must be 'half' or 'full'");
  }
  c.seed = get_u64(j, "", "seed", c.seed);
  c.threads = get_int(j, "", "threads", c.threads);
  c.band_halfwidth = get_num(j, "", "band_halfwidth", c.band_halfwidth);

  c.validate();
  return c;
}

PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

json config_to_json(const PipelineConfig& c) {
  json j;
  j["hyper"] = region_hyper_to_json(c.hyper);
  j["solver"] = {{"dt", c.solver.dt},
                 {"lin_tol", c.solver.lin_tol},
                 {"max_cg_iters", c.solver.max_cg_iters}};
  j["newton"] = {{"max_iters", c.newton.max_iters},
                 {"grad_rtol", c.newton.grad_rtol},
                 {"grad_atol", c.newton.grad_atol},
                 {"cg_max_iters", c.newton.cg_max_iters},
                 {"forcing_max", c.newton.forcing_max},
                 {"forcing_exponent", c.newton.forcing_exponent},
                 {"armijo_c1", c.newton.armijo_c1},
                 {"backtrack", c.newton.backtrack},
                 {"max_backtracks", c.newton.max_backtracks}};
  j["laplace"] = {{"rank", c.laplace.rank},
                  {"oversample", c.laplace.oversample},
                  {"power_iters", c.laplace.power_iters},
                  {"lambda_cut", c.laplace.lambda_cut},
                  {"max_rank", c.laplace.max_rank}};
  j["prediction"] = {{"horizon_days", c.prediction.horizon_days},
                     {"n_samples", c.prediction.n_samples},
                     {"cutoff", c.prediction.cutoff}};
  j["metrics"] = {{"model_cutoff", c.cutoffs.model},
                  {"data_dice_cutoff", c.cutoffs.data_dice},
                  {"data_nta_cutoff", c.cutoffs.data_nta}};
  j["pcp"] = {{"chain_length", c.pcp.chain_length},
              {"burn_in", c.pcp.burn_in},
              {"adapt_start", c.pcp.adapt_start},
              {"adapt_interval", c.pcp.adapt_interval},
              {"shrink", c.pcp.shrink},
              {"init_step", c.pcp.init_step}};
  j["registration"] = {{"iterations", c.registration.iterations},
                       {"smoothing_sigma", c.registration.smoothing_sigma},
                       {"max_step", c.registration.max_step},
                       {"mse_rel_tol", c.registration.mse_rel_tol}};
  j["method"] = c.method;
  j["likelihood"] = c.half_convention ? "half" : "full";
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["band_halfwidth"] = c.band_halfwidth;
  return j;
}

int resolve_threads(int configured) {
  if (configured > 0) return configured;
  if (const char* env = std::getenv("GLIOCAL_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end && *end == '\0' && v > 0) return static_cast<int>(v);
  }
  return 1;
}

std::string config_schema_json() {
  // Kept in sync with schema/config.schema.json by a unit test.
  return R"JSON({
  "$schema": "http://json-schema.org/draft-07/schema#",
  "title": "gliocal pipeline configuration",
  "type": "object",
  "additionalProperties": false,
  "properties": {
    "hyper": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "logD": {"$ref": "#/definitions/field_hyper"},
        "logG": {"$ref": "#/definitions/field_hyper"},
        "rho_gm": {"type": "number", "exclusiveMinimum": 0},
        "rho_wm": {"type": "number", "exclusiveMinimum": 0},
        "rho_interface": {"type": "number", "exclusiveMinimum": 0},
        "sigma2_noise": {"type": "number", "exclusiveMinimum": 0}
      }
    },
    "solver": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "lin_tol": {"type": "number", "exclusiveMinimum": 0},
        "max_cg_iters": {"type": "integer", "minimum": 1}
      }
    },
    "newton": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "max_iters": {"type": "integer", "minimum": 1},
        "grad_rtol": {"type": "number", "exclusiveMinimum": 0},
        "grad_atol": {"type": "number", "minimum": 0},
        "cg_max_iters": {"type": "integer", "minimum": 1},
        "forcing_max": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "forcing_exponent": {"type": "number", "exclusiveMinimum": 0},
        "armijo_c1": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "backtrack": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "max_backtracks": {"type": "integer", "minimum": 0}
      }
    },
    "laplace": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "rank": {"type": "integer", "minimum": -1},
        "oversample": {"type": "integer", "minimum": 0},
        "power_iters": {"type": "integer", "minimum": 0},
        "lambda_cut": {"type": "number", "exclusiveMinimum": 0},
        "max_rank": {"type": "integer", "minimum": 0}
      }
    },
    "prediction": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "horizon_days": {"type": "array", "items": {"type": "number"}},
        "n_samples": {"type": "integer", "minimum": 0},
        "cutoff": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
      }
    },
    "metrics": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "model_cutoff": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "data_dice_cutoff": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "data_nta_cutoff": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}
      }
    },
    "pcp": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "chain_length": {"type": "integer", "minimum": 1},
        "burn_in": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adapt_start": {"type": "integer", "minimum": 1},
        "adapt_interval": {"type": "integer", "minimum": 1},
        "shrink": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "init_step": {"type": "number", "exclusiveMinimum": 0}
      }
    },
    "registration": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "iterations": {"type": "integer", "minimum": 1},
        "smoothing_sigma": {"type": "number", "minimum": 0},
        "max_step": {"type": "number", "exclusiveMinimum": 0},
        "mse_rel_tol": {"type": "number", "minimum": 0}
      }
    },
    "method": {"enum": ["bayes", "shp", "pcp"]},
    "likelihood": {"enum": ["half", "full"]},
    "seed": {"type": "integer", "minimum": 0},
    "threads": {"type": "integer", "minimum": 0},
    "band_halfwidth": {"type": "number", "exclusiveMinimum": 0}
  },
  "definitions": {
    "field_hyper": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "mean_gm": {"type": "number"},
        "mean_wm": {"type": "number"},
        "var_gm": {"type": "number", "exclusiveMinimum": 0},
        "var_wm": {"type": "number", "exclusiveMinimum": 0}
      }
    }
  }
}
)JSON";
}

}  // namespace gliocal
