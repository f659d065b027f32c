#pragma once

#include "newtonflow/core.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace newtonflow::cli {

/// Invalid or incomplete configuration. `line` is 0 when the problem is not
/// tied to a line (missing keys, cross-key checks).
class ConfigError : public Error {
 public:
  ConfigError(std::string key, int line, const std::string& message)
      : Error(message), key_(std::move(key)), line_(line) {}
  const char* kind() const noexcept override { return "config"; }
  const std::string& key() const { return key_; }
  int line() const { return line_; }

 private:
  std::string key_;
  int line_;
};

inline const std::set<std::string>& known_commands() {
  static const std::set<std::string> c{"simulate-particles", "solve-pde", "compare", "glm-demo", "lemma-tests",
                                       "momenta"};
  return c;
}

struct GlmSpec {
  long n = 200;
  std::vector<double> beta_star;
  std::optional<std::uint64_t> seed;
  std::string law = "standard_normal";
};

struct GridConfig {
  std::vector<double> lower;
  std::vector<double> dx;
  std::vector<long> cells;
};

struct RunConfig {
  std::string command;
  std::string field_key;
  std::uint64_t seed = 20240101;
  std::optional<GlmSpec> glm;
  std::optional<GridConfig> grid;
  std::optional<double> dt;
  std::optional<double> t_end;
  std::vector<double> snapshots;
  double cfl = 0.9;
  std::string scheme = "donor-cell";
  std::vector<double> init_mean;
  std::vector<double> init_sd;
  std::optional<long> particles;
  std::optional<std::uint64_t> particle_seed;
  std::string method = "rk4";
  long replications = 1000;
  std::vector<double> center;
  std::optional<double> sigma;
  long halvings = 2;
  std::string output_dir = "out";

  std::uint64_t glm_seed() const { return glm && glm->seed ? *glm->seed : derive_seed(seed, 0); }
  std::uint64_t particles_seed() const { return particle_seed ? *particle_seed : derive_seed(seed, 1); }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Line {
  std::string value;
  int number;
};

inline double to_real(const std::string& key, const Line& l, const std::string& tok) {
  const auto v = parse_real(tok);
  if (!v)
    throw ConfigError(key, l.number, "line " + std::to_string(l.number) + ": key '" + key + "' expects a number, got '" +
                                         trim(tok) + "'");
  return *v;
}

inline long to_integer(const std::string& key, const Line& l, const std::string& tok) {
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(tok, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || trim(tok.substr(used)) != "")
    throw ConfigError(key, l.number, "line " + std::to_string(l.number) + ": key '" + key +
                                         "' expects an integer, got '" + trim(tok) + "'");
  return v;
}

inline std::uint64_t to_unsigned(const std::string& key, const Line& l, const std::string& tok) {
  const std::string t = trim(tok);
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    if (!t.empty() && t[0] != '-') v = std::stoull(t, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != t.size())
    throw ConfigError(key, l.number, "line " + std::to_string(l.number) + ": key '" + key +
                                         "' expects an unsigned integer, got '" + t + "'");
  return v;
}

inline std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(trim(tok));
  return out;
}

inline std::vector<double> to_reals(const std::string& key, const Line& l) {
  std::vector<double> out;
  for (const auto& t : split(l.value)) out.push_back(to_real(key, l, t));
  if (out.empty()) throw ConfigError(key, l.number, "line " + std::to_string(l.number) + ": key '" + key + "' is empty");
  return out;
}

inline std::vector<long> to_integers(const std::string& key, const Line& l) {
  std::vector<long> out;
  for (const auto& t : split(l.value)) out.push_back(to_integer(key, l, t));
  if (out.empty()) throw ConfigError(key, l.number, "line " + std::to_string(l.number) + ": key '" + key + "' is empty");
  return out;
}

}  // namespace detail

/// `key = value` lines; '#' starts a comment; vectors are comma-separated.
/// Unknown and duplicate keys are rejected with their line number.
inline RunConfig parse_config(const std::string& text) {
  static const std::set<std::string> keys{
      "command", "field",   "seed",     "glm_n",         "beta_star", "glm_seed",     "covariate_law",
      "grid_lower", "grid_dx", "grid_cells", "dt",       "t_end",     "snapshots",    "cfl",
      "scheme",  "init_mean", "init_sd", "particles",    "particle_seed", "method",   "replications",
      "center",  "sigma",   "halvings", "output_dir"};
  std::map<std::string, detail::Line> kv;
  std::stringstream in(text);
  std::string raw;
  int number = 0;
  while (std::getline(in, raw)) {
    ++number;
    const std::string line = detail::trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("", number, "line " + std::to_string(number) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (!keys.count(key)) throw ConfigError(key, number, "line " + std::to_string(number) + ": unknown key '" + key + "'");
    if (kv.count(key))
      throw ConfigError(key, number, "line " + std::to_string(number) + ": duplicate key '" + key + "' (first on line " +
                                         std::to_string(kv[key].number) + ")");
    kv[key] = {value, number};
  }

  RunConfig c;
  auto has = [&](const char* k) { return kv.count(k) > 0; };
  if (has("command")) {
    c.command = kv["command"].value;
    if (!known_commands().count(c.command))
      throw ConfigError("command", kv["command"].number, "line " + std::to_string(kv["command"].number) +
                                                             ": unknown command '" + c.command + "'");
  }
  if (has("field")) c.field_key = kv["field"].value;
  if (has("seed")) c.seed = detail::to_unsigned("seed", kv["seed"], kv["seed"].value);
  if (has("glm_n") || has("beta_star") || has("glm_seed") || has("covariate_law")) {
    GlmSpec g;
    if (has("glm_n")) g.n = detail::to_integer("glm_n", kv["glm_n"], kv["glm_n"].value);
    if (has("beta_star")) g.beta_star = detail::to_reals("beta_star", kv["beta_star"]);
    if (has("glm_seed")) g.seed = detail::to_unsigned("glm_seed", kv["glm_seed"], kv["glm_seed"].value);
    if (has("covariate_law")) g.law = kv["covariate_law"].value;
    c.glm = g;
  }
  if (has("grid_lower") || has("grid_dx") || has("grid_cells")) {
    GridConfig g;
    if (has("grid_lower")) g.lower = detail::to_reals("grid_lower", kv["grid_lower"]);
    if (has("grid_dx")) g.dx = detail::to_reals("grid_dx", kv["grid_dx"]);
    if (has("grid_cells")) g.cells = detail::to_integers("grid_cells", kv["grid_cells"]);
    c.grid = g;
  }
  auto real = [&](const char* k) { return detail::to_real(k, kv[k], kv[k].value); };
  if (has("dt")) c.dt = real("dt");
  if (has("t_end")) c.t_end = real("t_end");
  if (has("snapshots")) c.snapshots = detail::to_reals("snapshots", kv["snapshots"]);
  if (has("cfl")) c.cfl = real("cfl");
  if (has("scheme")) c.scheme = kv["scheme"].value;
  if (has("init_mean")) c.init_mean = detail::to_reals("init_mean", kv["init_mean"]);
  if (has("init_sd")) c.init_sd = detail::to_reals("init_sd", kv["init_sd"]);
  if (has("particles")) c.particles = detail::to_integer("particles", kv["particles"], kv["particles"].value);
  if (has("particle_seed"))
    c.particle_seed = detail::to_unsigned("particle_seed", kv["particle_seed"], kv["particle_seed"].value);
  if (has("method")) c.method = kv["method"].value;
  if (has("replications"))
    c.replications = detail::to_integer("replications", kv["replications"], kv["replications"].value);
  if (has("center")) c.center = detail::to_reals("center", kv["center"]);
  if (has("sigma")) c.sigma = real("sigma");
  if (has("halvings")) c.halvings = detail::to_integer("halvings", kv["halvings"], kv["halvings"].value);
  if (has("output_dir")) c.output_dir = kv["output_dir"].value;
  return c;
}

/// Resolved configuration as sorted `key=value` lines (numbers with 17
/// significant digits), used verbatim in the run manifest.
inline std::string resolved_text(const RunConfig& c) {
  std::map<std::string, std::string> out;
  auto ints = [](const std::vector<long>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  out["command"] = c.command;
  out["field"] = c.field_key;
  out["seed"] = std::to_string(c.seed);
  if (c.glm) {
    out["glm_n"] = std::to_string(c.glm->n);
    out["beta_star"] = join17(c.glm->beta_star);
    out["glm_seed"] = std::to_string(c.glm_seed());
    out["covariate_law"] = c.glm->law;
  }
  if (c.grid) {
    out["grid_lower"] = join17(c.grid->lower);
    out["grid_dx"] = join17(c.grid->dx);
    out["grid_cells"] = ints(c.grid->cells);
  }
  if (c.dt) out["dt"] = fmt17(*c.dt);
  if (c.t_end) out["t_end"] = fmt17(*c.t_end);
  if (!c.snapshots.empty()) out["snapshots"] = join17(c.snapshots);
  out["cfl"] = fmt17(c.cfl);
  out["scheme"] = c.scheme;
  if (!c.init_mean.empty()) out["init_mean"] = join17(c.init_mean);
  if (!c.init_sd.empty()) out["init_sd"] = join17(c.init_sd);
  if (c.particles) {
    out["particles"] = std::to_string(*c.particles);
    out["particle_seed"] = std::to_string(c.particles_seed());
  }
  out["method"] = c.method;
  out["replications"] = std::to_string(c.replications);
  if (!c.center.empty()) out["center"] = join17(c.center);
  if (c.sigma) out["sigma"] = fmt17(*c.sigma);
  out["halvings"] = std::to_string(c.halvings);
  out["output_dir"] = c.output_dir;
  std::string text;
  for (const auto& [k, v] : out) text += k + "=" + v + "\n";
  return text;
}

}  // namespace newtonflow::cli
