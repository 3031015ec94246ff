#pragma once
// Experiment orchestration behind the CLI: strict JSON configs, the model
// assumption audit, runners for the estimation/sweep/table subcommands, and
// report/CSV writers. Every run is a pure function of (config, seed-base);
// worker count only changes wall-clock, never bytes in the CSV outputs.

#include "kernelflow/diff_chain.hpp"
#include "kernelflow/quenched_field.hpp"
#include "kernelflow/she_oracle.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace kflow {

inline const char* toolkit_version() { return "0.1.0"; }

struct ValidationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EstimatorDisagreement : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ==== config ====

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const char* what,
                                std::initializer_list<const char*> known) {
  for (const auto& [key, _] : j.items())
    if (std::find_if(known.begin(), known.end(),
                     [&](const char* k) { return key == k; }) == known.end())
      throw ConfigError(std::string(what) + ": unknown key '" + key + "'");
}

}  // namespace detail

inline TestFn phi_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("type")) throw ConfigError("phi spec needs a type");
  detail::reject_unknown_keys(j, "phi", {"type", "center", "eps", "width"});
  const std::string type = j.at("type").get<std::string>();
  if (type == "one") return const_one();
  if (type == "gauss")
    return gaussian_bump(j.value("center", 0.0), j.value("eps", 0.5));
  if (type == "c2")
    return c2_bump(j.value("center", 0.0), j.value("width", 1.0));
  throw ConfigError("unknown phi type: " + type);
}

// One experiment = one config file. `kind` picks the runner; the runner reads
// only the fields its kind allows, everything else is rejected up front.
struct ExperimentConfig {
  std::string kind;
  nlohmann::json raw;  // echoed into reports
  nlohmann::json model_json;
  std::string config_dir;
  double t = 1.0;
  std::vector<std::int64_t> n_grid;
  std::vector<int> k_list;
  nlohmann::json phi_json;
  std::int64_t n_env = 0;
  std::vector<std::uint64_t> seeds;
  std::int64_t steps = 0;
  std::int64_t oracle_paths = 100000;
  double oracle_mesh = 1e-3;
  nlohmann::json oracle_query;
  std::uint64_t seed_base = 0;

  ModelSpec load_model(bool allow_periodic = false) const {
    if (model_json.is_string()) {
      std::filesystem::path p = model_json.get<std::string>();
      if (p.is_relative()) p = std::filesystem::path(config_dir) / p;
      return load_model_file(p.string(), allow_periodic);
    }
    return model_from_json(model_json, allow_periodic);
  }
  std::uint64_t seed_at(std::size_t i) const { return seeds.at(i) ^ seed_base; }
};

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j,
                                                const std::string& config_dir,
                                                std::uint64_t seed_base) {
  if (!j.is_object()) throw ConfigError("experiment config must be an object");
  static const std::set<std::string> kinds = {
      "validate-model", "estimate-gamma", "moment-sweep",   "drift-table",
      "diffchain-stats", "oracle",        "cumulant-audit"};
  detail::reject_unknown_keys(j, "experiment config",
                              {"schema_version", "kind", "model", "t", "n_grid", "k_list",
                               "phi", "n_env", "seeds", "steps", "oracle_paths",
                               "oracle_mesh", "oracle"});
  if (j.value("schema_version", 0) != 1) throw ConfigError("schema_version must be 1");
  ExperimentConfig c;
  c.raw = j;
  c.config_dir = config_dir;
  c.seed_base = seed_base;
  c.kind = j.value("kind", std::string());
  if (kinds.find(c.kind) == kinds.end()) throw ConfigError("unknown kind: '" + c.kind + "'");

  const bool needs_model = c.kind != "oracle";
  if (needs_model) {
    if (!j.contains("model")) throw ConfigError(c.kind + " config needs a model");
    c.model_json = j.at("model");
  } else if (j.contains("model")) {
    c.model_json = j.at("model");
  }

  if (j.contains("t")) {
    c.t = j.at("t").get<double>();
    if (!(c.t > 0.0)) throw ConfigError("t must be positive");
  }
  if (j.contains("n_grid")) {
    c.n_grid = j.at("n_grid").get<std::vector<std::int64_t>>();
    if (c.n_grid.empty()) throw ConfigError("n_grid must be nonempty");
    for (std::int64_t n : c.n_grid)
      if (n < 2 || (n & (n - 1)) != 0)
        throw ConfigError("n_grid entries must be powers of two, got " + std::to_string(n));
  }
  if (j.contains("k_list")) {
    c.k_list = j.at("k_list").get<std::vector<int>>();
    for (int k : c.k_list)
      if (k < 1 || k > 4) throw ConfigError("k_list entries must lie in 1..4");
  }
  if (j.contains("phi")) c.phi_json = j.at("phi");
  if (j.contains("n_env")) {
    c.n_env = j.at("n_env").get<std::int64_t>();
    if (c.n_env < 2) throw ConfigError("n_env must be at least 2");
  }
  if (j.contains("seeds")) {
    c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    std::set<std::uint64_t> uniq(c.seeds.begin(), c.seeds.end());
    if (uniq.size() != c.seeds.size()) throw ConfigError("seeds must be pairwise distinct");
  }
  if (j.contains("steps")) {
    c.steps = j.at("steps").get<std::int64_t>();
    if (c.steps < 10000) throw ConfigError("steps must be at least 10^4");
  }
  if (j.contains("oracle_paths")) c.oracle_paths = j.at("oracle_paths").get<std::int64_t>();
  if (j.contains("oracle_mesh")) c.oracle_mesh = j.at("oracle_mesh").get<double>();
  if (j.contains("oracle")) c.oracle_query = j.at("oracle");

  // kind-specific required fields
  auto need = [&](bool ok, const char* what) {
    if (!ok) throw ConfigError(c.kind + " config needs " + std::string(what));
  };
  if (c.kind == "estimate-gamma" || c.kind == "diffchain-stats") {
    need(c.steps > 0, "steps");
    need(!c.seeds.empty(), "seeds");
  } else if (c.kind == "moment-sweep") {
    need(!c.n_grid.empty(), "n_grid");
    need(!c.k_list.empty(), "k_list");
    need(!c.phi_json.is_null(), "phi");
    need(c.n_env >= 2, "n_env");
    need(!c.seeds.empty(), "seeds");
  } else if (c.kind == "drift-table") {
    need(!c.n_grid.empty(), "n_grid");
  } else if (c.kind == "oracle") {
    need(c.oracle_query.is_object(), "an oracle query object");
  }
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path,
                                               std::uint64_t seed_base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad JSON in " + path + ": " + e.what());
  }
  return parse_experiment_config(j, std::filesystem::path(path).parent_path().string(),
                                 seed_base);
}

// ==== report ====

struct Report {
  std::string kind;
  std::string version = toolkit_version();
  double wall_clock_seconds = 0.0;
  int workers = 1;
  std::uint64_t seed_base = 0;
  nlohmann::json config_echo;
  std::vector<nlohmann::json> rows;
  std::vector<std::string> failed_checks;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["type"] = "report";
    j["kind"] = kind;
    j["toolkit_version"] = version;
    j["wall_clock_seconds"] = wall_clock_seconds;
    j["workers"] = workers;
    j["seed_base"] = seed_base;
    j["config"] = config_echo;
    j["rows"] = rows;
    j["failed_checks"] = failed_checks;
    return j;
  }
  static Report from_json(const nlohmann::json& j) {
    if (j.value("type", std::string()) != "report" || j.value("schema_version", 0) != 1)
      throw ConfigError("not a schema-1 report");
    Report r;
    r.kind = j.at("kind").get<std::string>();
    r.version = j.at("toolkit_version").get<std::string>();
    r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
    r.workers = j.at("workers").get<int>();
    r.seed_base = j.at("seed_base").get<std::uint64_t>();
    r.config_echo = j.at("config");
    r.rows = j.at("rows").get<std::vector<nlohmann::json>>();
    r.failed_checks = j.at("failed_checks").get<std::vector<std::string>>();
    return r;
  }
};

namespace detail {

// fixed double -> text for CSV cells: shortest form that still round-trips
inline std::string csv_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct CsvWriter {
  std::ofstream out;
  CsvWriter(const std::filesystem::path& dir, const std::string& file,
            const std::string& header) {
    std::filesystem::create_directories(dir);
    const auto path = dir / file;
    out.open(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("output directory not writable: " + path.string());
    out << header << "\n";
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << "\n";
  }
};

inline std::uint64_t cell_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  return mix64(mix64(base ^ (a * 0x9e3779b97f4a7c15ULL)) ^ (b * 0xbf58476d1ce4e5b9ULL));
}

}  // namespace detail

inline void write_report(const Report& r, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ofstream out(out_dir / "report.json", std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("output directory not writable: " + out_dir.string());
  out << r.to_json().dump(2) << "\n";
}

// ==== model audit ====

struct AuditItem {
  int item = 0;
  std::string name;
  bool pass = false;
  std::string detail;
};

// Six checks on the standing assumptions, ordered so that the one a raw
// (unreduced) nearest-neighbor config trips is item 6.
inline std::vector<AuditItem> model_audit(const ModelSpec& m) {
  std::vector<AuditItem> items;
  const int p = m.symmetry_order_p;
  const std::int64_t range = dependence_range(m);
  const std::int64_t span = offset_span(m);
  const auto mu = annealed_pmf(m);

  {  // 1: row moments are deterministic strictly below order p, random at p
    double below = 0.0;
    auto moment_var = [&](int j) {
      std::vector<std::int64_t> ms;
      double var = 0.0;
      for (const auto& [oa, pa] : mu)
        for (const auto& [ob, pb] : mu) {
          const double cross = row_moment(m, {oa, ob});
          var += std::pow(static_cast<double>(oa), j) * std::pow(static_cast<double>(ob), j) *
                 (cross - pa * pb);
        }
      return var;
    };
    for (int j = 1; j < p; ++j) below = std::max(below, std::abs(moment_var(j)));
    const double at_p = moment_var(p);
    const bool ok = p >= 1 && below <= 1e-12 && at_p > 1e-12;
    items.push_back({1, "symmetry_order",
                     ok,
                     "p = " + std::to_string(p) + ", max var below p = " +
                         detail::csv_num(below) + ", var at p = " + detail::csv_num(at_p)});
  }

  {  // 2: joint tables are consistent: unit mass, annealed marginals, and
     //    dropping a far walker projects the triple table onto the pair table
    double worst = 0.0;
    const std::int64_t far = 3 * range + 7;
    for (std::int64_t g = 0; g <= range + 1; ++g) {
      const JointStepPMF pair = joint_kernel_pmf(m, {0, g});
      const JointStepPMF triple = joint_kernel_pmf(m, {0, g, far});
      double tot = 0.0;
      std::map<std::int64_t, double> marg0, marg1;
      std::map<std::pair<std::int64_t, std::int64_t>, double> proj;
      for (const auto& [t, pr] : triple.table) {
        tot += pr;
        marg0[t[0]] += pr;
        marg1[t[1]] += pr;
        proj[{t[0], t[1]}] += pr;
      }
      worst = std::max(worst, std::abs(tot - 1.0));
      for (const auto& [o, pr] : mu) {
        worst = std::max(worst, std::abs(marg0[o] - pr));
        worst = std::max(worst, std::abs(marg1[o] - pr));
      }
      for (const auto& [t, pr] : pair.table)
        worst = std::max(worst, std::abs(proj[{t[0], t[1]}] - pr));
    }
    items.push_back({2, "projectivity", worst <= 1e-12,
                     "worst marginal/projection gap = " + detail::csv_num(worst)});
  }

  {  // 3: mixed cumulants of order < 2p vanish; at 2p only the p|p split lives
    double stray = 0.0;
    double pp_at_zero = 0.0;
    for (std::int64_t g = 0; g <= range; ++g) {
      for (int order = 2; order <= 2 * p; ++order)
        for (int r1 = 1; r1 < order; ++r1) {
          const int r2 = order - r1;
          std::vector<int> idx(static_cast<std::size_t>(order), 0);
          for (int i = r1; i < order; ++i) idx[static_cast<std::size_t>(i)] = 1;
          const double kappa = joint_cumulant(m, idx, {0, g});
          if (order == 2 * p && r1 == p) {
            if (g == 0) pp_at_zero = kappa;
          } else {
            stray = std::max(stray, std::abs(kappa));
          }
        }
    }
    const bool ok = stray <= 1e-12 && std::abs(pp_at_zero) > 1e-13;
    items.push_back({3, "cumulant_vanishing", ok,
                     "max stray = " + detail::csv_num(stray) +
                         ", p|p at gap 0 = " + detail::csv_num(pp_at_zero)});
  }

  {  // 4: joint moments factorize beyond the declared dependence range
    double worst = 0.0;
    const auto prof = decay_profile(m, 2, {range + 1, range + 2, 2 * range + 3});
    for (const auto& pt : prof) worst = std::max(worst, pt.value);
    items.push_back({4, "correlation_decay", worst <= 1e-12,
                     "worst joint-vs-independent gap beyond range = " + detail::csv_num(worst)});
  }

  {  // 5: the gap chain preserves the mean exactly at every separation
    double worst = 0.0;
    for (std::int64_t x = -(range + span + 2); x <= range + span + 2; ++x) {
      const DiffKernelRow row = diff_kernel(m, x);
      KahanSum mean;
      for (const auto& [y, pr] : row.law.masses) mean.add(pr * static_cast<double>(y));
      worst = std::max(worst, std::abs(mean.value() - static_cast<double>(x)));
    }
    items.push_back({5, "gap_chain_mean", worst <= 1e-12,
                     "worst |E[X_1] - x| = " + detail::csv_num(worst)});
  }

  {  // 6: the gap chain reaches the origin from every nearby start
    const std::int64_t window = range + span + 2;
    const std::int64_t bound = window + 4 * span + 8;
    std::vector<std::int64_t> stranded;
    for (std::int64_t x0 = 0; x0 <= window; ++x0) {
      std::set<std::int64_t> seen{x0};
      std::vector<std::int64_t> frontier{x0};
      bool hit = x0 == 0;
      while (!hit && !frontier.empty()) {
        std::vector<std::int64_t> next_frontier;
        for (std::int64_t x : frontier)
          for (const auto& [y, pr] : diff_kernel(m, x).law.masses) {
            if (pr <= 0.0 || std::llabs(y) > bound || seen.count(y)) continue;
            if (y == 0) hit = true;
            seen.insert(y);
            next_frontier.push_back(y);
          }
        frontier.swap(next_frontier);
      }
      if (!hit) stranded.push_back(x0);
    }
    std::string det = "starts reaching 0: all";
    if (!stranded.empty()) {
      det = "starts never reaching 0:";
      for (std::int64_t x : stranded) det += " " + std::to_string(x);
    }
    items.push_back({6, "gap_chain_irreducible", stranded.empty(), det});
  }

  return items;
}

// ==== runners ====

inline Report run_validate_model(const ExperimentConfig& cfg) {
  Report rep;
  rep.kind = cfg.kind;
  rep.config_echo = cfg.raw;
  const ModelSpec m = cfg.load_model(/*allow_periodic=*/true);
  for (const AuditItem& it : model_audit(m)) {
    rep.rows.push_back({{"item", it.item},
                        {"name", it.name},
                        {"pass", it.pass},
                        {"detail", it.detail},
                        {"model", m.name}});
    if (!it.pass)
      rep.failed_checks.push_back("item " + std::to_string(it.item) + " (" + it.name + ")");
  }
  return rep;
}

inline Report run_estimate_gamma(const ExperimentConfig& cfg,
                                 const std::filesystem::path& out_dir, int workers) {
  Report rep;
  rep.kind = cfg.kind;
  rep.config_echo = cfg.raw;
  const ModelSpec m = cfg.load_model();
  const double exact = gamma_ext_sq_exact(m);
  std::vector<Estimate> est(cfg.seeds.size());
  detail::run_indexed(static_cast<std::int64_t>(cfg.seeds.size()), workers,
                      [&](std::int64_t i, int) {
                        const auto si = static_cast<std::size_t>(i);
                        est[si] = gamma_ext_sq(m, cfg.steps, cfg.seed_at(si));
                      });
  detail::CsvWriter csv(out_dir, "estimate_gamma.csv",
                        "model,p,seed,steps,gamma_ext_sq,stderr,oracle_value,oracle_method,"
                        "z_score");
  for (std::size_t i = 0; i < est.size(); ++i) {
    const Estimate& e = est[i];
    const double z = e.se > 0.0 ? std::abs(e.value - exact) / e.se : 0.0;
    csv.row({m.name, std::to_string(m.symmetry_order_p), std::to_string(cfg.seeds[i]),
             std::to_string(cfg.steps), detail::csv_num(e.value), detail::csv_num(e.se),
             detail::csv_num(exact), "closed_form", detail::csv_num(z)});
    rep.rows.push_back({{"model", m.name},
                        {"p", m.symmetry_order_p},
                        {"seed", cfg.seeds[i]},
                        {"steps", cfg.steps},
                        {"gamma_ext_sq", e.value},
                        {"stderr", e.se},
                        {"oracle_value", exact},
                        {"oracle_method", "closed_form"},
                        {"z_score", z}});
  }
  return rep;
}

inline Report run_moment_sweep(const ExperimentConfig& cfg,
                               const std::filesystem::path& out_dir, int workers) {
  Report rep;
  rep.kind = cfg.kind;
  rep.config_echo = cfg.raw;
  const ModelSpec m = cfg.load_model();
  const TestFn phi = phi_from_json(cfg.phi_json);

  // oracle per k, shared across the N grid
  std::map<int, std::pair<double, std::string>> oracle;  // value, method
  std::map<int, double> oracle_err;
  for (int k : cfg.k_list) {
    if (oracle.count(k)) continue;
    if (k == 1) {
      const OracleResult o = she_moment_k1(cfg.t, phi);
      oracle[k] = {o.value, o.method};
      oracle_err[k] = o.error_bound;
    } else if (k == 2) {
      const OracleResult o = she_moment_k2(cfg.t, phi, gamma_ext_sq_exact(m));
      oracle[k] = {o.value, o.method};
      oracle_err[k] = o.error_bound;
    } else {
      const Estimate o = mc_localtime(k, cfg.t, gamma_ext_sq_exact(m), phi, cfg.oracle_paths,
                                      cfg.oracle_mesh, detail::cell_seed(cfg.seed_base, 77, k));
      oracle[k] = {o.value, "monte_carlo"};
      oracle_err[k] = o.se;
    }
  }

  struct Cell {
    std::int64_t n = 0;
    int k = 0;
    MomentEstimate me;
  };
  std::vector<Cell> cells;
  for (std::int64_t n : cfg.n_grid)
    for (int k : cfg.k_list) cells.push_back({n, k, {}});
  // one cell at a time; the environment replicas inside each cell fan out
  for (auto& c : cells) {
    const std::uint64_t s =
        detail::cell_seed(cfg.seed_at(0), static_cast<std::uint64_t>(c.n),
                          static_cast<std::uint64_t>(c.k));
    c.me = moment_estimate(m, c.n, cfg.t, phi, c.k, cfg.n_env, s, workers);
  }

  detail::CsvWriter csv(out_dir, "moment_sweep.csv",
                        "n,k,estimator,value,stderr,n_env,oracle_value,oracle_method,z_score");
  for (const auto& c : cells) {
    const auto [ov, om] = oracle.at(c.k);
    const double oe = oracle_err.at(c.k);
    for (const Estimate* e : {&c.me.direct, &c.me.tilted}) {
      const double pooled = std::sqrt(e->se * e->se + oe * oe);
      const double z = pooled > 0.0 ? std::abs(e->value - ov) / pooled : 0.0;
      csv.row({std::to_string(c.n), std::to_string(c.k), e->method, detail::csv_num(e->value),
               detail::csv_num(e->se), std::to_string(cfg.n_env), detail::csv_num(ov), om,
               detail::csv_num(z)});
      rep.rows.push_back({{"n", c.n},
                          {"k", c.k},
                          {"estimator", e->method},
                          {"value", e->value},
                          {"stderr", e->se},
                          {"n_env", cfg.n_env},
                          {"oracle_value", ov},
                          {"oracle_method", om},
                          {"z_score", z},
                          {"estimator_agreement_z", c.me.z}});
    }
    if (c.me.disagreement)
      rep.failed_checks.push_back("estimator disagreement at n=" + std::to_string(c.n) +
                                  ", k=" + std::to_string(c.k) +
                                  " (z = " + detail::csv_num(c.me.z) + ")");
  }
  return rep;
}

inline Report run_drift_table(const ExperimentConfig& cfg,
                              const std::filesystem::path& out_dir) {
  Report rep;
  rep.kind = cfg.kind;
  rep.config_echo = cfg.raw;
  const ModelSpec m = cfg.load_model();
  detail::CsvWriter csv(out_dir, "drift_table.csv",
                        "model,p,n,d_n,d_tilde_n,gap_over_sqrt_n,oracle_value,oracle_method");
  for (std::int64_t n : cfg.n_grid) {
    const DriftTable dt = drift_expansion(m, n);
    const double gap =
        (dt.d_n - dt.d_tilde_n) / std::sqrt(static_cast<double>(n));
    csv.row({m.name, std::to_string(dt.p), std::to_string(n), detail::csv_num(dt.d_n),
             detail::csv_num(dt.d_tilde_n), detail::csv_num(gap), detail::csv_num(0.0),
             "closed_form"});
    rep.rows.push_back({{"model", m.name},
                        {"p", dt.p},
                        {"n", n},
                        {"d_n", dt.d_n},
                        {"d_tilde_n", dt.d_tilde_n},
                        {"gap_over_sqrt_n", gap},
                        {"oracle_value", 0.0},
                        {"oracle_method", "closed_form"}});
  }
  return rep;
}

inline Report run_diffchain_stats(const ExperimentConfig& cfg,
                                  const std::filesystem::path& out_dir, int workers) {
  Report rep;
  rep.kind = cfg.kind;
  rep.config_echo = cfg.raw;
  const ModelSpec m = cfg.load_model();

  // exact references from the window solve; unit normalization only matters
  // for gamma, so the pi ratio works on any lattice
  const std::int64_t K = dependence_range(m) + 2 * offset_span(m) + 8;
  const std::vector<double> pi = solve_pi_window(m, K);
  const double pi_ratio_exact =
      pi[static_cast<std::size_t>(K)] / pi[static_cast<std::size_t>(K + 1)];
  const double var = annealed_variance(m) * m.lattice_scale * m.lattice_scale;
  const bool normalized = std::abs(var - 1.0) <= 1e-9;
  const double gamma_exact_val = normalized ? gamma_ext_sq_exact(m) : 0.0;

  struct Row {
    std::string quantity;
    std::uint64_t seed = 0;
    Estimate e;
    double exact = 0.0;
  };
  const std::size_t per_seed = normalized ? 2 : 1;
  std::vector<Row> rows(cfg.seeds.size() * per_seed);
  detail::run_indexed(static_cast<std::int64_t>(cfg.seeds.size()), workers,
                      [&](std::int64_t i, int) {
                        const auto si = static_cast<std::size_t>(i);
                        const std::uint64_t s = cfg.seed_at(si);
                        Row r;
                        r.quantity = "pi0_over_pi1";
                        r.seed = cfg.seeds[si];
                        r.e = estimate_pi_ratio(m, indicator_gap(0), indicator_gap(1),
                                                cfg.steps, s);
                        r.exact = pi_ratio_exact;
                        rows[si * per_seed] = std::move(r);
                        if (normalized) {
                          Row g;
                          g.quantity = "gamma_ext_sq";
                          g.seed = cfg.seeds[si];
                          g.e = gamma_ext_sq(m, cfg.steps, mix64(s ^ 0x5ca1ab1eULL));
                          g.exact = gamma_exact_val;
                          rows[si * per_seed + 1] = std::move(g);
                        }
                      });

  detail::CsvWriter csv(out_dir, "diffchain_stats.csv",
                        "model,quantity,seed,steps,value,stderr,oracle_value,oracle_method,"
                        "z_score");
  for (const Row& r : rows) {
    const double z = r.e.se > 0.0 ? std::abs(r.e.value - r.exact) / r.e.se : 0.0;
    csv.row({m.name, r.quantity, std::to_string(r.seed), std::to_string(cfg.steps),
             detail::csv_num(r.e.value), detail::csv_num(r.e.se), detail::csv_num(r.exact),
             "closed_form", detail::csv_num(z)});
    rep.rows.push_back({{"model", m.name},
                        {"quantity", r.quantity},
                        {"seed", r.seed},
                        {"steps", cfg.steps},
                        {"value", r.e.value},
                        {"stderr", r.e.se},
                        {"oracle_value", r.exact},
                        {"oracle_method", "closed_form"},
                        {"z_score", z}});
  }
  return rep;
}

inline Report run_cumulant_audit(const ExperimentConfig& cfg,
                                 const std::filesystem::path& out_dir) {
  Report rep;
  rep.kind = cfg.kind;
  rep.config_echo = cfg.raw;
  const ModelSpec m = cfg.load_model();
  const int p = m.symmetry_order_p;
  const std::int64_t range = dependence_range(m);
  detail::CsvWriter csv(out_dir, "cumulant_audit.csv",
                        "model,gap,order,indices,value,threshold,pass");
  for (std::int64_t g = 0; g <= range + 1; ++g)
    for (int order = 2; order <= 2 * p; ++order)
      for (int r1 = 1; r1 < order; ++r1) {
        const int r2 = order - r1;
        std::vector<int> idx(static_cast<std::size_t>(order), 0);
        for (int i = r1; i < order; ++i) idx[static_cast<std::size_t>(i)] = 1;
        const double kappa = joint_cumulant(m, idx, {0, g});
        const bool must_vanish = order < 2 * p || r1 != p || g > range;
        const bool pass = must_vanish ? std::abs(kappa) <= 1e-12 : true;
        const std::string pattern = std::to_string(r1) + "|" + std::to_string(r2);
        csv.row({m.name, std::to_string(g), std::to_string(order), pattern,
                 detail::csv_num(kappa), must_vanish ? "1e-12" : "none",
                 pass ? "1" : "0"});
        rep.rows.push_back({{"model", m.name},
                            {"gap", g},
                            {"order", order},
                            {"indices", pattern},
                            {"value", kappa},
                            {"must_vanish", must_vanish},
                            {"pass", pass}});
        if (!pass)
          rep.failed_checks.push_back("cumulant " + pattern + " at gap " + std::to_string(g) +
                                      " = " + detail::csv_num(kappa));
      }
  return rep;
}

inline nlohmann::json run_oracle_query(const ExperimentConfig& cfg) {
  const nlohmann::json& q = cfg.oracle_query;
  detail::reject_unknown_keys(q, "oracle query",
                              {"op", "t", "x", "gamma", "gamma_sq", "phi", "k", "n_paths",
                               "mesh", "seed"});
  const std::string op = q.value("op", std::string());
  const double t = q.value("t", 1.0);
  nlohmann::json out;
  out["op"] = op;
  if (op == "heat_kernel") {
    out["value"] = heat_kernel(t, q.value("x", 0.0));
    out["method"] = "closed_form";
    out["error_bound"] = 0.0;
  } else if (op == "she_moment_k1") {
    const OracleResult r = she_moment_k1(t, phi_from_json(q.at("phi")));
    out["value"] = r.value;
    out["method"] = r.method;
    out["error_bound"] = r.error_bound;
  } else if (op == "she_moment_k2") {
    const OracleResult r =
        she_moment_k2(t, phi_from_json(q.at("phi")), q.at("gamma_sq").get<double>());
    out["value"] = r.value;
    out["method"] = r.method;
    out["error_bound"] = r.error_bound;
  } else if (op == "local_time_mgf") {
    const OracleResult r = local_time_mgf(q.at("gamma").get<double>(), t);
    out["value"] = r.value;
    out["method"] = r.method;
    out["error_bound"] = r.error_bound;
  } else if (op == "mc_localtime") {
    const Estimate e =
        mc_localtime(q.value("k", 2), t, q.at("gamma").get<double>(),
                     q.contains("phi") ? phi_from_json(q.at("phi")) : const_one(),
                     q.value("n_paths", static_cast<std::int64_t>(100000)),
                     q.value("mesh", 1e-3), q.value("seed", static_cast<std::uint64_t>(20240801)));
    out["value"] = e.value;
    out["method"] = "monte_carlo";
    out["error_bound"] = e.se;
    out["n_paths"] = e.n;
  } else {
    throw ConfigError("unknown oracle op: '" + op + "'");
  }
  return out;
}

// ==== plot data ====

// Long-format series from a report: x is log2 of the grid variable, one row
// per numeric result, oracle overlay carried along.
inline void emit_plot_data(const Report& rep, const std::filesystem::path& out_dir) {
  detail::CsvWriter csv(out_dir, "plot_data.csv", "series,x_log2n,y,y_err,oracle_value");
  auto log2_of = [](double v) { return std::log2(v); };
  for (const auto& r : rep.rows) {
    if (rep.kind == "moment-sweep") {
      csv.row({"k" + std::to_string(r.at("k").get<int>()) + "_" +
                   r.at("estimator").get<std::string>(),
               detail::csv_num(log2_of(r.at("n").get<double>())),
               detail::csv_num(r.at("value").get<double>()),
               detail::csv_num(r.at("stderr").get<double>()),
               detail::csv_num(r.at("oracle_value").get<double>())});
    } else if (rep.kind == "estimate-gamma") {
      csv.row({r.at("model").get<std::string>(),
               detail::csv_num(log2_of(r.at("steps").get<double>())),
               detail::csv_num(r.at("gamma_ext_sq").get<double>()),
               detail::csv_num(r.at("stderr").get<double>()),
               detail::csv_num(r.at("oracle_value").get<double>())});
    } else if (rep.kind == "drift-table") {
      csv.row({r.at("model").get<std::string>(),
               detail::csv_num(log2_of(r.at("n").get<double>())),
               detail::csv_num(r.at("gap_over_sqrt_n").get<double>()), detail::csv_num(0.0),
               detail::csv_num(0.0)});
    } else if (rep.kind == "diffchain-stats") {
      csv.row({r.at("model").get<std::string>() + "/" + r.at("quantity").get<std::string>(),
               detail::csv_num(log2_of(r.at("steps").get<double>())),
               detail::csv_num(r.at("value").get<double>()),
               detail::csv_num(r.at("stderr").get<double>()),
               detail::csv_num(r.at("oracle_value").get<double>())});
    }
    // other kinds carry no numeric series; the header-only file is the contract
  }
}

// ==== dispatch ====

inline Report run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                             int workers) {
  const auto t0 = std::chrono::steady_clock::now();
  Report rep;
  if (cfg.kind == "validate-model")
    rep = run_validate_model(cfg);
  else if (cfg.kind == "estimate-gamma")
    rep = run_estimate_gamma(cfg, out_dir, workers);
  else if (cfg.kind == "moment-sweep")
    rep = run_moment_sweep(cfg, out_dir, workers);
  else if (cfg.kind == "drift-table")
    rep = run_drift_table(cfg, out_dir);
  else if (cfg.kind == "diffchain-stats")
    rep = run_diffchain_stats(cfg, out_dir, workers);
  else if (cfg.kind == "cumulant-audit")
    rep = run_cumulant_audit(cfg, out_dir);
  else
    throw ConfigError("kind '" + cfg.kind + "' has no experiment runner");
  rep.workers = workers;
  rep.seed_base = cfg.seed_base;
  rep.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_report(rep, out_dir);
  return rep;
}

}  // namespace kflow
