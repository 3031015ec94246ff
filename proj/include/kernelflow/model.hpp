#pragma once
// Model layer: finite descriptions of random environments (one random
// stochastic row per lattice site and time step) together with exact row
// moments. Three families:
//   * product_iid: each (r, x) draws an independent row from a finite atom
//     list;
//   * landscape: row at x is b(o) * exp(omega_{x+o}) normalized, with scalar
//     omega IID per site, so nearby rows are correlated through the shared
//     window;
//   * two-step reduction: composition of two consecutive product layers,
//     defined for parity-periodic supports (all offsets odd); the composed
//     walk is watched on the even sublattice, relabeled to step gcd 1.
// Continuous weight laws enter as finite atomizations (Gauss-Legendre by
// default, exact for the polynomial moments every downstream computation
// uses; quantile-midpoint atoms available as an alternative). The same atoms
// drive both moments and sampling so empirical laws match exact ones.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "kernelflow/numerics.hpp"
#include "kernelflow/rng.hpp"

namespace kflow {

struct DegenerateModel : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct PeriodicSupport : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ZeroVariance : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UnsupportedOffset : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Probabilities aligned with ModelSpec::offsets.
struct RowPMF {
  std::vector<double> p;
};

// Finite atomic law of a scalar weight.
struct ScalarLaw {
  std::vector<double> atom;
  std::vector<double> prob;
  std::vector<double> cum;  // cumulative probs for sampling

  void finalize() {
    cum.resize(prob.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < prob.size(); ++i) {
      acc += prob[i];
      cum[i] = acc;
    }
    if (!cum.empty()) cum.back() = 1.0;
  }
  std::size_t sample_index(double u) const {
    return static_cast<std::size_t>(
        std::upper_bound(cum.begin(), cum.end(), u) - cum.begin());
  }
  double moment(int k) const {
    KahanSum s;
    for (std::size_t i = 0; i < atom.size(); ++i)
      s.add(prob[i] * std::pow(atom[i], k));
    return s.value();
  }
};

inline ScalarLaw scalar_atoms(std::vector<double> atoms, std::vector<double> probs) {
  if (atoms.size() != probs.size() || atoms.empty())
    throw ConfigError("scalar law: atoms/probs mismatch");
  ScalarLaw law{std::move(atoms), std::move(probs), {}};
  double tot = 0.0;
  for (double p : law.prob) {
    if (p < 0.0) throw ConfigError("scalar law: negative probability");
    tot += p;
  }
  if (std::abs(tot - 1.0) > 1e-12) throw ConfigError("scalar law: probabilities must sum to 1");
  law.finalize();
  return law;
}

// Gauss-Legendre atomization of Uniform[lo, hi]: polynomial moments up to
// degree 2n-1 are exact.
inline ScalarLaw scalar_uniform_gauss(double lo, double hi, int n_atoms = 64) {
  QuadRule q = mapped(gauss_legendre(n_atoms), lo, hi);
  ScalarLaw law;
  law.atom = q.x;
  law.prob = q.w;
  for (double& w : law.prob) w /= (hi - lo);
  law.finalize();
  return law;
}

// Quantile-midpoint atomization of Uniform[lo, hi]: n equal strata, one atom
// at each conditional median. O(n^-2) moment error; useful when atoms must be
// equally likely.
inline ScalarLaw scalar_uniform_stratified(double lo, double hi, int n_atoms = 64) {
  ScalarLaw law;
  law.atom.resize(static_cast<std::size_t>(n_atoms));
  law.prob.assign(static_cast<std::size_t>(n_atoms), 1.0 / n_atoms);
  for (int i = 0; i < n_atoms; ++i)
    law.atom[static_cast<std::size_t>(i)] = lo + (hi - lo) * (i + 0.5) / n_atoms;
  law.finalize();
  return law;
}

enum class Family { product_iid, landscape, two_step_product };

struct ProductLaw {
  std::vector<double> atom_prob;
  std::vector<double> atom_cum;
  std::vector<RowPMF> atom_row;
};

struct LandscapeLaw {
  std::vector<double> b;  // aligned with offsets; the dependence window
  ScalarLaw omega;
};

struct TwoStepLaw {
  std::vector<std::int64_t> base_offsets;  // all odd
  ProductLaw base;
  // composed offset (o1 + o2) / 2 lives at index comp_index[o1][o2]
  std::vector<std::vector<std::size_t>> comp_index;
};

struct ModelSpec {
  Family family = Family::product_iid;
  std::vector<std::int64_t> offsets;  // sorted step support on the base lattice
  std::variant<ProductLaw, LandscapeLaw, TwoStepLaw> law;
  double lattice_scale = 1.0;  // positions live on lattice_scale * Z
  int symmetry_order_p = 0;    // cached by the constructors
  std::string name;
  std::uint64_t seed = 0;
};

namespace detail {

inline void check_row(const std::vector<std::int64_t>& offsets, const RowPMF& row) {
  if (row.p.size() != offsets.size())
    throw DegenerateModel("row length does not match offsets");
  double tot = 0.0;
  for (double v : row.p) {
    if (v < -1e-15) throw DegenerateModel("row has a negative entry");
    tot += v;
  }
  if (std::abs(tot - 1.0) > 1e-12) throw DegenerateModel("row does not sum to 1");
}

inline std::int64_t offsets_gcd_of_differences(const std::vector<std::int64_t>& offsets) {
  std::int64_t g = 0;
  for (std::size_t i = 1; i < offsets.size(); ++i)
    g = std::gcd(g, offsets[i] - offsets[0]);
  return g;
}

inline std::size_t offset_index(const ModelSpec& m, std::int64_t o) {
  const auto it = std::lower_bound(m.offsets.begin(), m.offsets.end(), o);
  if (it == m.offsets.end() || *it != o)
    throw UnsupportedOffset("offset not in model support");
  return static_cast<std::size_t>(it - m.offsets.begin());
}

}  // namespace detail

// ==== row moments ====
// Exact E[prod_i v(o_i)] for one row; all downstream exact computations reduce
// to these. Forward declaration: detect_symmetry_order needs it.
inline double row_moment(const ModelSpec& m, const std::vector<std::int64_t>& off_multiset);

// Annealed one-step law mu as (offset, prob) pairs on the base lattice.
inline std::vector<std::pair<std::int64_t, double>> annealed_pmf(const ModelSpec& m) {
  std::vector<std::pair<std::int64_t, double>> out;
  out.reserve(m.offsets.size());
  for (std::int64_t o : m.offsets) out.emplace_back(o, row_moment(m, {o}));
  return out;
}

// Smallest k >= 1 whose k-th row moment sum_o o^k v(o) is random (variance
// above tolerance); the walk is "symmetric to order p" when the first p-1 are
// deterministic.
inline int detect_symmetry_order(const ModelSpec& m, double tol = 1e-14) {
  const int cap = 4 * static_cast<int>(m.offsets.size());
  for (int k = 1; k <= cap; ++k) {
    KahanSum mean, second;
    for (std::int64_t o : m.offsets) {
      const double ok = std::pow(static_cast<double>(o), k);
      mean.add(ok * row_moment(m, {o}));
      for (std::int64_t o2 : m.offsets) {
        const double ok2 = std::pow(static_cast<double>(o2), k);
        second.add(ok * ok2 * row_moment(m, {o, o2}));
      }
    }
    const double var = second.value() - mean.value() * mean.value();
    if (var > tol) return k;
  }
  throw DegenerateModel("all row moments deterministic: no symmetry order");
}

// ==== constructors ====

// allow_periodic exists only so two_step_reduce can build its base; the
// public default rejects supports whose differences miss part of the lattice.
inline ModelSpec make_product_model(std::vector<std::int64_t> offsets,
                                    std::vector<std::pair<double, std::vector<double>>> atoms,
                                    std::string name = "product", bool allow_periodic = false) {
  ModelSpec m;
  m.family = Family::product_iid;
  if (offsets.size() < 2) throw DegenerateModel("need at least two offsets");
  if (!std::is_sorted(offsets.begin(), offsets.end()))
    throw ConfigError("offsets must be sorted");
  m.offsets = std::move(offsets);
  const std::int64_t g = detail::offsets_gcd_of_differences(m.offsets);
  if (g != 1 && !allow_periodic)
    throw PeriodicSupport("offset differences generate a strict sublattice (gcd " +
                          std::to_string(g) + ")");
  ProductLaw law;
  double ptot = 0.0;
  for (auto& [p, row] : atoms) {
    if (p < 0.0) throw DegenerateModel("negative atom probability");
    RowPMF r{row};
    detail::check_row(m.offsets, r);
    law.atom_prob.push_back(p);
    law.atom_row.push_back(std::move(r));
    ptot += p;
  }
  if (law.atom_prob.empty() || std::abs(ptot - 1.0) > 1e-12)
    throw DegenerateModel("atom probabilities must sum to 1");
  law.atom_cum.resize(law.atom_prob.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < law.atom_prob.size(); ++i) {
    acc += law.atom_prob[i];
    law.atom_cum[i] = acc;
  }
  law.atom_cum.back() = 1.0;
  m.law = std::move(law);
  m.name = std::move(name);
  m.symmetry_order_p = detect_symmetry_order(m);
  return m;
}

inline ModelSpec make_landscape_model(std::vector<std::int64_t> offsets, std::vector<double> b,
                                      ScalarLaw omega, std::string name = "landscape") {
  ModelSpec m;
  m.family = Family::landscape;
  if (offsets.size() < 2) throw DegenerateModel("need at least two offsets");
  if (!std::is_sorted(offsets.begin(), offsets.end()))
    throw ConfigError("offsets must be sorted");
  if (b.size() != offsets.size()) throw ConfigError("b profile must align with offsets");
  for (double w : b)
    if (w < 0.0) throw ConfigError("b profile must be nonnegative");
  bool zero_there = false;
  for (std::size_t i = 0; i < offsets.size(); ++i)
    if (offsets[i] == 0 && b[i] > 0.0) zero_there = true;
  if (!zero_there) throw ConfigError("landscape model needs b(0) > 0");
  m.offsets = std::move(offsets);
  if (detail::offsets_gcd_of_differences(m.offsets) != 1)
    throw PeriodicSupport("offset differences generate a strict sublattice");
  m.law = LandscapeLaw{std::move(b), std::move(omega)};
  m.name = std::move(name);
  m.symmetry_order_p = detect_symmetry_order(m);
  return m;
}

// Composition of two consecutive layers of a parity-periodic product model,
// watched on the even sublattice. Input offsets must all be odd; the composed
// model steps by (o1 + o2)/2 on the relabeled lattice.
inline ModelSpec two_step_reduce(const ModelSpec& base, std::string name = "") {
  const auto* pl = std::get_if<ProductLaw>(&base.law);
  if (pl == nullptr) throw ConfigError("two_step_reduce needs a product base model");
  for (std::int64_t o : base.offsets)
    if (((o % 2) + 2) % 2 != 1)
      throw ConfigError("two_step_reduce expects all base offsets odd");
  ModelSpec m;
  m.family = Family::two_step_product;
  std::vector<std::int64_t> comp;
  for (std::int64_t a : base.offsets)
    for (std::int64_t b : base.offsets) comp.push_back((a + b) / 2);
  std::sort(comp.begin(), comp.end());
  comp.erase(std::unique(comp.begin(), comp.end()), comp.end());
  m.offsets = comp;
  if (detail::offsets_gcd_of_differences(m.offsets) != 1)
    throw PeriodicSupport("composed support still periodic");
  TwoStepLaw law;
  law.base_offsets = base.offsets;
  law.base = *pl;
  const std::size_t nb = base.offsets.size();
  law.comp_index.assign(nb, std::vector<std::size_t>(nb, 0));
  for (std::size_t i = 0; i < nb; ++i)
    for (std::size_t j = 0; j < nb; ++j) {
      const std::int64_t c = (base.offsets[i] + base.offsets[j]) / 2;
      law.comp_index[i][j] = detail::offset_index(m, c);
    }
  m.law = std::move(law);
  m.name = name.empty() ? base.name + "_two_step" : std::move(name);
  m.seed = base.seed;
  m.symmetry_order_p = detect_symmetry_order(m);
  return m;
}

// ==== sampling ====

namespace detail {

inline std::size_t product_atom_index(const ProductLaw& law, const EnvKey& key) {
  const double u = env_uniform(key);
  const auto it = std::upper_bound(law.atom_cum.begin(), law.atom_cum.end(), u);
  return std::min(static_cast<std::size_t>(it - law.atom_cum.begin()), law.atom_row.size() - 1);
}

inline RowPMF product_row(const ProductLaw& law, const EnvKey& key) {
  return law.atom_row[product_atom_index(law, key)];
}

inline RowPMF landscape_row(const ModelSpec& m, const LandscapeLaw& law, const EnvKey& key) {
  RowPMF row;
  row.p.resize(m.offsets.size());
  double tot = 0.0;
  for (std::size_t j = 0; j < m.offsets.size(); ++j) {
    // omega is keyed by the site it sits on, so overlapping windows share it
    const EnvKey site_key{key.seed, key.r, key.x + m.offsets[j]};
    const double omega = law.omega.atom[law.omega.sample_index(env_uniform(site_key))];
    row.p[j] = law.b[j] * std::exp(omega);
    tot += row.p[j];
  }
  for (double& v : row.p) v /= tot;
  return row;
}

}  // namespace detail

// Pure function of the key. Landscape rows at equal r with overlapping
// windows share weights; the two-step family shares its second layer between
// adjacent composed sites.
inline RowPMF sample_row(const ModelSpec& m, const EnvKey& key) {
  if (const auto* pl = std::get_if<ProductLaw>(&m.law))
    return detail::product_row(*pl, key);
  if (const auto* ll = std::get_if<LandscapeLaw>(&m.law))
    return detail::landscape_row(m, *ll, key);
  const auto& ts = std::get<TwoStepLaw>(m.law);
  // layer 1 at base site 2x, layer 2 at base sites 2x + o1
  const EnvKey k1{key.seed, 2 * key.r, 2 * key.x};
  RowPMF v1 = detail::product_row(ts.base, k1);
  RowPMF out;
  out.p.assign(m.offsets.size(), 0.0);
  for (std::size_t i = 0; i < ts.base_offsets.size(); ++i) {
    if (v1.p[i] == 0.0) continue;
    const EnvKey k2{key.seed, 2 * key.r + 1, 2 * key.x + ts.base_offsets[i]};
    const RowPMF v2 = detail::product_row(ts.base, k2);
    for (std::size_t j = 0; j < ts.base_offsets.size(); ++j)
      out.p[ts.comp_index[i][j]] += v1.p[i] * v2.p[j];
  }
  return out;
}

// Copy-free variant for loops that draw one row per occupied site per step:
// product rows are references into the atom table, other families fill the
// caller's scratch row.
inline const RowPMF& sample_row_ref(const ModelSpec& m, const EnvKey& key, RowPMF& scratch) {
  if (const auto* pl = std::get_if<ProductLaw>(&m.law))
    return pl->atom_row[detail::product_atom_index(*pl, key)];
  scratch = sample_row(m, key);
  return scratch;
}

// ==== exact row moments ====

namespace detail {

inline double product_row_moment(const ProductLaw& law,
                                 const std::vector<std::size_t>& idx) {
  KahanSum s;
  for (std::size_t a = 0; a < law.atom_prob.size(); ++a) {
    double term = law.atom_prob[a];
    for (std::size_t i : idx) term *= law.atom_row[a].p[i];
    s.add(term);
  }
  return s.value();
}

inline double landscape_row_moment(const ModelSpec& m, const LandscapeLaw& law,
                                   const std::vector<std::size_t>& idx) {
  // enumerate the window assignment; the window is the whole b support
  const std::size_t w = m.offsets.size();
  const std::size_t na = law.omega.atom.size();
  std::vector<std::size_t> assign(w, 0);
  KahanSum total;
  while (true) {
    double pr = 1.0;
    double denom = 0.0;
    for (std::size_t j = 0; j < w; ++j) {
      pr *= law.omega.prob[assign[j]];
      denom += law.b[j] * std::exp(law.omega.atom[assign[j]]);
    }
    double term = pr;
    for (std::size_t i : idx)
      term *= law.b[i] * std::exp(law.omega.atom[assign[i]]) / denom;
    total.add(term);
    std::size_t j = 0;
    while (j < w && ++assign[j] == na) assign[j++] = 0;
    if (j == w) break;
  }
  return total.value();
}

inline double two_step_row_moment(const TwoStepLaw& law,
                                  const std::vector<std::size_t>& comp_idx) {
  // Assign a first hop to every factor, weight by the layer-1 joint moment,
  // then group the forced second hops by landing site for layer 2.
  const std::size_t nb = law.base_offsets.size();
  const std::size_t k = comp_idx.size();
  std::vector<std::size_t> hop(k, 0);
  KahanSum total;
  // composed offset value per index
  while (true) {
    bool ok = true;
    std::vector<std::size_t> l2_idx(k);
    for (std::size_t i = 0; i < k && ok; ++i) {
      // second hop o2 = 2*comp - o1 must be a base offset
      bool found = false;
      for (std::size_t j = 0; j < nb; ++j) {
        if (law.comp_index[hop[i]][j] == comp_idx[i]) {
          l2_idx[i] = j;
          found = true;
          break;
        }
      }
      ok = found;
    }
    if (ok) {
      double term = product_row_moment(law.base, hop);
      if (term != 0.0) {
        // layer-2 rows group by landing site of the first hop
        std::map<std::int64_t, std::vector<std::size_t>> groups;
        for (std::size_t i = 0; i < k; ++i)
          groups[law.base_offsets[hop[i]]].push_back(l2_idx[i]);
        for (const auto& [site, idx2] : groups) term *= product_row_moment(law.base, idx2);
        total.add(term);
      }
    }
    std::size_t j = 0;
    while (j < k && ++hop[j] == nb) hop[j++] = 0;
    if (j == k) break;
  }
  return total.value();
}

}  // namespace detail

inline double row_moment(const ModelSpec& m, const std::vector<std::int64_t>& off_multiset) {
  std::vector<std::size_t> idx;
  idx.reserve(off_multiset.size());
  for (std::int64_t o : off_multiset) idx.push_back(detail::offset_index(m, o));
  if (const auto* pl = std::get_if<ProductLaw>(&m.law))
    return detail::product_row_moment(*pl, idx);
  if (const auto* ll = std::get_if<LandscapeLaw>(&m.law))
    return detail::landscape_row_moment(m, *ll, idx);
  return detail::two_step_row_moment(std::get<TwoStepLaw>(m.law), idx);
}

// ==== lattice normalization ====

inline double annealed_variance(const ModelSpec& m) {
  KahanSum m1, m2;
  for (const auto& [o, p] : annealed_pmf(m)) {
    m1.add(p * static_cast<double>(o));
    m2.add(p * static_cast<double>(o) * static_cast<double>(o));
  }
  return m2.value() - m1.value() * m1.value();
}

// Set lattice_scale so the annealed step has unit variance on the scaled
// lattice (positions x_phys = lattice_scale * x_base).
inline ModelSpec normalize_lattice(ModelSpec m) {
  const double var = annealed_variance(m);
  if (var <= 1e-300) throw ZeroVariance("annealed step variance is zero");
  m.lattice_scale = 1.0 / std::sqrt(var);
  return m;
}

// ==== shared dependence range ====
// Rows at base sites x and x' are independent when |x - x'| > dependence_range.
inline std::int64_t dependence_range(const ModelSpec& m) {
  switch (m.family) {
    case Family::product_iid:
      return 0;
    case Family::landscape:
      return m.offsets.back() - m.offsets.front();
    case Family::two_step_product: {
      const auto& ts = std::get<TwoStepLaw>(m.law);
      return (ts.base_offsets.back() - ts.base_offsets.front()) / 2;
    }
  }
  return 0;
}

// ==== JSON config ====
// Schema (README documents it): family, offsets, atoms | (b_profile,
// weight_law), seed, plus optional name, two_step_reduce, normalize_lattice.
// Unknown keys are rejected.

inline ScalarLaw parse_scalar_law(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("type")) throw ConfigError("weight_law needs a type");
  const std::string type = j.at("type").get<std::string>();
  for (const auto& [key, _] : j.items()) {
    static const char* known[] = {"type", "atoms", "probs", "lo", "hi", "n_atoms", "method"};
    if (std::find_if(std::begin(known), std::end(known),
                     [&](const char* k) { return key == k; }) == std::end(known))
      throw ConfigError("unknown weight_law key: " + key);
  }
  if (type == "atoms")
    return scalar_atoms(j.at("atoms").get<std::vector<double>>(),
                        j.at("probs").get<std::vector<double>>());
  if (type == "uniform") {
    const double lo = j.value("lo", 0.0), hi = j.value("hi", 1.0);
    const int n = j.value("n_atoms", 64);
    const std::string method = j.value("method", "gauss");
    if (method == "gauss") return scalar_uniform_gauss(lo, hi, n);
    if (method == "stratified") return scalar_uniform_stratified(lo, hi, n);
    throw ConfigError("unknown uniform method: " + method);
  }
  throw ConfigError("unknown weight_law type: " + type);
}

// allow_periodic relaxes the sublattice guard the same way the constructor
// flag does; the model audit uses it to build otherwise-rejected configs so
// it can point at the failing assumption instead of dying in the parser.
inline ModelSpec model_from_json(const nlohmann::json& j, bool allow_periodic = false) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  for (const auto& [key, _] : j.items()) {
    static const char* known[] = {"family",     "offsets", "atoms",
                                  "b_profile",  "weight_law", "seed",
                                  "name",       "two_step_reduce", "normalize_lattice"};
    if (std::find_if(std::begin(known), std::end(known),
                     [&](const char* k) { return key == k; }) == std::end(known))
      throw ConfigError("unknown model config key: " + key);
  }
  const std::string family = j.at("family").get<std::string>();
  auto offsets = j.at("offsets").get<std::vector<std::int64_t>>();
  const std::string name = j.value("name", std::string("model"));
  ModelSpec m;
  if (family == "product_iid") {
    if (!j.contains("atoms")) throw ConfigError("product_iid config needs atoms");
    std::vector<std::pair<double, std::vector<double>>> atoms;
    const auto& ja = j.at("atoms");
    if (ja.is_array()) {
      for (const auto& entry : ja) {
        if (!entry.is_array() || entry.size() != 2)
          throw ConfigError("atom entries are [prob, [row...]] pairs");
        atoms.emplace_back(entry[0].get<double>(), entry[1].get<std::vector<double>>());
      }
    } else if (ja.is_object()) {
      // generator form for atomized continuous row families
      const std::string type = ja.at("type").get<std::string>();
      const int n = ja.value("n_atoms", 64);
      const std::string method = ja.value("method", "gauss");
      const ScalarLaw u = method == "gauss" ? scalar_uniform_gauss(0.0, 1.0, n)
                                            : scalar_uniform_stratified(0.0, 1.0, n);
      for (std::size_t i = 0; i < u.atom.size(); ++i) {
        const double w = u.atom[i];
        if (type == "lazy_uniform")  // rows ((1-u)/2, u, (1-u)/2) on {-1,0,1}
          atoms.emplace_back(u.prob[i],
                             std::vector<double>{(1.0 - w) / 2.0, w, (1.0 - w) / 2.0});
        else if (type == "beta_pm")  // rows (1-u, u) on {-1,+1}
          atoms.emplace_back(u.prob[i], std::vector<double>{1.0 - w, w});
        else
          throw ConfigError("unknown atom generator: " + type);
      }
    } else {
      throw ConfigError("atoms must be a list or a generator object");
    }
    const bool reduce = j.value("two_step_reduce", false);
    m = make_product_model(std::move(offsets), std::move(atoms), name, reduce || allow_periodic);
  } else if (family == "landscape") {
    if (!j.contains("b_profile") || !j.contains("weight_law"))
      throw ConfigError("landscape config needs b_profile and weight_law");
    m = make_landscape_model(std::move(offsets), j.at("b_profile").get<std::vector<double>>(),
                             parse_scalar_law(j.at("weight_law")), name);
  } else {
    throw ConfigError("unknown family: " + family);
  }
  m.seed = j.value("seed", static_cast<std::uint64_t>(0));
  if (j.value("two_step_reduce", false)) m = two_step_reduce(std::move(m), name);
  if (j.value("normalize_lattice", false)) m = normalize_lattice(std::move(m));
  return m;
}

inline ModelSpec load_model_file(const std::string& path, bool allow_periodic = false) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad JSON in " + path + ": " + e.what());
  }
  return model_from_json(j, allow_periodic);
}

}  // namespace kflow
