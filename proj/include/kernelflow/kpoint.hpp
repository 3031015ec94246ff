#pragma once
// k-point motion of the kernel flow: several walkers driven by one shared
// environment. Exact joint one-step tables p^(k), exponentially tilted
// versions, joint displacement cumulants via the set-partition formula, the
// pair covariance function zeta feeding the noise coefficient, correlation
// decay profiles, and path simulation under the annealed, tilted, and
// quenched measures.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "kernelflow/annealed.hpp"
#include "kernelflow/model.hpp"
#include "kernelflow/numerics.hpp"
#include "kernelflow/rng.hpp"

namespace kflow {

struct TooManyParticles : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Exact one-step joint law from base positions: table rows are (offset tuple,
// probability). Marginals reproduce the annealed law exactly.
struct JointStepPMF {
  int k = 0;
  std::vector<std::int64_t> base;
  std::vector<std::pair<std::vector<std::int64_t>, double>> table;
};

namespace detail {

// every offset-tuple in lexicographic order
inline void for_each_tuple(std::size_t k, std::size_t s,
                           const std::function<void(const std::vector<std::size_t>&)>& f) {
  std::vector<std::size_t> idx(k, 0);
  while (true) {
    f(idx);
    std::size_t j = 0;
    while (j < k && ++idx[j] == s) idx[j++] = 0;
    if (j == k) break;
  }
}

inline double product_joint_prob(const ModelSpec& m,
                                 const std::vector<std::int64_t>& x,
                                 const std::vector<std::size_t>& idx) {
  // group walkers by site; within a group the tuple probability is the row
  // moment of that offset multiset, groups are independent
  std::map<std::int64_t, std::vector<std::int64_t>> groups;
  for (std::size_t i = 0; i < x.size(); ++i)
    groups[x[i]].push_back(m.offsets[idx[i]]);
  double pr = 1.0;
  for (const auto& [site, multiset] : groups) pr *= row_moment(m, multiset);
  return pr;
}

inline JointStepPMF landscape_joint(const ModelSpec& m, const LandscapeLaw& law,
                                    const std::vector<std::int64_t>& x) {
  // enumerate the weight assignment over the union of windows
  std::vector<std::int64_t> union_sites;
  for (std::int64_t xi : x)
    for (std::int64_t o : m.offsets) union_sites.push_back(xi + o);
  std::sort(union_sites.begin(), union_sites.end());
  union_sites.erase(std::unique(union_sites.begin(), union_sites.end()), union_sites.end());
  const std::size_t w = union_sites.size();
  const std::size_t na = law.omega.atom.size();
  const std::size_t s = m.offsets.size();
  const std::size_t k = x.size();

  JointStepPMF out;
  out.k = static_cast<int>(k);
  out.base = x;
  std::vector<KahanSum> acc;
  std::vector<std::vector<std::int64_t>> tuples;
  for_each_tuple(k, s, [&](const std::vector<std::size_t>& idx) {
    std::vector<std::int64_t> t(k);
    for (std::size_t i = 0; i < k; ++i) t[i] = m.offsets[idx[i]];
    tuples.push_back(std::move(t));
  });
  acc.resize(tuples.size());

  auto site_pos = [&](std::int64_t site) {
    return static_cast<std::size_t>(
        std::lower_bound(union_sites.begin(), union_sites.end(), site) - union_sites.begin());
  };

  std::vector<std::size_t> assign(w, 0);
  std::vector<std::vector<double>> rows(k, std::vector<double>(s));
  while (true) {
    double pr = 1.0;
    for (std::size_t j = 0; j < w; ++j) pr *= law.omega.prob[assign[j]];
    for (std::size_t i = 0; i < k; ++i) {
      double den = 0.0;
      for (std::size_t a = 0; a < s; ++a) {
        const double v =
            law.b[a] * std::exp(law.omega.atom[assign[site_pos(x[i] + m.offsets[a])]]);
        rows[i][a] = v;
        den += v;
      }
      for (std::size_t a = 0; a < s; ++a) rows[i][a] /= den;
    }
    std::size_t ti = 0;
    for_each_tuple(k, s, [&](const std::vector<std::size_t>& idx) {
      double term = pr;
      for (std::size_t i = 0; i < k; ++i) term *= rows[i][idx[i]];
      acc[ti++].add(term);
    });
    std::size_t j = 0;
    while (j < w && ++assign[j] == na) assign[j++] = 0;
    if (j == w) break;
  }
  out.table.reserve(tuples.size());
  for (std::size_t i = 0; i < tuples.size(); ++i)
    out.table.emplace_back(tuples[i], acc[i].value());
  return out;
}

inline JointStepPMF two_step_joint(const ModelSpec& m, const TwoStepLaw& law,
                                   const std::vector<std::int64_t>& x) {
  // enumerate both hop layers; layer 1 rows sit at base sites 2*x_i, layer 2
  // rows at 2*x_i + o1, which is where distinct walkers can collide
  const std::size_t k = x.size();
  const std::size_t nb = law.base_offsets.size();
  const std::size_t s = m.offsets.size();
  std::map<std::vector<std::int64_t>, KahanSum> acc;
  for_each_tuple(k, nb * nb, [&](const std::vector<std::size_t>& code) {
    std::map<std::int64_t, std::vector<std::size_t>> l1, l2;
    std::vector<std::int64_t> tuple(k);
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t h1 = code[i] % nb, h2 = code[i] / nb;
      const std::int64_t o1 = law.base_offsets[h1];
      l1[2 * x[i]].push_back(h1);
      l2[2 * x[i] + o1].push_back(h2);
      tuple[i] = (o1 + law.base_offsets[h2]) / 2;
    }
    double pr = 1.0;
    for (const auto& [site, idx] : l1) pr *= product_row_moment(law.base, idx);
    for (const auto& [site, idx] : l2) pr *= product_row_moment(law.base, idx);
    acc[tuple].add(pr);
  });
  JointStepPMF out;
  out.k = static_cast<int>(k);
  out.base = x;
  // emit in the same lexicographic-tuple order as the other families
  for_each_tuple(k, s, [&](const std::vector<std::size_t>& idx) {
    std::vector<std::int64_t> t(k);
    for (std::size_t i = 0; i < k; ++i) t[i] = m.offsets[idx[i]];
    const auto it = acc.find(t);
    out.table.emplace_back(t, it == acc.end() ? 0.0 : it->second.value());
  });
  return out;
}

}  // namespace detail

inline JointStepPMF joint_kernel_pmf(const ModelSpec& m, const std::vector<std::int64_t>& x) {
  if (x.size() > 6) throw TooManyParticles("joint tables support at most 6 walkers");
  if (x.empty()) throw std::invalid_argument("need at least one walker");
  if (const auto* ll = std::get_if<LandscapeLaw>(&m.law))
    return detail::landscape_joint(m, *ll, x);
  if (const auto* ts = std::get_if<TwoStepLaw>(&m.law))
    return detail::two_step_joint(m, *ts, x);
  JointStepPMF out;
  out.k = static_cast<int>(x.size());
  out.base = x;
  const std::size_t s = m.offsets.size();
  detail::for_each_tuple(x.size(), s, [&](const std::vector<std::size_t>& idx) {
    std::vector<std::int64_t> t(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) t[i] = m.offsets[idx[i]];
    out.table.emplace_back(std::move(t), detail::product_joint_prob(m, x, idx));
  });
  return out;
}

// Girsanov tilt: reweight each offset tuple by exp(beta * sum_i o_i) and
// renormalize. beta acts per base-lattice unit; callers tilting physical
// positions pass beta_phys * lattice_scale.
inline double tilt_normalizer(const JointStepPMF& pk, double beta) {
  KahanSum s;
  for (const auto& [t, p] : pk.table) {
    std::int64_t tot = 0;
    for (std::int64_t o : t) tot += o;
    s.add(p * std::exp(beta * static_cast<double>(tot)));
  }
  return s.value();
}

inline JointStepPMF tilted_kernel_pmf(const JointStepPMF& pk, double beta) {
  JointStepPMF out = pk;
  const double z = tilt_normalizer(pk, beta);
  for (auto& [t, p] : out.table) {
    std::int64_t tot = 0;
    for (std::int64_t o : t) tot += o;
    p = p * std::exp(beta * static_cast<double>(tot)) / z;
  }
  return out;
}

// Joint cumulant of physical displacements (walkers j_1..j_m, repetitions
// allowed) via the set-partition formula
//   kappa = sum_{partitions} (-1)^{|pi|-1} (|pi|-1)! prod_blocks E[prod (scale*o_{j_i})].
inline double joint_cumulant(const ModelSpec& m, const std::vector<int>& j,
                             const std::vector<std::int64_t>& x) {
  const int mm = static_cast<int>(j.size());
  const int p = m.symmetry_order_p;
  if (mm > 4 * p + 2) throw std::invalid_argument("cumulant order beyond supported range");
  for (int ji : j)
    if (ji < 0 || ji >= static_cast<int>(x.size()))
      throw std::invalid_argument("walker index out of range");
  const JointStepPMF pk = joint_kernel_pmf(m, x);
  const double c = m.lattice_scale;

  // joint moments per subset of {0..m-1}, computed on demand
  std::map<std::vector<int>, double> moment_cache;
  auto block_moment = [&](const std::vector<int>& members) {
    const auto it = moment_cache.find(members);
    if (it != moment_cache.end()) return it->second;
    KahanSum s;
    for (const auto& [t, pr] : pk.table) {
      double term = pr;
      for (int i : members) term *= c * static_cast<double>(t[static_cast<std::size_t>(j[i])]);
      s.add(term);
    }
    moment_cache[members] = s.value();
    return s.value();
  };

  KahanSum total;
  for_each_set_partition(mm, [&](const std::vector<int>& block, int nb) {
    std::vector<std::vector<int>> blocks(static_cast<std::size_t>(nb));
    for (int i = 0; i < mm; ++i) blocks[static_cast<std::size_t>(block[i])].push_back(i);
    double term = (nb % 2 == 1) ? 1.0 : -1.0;
    for (int f = 1; f < nb; ++f) term *= f;  // (|pi|-1)!
    for (const auto& b : blocks) term *= block_moment(b);
    total.add(term);
  });
  return total.value();
}

// Pair covariance of p-th row moments at base separation z, scaled to the
// physical lattice:
//   zeta(z) = (p!)^{-2} Cov( sum_o (c o)^p v_0(o), sum_o (c o)^p v_z(o) ).
inline double zeta(const ModelSpec& m, std::int64_t z) {
  const int p = m.symmetry_order_p;
  const double c = m.lattice_scale;
  double fact = 1.0;
  for (int i = 2; i <= p; ++i) fact *= i;
  const JointStepPMF pk = joint_kernel_pmf(m, {0, z});
  KahanSum cross;
  for (const auto& [t, pr] : pk.table)
    cross.add(pr * std::pow(c * t[0], p) * std::pow(c * t[1], p));
  KahanSum mean;
  for (const auto& [o, pr] : annealed_pmf(m)) mean.add(pr * std::pow(c * o, p));
  const double mu_p = mean.value();
  return (cross.value() - mu_p * mu_p) / (fact * fact);
}

// Worst joint-vs-independent moment gap at each separation: walkers sit at
// 0, z, 2z, ..., and the maximum runs over exponent tuples with
// 0 <= r_i <= 4p-1 and 2p <= sum r_i <= 4p (base-lattice displacements).
struct DecayPoint {
  std::int64_t separation = 0;
  double value = 0.0;
};

inline std::vector<DecayPoint> decay_profile(const ModelSpec& m, int k,
                                             const std::vector<std::int64_t>& separations) {
  if (k < 2 || k > 4) throw std::invalid_argument("decay profile supports 2 <= k <= 4");
  const int p = m.symmetry_order_p;
  std::vector<double> mu_mom(static_cast<std::size_t>(4 * p), 0.0);
  for (int r = 0; r < 4 * p; ++r) {
    KahanSum s;
    for (const auto& [o, pr] : annealed_pmf(m)) s.add(pr * std::pow(static_cast<double>(o), r));
    mu_mom[static_cast<std::size_t>(r)] = s.value();
  }
  std::vector<DecayPoint> out;
  for (std::int64_t sep : separations) {
    std::vector<std::int64_t> x(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) x[static_cast<std::size_t>(i)] = i * sep;
    const JointStepPMF pk = joint_kernel_pmf(m, x);
    double worst = 0.0;
    std::vector<int> r(static_cast<std::size_t>(k), 0);
    while (true) {
      int tot = 0;
      for (int ri : r) tot += ri;
      if (tot >= 2 * p && tot <= 4 * p) {
        KahanSum joint;
        for (const auto& [t, pr] : pk.table) {
          double term = pr;
          for (int i = 0; i < k; ++i)
            term *= std::pow(static_cast<double>(t[static_cast<std::size_t>(i)]),
                             r[static_cast<std::size_t>(i)]);
          joint.add(term);
        }
        double indep = 1.0;
        for (int ri : r) indep *= mu_mom[static_cast<std::size_t>(ri)];
        worst = std::max(worst, std::abs(joint.value() - indep));
      }
      std::size_t j = 0;
      while (j < r.size() && ++r[j] == 4 * p) r[j++] = 0;
      if (j == r.size()) break;
    }
    out.push_back({sep, worst});
  }
  return out;
}

// ==== path simulation ====

struct KPointPath {
  int k = 0;
  std::vector<std::vector<std::int64_t>> positions;  // positions[s] after s steps
  std::string measure_tag;
};

enum class Measure { annealed, tilted, quenched };

// One shared sampler: annealed redraws the environment slice every step,
// quenched reuses the environment keyed by its seed, tilted samples the exact
// reweighted joint table (cached per relative configuration).
inline KPointPath simulate_kpoint(const ModelSpec& m, int k,
                                  const std::vector<std::int64_t>& x0, std::int64_t steps,
                                  Measure measure, double beta, std::uint64_t env_seed,
                                  std::uint64_t walker_seed) {
  if (k > 6 && measure == Measure::tilted)
    throw TooManyParticles("tilted simulation builds joint tables (k <= 6)");
  if (static_cast<int>(x0.size()) != k) throw std::invalid_argument("x0 size != k");
  KPointPath path;
  path.k = k;
  path.positions.reserve(static_cast<std::size_t>(steps) + 1);
  path.positions.push_back(x0);
  switch (measure) {
    case Measure::annealed:
      path.measure_tag = "annealed";
      break;
    case Measure::tilted:
      path.measure_tag = "tilted(" + std::to_string(beta) + ")";
      break;
    case Measure::quenched:
      path.measure_tag = "quenched(" + std::to_string(env_seed) + ")";
      break;
  }
  Xoshiro256 rng(mix64(walker_seed ^ 0x5eedULL));
  std::map<std::vector<std::int64_t>, JointStepPMF> tilt_cache;
  std::vector<std::int64_t> pos = x0;

  for (std::int64_t s = 0; s < steps; ++s) {
    if (measure == Measure::tilted) {
      std::vector<std::int64_t> rel(pos.size());
      for (std::size_t i = 0; i < pos.size(); ++i) rel[i] = pos[i] - pos[0];
      // pairwise-separated configurations share one table: all rows involved
      // are mutually independent, so the joint law no longer depends on rel
      const std::int64_t range = dependence_range(m);
      bool all_apart = true;
      for (std::size_t i = 0; i < rel.size() && all_apart; ++i)
        for (std::size_t l = i + 1; l < rel.size(); ++l)
          if (std::abs(rel[i] - rel[l]) <= range) {
            all_apart = false;
            break;
          }
      if (all_apart)
        for (std::size_t i = 0; i < rel.size(); ++i)
          rel[i] = static_cast<std::int64_t>(i) * (range + 1);
      auto it = tilt_cache.find(rel);
      if (it == tilt_cache.end()) {
        const JointStepPMF q = tilted_kernel_pmf(joint_kernel_pmf(m, rel), beta);
        it = tilt_cache.emplace(rel, q).first;
      }
      double u = rng.uniform();
      const auto& table = it->second.table;
      double acc = 0.0;
      std::size_t pick = table.size() - 1;
      for (std::size_t i = 0; i < table.size(); ++i) {
        acc += table[i].second;
        if (u < acc) {
          pick = i;
          break;
        }
      }
      for (std::size_t i = 0; i < pos.size(); ++i) pos[i] += table[pick].first[i];
    } else {
      const std::uint64_t slice_seed =
          measure == Measure::annealed ? mix64(env_seed ^ static_cast<std::uint64_t>(s) * 0x9e37ULL)
                                       : env_seed;
      for (std::size_t i = 0; i < pos.size(); ++i) {
        const RowPMF row = sample_row(m, {slice_seed, s, pos[i]});
        const double u = rng.uniform();
        double acc = 0.0;
        std::size_t pick = row.p.size() - 1;
        for (std::size_t a = 0; a < row.p.size(); ++a) {
          acc += row.p[a];
          if (u < acc) {
            pick = a;
            break;
          }
        }
        pos[i] += m.offsets[pick];
      }
    }
    path.positions.push_back(pos);
  }
  return path;
}

// sum_{s < r} F(|R^i_s - R^j_s|) along a simulated path (base-lattice gaps).
inline double additive_functional(const KPointPath& path, int i, int j,
                                  const std::function<double(std::int64_t)>& f,
                                  std::int64_t r) {
  if (i < 0 || j < 0 || i >= path.k || j >= path.k)
    throw std::invalid_argument("walker index out of range");
  KahanSum s;
  const auto rmax = std::min<std::int64_t>(r, static_cast<std::int64_t>(path.positions.size()));
  for (std::int64_t t = 0; t < rmax; ++t) {
    const auto& ps = path.positions[static_cast<std::size_t>(t)];
    s.add(f(std::llabs(ps[static_cast<std::size_t>(i)] - ps[static_cast<std::size_t>(j)])));
  }
  return s.value();
}

}  // namespace kflow
