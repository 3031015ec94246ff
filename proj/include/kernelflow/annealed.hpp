#pragma once
// Annealed layer: the averaged one-step law on the scaled lattice, its
// generating function, moments and cumulants, the symmetry order p, and the
// two drift centerings used by the moderate-deviation rescaling:
//   d_N   := N * M'(beta)/M(beta) at beta = N^{-1/(4p)}  (exact tilted mean)
//   d~_N  := the drift expansion truncated to exponents >= 1/2, i.e.
//            sum_{j<=2p} (kappa_{j+1}/j!) N^{(4p-j)/(4p)} for a unit-variance
//            step law.
// The observable exponent is (4p-1)/(4p): 3/4, 7/8, 11/12, ...

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "kernelflow/model.hpp"
#include "kernelflow/numerics.hpp"

namespace kflow {

struct NotNormalized : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Annealed step law: masses on lattice sites scale * o.
struct LatticePMF {
  double scale = 1.0;
  std::vector<std::pair<std::int64_t, double>> masses;  // (base offset, prob)
};

inline LatticePMF annealed_law(const ModelSpec& m) {
  return {m.lattice_scale, annealed_pmf(m)};
}

// M(lambda) = E exp(lambda * step), step on the physical (scaled) lattice.
inline double mgf(const LatticePMF& mu, double lambda) {
  KahanSum s;
  for (const auto& [o, p] : mu.masses) s.add(p * std::exp(lambda * mu.scale * o));
  return s.value();
}

inline double log_mgf(const LatticePMF& mu, double lambda) { return std::log(mgf(mu, lambda)); }

// Physical raw moments m_1..m_kmax (index 0 holds 1) and matching cumulants.
struct MomentTable {
  std::vector<double> moments;
  std::vector<double> cumulants;
};

inline MomentTable moments_and_cumulants(const LatticePMF& mu, int kmax) {
  MomentTable t;
  t.moments.assign(static_cast<std::size_t>(kmax) + 1, 0.0);
  t.moments[0] = 1.0;
  for (int k = 1; k <= kmax; ++k) {
    KahanSum s;
    for (const auto& [o, p] : mu.masses) s.add(p * std::pow(mu.scale * o, k));
    t.moments[static_cast<std::size_t>(k)] = s.value();
  }
  t.cumulants = moments_to_cumulants(t.moments);
  return t;
}

inline int symmetry_order(const ModelSpec& m) { return m.symmetry_order_p; }

inline double crossover_exponent(int p) {
  if (p < 1) throw std::invalid_argument("symmetry order must be positive");
  return (4.0 * p - 1.0) / (4.0 * p);
}

inline double tilt_beta(std::int64_t n, int p) {
  return std::pow(static_cast<double>(n), -1.0 / (4.0 * p));
}

// Exact drift of the tilted walk: N * E[X e^{beta X}] / E[e^{beta X}].
inline double drift_dN(const ModelSpec& m, std::int64_t n) {
  const LatticePMF mu = annealed_law(m);
  const double beta = tilt_beta(n, m.symmetry_order_p);
  KahanSum num;
  for (const auto& [o, p] : mu.masses) {
    const double x = mu.scale * o;
    num.add(p * x * std::exp(beta * x));
  }
  return static_cast<double>(n) * num.value() / mgf(mu, beta);
}

// One term of the drift expansion: coefficient kappa_{j+1}/j! on N^{(4p-j)/(4p)}.
struct DriftTerm {
  double exponent = 0.0;
  double coefficient = 0.0;
};

struct DriftTable {
  std::int64_t n = 0;
  int p = 0;
  double d_n = 0.0;
  double d_tilde_n = 0.0;
  std::vector<DriftTerm> expansion_terms;  // the retained (exponent >= 1/2) terms
};

// Truncated drift for a unit-variance step law. The expansion
// d_N = sum_j (kappa_{j+1}/j!) N^{(4p-j)/(4p)} only matches the exact drift
// term-by-term when the variance is 1, so anything else is rejected.
inline DriftTable drift_expansion(const ModelSpec& m, std::int64_t n) {
  const LatticePMF mu = annealed_law(m);
  const int p = m.symmetry_order_p;
  const MomentTable mt = moments_and_cumulants(mu, 2 * p + 2);
  const double var = mt.cumulants[2];
  if (std::abs(var - 1.0) > 1e-9)
    throw NotNormalized("drift expansion needs a unit-variance step law");
  DriftTable out;
  out.n = n;
  out.p = p;
  out.d_n = drift_dN(m, n);
  KahanSum acc;
  double fact = 1.0;
  for (int j = 0; j <= 2 * p; ++j) {
    if (j > 0) fact *= j;
    const double expo = (4.0 * p - j) / (4.0 * p);
    const double coef = mt.cumulants[static_cast<std::size_t>(j) + 1] / fact;
    out.expansion_terms.push_back({expo, coef});
    acc.add(coef * std::pow(static_cast<double>(n), expo));
  }
  out.d_tilde_n = acc.value();
  return out;
}

// Moderate-deviation renormalization factor
//   D_{N,t,x} = exp(N^{(2p-1)/(4p)} x + [N^{-1/(4p)} d_N - N log M(beta)] t)
// with x measured on the physical lattice.
inline double renorm_D(const ModelSpec& m, std::int64_t n, double t, double x) {
  const LatticePMF mu = annealed_law(m);
  const int p = m.symmetry_order_p;
  const double beta = tilt_beta(n, p);
  const double nd = static_cast<double>(n);
  const double space = std::pow(nd, (2.0 * p - 1.0) / (4.0 * p)) * x;
  const double time = (beta * drift_dN(m, n) - nd * log_mgf(mu, beta)) * t;
  return std::exp(space + time);
}

}  // namespace kflow
