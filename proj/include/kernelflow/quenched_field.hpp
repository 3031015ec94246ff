#pragma once
// Quenched density field machinery. Evolves the exponentially tilted quenched
// density Z_N on the base lattice, pairs it with test functions, extracts the
// martingale part of the discrete field equation with its predictable
// quadratic variation, accumulates the pair-interaction field Q^f_N, and
// estimates field moments over environments two independent ways.
//
// Coordinates. Z_N lives on raw base-lattice sites; the drift centering
// enters only through test-function arguments
//   phi_hat_r(y) = phi(N^{-1/2} (scale*y - d_N*r/N)).
// One evolution step in raw coordinates multiplies each mass transfer by
//   e^{beta*scale*o - log M(beta)},   beta = N^{-1/(4p)} (physical units):
// the renormalization factor telescopes so that the drift cancels exactly,
// and the total mass is a mean-one martingale across environments.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "kernelflow/annealed.hpp"
#include "kernelflow/diff_chain.hpp"
#include "kernelflow/kpoint.hpp"
#include "kernelflow/model.hpp"
#include "kernelflow/numerics.hpp"
#include "kernelflow/rng.hpp"
#include "kernelflow/test_functions.hpp"

namespace kflow {

struct MassBlowup : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tilted quenched density at one time step, sparse over base-lattice sites.
struct SparseDensity {
  std::int64_t r = 0;
  std::vector<std::int64_t> site;  // strictly increasing
  std::vector<double> mass;        // positive, aligned with site
  double truncated_mass = 0.0;     // cumulative mass dropped by pruning
  std::uint64_t seed = 0;

  double total() const {
    KahanSum s;
    for (double v : mass) s.add(v);
    return s.value();
  }
};

// Values of one field observable on the N^{-1} time grid.
struct FieldSeries {
  std::vector<double> times;
  std::vector<double> values;
};

namespace detail {

inline std::int64_t checked_steps(std::int64_t n, double T) {
  const double raw = T * static_cast<double>(n);
  const auto steps = std::llround(raw);
  if (steps < 0 || std::abs(raw - static_cast<double>(steps)) > 1e-9)
    throw std::invalid_argument("time horizon must lie on the N^{-1} grid");
  return steps;
}

}  // namespace detail

// Stepper for Z_N. Holds the per-offset tilt weights and the scratch window;
// the returned trajectory of evolve_tilted_density materializes every step,
// large-N moment experiments drive the stepper directly instead.
class TiltedEvolver {
 public:
  TiltedEvolver(const ModelSpec& m, std::int64_t n, std::uint64_t seed,
                double truncation_eps = 1e-14)
      : m_(m), eps_(truncation_eps) {
    if (!(truncation_eps >= 0.0 && truncation_eps <= 1e-8))
      throw std::invalid_argument("truncation_eps must lie in [0, 1e-8]");
    beta_ = tilt_beta(n, m.symmetry_order_p);
    logm_ = log_mgf(annealed_law(m), beta_);
    const double lambda = beta_ * m.lattice_scale;
    weight_.reserve(m.offsets.size());
    for (std::int64_t o : m.offsets)
      weight_.push_back(std::exp(lambda * static_cast<double>(o) - logm_));
    cur_.r = 0;
    cur_.site = {0};
    cur_.mass = {1.0};
    cur_.seed = seed;
  }

  const SparseDensity& density() const { return cur_; }
  const ModelSpec& model() const { return m_; }
  double beta() const { return beta_; }
  double log_mgf_beta() const { return logm_; }
  const std::vector<double>& weights() const { return weight_; }

  void step() {
    const std::int64_t lo = cur_.site.front() + m_.offsets.front();
    const std::int64_t hi = cur_.site.back() + m_.offsets.back();
    scratch_.assign(static_cast<std::size_t>(hi - lo + 1), 0.0);
    for (std::size_t i = 0; i < cur_.site.size(); ++i) {
      const std::int64_t y = cur_.site[i];
      const double zm = cur_.mass[i];
      const RowPMF& row = sample_row_ref(m_, {cur_.seed, cur_.r, y}, row_scratch_);
      for (std::size_t a = 0; a < weight_.size(); ++a)
        scratch_[static_cast<std::size_t>(y + m_.offsets[a] - lo)] += zm * row.p[a] * weight_[a];
    }
    KahanSum tot;
    for (double v : scratch_) tot.add(v);
    const double total = tot.value();
    if (!(total < 4.851651954097903e8))  // e^20; also trips on NaN
      throw MassBlowup("tilted density total mass left the sane range");
    const double thr = eps_ * total;
    cur_.site.clear();
    cur_.mass.clear();
    for (std::size_t i = 0; i < scratch_.size(); ++i) {
      const double v = scratch_[i];
      if (v >= thr && v > 0.0) {
        cur_.site.push_back(lo + static_cast<std::int64_t>(i));
        cur_.mass.push_back(v);
      } else {
        cur_.truncated_mass += v;
      }
    }
    ++cur_.r;
  }

 private:
  const ModelSpec& m_;
  double eps_;
  double beta_ = 0.0;
  double logm_ = 0.0;
  std::vector<double> weight_;
  SparseDensity cur_;
  std::vector<double> scratch_;
  RowPMF row_scratch_;
};

// Full trajectory Z_N(0..NT). T must sit on the N^{-1} grid.
inline std::vector<SparseDensity> evolve_tilted_density(const ModelSpec& m, std::int64_t n,
                                                        double T, std::uint64_t seed,
                                                        double truncation_eps = 1e-14) {
  const std::int64_t steps = detail::checked_steps(n, T);
  TiltedEvolver ev(m, n, seed, truncation_eps);
  std::vector<SparseDensity> out;
  out.reserve(static_cast<std::size_t>(steps) + 1);
  out.push_back(ev.density());
  for (std::int64_t r = 0; r < steps; ++r) {
    ev.step();
    out.push_back(ev.density());
  }
  return out;
}

// (H^N(r/N), phi): sum of phi at the drift-centered diffusively rescaled
// sites, weighted by Z. No prefactor; with the Dirac start this is phi(0).
inline double field_pairing(const SparseDensity& z, const ModelSpec& m, std::int64_t n,
                            const TestFn& phi) {
  const double center = drift_dN(m, n) * static_cast<double>(z.r) / static_cast<double>(n);
  const double root_inv = 1.0 / std::sqrt(static_cast<double>(n));
  KahanSum s;
  for (std::size_t i = 0; i < z.site.size(); ++i)
    s.add(z.mass[i] *
          phi(root_inv * (m.lattice_scale * static_cast<double>(z.site[i]) - center)));
  return s.value();
}

namespace detail {

// phi evaluated at every site of [lo, hi] with the time-r drift centering.
inline std::vector<double> phi_row(const TestFn& phi, const ModelSpec& m, std::int64_t n,
                                   double dn, std::int64_t r, std::int64_t lo,
                                   std::int64_t hi) {
  const double center = dn * static_cast<double>(r) / static_cast<double>(n);
  const double root_inv = 1.0 / std::sqrt(static_cast<double>(n));
  std::vector<double> out(static_cast<std::size_t>(hi - lo + 1));
  for (std::int64_t y = lo; y <= hi; ++y)
    out[static_cast<std::size_t>(y - lo)] =
        phi(root_inv * (m.lattice_scale * static_cast<double>(y) - center));
  return out;
}

// annealed offset probabilities aligned with m.offsets
inline std::vector<double> annealed_by_index(const ModelSpec& m) {
  std::vector<double> mu;
  mu.reserve(m.offsets.size());
  for (const auto& [o, p] : annealed_pmf(m)) mu.push_back(p);
  return mu;
}

}  // namespace detail

// Martingale part of the discrete field equation: the r-th increment pairs
// the freshly evolved density minus its annealed one-step prediction against
// phi in the time-r drift frame, where the one-step renormalization factors
// reduce to the fixed per-offset weights.
inline FieldSeries martingale_increments(const ModelSpec& m, std::int64_t n, double T,
                                         std::uint64_t seed, const TestFn& phi) {
  const std::int64_t steps = detail::checked_steps(n, T);
  const double dn = drift_dN(m, n);
  const auto mu = detail::annealed_by_index(m);
  TiltedEvolver ev(m, n, seed, 0.0);
  FieldSeries out;
  out.times.push_back(0.0);
  out.values.push_back(0.0);
  KahanSum running;
  for (std::int64_t r = 0; r < steps; ++r) {
    const SparseDensity pre = ev.density();
    const std::int64_t lo = pre.site.front() + m.offsets.front();
    const std::int64_t hi = pre.site.back() + m.offsets.back();
    const auto phat = detail::phi_row(phi, m, n, dn, r, lo, hi);
    KahanSum predicted;
    for (std::size_t i = 0; i < pre.site.size(); ++i) {
      double acc = 0.0;
      for (std::size_t a = 0; a < mu.size(); ++a)
        acc += mu[a] * ev.weights()[a] *
               phat[static_cast<std::size_t>(pre.site[i] + m.offsets[a] - lo)];
      predicted.add(pre.mass[i] * acc);
    }
    ev.step();
    const SparseDensity& post = ev.density();
    KahanSum landed;
    for (std::size_t i = 0; i < post.site.size(); ++i)
      landed.add(post.mass[i] * phat[static_cast<std::size_t>(post.site[i] - lo)]);
    running.add(landed.value() - predicted.value());
    out.times.push_back(static_cast<double>(r + 1) / static_cast<double>(n));
    out.values.push_back(running.value());
  }
  return out;
}

// Predictable quadratic variation of the martingale part: per step the exact
// conditional variance of the increment, a quadratic form in Z built from the
// two-row joint law minus its independent version, with phi in the same
// time-r frame the increment uses. Rows further apart than the dependence
// range contribute nothing.
inline FieldSeries predictable_qv(const ModelSpec& m, std::int64_t n, double T,
                                  std::uint64_t seed, const TestFn& phi) {
  const std::int64_t steps = detail::checked_steps(n, T);
  const double dn = drift_dN(m, n);
  const auto mu = detail::annealed_by_index(m);
  const std::int64_t range = dependence_range(m);
  const std::size_t ns = m.offsets.size();
  TiltedEvolver ev(m, n, seed);
  const auto& w = ev.weights();

  // jtab[g+range] is the ns*ns matrix (p2 - mu x mu) * w * w at gap g
  std::vector<std::vector<double>> jtab(static_cast<std::size_t>(2 * range + 1));
  for (std::int64_t g = -range; g <= range; ++g) {
    std::vector<double> mat(ns * ns, 0.0);
    const JointStepPMF joint = joint_kernel_pmf(m, {0, g});
    for (const auto& [t, p] : joint.table) {
      const std::size_t a1 = detail::offset_index(m, t[0]);
      const std::size_t a2 = detail::offset_index(m, t[1]);
      mat[a1 * ns + a2] += p;
    }
    for (std::size_t a1 = 0; a1 < ns; ++a1)
      for (std::size_t a2 = 0; a2 < ns; ++a2)
        mat[a1 * ns + a2] = (mat[a1 * ns + a2] - mu[a1] * mu[a2]) * w[a1] * w[a2];
    jtab[static_cast<std::size_t>(g + range)] = std::move(mat);
  }

  FieldSeries out;
  out.times.push_back(0.0);
  out.values.push_back(0.0);
  KahanSum running;
  std::vector<double> zwin;
  for (std::int64_t r = 0; r < steps; ++r) {
    const SparseDensity& pre = ev.density();
    const std::int64_t wlo = pre.site.front(), whi = pre.site.back();
    zwin.assign(static_cast<std::size_t>(whi - wlo + 1), 0.0);
    for (std::size_t i = 0; i < pre.site.size(); ++i)
      zwin[static_cast<std::size_t>(pre.site[i] - wlo)] = pre.mass[i];
    const std::int64_t plo = wlo - range + m.offsets.front();
    const std::int64_t phi_hi = whi + range + m.offsets.back();
    const auto phat = detail::phi_row(phi, m, n, dn, r, plo, phi_hi);
    KahanSum vstep;
    for (std::size_t i = 0; i < pre.site.size(); ++i) {
      const std::int64_t y1 = pre.site[i];
      const double z1 = pre.mass[i];
      for (std::int64_t g = -range; g <= range; ++g) {
        const std::int64_t y2 = y1 + g;
        if (y2 < wlo || y2 > whi) continue;
        const double z2 = zwin[static_cast<std::size_t>(y2 - wlo)];
        if (z2 == 0.0) continue;
        const auto& mat = jtab[static_cast<std::size_t>(g + range)];
        double q = 0.0;
        for (std::size_t a1 = 0; a1 < ns; ++a1) {
          const double f1 = phat[static_cast<std::size_t>(y1 + m.offsets[a1] - plo)];
          if (f1 == 0.0) continue;
          double inner = 0.0;
          for (std::size_t a2 = 0; a2 < ns; ++a2)
            inner += mat[a1 * ns + a2] *
                     phat[static_cast<std::size_t>(y2 + m.offsets[a2] - plo)];
          q += f1 * inner;
        }
        vstep.add(z1 * z2 * q);
      }
    }
    running.add(vstep.value());
    ev.step();
    out.times.push_back(static_cast<double>(r + 1) / static_cast<double>(n));
    out.values.push_back(running.value());
  }
  return out;
}

// Pair-interaction field: after each step s = 1..NT add
//   N^{-1/2} sum_{y1,y2} phi_hat_s(y1) f(y1-y2) Z(s,y1) Z(s,y2),
// with the inner sum cut at the gap radius beyond which f is negligible.
inline FieldSeries qv_field(const ModelSpec& m, std::int64_t n, double T, std::uint64_t seed,
                            const GapFunction& f, const TestFn& phi) {
  const std::int64_t steps = detail::checked_steps(n, T);
  const double dn = drift_dN(m, n);
  const double pref = 1.0 / std::sqrt(static_cast<double>(n));
  std::vector<double> fv(static_cast<std::size_t>(2 * f.radius + 1));
  for (std::int64_t g = -f.radius; g <= f.radius; ++g)
    fv[static_cast<std::size_t>(g + f.radius)] = f.eval(g);
  TiltedEvolver ev(m, n, seed);
  FieldSeries out;
  out.times.push_back(0.0);
  out.values.push_back(0.0);
  KahanSum running;
  std::vector<double> zwin;
  for (std::int64_t s = 1; s <= steps; ++s) {
    ev.step();
    const SparseDensity& z = ev.density();
    const std::int64_t wlo = z.site.front(), whi = z.site.back();
    zwin.assign(static_cast<std::size_t>(whi - wlo + 1), 0.0);
    for (std::size_t i = 0; i < z.site.size(); ++i)
      zwin[static_cast<std::size_t>(z.site[i] - wlo)] = z.mass[i];
    const auto phat = detail::phi_row(phi, m, n, dn, s, wlo, whi);
    KahanSum inc;
    for (std::size_t i = 0; i < z.site.size(); ++i) {
      const std::int64_t y1 = z.site[i];
      double acc = 0.0;
      for (std::int64_t g = -f.radius; g <= f.radius; ++g) {
        const std::int64_t y2 = y1 - g;
        if (y2 < wlo || y2 > whi) continue;
        acc += fv[static_cast<std::size_t>(g + f.radius)] *
               zwin[static_cast<std::size_t>(y2 - wlo)];
      }
      inc.add(z.mass[i] * phat[static_cast<std::size_t>(y1 - wlo)] * acc);
    }
    running.add(pref * inc.value());
    out.times.push_back(static_cast<double>(s) / static_cast<double>(n));
    out.values.push_back(running.value());
  }
  return out;
}

// Exact E[H^N(t, phi)^2]. The annealed pair correlation E[Z(x1) Z(x2)]
// closes under a linear one-step recursion driven by the two-row joint law,
// so the second moment needs no sampling. Serves as the deterministic anchor
// the two sampled estimators are checked against. Cost grows with the square
// of the occupied width; pruning keeps a rectangular hull of the support.
inline double moment_pair_exact(const ModelSpec& m, std::int64_t n, double t,
                                const TestFn& phi, double truncation_eps = 1e-14) {
  if (!(truncation_eps >= 0.0 && truncation_eps <= 1e-8))
    throw std::invalid_argument("truncation_eps must lie in [0, 1e-8]");
  const std::int64_t steps = detail::checked_steps(n, t);
  const double beta = tilt_beta(n, m.symmetry_order_p);
  const double logm = log_mgf(annealed_law(m), beta);
  const double lambda = beta * m.lattice_scale;
  const std::size_t ns = m.offsets.size();
  std::vector<double> w(ns);
  for (std::size_t a = 0; a < ns; ++a)
    w[a] = std::exp(lambda * static_cast<double>(m.offsets[a]) - logm);
  const auto mu = detail::annealed_by_index(m);
  const std::int64_t range = dependence_range(m);

  // per-gap step matrices w * w * p2; beyond the range p2 factorizes. The
  // recursion reads mat(a1, a2) with a1 the move of the walker at y1 and
  // g = y1 - y2, while joint_kernel_pmf({0, g}) lists the walker at 0 (= y2
  // after shifting) first, so the tuple is flipped on read.
  std::vector<std::vector<double>> step_mat(static_cast<std::size_t>(2 * range + 1));
  for (std::int64_t g = -range; g <= range; ++g) {
    std::vector<double> mat(ns * ns, 0.0);
    const JointStepPMF joint = joint_kernel_pmf(m, {0, g});
    for (const auto& [tup, p] : joint.table)
      mat[detail::offset_index(m, tup[1]) * ns + detail::offset_index(m, tup[0])] += p;
    for (std::size_t a1 = 0; a1 < ns; ++a1)
      for (std::size_t a2 = 0; a2 < ns; ++a2) mat[a1 * ns + a2] *= w[a1] * w[a2];
    step_mat[static_cast<std::size_t>(g + range)] = std::move(mat);
  }
  std::vector<double> far_mat(ns * ns);
  for (std::size_t a1 = 0; a1 < ns; ++a1)
    for (std::size_t a2 = 0; a2 < ns; ++a2)
      far_mat[a1 * ns + a2] = w[a1] * mu[a1] * w[a2] * mu[a2];

  const std::int64_t omin = m.offsets.front(), omax = m.offsets.back();
  std::int64_t lo1 = 0, hi1 = 0, lo2 = 0, hi2 = 0;
  std::vector<double> cur{1.0}, next;
  for (std::int64_t r = 0; r < steps; ++r) {
    const std::int64_t nlo1 = lo1 + omin, nhi1 = hi1 + omax;
    const std::int64_t nlo2 = lo2 + omin, nhi2 = hi2 + omax;
    const std::size_t w2n = static_cast<std::size_t>(nhi2 - nlo2 + 1);
    next.assign(static_cast<std::size_t>(nhi1 - nlo1 + 1) * w2n, 0.0);
    const std::size_t w2 = static_cast<std::size_t>(hi2 - lo2 + 1);
    for (std::int64_t y1 = lo1; y1 <= hi1; ++y1)
      for (std::int64_t y2 = lo2; y2 <= hi2; ++y2) {
        const double v =
            cur[static_cast<std::size_t>(y1 - lo1) * w2 + static_cast<std::size_t>(y2 - lo2)];
        if (v == 0.0) continue;
        const std::int64_t g = y1 - y2;
        const double* mat =
            std::llabs(g) <= range ? step_mat[static_cast<std::size_t>(g + range)].data()
                                   : far_mat.data();
        double* base = next.data() +
                       static_cast<std::size_t>(y1 + omin - nlo1) * w2n +
                       static_cast<std::size_t>(y2 + omin - nlo2);
        for (std::size_t a1 = 0; a1 < ns; ++a1) {
          double* row = base + static_cast<std::size_t>(m.offsets[a1] - omin) * w2n;
          for (std::size_t a2 = 0; a2 < ns; ++a2)
            row[static_cast<std::size_t>(m.offsets[a2] - omin)] += v * mat[a1 * ns + a2];
        }
      }
    KahanSum tot;
    for (double v : next) tot.add(v);
    if (!(tot.value() < 2.35385266837020e17))  // e^40; also trips on NaN
      throw MassBlowup("pair correlation total mass left the sane range");
    const double thr = truncation_eps * tot.value();
    // shrink to the rectangular hull of entries above threshold
    std::int64_t klo1 = nhi1 + 1, khi1 = nlo1 - 1, klo2 = nhi2 + 1, khi2 = nlo2 - 1;
    for (std::int64_t y1 = nlo1; y1 <= nhi1; ++y1)
      for (std::int64_t y2 = nlo2; y2 <= nhi2; ++y2)
        if (next[static_cast<std::size_t>(y1 - nlo1) * w2n +
                 static_cast<std::size_t>(y2 - nlo2)] > thr) {
          klo1 = std::min(klo1, y1);
          khi1 = std::max(khi1, y1);
          klo2 = std::min(klo2, y2);
          khi2 = std::max(khi2, y2);
        }
    if (klo1 > khi1) throw MassBlowup("pair correlation mass vanished");
    const std::size_t kw2 = static_cast<std::size_t>(khi2 - klo2 + 1);
    cur.assign(static_cast<std::size_t>(khi1 - klo1 + 1) * kw2, 0.0);
    for (std::int64_t y1 = klo1; y1 <= khi1; ++y1)
      for (std::int64_t y2 = klo2; y2 <= khi2; ++y2)
        cur[static_cast<std::size_t>(y1 - klo1) * kw2 + static_cast<std::size_t>(y2 - klo2)] =
            next[static_cast<std::size_t>(y1 - nlo1) * w2n +
                 static_cast<std::size_t>(y2 - nlo2)];
    lo1 = klo1;
    hi1 = khi1;
    lo2 = klo2;
    hi2 = khi2;
  }

  const double dn_t = drift_dN(m, n) * t;
  const double root_inv = 1.0 / std::sqrt(static_cast<double>(n));
  std::vector<double> p1(static_cast<std::size_t>(hi1 - lo1 + 1));
  for (std::int64_t y = lo1; y <= hi1; ++y)
    p1[static_cast<std::size_t>(y - lo1)] =
        phi(root_inv * (m.lattice_scale * static_cast<double>(y) - dn_t));
  std::vector<double> p2(static_cast<std::size_t>(hi2 - lo2 + 1));
  for (std::int64_t y = lo2; y <= hi2; ++y)
    p2[static_cast<std::size_t>(y - lo2)] =
        phi(root_inv * (m.lattice_scale * static_cast<double>(y) - dn_t));
  KahanSum s;
  const std::size_t w2 = static_cast<std::size_t>(hi2 - lo2 + 1);
  for (std::size_t i = 0; i < p1.size(); ++i)
    for (std::size_t j = 0; j < w2; ++j) s.add(cur[i * w2 + j] * p1[i] * p2[j]);
  return s.value();
}

// ==== moment estimation over environments ====

struct MomentEstimate {
  Estimate direct;   // environment average of the k-th pairing power
  Estimate tilted;   // change-of-measure average over tilted k-point paths
  double z = 0.0;    // |direct - tilted| in pooled standard errors
  bool disagreement = false;  // z > 4
};

namespace detail {

// replica seed streams: one tag per estimator so the two never share draws
inline std::uint64_t env_replica_seed(std::uint64_t seed, std::int64_t i) {
  return mix64(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(i + 1)));
}
inline std::uint64_t path_replica_seed(std::uint64_t seed, std::int64_t i) {
  return mix64(seed ^ 0xbf58476d1ce4e5b9ULL ^
               (0x94d049bb133111ebULL * static_cast<std::uint64_t>(i + 1)));
}

// Exact law of the beta-tilted annealed walk after `steps` steps, paired with
// phi centered at time steps/N. This is the k = 1 change-of-measure value.
inline double tilted_walk_pairing(const ModelSpec& m, std::int64_t n, std::int64_t steps,
                                  const TestFn& phi) {
  const double beta = tilt_beta(n, m.symmetry_order_p);
  const LatticePMF mu = annealed_law(m);
  const double mval = mgf(mu, beta);
  std::vector<double> q(m.offsets.size());
  {
    const auto mu_idx = annealed_by_index(m);
    const double lambda = beta * m.lattice_scale;
    for (std::size_t a = 0; a < q.size(); ++a)
      q[a] = mu_idx[a] * std::exp(lambda * static_cast<double>(m.offsets[a])) / mval;
  }
  const std::int64_t omin = m.offsets.front(), omax = m.offsets.back();
  std::int64_t lo = 0;
  std::vector<double> pmf{1.0}, next;
  for (std::int64_t r = 0; r < steps; ++r) {
    next.assign(pmf.size() + static_cast<std::size_t>(omax - omin), 0.0);
    for (std::size_t i = 0; i < pmf.size(); ++i) {
      if (pmf[i] == 0.0) continue;
      for (std::size_t a = 0; a < q.size(); ++a)
        next[i + static_cast<std::size_t>(m.offsets[a] - omin)] += pmf[i] * q[a];
    }
    pmf.swap(next);
    lo += omin;
  }
  const double dn_t = drift_dN(m, n) * static_cast<double>(steps) / static_cast<double>(n);
  const double root_inv = 1.0 / std::sqrt(static_cast<double>(n));
  KahanSum s;
  for (std::size_t i = 0; i < pmf.size(); ++i)
    s.add(pmf[i] * phi(root_inv * (m.lattice_scale *
                                       static_cast<double>(lo + static_cast<std::int64_t>(i)) -
                                   dn_t)));
  return s.value();
}

struct TiltedMoveTable {
  std::vector<std::vector<std::int64_t>> moves;
  std::vector<double> cum;
  double log_normalizer = 0.0;
};

}  // namespace detail

// E[H^N(t, phi)^k] two ways: (a) direct average of the k-th pairing power
// over environments; (b) change of measure through the tilted k-point chain,
// averaging exp(sum_s [log Lambda(C_{s-1}) - k log M(beta)]) prod_j phi with
// Lambda the conditional step MGF of the annealed k-point motion. Steps with
// all walkers out of dependence range have log Lambda = k log M exactly.
// Replicas are pure functions of (seed, i) and fan out across `workers`
// threads into indexed slots, so the worker count never changes the result.
inline MomentEstimate moment_estimate(const ModelSpec& m, std::int64_t n, double t,
                                      const TestFn& phi, int k, std::int64_t n_env,
                                      std::uint64_t seed, int workers = 1) {
  if (k < 1 || k > 4) throw std::invalid_argument("moment_estimate supports 1 <= k <= 4");
  if (n_env < 2) throw std::invalid_argument("moment_estimate needs n_env >= 2");
  const std::int64_t steps = detail::checked_steps(n, t);

  std::vector<double> direct_samples(static_cast<std::size_t>(n_env));
  detail::run_indexed(n_env, workers, [&](std::int64_t i, int) {
    TiltedEvolver ev(m, n, detail::env_replica_seed(seed, i));
    for (std::int64_t r = 0; r < steps; ++r) ev.step();
    const double h = field_pairing(ev.density(), m, n, phi);
    double pw = h;
    for (int j = 1; j < k; ++j) pw *= h;
    direct_samples[static_cast<std::size_t>(i)] = pw;
  });
  MomentEstimate out;
  out.direct = mean_estimate(direct_samples, "mc_direct");

  if (k == 1) {
    out.tilted = {detail::tilted_walk_pairing(m, n, steps, phi), 0.0, 1, "tilted_exact"};
  } else {
    const double beta = tilt_beta(n, m.symmetry_order_p);
    const double lambda = beta * m.lattice_scale;
    const double logm = log_mgf(annealed_law(m), beta);
    const double dn_t = drift_dN(m, n) * t;
    const double root_inv = 1.0 / std::sqrt(static_cast<double>(n));
    const std::int64_t range = dependence_range(m);
    // move tables are memoized per thread slot; entries are pure functions of
    // the relative configuration, so duplicate caches stay consistent
    std::vector<std::map<std::vector<std::int64_t>, detail::TiltedMoveTable>> caches(
        static_cast<std::size_t>(std::max(1, std::min(workers, 256))));
    std::vector<double> samples(static_cast<std::size_t>(n_env));
    detail::run_indexed(n_env, workers, [&](std::int64_t i, int slot) {
      auto& cache = caches[static_cast<std::size_t>(slot)];
      std::vector<std::int64_t> pos(static_cast<std::size_t>(k)), rel(static_cast<std::size_t>(k));
      Xoshiro256 rng(detail::path_replica_seed(seed, i));
      KahanSum logw;
      for (std::int64_t s = 0; s < steps; ++s) {
        for (std::size_t j = 0; j < pos.size(); ++j) rel[j] = pos[j] - pos[0];
        bool all_apart = true;
        for (std::size_t a = 0; a < rel.size() && all_apart; ++a)
          for (std::size_t b = a + 1; b < rel.size(); ++b)
            if (std::llabs(rel[a] - rel[b]) <= range) {
              all_apart = false;
              break;
            }
        if (all_apart)
          for (std::size_t j = 0; j < rel.size(); ++j)
            rel[j] = static_cast<std::int64_t>(j) * (range + 1);
        auto it = cache.find(rel);
        if (it == cache.end()) {
          const JointStepPMF joint = joint_kernel_pmf(m, rel);
          const double z = tilt_normalizer(joint, lambda);
          detail::TiltedMoveTable tab;
          tab.log_normalizer = std::log(z);
          double acc = 0.0;
          for (const auto& [mv, p] : joint.table) {
            std::int64_t tot = 0;
            for (std::int64_t o : mv) tot += o;
            acc += p * std::exp(lambda * static_cast<double>(tot)) / z;
            tab.moves.push_back(mv);
            tab.cum.push_back(acc);
          }
          tab.cum.back() = 1.0;
          it = cache.emplace(rel, std::move(tab)).first;
        }
        const auto& tab = it->second;
        logw.add(tab.log_normalizer - static_cast<double>(k) * logm);
        const double u = rng.uniform();
        std::size_t pick = tab.cum.size() - 1;
        for (std::size_t c = 0; c < tab.cum.size(); ++c)
          if (u < tab.cum[c]) {
            pick = c;
            break;
          }
        for (std::size_t j = 0; j < pos.size(); ++j) pos[j] += tab.moves[pick][j];
      }
      double x = std::exp(logw.value());
      for (std::size_t j = 0; j < pos.size(); ++j)
        x *= phi(root_inv * (m.lattice_scale * static_cast<double>(pos[j]) - dn_t));
      samples[static_cast<std::size_t>(i)] = x;
    });
    out.tilted = mean_estimate(samples, "mc_tilted");
  }

  const double gap = std::abs(out.direct.value - out.tilted.value);
  const double pooled =
      std::sqrt(out.direct.se * out.direct.se + out.tilted.se * out.tilted.se);
  out.z = pooled > 0.0 ? gap / pooled
                       : (gap == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
  out.disagreement = out.z > 4.0;
  return out;
}

}  // namespace kflow
