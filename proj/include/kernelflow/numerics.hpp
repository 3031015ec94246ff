#pragma once
// Shared numerical utilities: compensated summation, batch-means error bars,
// moment/cumulant transforms, set partitions, Gauss-Legendre rules, and a
// small dense linear solver.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace kflow {

// ==== compensated accumulation ====

// Neumaier-compensated sum: exact for one swamped term either way around.
struct KahanSum {
  double sum = 0.0;
  double comp = 0.0;

  void add(double x) {
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x))
      comp += (sum - t) + x;
    else
      comp += (x - t) + sum;
    sum = t;
  }
  double value() const { return sum + comp; }
};

// Sum in index order with compensation; the result is a pure function of the
// ordered contents, which is what the worker-count determinism contract needs.
inline double kahan_total(const std::vector<double>& xs) {
  KahanSum k;
  for (double x : xs) k.add(x);
  return k.value();
}

// ==== indexed fan-out ====

namespace detail {

// Run fn(i, slot) for i = 0..n_tasks-1 across up to `workers` threads. Tasks
// are claimed from a shared counter, so idle threads steal whatever is left;
// `slot` < workers identifies the claiming thread for per-thread scratch.
// Each task writes only its own output cell, so results are ordered by index
// and the worker count cannot change them. First exception wins and is
// rethrown after all threads drain.
template <class Fn>
void run_indexed(std::int64_t n_tasks, int workers, Fn&& fn) {
  if (n_tasks <= 0) return;
  const int w = std::max(1, std::min<int>(workers, static_cast<int>(
                                                       std::min<std::int64_t>(n_tasks, 256))));
  if (w == 1) {
    for (std::int64_t i = 0; i < n_tasks; ++i) fn(i, 0);
    return;
  }
  std::atomic<std::int64_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex error_mu;
  auto drain = [&](int slot) {
    while (!failed.load(std::memory_order_relaxed)) {
      const std::int64_t i = next.fetch_add(1, std::memory_order_relaxed);
      if (i >= n_tasks) return;
      try {
        fn(i, slot);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        failed.store(true, std::memory_order_relaxed);
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(w - 1));
  for (int s = 1; s < w; ++s) pool.emplace_back(drain, s);
  drain(0);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

// ==== Monte Carlo estimates ====

struct Estimate {
  double value = 0.0;
  double se = 0.0;       // standard error; 0 means exact within fp arithmetic
  std::int64_t n = 0;    // samples (or steps) behind the estimate
  std::string method;
};

// Sample mean with standard error.
inline Estimate mean_estimate(const std::vector<double>& xs, std::string method = "mc") {
  const auto n = static_cast<std::int64_t>(xs.size());
  if (n == 0) return {0.0, 0.0, 0, std::move(method)};
  KahanSum s;
  for (double x : xs) s.add(x);
  const double m = s.value() / static_cast<double>(n);
  KahanSum v;
  for (double x : xs) v.add((x - m) * (x - m));
  const double var = n > 1 ? v.value() / static_cast<double>(n - 1) : 0.0;
  return {m, n > 1 ? std::sqrt(var / static_cast<double>(n)) : 0.0, n, std::move(method)};
}

// Ratio of batch totals with a delta-method standard error:
//   theta = sum(Y)/sum(X),  Var(theta) ~ (1/(B(B-1))) sum_i ((Yb_i - theta*Xb_i)/Xbar)^2.
inline Estimate ratio_estimate(const std::vector<double>& batch_num,
                               const std::vector<double>& batch_den,
                               std::int64_t n_steps, std::string method = "batch-means") {
  if (batch_num.size() != batch_den.size() || batch_num.empty())
    throw std::invalid_argument("ratio_estimate: batch vectors mismatched");
  const auto b = static_cast<double>(batch_num.size());
  const double num = kahan_total(batch_num);
  const double den = kahan_total(batch_den);
  if (den == 0.0) throw std::domain_error("ratio_estimate: zero denominator");
  const double theta = num / den;
  const double xbar = den / b;
  KahanSum dev2;
  for (std::size_t i = 0; i < batch_num.size(); ++i) {
    const double d = (batch_num[i] - theta * batch_den[i]) / xbar;
    dev2.add(d * d);
  }
  const double var = dev2.value() / (b * (b - 1.0));
  return {theta, std::sqrt(std::max(0.0, var)), n_steps, std::move(method)};
}

// Inverse-variance pooling of independent estimates. Exact members (se == 0)
// dominate; they must agree to fp tolerance or the pool is ill-posed, so fall
// back to sample-count weights for them.
inline Estimate merge_estimates(const std::vector<Estimate>& parts) {
  if (parts.empty()) return {};
  bool any_exact = false;
  for (const auto& e : parts) any_exact |= (e.se == 0.0);
  KahanSum wsum, wval;
  std::int64_t n = 0;
  for (const auto& e : parts) {
    double w;
    if (any_exact) {
      if (e.se != 0.0) continue;
      w = static_cast<double>(e.n > 0 ? e.n : 1);
    } else {
      w = 1.0 / (e.se * e.se);
    }
    wsum.add(w);
    wval.add(w * e.value);
    n += e.n;
  }
  Estimate out;
  out.value = wval.value() / wsum.value();
  out.se = any_exact ? 0.0 : std::sqrt(1.0 / wsum.value());
  out.n = n;
  out.method = parts.front().method;
  return out;
}

// ==== moments and cumulants ====

inline std::vector<double> binomial_row(int n) {
  std::vector<double> row(static_cast<std::size_t>(n) + 1, 1.0);
  for (int k = 1; k < n; ++k) row[k] = row[k - 1] * static_cast<double>(n - k + 1) / k;
  if (n >= 1) row[n] = 1.0;
  return row;
}

// Raw moments m_1..m_K (index 0 unused, m[0]=1) -> cumulants k_1..k_K via
//   k_n = m_n - sum_{j=1}^{n-1} C(n-1, j-1) k_j m_{n-j}.
inline std::vector<double> moments_to_cumulants(const std::vector<double>& m) {
  std::vector<double> k(m.size(), 0.0);
  for (std::size_t n = 1; n < m.size(); ++n) {
    double acc = m[n];
    for (std::size_t j = 1; j < n; ++j) {
      double c = 1.0;  // C(n-1, j-1)
      for (std::size_t i = 0; i < j - 1; ++i)
        c = c * static_cast<double>(n - 1 - i) / static_cast<double>(i + 1);
      acc -= c * k[j] * m[n - j];
    }
    k[n] = acc;
  }
  return k;
}

// ==== set partitions ====

// Bell numbers B_0..B_10; partition enumeration is validated against these.
inline constexpr std::int64_t kBellNumbers[11] = {1,      1,    2,     5,     15,    52,
                                                  203,    877,  4140,  21147, 115975};

// Visit every set partition of {0,..,m-1} as a restricted-growth string:
// position i takes an existing block label or opens the next one. Callback
// gets (block label per element, number of blocks).
inline void for_each_set_partition(
    int m, const std::function<void(const std::vector<int>&, int)>& visit) {
  if (m <= 0) return;
  std::vector<int> block(static_cast<std::size_t>(m), 0);
  std::function<void(int, int)> rec = [&](int i, int nb) {
    if (i == m) {
      visit(block, nb);
      return;
    }
    for (int b = 0; b <= nb; ++b) {
      block[static_cast<std::size_t>(i)] = b;
      rec(i + 1, nb + (b == nb ? 1 : 0));
    }
  };
  rec(0, 0);
}

// ==== quadrature ====

struct QuadRule {
  std::vector<double> x;  // nodes
  std::vector<double> w;  // weights
};

// Gauss-Legendre on [-1,1] by Newton iteration on P_n; exact for polynomials
// of degree <= 2n-1. Deterministic to the last bit for a given n.
inline QuadRule gauss_legendre(int n) {
  QuadRule q;
  q.x.resize(static_cast<std::size_t>(n));
  q.w.resize(static_cast<std::size_t>(n));
  const double pi = 3.14159265358979323846;
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    q.x[i] = -x;
    q.x[n - 1 - i] = x;
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    q.w[i] = w;
    q.w[n - 1 - i] = w;
  }
  return q;
}

// Affine map of a rule to [a,b].
inline QuadRule mapped(const QuadRule& base, double a, double b) {
  QuadRule q = base;
  const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
  for (auto& x : q.x) x = mid + half * x;
  for (auto& w : q.w) w *= half;
  return q;
}

// ==== dense linear solve (tiny systems only) ====

// Gaussian elimination with partial pivoting; A is row-major n*n, overwritten.
inline std::vector<double> solve_linear(std::vector<double> a, std::vector<double> b) {
  const auto n = b.size();
  if (a.size() != n * n) throw std::invalid_argument("solve_linear: shape mismatch");
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    if (a[piv * n + col] == 0.0) throw std::domain_error("solve_linear: singular matrix");
    if (piv != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a[piv * n + c], a[col * n + c]);
      std::swap(b[piv], b[col]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / a[col * n + col];
      if (f == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(n, 0.0);
  for (std::size_t r = n; r-- > 0;) {
    double acc = b[r];
    for (std::size_t c = r + 1; c < n; ++c) acc -= a[r * n + c] * x[c];
    x[r] = acc / a[r * n + r];
  }
  return x;
}

}  // namespace kflow
