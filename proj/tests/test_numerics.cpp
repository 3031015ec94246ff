#include <catch2/catch_amalgamated.hpp>

#include "kernelflow/numerics.hpp"

#include <cmath>
#include <set>
#include <vector>

using namespace kflow;

TEST_CASE("kahan accumulation keeps cancelling tails") {
  REQUIRE(kahan_total({1e16, 1.0, -1e16}) == 1.0);
  KahanSum s;
  for (int i = 0; i < 10000000; ++i) s.add(0.1);
  REQUIRE(std::abs(s.value() - 1e6) < 1e-6);
}

TEST_CASE("moment to cumulant recursion on known laws") {
  // Poisson(lambda): every cumulant equals lambda
  const double l = 0.7;
  const std::vector<double> m = {1.0, l, l * l + l, l * l * l + 3 * l * l + l,
                                 l * l * l * l + 6 * l * l * l + 7 * l * l + l};
  const auto k = moments_to_cumulants(m);
  for (std::size_t i = 1; i < k.size(); ++i) REQUIRE_THAT(k[i], Catch::Matchers::WithinAbs(l, 1e-12));

  // standard normal: k2 = 1, the rest vanish
  const auto kn = moments_to_cumulants({1.0, 0.0, 1.0, 0.0, 3.0, 0.0, 15.0});
  REQUIRE_THAT(kn[1], Catch::Matchers::WithinAbs(0.0, 1e-12));
  REQUIRE_THAT(kn[2], Catch::Matchers::WithinAbs(1.0, 1e-12));
  for (std::size_t i = 3; i < kn.size(); ++i)
    REQUIRE_THAT(kn[i], Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("set partition enumeration matches Bell numbers and is valid") {
  for (int m = 1; m <= 8; ++m) {
    std::int64_t count = 0;
    std::set<std::vector<int>> seen;
    for_each_set_partition(m, [&](const std::vector<int>& block, int nb) {
      ++count;
      REQUIRE(block[0] == 0);  // restricted growth
      int mx = 0;
      for (int b : block) {
        REQUIRE(b >= 0);
        REQUIRE(b <= mx);  // never skips a label
        mx = std::max(mx, b + 1);
      }
      REQUIRE(mx == nb);
      seen.insert(block);
    });
    REQUIRE(count == kBellNumbers[m]);
    REQUIRE(static_cast<std::int64_t>(seen.size()) == count);
  }
}

TEST_CASE("gauss-legendre rule integrates polynomials exactly") {
  const auto q = gauss_legendre(64);
  double wsum = 0.0;
  for (double w : q.w) wsum += w;
  REQUIRE_THAT(wsum, Catch::Matchers::WithinAbs(2.0, 1e-13));
  for (std::size_t i = 0; i < q.x.size(); ++i)
    REQUIRE_THAT(q.x[i], Catch::Matchers::WithinAbs(-q.x[q.x.size() - 1 - i], 1e-15));

  // degree 126 (even) over [-1,1]: exact value 2/127
  double v = 0.0;
  for (std::size_t i = 0; i < q.x.size(); ++i) v += q.w[i] * std::pow(q.x[i], 126);
  REQUIRE_THAT(v, Catch::Matchers::WithinRel(2.0 / 127.0, 1e-12));

  // mapped rule integrates u^5 over [0,1] to 1/6
  const auto m = mapped(gauss_legendre(8), 0.0, 1.0);
  double v5 = 0.0;
  for (std::size_t i = 0; i < m.x.size(); ++i) v5 += m.w[i] * std::pow(m.x[i], 5);
  REQUIRE_THAT(v5, Catch::Matchers::WithinAbs(1.0 / 6.0, 1e-14));
}

TEST_CASE("ratio estimate and pooling") {
  std::vector<double> num = {2.0, 2.2, 1.8, 2.1, 1.9, 2.0, 2.05, 1.95};
  std::vector<double> den = {1.0, 1.1, 0.9, 1.05, 0.95, 1.0, 1.02, 0.98};
  const auto e = ratio_estimate(num, den, 800);
  REQUIRE_THAT(e.value, Catch::Matchers::WithinAbs(2.0, 0.05));
  REQUIRE(e.se < 0.05);
  REQUIRE(e.n == 800);
  REQUIRE_THROWS_AS(ratio_estimate({1.0}, {0.0}, 1), std::domain_error);

  const Estimate a{1.0, 0.1, 100, "mc"};
  const Estimate b{2.0, 0.2, 100, "mc"};
  const auto pooled = merge_estimates({a, b});
  REQUIRE_THAT(pooled.value, Catch::Matchers::WithinAbs(1.2, 1e-12));
  REQUIRE_THAT(pooled.se, Catch::Matchers::WithinAbs(std::sqrt(1.0 / 125.0), 1e-12));

  // exact members dominate a pool
  const Estimate exact{1.5, 0.0, 10, "exact"};
  const auto pooled2 = merge_estimates({a, exact});
  REQUIRE(pooled2.value == 1.5);
  REQUIRE(pooled2.se == 0.0);
}

TEST_CASE("dense solve on a small system") {
  // A = [[2,1,0],[1,3,1],[0,1,2]], b = [3,5,3] -> x = [1,1,1]
  const auto x = solve_linear({2, 1, 0, 1, 3, 1, 0, 1, 2}, {3, 5, 3});
  for (double xi : x) REQUIRE_THAT(xi, Catch::Matchers::WithinAbs(1.0, 1e-12));
  REQUIRE_THROWS_AS(solve_linear({0, 0, 0, 0}, {1, 1}), std::domain_error);
}

TEST_CASE("mean estimate") {
  const auto e = mean_estimate({1.0, 2.0, 3.0, 4.0});
  REQUIRE_THAT(e.value, Catch::Matchers::WithinAbs(2.5, 1e-15));
  REQUIRE_THAT(e.se, Catch::Matchers::WithinAbs(std::sqrt((5.0 / 3.0) / 4.0), 1e-12));
}
