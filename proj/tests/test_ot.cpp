#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "doctest.h"

#include "lico/errors.hpp"
#include "lico/ops.hpp"
#include "lico/ot.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace lico;
using lico::testing::Leaves;
using lico::testing::random_tensor;
using T = BasicTensor<double>;

namespace {

// Cosine costs between random rows, the same kind of cost training produces.
std::vector<double> random_cost(std::size_t n, std::size_t m, std::uint64_t seed) {
  NoGradScope<double> off;
  const auto f = random_tensor<double>({n, 5}, seed, -1, 1, false);
  const auto g = random_tensor<double>({m, 5}, seed + 1000, -1, 1, false);
  return to_double(cost_matrix(f, g));
}

std::vector<double> random_simplex(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> dist(0.2, 1.0);
  std::vector<double> w(n);
  for (auto& x : w) x = dist(rng);
  const double s = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& x : w) x /= s;
  return w;
}

}  // namespace

TEST_CASE("cost matrix reference values") {
  const T f({3, 2}, {1.0, 0.0, -2.0, 0.0, 0.0, 3.0});
  const T g({1, 2}, {4.0, 0.0});
  const auto c = cost_matrix(f, g);
  CHECK(c[0] == doctest::Approx(0.0).epsilon(1e-12));  // collinear
  CHECK(c[1] == doctest::Approx(2.0).epsilon(1e-12));  // anti-collinear
  CHECK(c[2] == doctest::Approx(1.0).epsilon(1e-12));  // orthogonal
  // A zero row is guarded rather than dividing by zero.
  const auto z = cost_matrix(T({1, 2}, {0.0, 0.0}), g);
  CHECK(std::isfinite(z[0]));
  CHECK_THROWS_AS(cost_matrix(T::zeros({2, 3}), T::zeros({2, 2})), ShapeError);
}

TEST_CASE("sinkhorn closed-form cases") {
  SUBCASE("zero cost gives the outer product of the marginals") {
    Rng rng(3);
    const auto u = random_simplex(3, rng);
    const auto v = random_simplex(4, rng);
    const auto plan = sinkhorn(std::vector<double>(12, 0.0), 3, 4, u, v);
    REQUIRE(plan.converged);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 4; ++c) CHECK(plan.at(r, c) == doctest::Approx(u[r] * v[c]).epsilon(1e-9));
    const auto loss = ot_loss(T::zeros({3, 4}), plan);
    CHECK(loss.item() == 0.0);
  }
  SUBCASE("one by one is forced") {
    const auto plan = sinkhorn(std::vector<double>{0.7}, 1, 1, std::vector<double>{1.0}, std::vector<double>{1.0});
    CHECK(plan.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ot_loss(T({1, 1}, {0.7}), plan).item() == doctest::Approx(0.7).epsilon(1e-12));
  }
  SUBCASE("2x2 diagonal example against a grid-search LP") {
    const std::vector<double> cost{0.0, 1.0, 1.0, 0.0};
    const auto half = uniform_weights(2);
    SinkhornOptions opt;
    opt.lambda = 0.05;
    const auto plan = sinkhorn(cost, 2, 2, half, half, opt);
    double lp = 0.0;
    const double t = lico::testing::grid_search_2x2(cost, 100000, &lp);
    CHECK(t == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(std::abs(plan.at(0, 0) - 0.5) < 1e-4);
    CHECK(std::abs(plan.at(0, 1)) < 1e-4);
    CHECK(std::abs(plan.at(1, 0)) < 1e-4);
    CHECK(std::abs(plan.at(1, 1) - 0.5) < 1e-4);
    CHECK(std::abs(plan.inner(cost) - lp) < 1e-3);
  }
}

TEST_CASE("sinkhorn input validation") {
  const std::vector<double> cost(4, 0.5);
  const auto half = uniform_weights(2);
  SinkhornOptions bad;
  bad.lambda = 0.0;
  CHECK_THROWS_AS(sinkhorn(cost, 2, 2, half, half, bad), DomainError);
  CHECK_THROWS_AS(sinkhorn(cost, 2, 2, std::vector<double>{0.7, 0.7}, half), DomainError);
  CHECK_THROWS_AS(sinkhorn(cost, 2, 2, std::vector<double>{1.0, 0.0}, half), DomainError);
  CHECK_THROWS_AS(sinkhorn(cost, 2, 3, half, half), ShapeError);
  CHECK_THROWS_AS(ot_loss(T::zeros({3, 2}), sinkhorn(cost, 2, 2, half, half)), ContractError);
}

TEST_CASE("non-convergence is flagged with the achieved violation") {
  const auto cost = random_cost(4, 4, 8);
  SinkhornOptions opt;
  opt.lambda = 0.01;
  opt.max_iters = 2;
  opt.tol = 1e-14;
  const auto plan = sinkhorn(cost, 4, 4, uniform_weights(4), uniform_weights(4), opt);
  CHECK_FALSE(plan.converged);
  CHECK(plan.iterations == 2);
  CHECK(plan.violation > 0.0);
}

TEST_CASE("marginals hold after convergence on random instances") {
  Rng rng(11);
  std::uniform_int_distribution<std::size_t> size(1, 6);
  for (std::uint64_t k = 0; k < 100; ++k) {
    const std::size_t n = size(rng), m = size(rng);
    const auto u = random_simplex(n, rng);
    const auto v = random_simplex(m, rng);
    // Default lambda and tolerance; near-tied costs can need far more than the
    // training budget of iterations to converge.
    SinkhornOptions opt;
    opt.max_iters = 1000000;
    const auto plan = sinkhorn(random_cost(n, m, 100 + k), n, m, u, v, opt);
    CAPTURE(k);
    CAPTURE(plan.violation);
    REQUIRE(plan.converged);
    double worst = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < m; ++c) {
        CHECK(plan.at(r, c) >= 0.0);
        s += plan.at(r, c);
      }
      worst = std::max(worst, std::abs(s - u[r]));
    }
    for (std::size_t c = 0; c < m; ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < n; ++r) s += plan.at(r, c);
      worst = std::max(worst, std::abs(s - v[c]));
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("marginal violation never increases across iterations") {
  for (std::uint64_t k = 0; k < 20; ++k) {
    SinkhornOptions opt;
    opt.lambda = 0.05;
    opt.tol = 1e-12;
    opt.max_iters = 500;
    opt.record_history = true;
    const auto plan = sinkhorn(random_cost(5, 4, 300 + k), 5, 4, uniform_weights(5), uniform_weights(4), opt);
    CAPTURE(k);
    for (std::size_t i = 1; i < plan.history.size(); ++i) {
      CHECK(plan.history[i].first <= plan.history[i - 1].first * (1 + 1e-9) + 1e-15);
    }
  }
}

TEST_CASE("shrinking lambda approaches the LP optimum on 3x3 instances") {
  const double lambdas[] = {1.0, 0.3, 0.1, 0.03};
  const auto third = uniform_weights(3);
  for (std::uint64_t k = 0; k < 50; ++k) {
    const auto cost = random_cost(3, 3, 500 + k);
    const double lp = lico::testing::transport_lp_optimum(cost, 3, 3, third, third);
    // Uniform 3x3 marginals: vertices are the scaled permutation matrices.
    std::vector<std::size_t> perm{0, 1, 2};
    double by_perm = 1e9;
    do {
      double s = 0.0;
      for (std::size_t r = 0; r < 3; ++r) s += cost[r * 3 + perm[r]] / 3.0;
      by_perm = std::min(by_perm, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    CAPTURE(k);
    CHECK(lp == doctest::Approx(by_perm).epsilon(1e-12));

    double previous = std::numeric_limits<double>::infinity();
    for (const double lambda : lambdas) {
      SinkhornOptions opt;
      opt.lambda = lambda;
      // Small lambda on near-degenerate costs converges slowly (about 3e5
      // iterations at 0.03 for tol 1e-6).
      opt.tol = 1e-7;
      opt.max_iters = 5000000;
      const auto plan = sinkhorn(cost, 3, 3, third, third, opt);
      CAPTURE(lambda);
      CAPTURE(plan.violation);
      REQUIRE(plan.converged);
      const double value = plan.inner(cost);
      // Exact solutions are monotone in lambda; slack covers the marginal tolerance.
      CHECK(value <= previous + 1e-6);
      previous = value;
      if (lambda == 0.03) CHECK(std::abs(value - lp) <= 0.02 * lp);
    }
  }
}

TEST_CASE("LP oracle handles unequal marginals") {
  // Northwest-corner style check: one cheap diagonal.
  const std::vector<double> cost{0.0, 1.0, 1.0, 0.0};
  const double lp = lico::testing::transport_lp_optimum(cost, 2, 2, {0.7, 0.3}, {0.4, 0.6});
  CHECK(lp == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("permuting feature rows permutes the plan rows") {
  for (std::uint64_t k = 0; k < 10; ++k) {
    const auto f = random_tensor<double>({5, 6}, 700 + k, -1, 1, false);
    const auto g = random_tensor<double>({4, 6}, 800 + k, -1, 1, false);
    std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    const auto fp = ops::gather_rows(f, perm);
    const auto a = sinkhorn(to_double(cost_matrix(f, g)), 5, 4, uniform_weights(5), uniform_weights(4));
    const auto b = sinkhorn(to_double(cost_matrix(fp, g)), 5, 4, uniform_weights(5), uniform_weights(4));
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 4; ++c) CHECK(b.at(r, c) == doctest::Approx(a.at(perm[r], c)).epsilon(1e-10));
  }
}

TEST_CASE("log-domain solver agrees with the scaling solver") {
  const auto cost = random_cost(4, 5, 42);
  SinkhornOptions opt;
  opt.lambda = 0.2;
  opt.log_domain = LogDomain::never;
  const auto a = sinkhorn(cost, 4, 5, uniform_weights(4), uniform_weights(5), opt);
  opt.log_domain = LogDomain::always;
  const auto b = sinkhorn(cost, 4, 5, uniform_weights(4), uniform_weights(5), opt);
  CHECK(b.log_domain);
  for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(a.values[i] == doctest::Approx(b.values[i]).epsilon(1e-9));

  // Tiny lambda would underflow exp(-C/lambda) in single precision.
  CHECK(needs_log_domain(cost, 1e-3));
  opt.lambda = 1e-3;
  opt.log_domain = LogDomain::automatic;
  opt.max_iters = 5000;
  const auto tiny = sinkhorn(cost, 4, 5, uniform_weights(4), uniform_weights(5), opt);
  CHECK(tiny.log_domain);
  for (const double x : tiny.values) CHECK(std::isfinite(x));
}

TEST_CASE("batched solves match the serial loop exactly") {
  std::vector<std::vector<double>> costs;
  for (std::uint64_t k = 0; k < 16; ++k) costs.push_back(random_cost(6, 4, 900 + k));
  const auto p = sinkhorn_batch(costs, 6, 4);
  const auto s = sinkhorn_batch_serial(costs, 6, 4);
  REQUIRE(p.size() == s.size());
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i].values == s[i].values);
}

TEST_CASE("ot loss gradient matches differences with the plan frozen") {
  Leaves leaves;
  leaves.params.push_back({"features", random_tensor<double>({6, 5}, 61)});
  leaves.params.push_back({"prompts", random_tensor<double>({4, 5}, 62)});
  TransportPlan plan;
  {
    NoGradScope<double> off;
    plan = sinkhorn(to_double(cost_matrix(leaves[0], leaves[1])), 6, 4, uniform_weights(6), uniform_weights(4));
  }
  const auto r = lico::testing::check_gradients(leaves, {"ot"}, [&](const Leaves& l) {
    return std::vector<T>{ot_loss(cost_matrix(l[0], l[1]), plan)};
  })[0];
  CAPTURE(r.worst);
  CHECK(r.kink_skipped == 0);
  CHECK(r.max_rel_err < 1e-3);
}

TEST_CASE("unrolled loss converges to the envelope value") {
  const auto cost = random_cost(3, 4, 77);
  const T c({3, 4}, cost);
  const auto plan = sinkhorn(cost, 3, 4, uniform_weights(3), uniform_weights(4), SinkhornOptions{0.1, 5000, 1e-13});
  const auto unrolled = ot_loss_unrolled(c, uniform_weights(3), uniform_weights(4), 0.1, 2000);
  CHECK(unrolled.item() == doctest::Approx(ot_loss(c, plan).item()).epsilon(1e-9));
}
