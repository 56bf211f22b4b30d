#include "lico/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "lico/errors.hpp"
#include "lico/ops.hpp"

namespace lico {

namespace {

void validate_weights(std::span<const double> w, std::size_t n, const char* which) {
  if (w.size() != n) {
    throw ShapeError(std::string("sinkhorn: ") + which + " has " + std::to_string(w.size()) +
                     " weights, expected " + std::to_string(n));
  }
  double total = 0.0;
  for (const double x : w) {
    if (!(x > 0.0) || !std::isfinite(x)) {
      throw DomainError(std::string("sinkhorn: ") + which + " weights must be strictly positive");
    }
    total += x;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw DomainError(std::string("sinkhorn: ") + which + " weights sum to " +
                      std::to_string(total) + ", expected 1");
  }
}

struct Violation {
  double l1_rows = 0.0;
  double linf = 0.0;
};

Violation measure(const std::vector<double>& plan, std::size_t rows, std::size_t cols,
                  std::span<const double> u, std::span<const double> v) {
  Violation out;
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += plan[r * cols + c];
    const double d = std::abs(s - u[r]);
    out.l1_rows += d;
    out.linf = std::max(out.linf, d);
  }
  for (std::size_t c = 0; c < cols; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < rows; ++r) s += plan[r * cols + c];
    out.linf = std::max(out.linf, std::abs(s - v[c]));
  }
  return out;
}

double log_sum_exp(const double* x, std::size_t n, std::size_t stride) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[i * stride]);
  if (!std::isfinite(mx)) return mx;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::exp(x[i * stride] - mx);
  return mx + std::log(acc);
}

}  // namespace

double TransportPlan::inner(std::span<const double> cost) const {
  if (cost.size() != values.size()) throw ShapeError("TransportPlan::inner: cost shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) acc += values[i] * cost[i];
  return acc;
}

std::vector<double> uniform_weights(std::size_t n) {
  if (n == 0) throw DomainError("uniform_weights: empty support");
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

bool needs_log_domain(std::span<const double> cost, double lambda) {
  double mx = 0.0;
  for (const double c : cost) mx = std::max(mx, c);
  const double limit = -std::log(static_cast<double>(std::numeric_limits<float>::min()));
  return mx / lambda > limit;
}

TransportPlan sinkhorn(std::span<const double> cost, std::size_t rows, std::size_t cols,
                       std::span<const double> source, std::span<const double> target,
                       const SinkhornOptions& options) {
  if (rows == 0 || cols == 0 || cost.size() != rows * cols) {
    throw ShapeError("sinkhorn: cost has " + std::to_string(cost.size()) + " entries for a " +
                     std::to_string(rows) + "x" + std::to_string(cols) + " plan");
  }
  if (!(options.lambda > 0.0)) throw DomainError("sinkhorn: lambda must be positive");
  for (const double c : cost) {
    if (!std::isfinite(c)) throw DomainError("sinkhorn: non-finite cost entry");
  }
  validate_weights(source, rows, "source");
  validate_weights(target, cols, "target");

  TransportPlan plan;
  plan.rows = rows;
  plan.cols = cols;
  plan.source.assign(source.begin(), source.end());
  plan.target.assign(target.begin(), target.end());
  plan.log_domain = options.log_domain == LogDomain::always ||
                    (options.log_domain == LogDomain::automatic &&
                     needs_log_domain(cost, options.lambda));
  plan.values.assign(rows * cols, 0.0);

  const double inv_lambda = 1.0 / options.lambda;
  const std::size_t max_iters = std::max<std::size_t>(options.max_iters, 1);

  if (!plan.log_domain) {
    std::vector<double> kernel(rows * cols);
    for (std::size_t i = 0; i < kernel.size(); ++i) kernel[i] = std::exp(-cost[i] * inv_lambda);
    std::vector<double> a(rows, 1.0), b(cols, 1.0);
    for (std::size_t it = 1; it <= max_iters; ++it) {
      for (std::size_t r = 0; r < rows; ++r) {
        double kb = 0.0;
        for (std::size_t c = 0; c < cols; ++c) kb += kernel[r * cols + c] * b[c];
        a[r] = source[r] / kb;
      }
      for (std::size_t c = 0; c < cols; ++c) {
        double ka = 0.0;
        for (std::size_t r = 0; r < rows; ++r) ka += kernel[r * cols + c] * a[r];
        b[c] = target[c] / ka;
      }
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          plan.values[r * cols + c] = a[r] * kernel[r * cols + c] * b[c];
      const auto viol = measure(plan.values, rows, cols, source, target);
      if (options.record_history) plan.history.emplace_back(viol.l1_rows, viol.linf);
      plan.iterations = it;
      plan.violation = viol.linf;
      if (viol.linf < options.tol) {
        plan.converged = true;
        break;
      }
    }
  } else {
    std::vector<double> scaled(rows * cols);
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = -cost[i] * inv_lambda;
    std::vector<double> f(rows, 0.0), g(cols, 0.0), work(std::max(rows, cols));
    for (std::size_t it = 1; it <= max_iters; ++it) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) work[c] = scaled[r * cols + c] + g[c];
        f[r] = std::log(source[r]) - log_sum_exp(work.data(), cols, 1);
      }
      for (std::size_t c = 0; c < cols; ++c) {
        for (std::size_t r = 0; r < rows; ++r) work[r] = scaled[r * cols + c] + f[r];
        g[c] = std::log(target[c]) - log_sum_exp(work.data(), rows, 1);
      }
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          plan.values[r * cols + c] = std::exp(f[r] + scaled[r * cols + c] + g[c]);
      const auto viol = measure(plan.values, rows, cols, source, target);
      if (options.record_history) plan.history.emplace_back(viol.l1_rows, viol.linf);
      plan.iterations = it;
      plan.violation = viol.linf;
      if (viol.linf < options.tol) {
        plan.converged = true;
        break;
      }
    }
  }
  return plan;
}

std::vector<TransportPlan> sinkhorn_batch_serial(const std::vector<std::vector<double>>& costs,
                                                 std::size_t rows, std::size_t cols,
                                                 const SinkhornOptions& options) {
  const auto u = uniform_weights(rows);
  const auto v = uniform_weights(cols);
  std::vector<TransportPlan> plans;
  plans.reserve(costs.size());
  for (const auto& c : costs) plans.push_back(sinkhorn(c, rows, cols, u, v, options));
  return plans;
}

std::vector<TransportPlan> sinkhorn_batch(const std::vector<std::vector<double>>& costs,
                                          std::size_t rows, std::size_t cols,
                                          const SinkhornOptions& options) {
  const auto u = uniform_weights(rows);
  const auto v = uniform_weights(cols);
  // Validate up front: nothing may throw inside the parallel region.
  for (const auto& c : costs) {
    if (c.size() != rows * cols) throw ShapeError("sinkhorn_batch: cost size mismatch");
    for (const double x : c) {
      if (!std::isfinite(x)) throw DomainError("sinkhorn_batch: non-finite cost entry");
    }
  }
  if (!(options.lambda > 0.0)) throw DomainError("sinkhorn: lambda must be positive");
  std::vector<TransportPlan> plans(costs.size());
  const long n = static_cast<long>(costs.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) {
    plans[static_cast<std::size_t>(i)] = sinkhorn(costs[static_cast<std::size_t>(i)], rows, cols, u, v, options);
  }
  return plans;
}

template <class Real>
std::vector<double> to_double(const BasicTensor<Real>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

template <class Real>
BasicTensor<Real> cost_matrix(const BasicTensor<Real>& features, const BasicTensor<Real>& prompts) {
  if (features.rank() != 2 || prompts.rank() != 2 || features.dim(1) != prompts.dim(1)) {
    throw ShapeError("cost_matrix: features " + shape_str(features.shape()) + " and prompts " +
                     shape_str(prompts.shape()) + " must share their row width");
  }
  const Real floor = static_cast<Real>(kCostNormFloor);
  const auto f = ops::normalize_rows(features, floor);
  const auto g = ops::normalize_rows(prompts, floor);
  const auto sim = ops::matmul(f, ops::transpose(g));
  return ops::relu(ops::add_scalar(ops::scale(sim, Real{-1}), Real{1}));
}

template <class Real>
BasicTensor<Real> ot_loss(const BasicTensor<Real>& cost, const TransportPlan& plan) {
  if (cost.rank() != 2 || cost.dim(0) != plan.rows || cost.dim(1) != plan.cols) {
    throw ContractError("ot_loss: cost " + shape_str(cost.shape()) + " does not match a " +
                        std::to_string(plan.rows) + "x" + std::to_string(plan.cols) + " plan");
  }
  const BasicTensor<Real> frozen({plan.rows, plan.cols},
                                 std::vector<Real>(plan.values.begin(), plan.values.end()));
  return ops::sum(ops::mul(frozen, cost));
}

template <class Real>
BasicTensor<Real> ot_loss_unrolled(const BasicTensor<Real>& cost, std::span<const double> source,
                                   std::span<const double> target, double lambda,
                                   std::size_t iterations) {
  if (cost.rank() != 2) throw ShapeError("ot_loss_unrolled: cost must be a matrix");
  const std::size_t n = cost.dim(0), m = cost.dim(1);
  validate_weights(source, n, "source");
  validate_weights(target, m, "target");
  if (!(lambda > 0.0)) throw DomainError("ot_loss_unrolled: lambda must be positive");
  const BasicTensor<Real> u({n, 1}, std::vector<Real>(source.begin(), source.end()));
  const BasicTensor<Real> v({m, 1}, std::vector<Real>(target.begin(), target.end()));
  const auto kernel = ops::exp(ops::scale(cost, static_cast<Real>(-1.0 / lambda)));
  const auto kernel_t = ops::transpose(kernel);
  auto b = BasicTensor<Real>::full({m, 1}, Real{1});
  BasicTensor<Real> a;
  for (std::size_t it = 0; it < std::max<std::size_t>(iterations, 1); ++it) {
    a = ops::div(u, ops::matmul(kernel, b));
    b = ops::div(v, ops::matmul(kernel_t, a));
  }
  const auto plan = ops::mul(kernel, ops::matmul(a, ops::transpose(b)));
  return ops::sum(ops::mul(plan, cost));
}

#define LICO_INSTANTIATE(Real)                                                                   \
  template std::vector<double> to_double(const BasicTensor<Real>&);                              \
  template BasicTensor<Real> cost_matrix(const BasicTensor<Real>&, const BasicTensor<Real>&);    \
  template BasicTensor<Real> ot_loss(const BasicTensor<Real>&, const TransportPlan&);            \
  template BasicTensor<Real> ot_loss_unrolled(const BasicTensor<Real>&, std::span<const double>, \
                                              std::span<const double>, double, std::size_t);

LICO_INSTANTIATE(float)
LICO_INSTANTIATE(double)
#undef LICO_INSTANTIATE

}  // namespace lico
