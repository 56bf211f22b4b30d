#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "lico/tensor.hpp"

namespace lico {

/// Norm floor used when normalizing feature and prompt rows for the cost.
inline constexpr double kCostNormFloor = 1e-8;

enum class LogDomain { automatic, always, never };

struct SinkhornOptions {
  double lambda = 0.1;
  std::size_t max_iters = 200;
  double tol = 1e-6;
  LogDomain log_domain = LogDomain::automatic;
  /// Keep the per-iteration marginal violations in TransportPlan::history.
  bool record_history = false;
};

/// Entropic transport plan between N source and M target weights.
struct TransportPlan {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;  // rows x cols, row-major
  std::vector<double> source;  // u
  std::vector<double> target;  // v
  bool converged = false;
  std::size_t iterations = 0;
  /// max(|T 1 - u|_inf, |T^T 1 - v|_inf) of the returned plan.
  double violation = 0.0;
  bool log_domain = false;
  /// Per-iteration (L1 row violation, Linf violation) pairs when requested.
  std::vector<std::pair<double, double>> history;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  /// <T, C> against a cost of the same shape.
  double inner(std::span<const double> cost) const;
};

std::vector<double> uniform_weights(std::size_t n);

/// True when exp(-max(C)/lambda) would underflow single precision.
bool needs_log_domain(std::span<const double> cost, double lambda);

/// Alternating diagonal scaling of K = exp(-C / lambda):
///   a <- u / (K b),  b <- v / (K^T a),  T = diag(a) K diag(b).
/// Stops once the marginal violation drops below tol or after max_iters.
/// DomainError on lambda <= 0, non-positive weights or weights not summing to 1.
TransportPlan sinkhorn(std::span<const double> cost, std::size_t rows, std::size_t cols,
                       std::span<const double> source, std::span<const double> target,
                       const SinkhornOptions& options = {});

/// One solve per cost matrix (all rows x cols, uniform marginals). The
/// parallel version spreads samples over OpenMP threads; results match the
/// serial loop exactly because every solve is independent.
std::vector<TransportPlan> sinkhorn_batch(const std::vector<std::vector<double>>& costs,
                                          std::size_t rows, std::size_t cols,
                                          const SinkhornOptions& options = {});
std::vector<TransportPlan> sinkhorn_batch_serial(const std::vector<std::vector<double>>& costs,
                                                 std::size_t rows, std::size_t cols,
                                                 const SinkhornOptions& options = {});

/// c[n, m] = 1 - cos(f_n, g_m) with rows normalized under kCostNormFloor; N x M.
template <class Real>
BasicTensor<Real> cost_matrix(const BasicTensor<Real>& features, const BasicTensor<Real>& prompts);

/// <T*, C> with T* held constant; gradients reach C only.
template <class Real>
BasicTensor<Real> ot_loss(const BasicTensor<Real>& cost, const TransportPlan& plan);

/// <T, C> with T produced by `iterations` differentiable scaling steps, so
/// gradients also flow through the plan.
template <class Real>
BasicTensor<Real> ot_loss_unrolled(const BasicTensor<Real>& cost, std::span<const double> source,
                                   std::span<const double> target, double lambda,
                                   std::size_t iterations);

/// Copies a (N x M) tensor into doubles for the solver.
template <class Real>
std::vector<double> to_double(const BasicTensor<Real>& t);

}  // namespace lico
