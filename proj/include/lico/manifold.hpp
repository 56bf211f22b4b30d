#pragma once

#include <cstddef>
#include <vector>

#include "lico/tensor.hpp"

namespace lico {

enum class DistanceMetric { euclidean, cosine };

/// Floor applied inside the logarithms of the manifold-matching KL.
inline constexpr double kKlFloor = 1e-8;

/// B x B distances between equally shaped items. Euclidean is the Frobenius
/// norm of the difference; cosine is 1 - <a, b> / (|a| |b|) on the flattened
/// items. The diagonal is exactly zero.
template <class Real>
BasicTensor<Real> pairwise_distance(const std::vector<BasicTensor<Real>>& items,
                                    DistanceMetric metric = DistanceMetric::euclidean);

/// Row-softmax of -D / tau with tau = exp(log_tau); self-distances stay in the
/// denominator. log_tau is a 1-element tensor and may require grad.
template <class Real>
BasicTensor<Real> adjacency(const BasicTensor<Real>& distances, const BasicTensor<Real>& log_tau);

/// Constant-temperature overload; DomainError for tau <= 0.
template <class Real>
BasicTensor<Real> adjacency(const BasicTensor<Real>& distances, double tau);

/// (1/B) sum_i KL(A_G[i,:] || A_F[i,:]). With detach_target the language
/// adjacency acts as a constant target.
template <class Real>
BasicTensor<Real> mm_loss(const BasicTensor<Real>& language, const BasicTensor<Real>& image,
                          bool detach_target = false);

}  // namespace lico
