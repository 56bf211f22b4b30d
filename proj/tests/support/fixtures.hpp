#pragma once

// Small builders shared by the unit tests.

#include <cstdint>
#include <random>
#include <vector>

#include "lico/rng.hpp"
#include "lico/tensor.hpp"

namespace lico::testing {

template <class Real = double>
BasicTensor<Real> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                                bool requires_grad = true) {
  Rng rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<Real> values(shape_size(shape));
  for (auto& v : values) v = static_cast<Real>(dist(rng));
  return BasicTensor<Real>(std::move(shape), std::move(values), requires_grad);
}

/// Values bounded away from zero so ReLU/abs probes never straddle a kink.
template <class Real = double>
BasicTensor<Real> offset_tensor(Shape shape, std::uint64_t seed, bool requires_grad = true) {
  auto t = random_tensor<Real>(std::move(shape), seed, -1.0, 1.0, requires_grad);
  for (auto& v : t.mutable_data()) v += v >= 0 ? Real(0.1) : Real(-0.1);
  return t;
}

inline std::vector<double> as_vector(const auto& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

}  // namespace lico::testing
