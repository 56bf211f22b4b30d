#include "lico/manifold.hpp"

#include <cmath>
#include <string>

#include "lico/errors.hpp"
#include "lico/ops.hpp"

namespace lico {

namespace {

template <class Real>
BasicTensor<Real> stack_flattened(const std::vector<BasicTensor<Real>>& items) {
  if (items.empty()) throw ShapeError("pairwise_distance: empty batch");
  const Shape& shape = items.front().shape();
  const std::size_t k = items.front().size();
  std::vector<BasicTensor<Real>> rows;
  rows.reserve(items.size());
  for (const auto& item : items) {
    if (item.shape() != shape) {
      throw ShapeError("pairwise_distance: item shape " + shape_str(item.shape()) + " vs " +
                       shape_str(shape));
    }
    rows.push_back(ops::reshape(item, {1, k}));
  }
  return ops::concat_rows(rows);
}

template <class Real>
void require_square(const BasicTensor<Real>& m, const char* what) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) {
    throw ShapeError(std::string(what) + ": expected a square matrix, got " + shape_str(m.shape()));
  }
}

}  // namespace

template <class Real>
BasicTensor<Real> pairwise_distance(const std::vector<BasicTensor<Real>>& items,
                                    DistanceMetric metric) {
  const auto x = stack_flattened(items);
  const std::size_t b = x.dim(0);
  if (metric == DistanceMetric::euclidean) {
    std::vector<std::size_t> left, right;
    left.reserve(b * b);
    right.reserve(b * b);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < b; ++j) {
        left.push_back(i);
        right.push_back(j);
      }
    }
    const auto diff = ops::sub(ops::gather_rows(x, std::span<const std::size_t>(left)),
                               ops::gather_rows(x, std::span<const std::size_t>(right)));
    return ops::reshape(ops::l2_norm(diff, 1), {b, b});
  }
  const auto norms = ops::l2_norm(ops::stop_gradient(x), 1);
  for (std::size_t i = 0; i < b; ++i) {
    if (norms[i] == Real{0}) {
      throw DomainError("pairwise_distance: zero-norm item " + std::to_string(i) +
                        " under cosine metric");
    }
  }
  const auto unit = ops::normalize_rows(x, Real{0});
  const auto sim = ops::matmul(unit, ops::transpose(unit));
  std::vector<Real> off(b * b, Real{1});
  for (std::size_t i = 0; i < b; ++i) off[i * b + i] = Real{0};
  const BasicTensor<Real> mask({b, b}, std::move(off));
  return ops::mul(ops::add_scalar(ops::scale(sim, Real{-1}), Real{1}), mask);
}

template <class Real>
BasicTensor<Real> adjacency(const BasicTensor<Real>& distances, const BasicTensor<Real>& log_tau) {
  require_square(distances, "adjacency");
  if (distances.dim(0) < 2) throw DomainError("adjacency needs a batch of at least 2");
  if (log_tau.size() != 1) throw ShapeError("adjacency: log_tau must have one element");
  if (!std::isfinite(static_cast<double>(log_tau[0]))) throw DomainError("adjacency: tau is not finite");
  const auto inv_tau = ops::exp(ops::scale(log_tau, Real{-1}));
  const auto logits = ops::scale(ops::mul_scalar(distances, inv_tau), Real{-1});
  return ops::softmax(logits, 1);
}

template <class Real>
BasicTensor<Real> adjacency(const BasicTensor<Real>& distances, double tau) {
  if (!(tau > 0.0)) throw DomainError("adjacency: temperature must be positive");
  return adjacency(distances, BasicTensor<Real>::scalar(static_cast<Real>(std::log(tau))));
}

template <class Real>
BasicTensor<Real> mm_loss(const BasicTensor<Real>& language, const BasicTensor<Real>& image,
                          bool detach_target) {
  require_square(language, "mm_loss");
  if (language.shape() != image.shape()) {
    throw ShapeError("mm_loss: adjacency shapes differ " + shape_str(language.shape()) + " vs " +
                     shape_str(image.shape()));
  }
  const auto target = detach_target ? ops::stop_gradient(language) : language;
  const Real floor = static_cast<Real>(kKlFloor);
  const auto log_ratio = ops::sub(ops::log_floored(target, floor), ops::log_floored(image, floor));
  const auto total = ops::sum(ops::mul(target, log_ratio));
  return ops::scale(total, static_cast<Real>(1.0 / static_cast<double>(language.dim(0))));
}

#define LICO_INSTANTIATE(Real)                                                                 \
  template BasicTensor<Real> pairwise_distance(const std::vector<BasicTensor<Real>>&,          \
                                               DistanceMetric);                                \
  template BasicTensor<Real> adjacency(const BasicTensor<Real>&, const BasicTensor<Real>&);    \
  template BasicTensor<Real> adjacency(const BasicTensor<Real>&, double);                      \
  template BasicTensor<Real> mm_loss(const BasicTensor<Real>&, const BasicTensor<Real>&, bool);

LICO_INSTANTIATE(float)
LICO_INSTANTIATE(double)
#undef LICO_INSTANTIATE

}  // namespace lico
