#include "lico/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "lico/errors.hpp"
#include "lico/ops.hpp"
#include "lico/rng.hpp"

namespace lico {

io::SaliencyImage SaliencyMap::to_image() const {
  io::SaliencyImage out;
  out.height = height;
  out.width = width;
  out.values.assign(values.begin(), values.end());
  return out;
}

std::vector<double> cam_from_gradients(std::span<const double> activations,
                                       std::span<const double> gradients, std::size_t channels,
                                       std::size_t positions) {
  if (activations.size() != channels * positions || gradients.size() != activations.size()) {
    throw ShapeError("grad_cam: activations/gradients do not form a " + std::to_string(channels) +
                     "x" + std::to_string(positions) + " matrix");
  }
  std::vector<double> cam(positions, 0.0);
  for (std::size_t n = 0; n < channels; ++n) {
    double w = 0.0;
    for (std::size_t p = 0; p < positions; ++p) w += gradients[n * positions + p];
    w /= static_cast<double>(positions);
    for (std::size_t p = 0; p < positions; ++p) cam[p] += w * activations[n * positions + p];
  }
  for (auto& v : cam) v = std::max(v, 0.0);
  return cam;
}

std::vector<double> upsample_bilinear(std::span<const double> src, std::size_t height,
                                      std::size_t width, std::size_t out_height,
                                      std::size_t out_width) {
  if (src.size() != height * width || height == 0 || width == 0) {
    throw ShapeError("upsample_bilinear: source size mismatch");
  }
  // Source coordinate of output pixel i: (i + 0.5) * in / out - 0.5, clamped.
  auto axis = [](std::size_t i, std::size_t in, std::size_t out, std::size_t& lo, std::size_t& hi,
                 double& t) {
    double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    lo = static_cast<std::size_t>(std::floor(s));
    hi = std::min(lo + 1, in - 1);
    t = s - static_cast<double>(lo);
  };
  std::vector<double> out(out_height * out_width);
  for (std::size_t y = 0; y < out_height; ++y) {
    std::size_t y0, y1;
    double ty;
    axis(y, height, out_height, y0, y1, ty);
    for (std::size_t x = 0; x < out_width; ++x) {
      std::size_t x0, x1;
      double tx;
      axis(x, width, out_width, x0, x1, tx);
      const double top = (1.0 - tx) * src[y0 * width + x0] + tx * src[y0 * width + x1];
      const double bottom = (1.0 - tx) * src[y1 * width + x0] + tx * src[y1 * width + x1];
      out[y * out_width + x] = (1.0 - ty) * top + ty * bottom;
    }
  }
  return out;
}

void min_max_normalize(std::vector<double>& values) {
  if (values.empty()) return;
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) {
    std::fill(values.begin(), values.end(), 0.0);
    return;
  }
  for (auto& v : values) v = (v - lo) / (hi - lo);
}

SaliencyMap grad_cam(const ImageBranch<float>& model, const Image& image, std::size_t target_class) {
  const auto& cfg = model.config();
  if (target_class >= cfg.num_classes) {
    throw DomainError("grad_cam: class " + std::to_string(target_class) + " outside [0, " +
                      std::to_string(cfg.num_classes) + ")");
  }
  FeatureMaps<float> maps;
  {
    NoGradScope<float> off;
    maps = model.encode(image.to_tensor<float>());
  }
  auto leaf = maps.values.clone(true);
  Tape<float> tape;
  {
    TapeScope<float> scope(tape);
    const auto logit = ops::take(model.classify(leaf), target_class);
    tape.backward(logit);
  }
  const std::vector<double> act(leaf.data().begin(), leaf.data().end());
  const std::vector<double> grad(leaf.grad().begin(), leaf.grad().end());
  const auto coarse = cam_from_gradients(act, grad, maps.channels(), maps.dim());

  SaliencyMap out;
  out.height = image.height;
  out.width = image.width;
  out.target_class = target_class;
  out.values = upsample_bilinear(coarse, maps.height, maps.width, image.height, image.width);
  min_max_normalize(out.values);
  return out;
}

ImageBranch<float> randomize_layer(const ImageBranch<float>& model, std::size_t layer,
                                   RandomizationMode mode, std::uint64_t seed) {
  const std::size_t top = model.layer_count() - 1;
  if (layer > top) {
    throw DomainError("randomize_layer: unknown layer " + std::to_string(layer) + " (model has " +
                      std::to_string(model.layer_count()) + ")");
  }
  auto out = model.clone();
  const std::size_t first = layer;
  const std::size_t last = mode == RandomizationMode::cascading ? top : layer;
  for (std::size_t l = first; l <= last; ++l) {
    Rng rng = derive_rng(seed, streams::kRandomize, l);
    out.reinitialize_layer(l, rng);
  }
  return out;
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("spearman: inputs must match and be non-empty");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double mean_a = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mean_b = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const double da = ra[i] - mean_a, db = rb[i] - mean_b;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) return std::equal(a.begin(), a.end(), b.begin()) ? 1.0 : 0.0;
  return cov / std::sqrt(va * vb);
}

}  // namespace lico
