#include "lico/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "lico/errors.hpp"
#include "lico/ops.hpp"

namespace lico {

Scorer softmax_scorer(const ImageBranch<float>& model, std::size_t target_class) {
  if (target_class >= model.config().num_classes) {
    throw DomainError("softmax_scorer: class " + std::to_string(target_class) + " out of range");
  }
  return [&model, target_class](const Image& image) {
    NoGradScope<float> off;
    const auto logits = model.logits(image.to_tensor<float>());
    const auto d = logits.data();
    const double mx = *std::max_element(d.begin(), d.end());
    double total = 0.0;
    for (const float v : d) total += std::exp(static_cast<double>(v) - mx);
    return std::exp(static_cast<double>(d[target_class]) - mx) / total;
  };
}

namespace {

std::size_t mirror(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}

void check_saliency(const Image& image, std::span<const double> saliency) {
  if (saliency.size() != image.area()) {
    throw ShapeError("saliency has " + std::to_string(saliency.size()) + " values for a " +
                     std::to_string(image.height) + "x" + std::to_string(image.width) + " image");
  }
}

CurveResult run_curve(const Image& start, const Image& fill, std::span<const double> saliency,
                      const Scorer& score, double step_fraction) {
  if (!(step_fraction > 0.0 && step_fraction <= 1.0)) {
    throw DomainError("step_fraction must lie in (0, 1]");
  }
  const std::size_t area = start.area();
  const auto order = saliency_order(saliency);
  const auto per_step =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(step_fraction * static_cast<double>(area))));
  CurveResult out;
  Image current = start;
  out.fractions.push_back(0.0);
  out.scores.push_back(score(current));
  std::size_t done = 0;
  while (done < area) {
    const std::size_t next = std::min(area, done + per_step);
    for (std::size_t k = done; k < next; ++k) {
      const std::size_t p = order[k];
      for (std::size_t ch = 0; ch < start.channels; ++ch) {
        current.pixels[p * start.channels + ch] = fill.pixels[p * start.channels + ch];
      }
    }
    done = next;
    out.fractions.push_back(static_cast<double>(done) / static_cast<double>(area));
    out.scores.push_back(score(current));
  }
  out.auc = trapezoid_auc(out.fractions, out.scores);
  return out;
}

}  // namespace

Image gaussian_blur(const Image& image) {
  const double sigma = static_cast<double>(image.width) / 8.0;
  const long radius = std::lround(2.0 * sigma);
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (long k = -radius; k <= radius; ++k) {
    const double w = sigma > 0.0 ? std::exp(-0.5 * static_cast<double>(k * k) / (sigma * sigma)) : 1.0;
    kernel[static_cast<std::size_t>(k + radius)] = w;
    total += w;
  }
  for (auto& w : kernel) w /= total;

  const long h = static_cast<long>(image.height), w = static_cast<long>(image.width);
  const std::size_t c = image.channels;
  std::vector<double> rows(image.pixels.size());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (long k = -radius; k <= radius; ++k) {
          acc += kernel[static_cast<std::size_t>(k + radius)] *
                 image.at(static_cast<std::size_t>(y), mirror(x + k, w), ch);
        }
        rows[(static_cast<std::size_t>(y * w + x)) * c + ch] = acc;
      }
  Image out(image.height, image.width, image.channels);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (long k = -radius; k <= radius; ++k) {
          acc += kernel[static_cast<std::size_t>(k + radius)] *
                 rows[(mirror(y + k, h) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)) * c + ch];
        }
        out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), ch) = static_cast<float>(acc);
      }
  return out;
}

double trapezoid_auc(std::span<const double> fractions, std::span<const double> scores) {
  if (fractions.size() != scores.size() || fractions.size() < 2) {
    throw ShapeError("trapezoid_auc: need at least two matching samples");
  }
  double auc = 0.0;
  for (std::size_t i = 1; i < fractions.size(); ++i) {
    auc += (fractions[i] - fractions[i - 1]) * 0.5 * (scores[i] + scores[i - 1]);
  }
  return auc;
}

std::vector<std::size_t> saliency_order(std::span<const double> saliency) {
  std::vector<std::size_t> order(saliency.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return saliency[a] > saliency[b]; });
  return order;
}

CurveResult insertion(const Image& image, std::span<const double> saliency, const Scorer& score,
                      double step_fraction) {
  check_saliency(image, saliency);
  return run_curve(gaussian_blur(image), image, saliency, score, step_fraction);
}

CurveResult deletion(const Image& image, std::span<const double> saliency, const Scorer& score,
                     double step_fraction) {
  check_saliency(image, saliency);
  return run_curve(image, gaussian_blur(image), saliency, score, step_fraction);
}

CurveResult mean_curve(std::span<const CurveResult> curves) {
  if (curves.empty()) throw DomainError("mean_curve: no curves");
  CurveResult out;
  out.fractions = curves.front().fractions;
  out.scores.assign(out.fractions.size(), 0.0);
  for (const auto& c : curves) {
    if (c.fractions != out.fractions) throw ShapeError("mean_curve: curves sampled differently");
    for (std::size_t i = 0; i < c.scores.size(); ++i) out.scores[i] += c.scores[i];
  }
  for (auto& s : out.scores) s /= static_cast<double>(curves.size());
  out.auc = trapezoid_auc(out.fractions, out.scores);
  return out;
}

std::size_t argmax_pixel(const SaliencyMap& map) {
  if (map.values.empty()) throw DomainError("argmax_pixel: empty map");
  return static_cast<std::size_t>(std::max_element(map.values.begin(), map.values.end()) -
                                  map.values.begin());
}

double pointing_game(std::span<const PointingCase> cases) {
  if (cases.empty()) throw DomainError("pointing_game: no saliency maps");
  std::size_t hits = 0;
  for (const auto& c : cases) {
    if (c.map == nullptr || c.boxes.empty()) {
      throw DomainError("pointing_game: every map needs at least one box");
    }
    const std::size_t p = argmax_pixel(*c.map);
    const int y = static_cast<int>(p / c.map->width);
    const int x = static_cast<int>(p % c.map->width);
    const bool hit = std::any_of(c.boxes.begin(), c.boxes.end(),
                                 [&](const Box& b) { return b.contains(x, y); });
    hits += hit ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(cases.size());
}

SanityCurves sanity_curves(const ImageBranch<float>& model, std::span<const Image> images,
                           std::span<const std::size_t> targets, std::uint64_t seed) {
  if (images.empty() || images.size() != targets.size()) {
    throw DomainError("sanity_curves: need one target class per image");
  }
  SanityCurves out;
  const std::size_t layers = model.layer_count();
  for (std::size_t l = layers; l-- > 0;) {
    out.layers.push_back(l);
    out.names.push_back(model.layer_name(l));
  }
  out.cascading.assign(layers, 0.0);
  out.independent.assign(layers, 0.0);

  std::vector<std::vector<double>> originals;
  double reference = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    originals.push_back(grad_cam(model, images[i], targets[i]).values);
    reference += spearman(originals.back(), originals.back());
  }
  out.reference = reference / static_cast<double>(images.size());

  for (std::size_t k = 0; k < layers; ++k) {
    const std::size_t l = out.layers[k];
    const auto cascaded = randomize_layer(model, l, RandomizationMode::cascading, seed);
    const auto single = randomize_layer(model, l, RandomizationMode::independent, seed);
    double c = 0.0, s = 0.0;
    for (std::size_t i = 0; i < images.size(); ++i) {
      c += spearman(originals[i], grad_cam(cascaded, images[i], targets[i]).values);
      s += spearman(originals[i], grad_cam(single, images[i], targets[i]).values);
    }
    out.cascading[k] = c / static_cast<double>(images.size());
    out.independent[k] = s / static_cast<double>(images.size());
  }
  return out;
}

}  // namespace lico
