#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lico/image.hpp"
#include "lico/image_branch.hpp"
#include "lico/saliency.hpp"

namespace lico {

inline constexpr double kDefaultStepFraction = 0.036;

/// Class probability of an image under some model.
using Scorer = std::function<double(const Image&)>;

/// softmax(logits)[target_class] of the image branch.
Scorer softmax_scorer(const ImageBranch<float>& model, std::size_t target_class);

/// Separable Gaussian blur, sigma = W / 8, radius round(2 sigma), mirror
/// padding without edge repetition (dcb|abcd|cba).
Image gaussian_blur(const Image& image);

struct CurveResult {
  std::vector<double> fractions;  // 0 ... 1
  std::vector<double> scores;
  double auc = 0.0;
};

/// Trapezoidal integral of scores over fractions.
double trapezoid_auc(std::span<const double> fractions, std::span<const double> scores);

/// Pixel order by descending saliency, ties by ascending row-major index.
std::vector<std::size_t> saliency_order(std::span<const double> saliency);

/// Reveals original pixels on the blurred baseline in saliency order,
/// ceil(step_fraction * H * W) pixels per step.
CurveResult insertion(const Image& image, std::span<const double> saliency, const Scorer& score,
                      double step_fraction = kDefaultStepFraction);

/// Replaces original pixels by their blurred values in saliency order.
CurveResult deletion(const Image& image, std::span<const double> saliency, const Scorer& score,
                     double step_fraction = kDefaultStepFraction);

/// Per-image AUCs plus curves averaged pointwise before integration.
struct CurveSuite {
  std::vector<double> insertion_aucs;
  std::vector<double> deletion_aucs;
  CurveResult mean_insertion;
  CurveResult mean_deletion;

  double insertion_auc() const { return mean_insertion.auc; }
  double deletion_auc() const { return mean_deletion.auc; }
  double overall() const { return insertion_auc() - deletion_auc(); }
};

/// Pointwise mean of equally sampled curves; ShapeError when fractions differ.
CurveResult mean_curve(std::span<const CurveResult> curves);

struct PointingCase {
  const SaliencyMap* map = nullptr;
  std::vector<Box> boxes;  // boxes of the target class on that image
};

/// Row-major index of the first maximum.
std::size_t argmax_pixel(const SaliencyMap& map);

/// Hits / (hits + misses), a hit being a global argmax inside any closed box.
/// DomainError on empty input or a case without boxes.
double pointing_game(std::span<const PointingCase> cases);

struct SanityCurves {
  std::vector<std::size_t> layers;  // top to bottom
  std::vector<std::string> names;
  std::vector<double> cascading;
  std::vector<double> independent;
  double reference = 0.0;  // original map against itself
};

/// Spearman correlation between the original Grad-CAM map and the map of each
/// randomized model, per layer from top to bottom, averaged over the images.
SanityCurves sanity_curves(const ImageBranch<float>& model, std::span<const Image> images,
                           std::span<const std::size_t> targets, std::uint64_t seed);

}  // namespace lico
