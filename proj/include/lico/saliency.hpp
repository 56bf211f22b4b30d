#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "lico/image.hpp"
#include "lico/image_branch.hpp"
#include "lico/io.hpp"

namespace lico {

/// H x W map in [0, 1]: min 0 and max 1, or all zero.
struct SaliencyMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // row-major
  std::size_t target_class = 0;

  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  io::SaliencyImage to_image() const;
};

/// Coarse Grad-CAM map ReLU(sum_n w_n A_n) with w_n the spatial mean of the
/// gradient of channel n. activations and gradients are N x (h*w), row-major.
std::vector<double> cam_from_gradients(std::span<const double> activations,
                                       std::span<const double> gradients, std::size_t channels,
                                       std::size_t positions);

/// Bilinear resize with half-pixel centres (corner alignment off).
std::vector<double> upsample_bilinear(std::span<const double> src, std::size_t height,
                                      std::size_t width, std::size_t out_height,
                                      std::size_t out_width);

/// Min-max scaling into [0, 1]; a constant map becomes all zero.
void min_max_normalize(std::vector<double>& values);

/// Grad-CAM of `target_class` over the encoder's final feature maps, upsampled
/// to the image size. DomainError when the class is out of range.
SaliencyMap grad_cam(const ImageBranch<float>& model, const Image& image, std::size_t target_class);

enum class RandomizationMode { cascading, independent };

/// Copy of `model` with `layer` re-drawn (independent) or `layer` and every
/// layer above it re-drawn (cascading). Each layer's draw depends only on
/// (seed, layer), so both modes agree on the layers they share.
ImageBranch<float> randomize_layer(const ImageBranch<float>& model, std::size_t layer,
                                   RandomizationMode mode, std::uint64_t seed);

/// Average ranks (1-based) with ties sharing their mean rank.
std::vector<double> average_ranks(std::span<const double> values);

/// Spearman rank correlation. Two zero-variance inputs score 1 when equal, else 0.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace lico
