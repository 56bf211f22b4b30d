#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lico/params.hpp"
#include "lico/rng.hpp"
#include "lico/tensor.hpp"

namespace lico {

/// Topology of the convolutional encoder f_theta and its linear head.
struct EncoderConfig {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t in_channels = 3;
  std::vector<std::size_t> channels{8, 16, 16};
  std::vector<std::size_t> strides{2, 2, 1};
  std::size_t kernel = 3;
  std::size_t num_classes = 6;

  std::size_t feature_channels() const { return channels.empty() ? 0 : channels.back(); }
  /// (h, w) of the final feature map.
  std::pair<std::size_t, std::size_t> feature_spatial() const;
  std::size_t feature_dim() const {
    const auto [h, w] = feature_spatial();
    return h * w;
  }
  /// Throws ShapeError when the strides collapse the spatial extent.
  void validate() const;
};

/// N x d' matrix of flattened channel activations.
template <class Real>
struct FeatureMaps {
  BasicTensor<Real> values;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t channels() const { return values.dim(0); }
  std::size_t dim() const { return values.dim(1); }
};

template <class Real>
struct ConvLayer {
  BasicTensor<Real> weight;  // out x in x k x k
  BasicTensor<Real> bias;    // out
  std::size_t stride = 1;
};

template <class Real>
struct LinearLayer {
  BasicTensor<Real> weight;  // out x in
  BasicTensor<Real> bias;    // out
};

/// Small CNN image encoder with a global-average-pool linear classifier.
///
/// Layers are indexed bottom to top: conv layers 0..L-1, then the classifier
/// at index L. Copies share parameter storage; use clone() for a deep copy.
template <class Real>
class ImageBranch {
 public:
  ImageBranch() = default;
  ImageBranch(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }

  /// image: H x W x C tensor -> N x d' feature maps. The final conv is linear.
  FeatureMaps<Real> encode(const BasicTensor<Real>& image) const;
  /// Per-channel spatial mean, then the linear layer.
  BasicTensor<Real> classify(const BasicTensor<Real>& features) const;
  /// Per-channel spatial means (length N) of an N x d' feature matrix.
  BasicTensor<Real> pool(const BasicTensor<Real>& features) const;
  BasicTensor<Real> classify(const FeatureMaps<Real>& features) const {
    return classify(features.values);
  }
  BasicTensor<Real> logits(const BasicTensor<Real>& image) const { return classify(encode(image)); }

  ParamList<Real> parameters() const;

  std::size_t layer_count() const { return convs_.size() + 1; }
  std::string layer_name(std::size_t layer) const;
  /// Redraws one layer's weights from the initialization distribution, zeroes its bias.
  void reinitialize_layer(std::size_t layer, Rng& rng);

  std::vector<ConvLayer<Real>>& convs() { return convs_; }
  const std::vector<ConvLayer<Real>>& convs() const { return convs_; }
  LinearLayer<Real>& head() { return head_; }
  const LinearLayer<Real>& head() const { return head_; }

  ImageBranch clone() const;
  template <class To>
  ImageBranch<To> cast() const;

 private:
  template <class>
  friend class ImageBranch;

  EncoderConfig config_;
  std::vector<ConvLayer<Real>> convs_;
  LinearLayer<Real> head_;
};

/// Cross-entropy of one logit vector; DomainError when the label is out of range.
template <class Real>
BasicTensor<Real> cross_entropy(const BasicTensor<Real>& logits, std::size_t label);

extern template class ImageBranch<float>;
extern template class ImageBranch<double>;

}  // namespace lico
