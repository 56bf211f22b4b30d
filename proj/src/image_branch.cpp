#include "lico/image_branch.hpp"

#include <cmath>
#include <string>

#include "lico/errors.hpp"
#include "lico/ops.hpp"

namespace lico {

namespace {

template <class Real>
BasicTensor<Real> uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-s, s);
  std::vector<Real> data(shape_size(shape));
  for (auto& v : data) v = static_cast<Real>(dist(rng));
  return BasicTensor<Real>(std::move(shape), std::move(data), true);
}

}  // namespace

std::pair<std::size_t, std::size_t> EncoderConfig::feature_spatial() const {
  std::size_t h = height;
  std::size_t w = width;
  const std::size_t pad = kernel / 2;
  for (const auto s : strides) {
    if (s == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel) return {0, 0};
    h = (h + 2 * pad - kernel) / s + 1;
    w = (w + 2 * pad - kernel) / s + 1;
  }
  return {h, w};
}

void EncoderConfig::validate() const {
  if (channels.empty()) throw ShapeError("encoder needs at least one conv layer");
  if (channels.size() != strides.size()) {
    throw ShapeError("encoder channels/strides length mismatch");
  }
  if (height == 0 || width == 0 || in_channels == 0 || kernel == 0 || num_classes == 0) {
    throw ShapeError("encoder extents must be positive");
  }
  for (const auto c : channels) {
    if (c == 0) throw ShapeError("encoder channel width must be positive");
  }
  const auto [h, w] = feature_spatial();
  if (h == 0 || w == 0) throw ShapeError("encoder strides collapse the spatial extent");
}

template <class Real>
ImageBranch<Real>::ImageBranch(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng = derive_rng(seed, streams::kImageInit);
  std::size_t in = config_.in_channels;
  for (std::size_t i = 0; i < config_.channels.size(); ++i) {
    const std::size_t out = config_.channels[i];
    ConvLayer<Real> layer;
    layer.weight = uniform_init<Real>({out, in, config_.kernel, config_.kernel},
                                      in * config_.kernel * config_.kernel, rng);
    layer.bias = BasicTensor<Real>::zeros({out}, true);
    layer.stride = config_.strides[i];
    convs_.push_back(std::move(layer));
    in = out;
  }
  head_.weight = uniform_init<Real>({config_.num_classes, in}, in, rng);
  head_.bias = BasicTensor<Real>::zeros({config_.num_classes}, true);
}

template <class Real>
FeatureMaps<Real> ImageBranch<Real>::encode(const BasicTensor<Real>& image) const {
  const Shape expected{config_.height, config_.width, config_.in_channels};
  if (image.shape() != expected) {
    throw ShapeError("encode: image shape " + shape_str(image.shape()) + ", expected " +
                     shape_str(expected));
  }
  const std::size_t area = config_.height * config_.width;
  auto x = ops::reshape(image, {area, config_.in_channels});
  x = ops::transpose(x);
  x = ops::reshape(x, {config_.in_channels, config_.height, config_.width});
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    const auto& layer = convs_[i];
    x = ops::conv2d(x, layer.weight, layer.bias, layer.stride, config_.kernel / 2);
    // No ReLU after the last conv: the features feed the pool directly.
    if (i + 1 < convs_.size()) x = ops::relu(x);
  }
  FeatureMaps<Real> out;
  out.height = x.dim(1);
  out.width = x.dim(2);
  out.values = ops::reshape(x, {x.dim(0), out.height * out.width});
  return out;
}

template <class Real>
BasicTensor<Real> ImageBranch<Real>::pool(const BasicTensor<Real>& features) const {
  if (features.rank() != 2 || features.dim(0) != config_.feature_channels()) {
    throw ShapeError("classify: features " + shape_str(features.shape()) + " do not have " +
                     std::to_string(config_.feature_channels()) + " channels");
  }
  return ops::mean(features, 1);
}

template <class Real>
BasicTensor<Real> ImageBranch<Real>::classify(const BasicTensor<Real>& features) const {
  const auto pooled = pool(features);  // N
  const auto column = ops::reshape(pooled, {pooled.dim(0), 1});
  const auto logits = ops::matmul(head_.weight, column);
  return ops::add_row(ops::reshape(logits, {config_.num_classes}), head_.bias);
}

template <class Real>
ParamList<Real> ImageBranch<Real>::parameters() const {
  ParamList<Real> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    const std::string base = "image." + layer_name(i);
    out.push_back({base + ".weight", convs_[i].weight, ParamGroup::image});
    out.push_back({base + ".bias", convs_[i].bias, ParamGroup::image});
  }
  out.push_back({"image.fc.weight", head_.weight, ParamGroup::image});
  out.push_back({"image.fc.bias", head_.bias, ParamGroup::image});
  return out;
}

template <class Real>
std::string ImageBranch<Real>::layer_name(std::size_t layer) const {
  if (layer < convs_.size()) return "conv" + std::to_string(layer + 1);
  if (layer == convs_.size()) return "fc";
  throw DomainError("unknown image layer " + std::to_string(layer));
}

template <class Real>
void ImageBranch<Real>::reinitialize_layer(std::size_t layer, Rng& rng) {
  BasicTensor<Real>* weight = nullptr;
  BasicTensor<Real>* bias = nullptr;
  std::size_t fan_in = 0;
  if (layer < convs_.size()) {
    weight = &convs_[layer].weight;
    bias = &convs_[layer].bias;
    fan_in = weight->dim(1) * weight->dim(2) * weight->dim(3);
  } else if (layer == convs_.size()) {
    weight = &head_.weight;
    bias = &head_.bias;
    fan_in = weight->dim(1);
  } else {
    throw DomainError("unknown image layer " + std::to_string(layer));
  }
  *weight = uniform_init<Real>(weight->shape(), fan_in, rng);
  *bias = BasicTensor<Real>::zeros(bias->shape(), true);
}

template <class Real>
ImageBranch<Real> ImageBranch<Real>::clone() const {
  ImageBranch<Real> out;
  out.config_ = config_;
  for (const auto& c : convs_) {
    out.convs_.push_back({c.weight.clone(c.weight.requires_grad()),
                          c.bias.clone(c.bias.requires_grad()), c.stride});
  }
  out.head_ = {head_.weight.clone(head_.weight.requires_grad()),
               head_.bias.clone(head_.bias.requires_grad())};
  return out;
}

template <class Real>
template <class To>
ImageBranch<To> ImageBranch<Real>::cast() const {
  ImageBranch<To> out;
  out.config_ = config_;
  for (const auto& c : convs_) {
    out.convs_.push_back({c.weight.template cast<To>(c.weight.requires_grad()),
                          c.bias.template cast<To>(c.bias.requires_grad()), c.stride});
  }
  out.head_ = {head_.weight.template cast<To>(head_.weight.requires_grad()),
               head_.bias.template cast<To>(head_.bias.requires_grad())};
  return out;
}

template <class Real>
BasicTensor<Real> cross_entropy(const BasicTensor<Real>& logits, std::size_t label) {
  return ops::cross_entropy(logits, label);
}

template class ImageBranch<float>;
template class ImageBranch<double>;
template ImageBranch<double> ImageBranch<float>::cast<double>() const;
template ImageBranch<float> ImageBranch<double>::cast<float>() const;
template BasicTensor<float> cross_entropy(const BasicTensor<float>&, std::size_t);
template BasicTensor<double> cross_entropy(const BasicTensor<double>&, std::size_t);

}  // namespace lico
