#include "lico/text_branch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "lico/errors.hpp"
#include "lico/ops.hpp"

namespace lico {

namespace {

template <class Real>
BasicTensor<Real> uniform_matrix(std::size_t rows, std::size_t cols, double scale, Rng& rng,
                                 bool requires_grad) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  std::vector<Real> data(rows * cols);
  for (auto& v : data) v = static_cast<Real>(dist(rng));
  return BasicTensor<Real>({rows, cols}, std::move(data), requires_grad);
}

template <class Real>
BasicTensor<Real> gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng,
                                  bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<Real> data(rows * cols);
  for (auto& v : data) v = static_cast<Real>(dist(rng));
  return BasicTensor<Real>({rows, cols}, std::move(data), requires_grad);
}

}  // namespace

Permutation identity_permutation(std::size_t n) {
  Permutation p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  return p;
}

void validate_permutation(const Permutation& perm, std::size_t n) {
  if (perm.size() != n) {
    throw ContractError("permutation has " + std::to_string(perm.size()) + " entries, expected " +
                        std::to_string(n));
  }
  std::vector<bool> seen(n, false);
  for (const auto p : perm) {
    if (p >= n || seen[p]) throw ContractError("permutation is not a bijection");
    seen[p] = true;
  }
}

template <class Real>
BasicTensor<Real> normalize_table(const BasicTensor<Real>& table) {
  if (table.rank() != 2) throw ShapeError("token table must be a matrix");
  const std::size_t rows = table.dim(0), cols = table.dim(1);
  std::vector<Real> data(table.data().begin(), table.data().end());
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += static_cast<double>(data[r * cols + c]) * data[r * cols + c];
    const double norm = std::sqrt(acc);
    if (norm == 0.0) continue;
    for (std::size_t c = 0; c < cols; ++c)
      data[r * cols + c] = static_cast<Real>(static_cast<double>(data[r * cols + c]) / norm);
  }
  return BasicTensor<Real>({rows, cols}, std::move(data));
}

// ---------------------------------------------------------------------------
// PromptBank

template <class Real>
PromptBank<Real>::PromptBank(const TextConfig& config, const BasicTensor<Real>& class_tokens,
                             std::uint64_t seed)
    : mode_(config.mode) {
  if (class_tokens.rank() != 2 || class_tokens.dim(1) != config.embed_dim) {
    throw ShapeError("class token table " + shape_str(class_tokens.shape()) +
                     " does not have width " + std::to_string(config.embed_dim));
  }
  if (config.context_tokens == 0) throw ShapeError("prompt needs at least one context token");
  classes_ = normalize_table(class_tokens);
  Rng rng = derive_rng(seed, streams::kTextInit);
  context_ = gaussian_matrix<Real>(config.context_tokens, config.embed_dim, 0.02, rng,
                                   mode_ == PromptMode::learnable);
}

template <class Real>
BasicTensor<Real> PromptBank<Real>::build_prompt(std::size_t label, const Permutation& perm) const {
  if (label >= num_classes()) {
    throw DomainError("build_prompt: label " + std::to_string(label) + " outside [0, " +
                      std::to_string(num_classes()) + ")");
  }
  validate_permutation(perm, token_count());
  const std::size_t row[] = {label};
  const auto class_row = ops::gather_rows(classes_, std::span<const std::size_t>(row));
  const auto ordered = ops::concat_rows(std::vector<BasicTensor<Real>>{context_, class_row});
  return ops::gather_rows(ordered, std::span<const std::size_t>(perm));
}

template <class Real>
void PromptBank<Real>::set_context_tokens(const BasicTensor<Real>& tokens) {
  if (tokens.shape() != context_.shape()) {
    throw ShapeError("context tokens " + shape_str(tokens.shape()) + ", expected " +
                     shape_str(context_.shape()));
  }
  context_ = tokens.clone(mode_ == PromptMode::learnable);
}

template <class Real>
ParamList<Real> PromptBank<Real>::parameters() const {
  if (mode_ != PromptMode::learnable) return {};
  return {{"text.context", context_, ParamGroup::context}};
}

template <class Real>
PromptBank<Real> PromptBank<Real>::clone() const {
  PromptBank<Real> out;
  out.mode_ = mode_;
  out.context_ = context_.clone(context_.requires_grad());
  out.classes_ = classes_.clone(false);
  return out;
}

template <class Real>
template <class To>
PromptBank<To> PromptBank<Real>::cast() const {
  PromptBank<To> out;
  out.mode_ = mode_;
  out.context_ = context_.template cast<To>(context_.requires_grad());
  out.classes_ = classes_.template cast<To>(false);
  return out;
}

// ---------------------------------------------------------------------------
// FrozenEncoder

template <class Real>
FrozenEncoder<Real>::FrozenEncoder(std::size_t tokens, std::size_t dim, std::uint64_t seed) {
  Rng rng = derive_rng(seed, streams::kFrozenEncoder);
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  position_ = gaussian_matrix<Real>(tokens, dim, 0.1, rng, false);
  query_ = uniform_matrix<Real>(dim, dim, 2.0 * s, rng, false);
  key_ = uniform_matrix<Real>(dim, dim, 2.0 * s, rng, false);
  value_ = uniform_matrix<Real>(dim, dim, s, rng, false);
  out_ = uniform_matrix<Real>(dim, dim, s, rng, false);
  out_bias_ = uniform_matrix<Real>(1, dim, 0.1, rng, false);
  out_bias_ = ops::reshape(out_bias_, {dim});
}

template <class Real>
BasicTensor<Real> FrozenEncoder<Real>::encode(const BasicTensor<Real>& tokens) const {
  if (tokens.rank() != 2 || tokens.dim(1) != query_.dim(0)) {
    throw ShapeError("encode_prompt: tokens " + shape_str(tokens.shape()) + " vs width " +
                     std::to_string(query_.dim(0)));
  }
  const std::size_t m = tokens.dim(0);
  if (m > position_.dim(0)) {
    throw ShapeError("encode_prompt: " + std::to_string(m) + " tokens exceed the " +
                     std::to_string(position_.dim(0)) + " positions");
  }
  const auto rows = identity_permutation(m);
  const auto pos = ops::gather_rows(position_, std::span<const std::size_t>(rows));
  const auto x = ops::add(tokens, pos);
  const auto q = ops::matmul(x, query_);
  const auto k = ops::matmul(x, key_);
  const auto v = ops::matmul(x, value_);
  const Real inv_sqrt_d = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(tokens.dim(1))));
  const auto scores = ops::scale(ops::matmul(q, ops::transpose(k)), inv_sqrt_d);
  const auto mixed = ops::add(x, ops::matmul(ops::softmax(scores, 1), v));
  const auto normed = ops::scale(ops::normalize_rows(mixed, static_cast<Real>(1e-8)),
                                 static_cast<Real>(std::sqrt(static_cast<double>(tokens.dim(1)))));
  return ops::add_row(ops::matmul(normed, out_), out_bias_);
}

template <class Real>
void FrozenEncoder<Real>::set_weights(const std::vector<BasicTensor<Real>>& w) {
  if (w.size() != 6) throw ShapeError("frozen encoder expects 6 weight tensors");
  const auto current = weights();
  for (std::size_t i = 0; i < 6; ++i) {
    if (w[i].shape() != current[i].shape()) {
      throw ShapeError(std::string("frozen encoder weight '") + weight_names()[i] +
                       "' has shape " + shape_str(w[i].shape()));
    }
  }
  position_ = w[0].clone(false);
  query_ = w[1].clone(false);
  key_ = w[2].clone(false);
  value_ = w[3].clone(false);
  out_ = w[4].clone(false);
  out_bias_ = w[5].clone(false);
}

template <class Real>
template <class To>
FrozenEncoder<To> FrozenEncoder<Real>::cast() const {
  FrozenEncoder<To> out;
  out.position_ = position_.template cast<To>(false);
  out.query_ = query_.template cast<To>(false);
  out.key_ = key_.template cast<To>(false);
  out.value_ = value_.template cast<To>(false);
  out.out_ = out_.template cast<To>(false);
  out.out_bias_ = out_bias_.template cast<To>(false);
  return out;
}

// ---------------------------------------------------------------------------
// MappingNet

template <class Real>
MappingNet<Real>::MappingNet(std::size_t in, std::size_t hidden, std::size_t out,
                             std::uint64_t seed) {
  if (in == 0 || hidden == 0 || out == 0) throw ShapeError("mapping net widths must be positive");
  Rng rng = derive_rng(seed, streams::kTextInit, 1);
  w1_ = uniform_matrix<Real>(in, hidden, 1.0 / std::sqrt(static_cast<double>(in)), rng, true);
  b1_ = BasicTensor<Real>::zeros({hidden}, true);
  w2_ = uniform_matrix<Real>(hidden, out, 1.0 / std::sqrt(static_cast<double>(hidden)), rng, true);
  b2_ = BasicTensor<Real>::zeros({out}, true);
}

template <class Real>
BasicTensor<Real> MappingNet<Real>::map(const BasicTensor<Real>& encoded) const {
  if (encoded.rank() != 2 || encoded.dim(1) != w1_.dim(0)) {
    throw ShapeError("map_to_visual: input " + shape_str(encoded.shape()) + " vs width " +
                     std::to_string(w1_.dim(0)));
  }
  const auto hidden = ops::relu(ops::add_row(ops::matmul(encoded, w1_), b1_));
  return ops::add_row(ops::matmul(hidden, w2_), b2_);
}

template <class Real>
ParamList<Real> MappingNet<Real>::parameters() const {
  return {{"mapping.w1", w1_, ParamGroup::mapping},
          {"mapping.b1", b1_, ParamGroup::mapping},
          {"mapping.w2", w2_, ParamGroup::mapping},
          {"mapping.b2", b2_, ParamGroup::mapping}};
}

template <class Real>
MappingNet<Real> MappingNet<Real>::clone() const {
  MappingNet<Real> out;
  out.w1_ = w1_.clone(true);
  out.b1_ = b1_.clone(true);
  out.w2_ = w2_.clone(true);
  out.b2_ = b2_.clone(true);
  return out;
}

template <class Real>
template <class To>
MappingNet<To> MappingNet<Real>::cast() const {
  MappingNet<To> out;
  out.w1_ = w1_.template cast<To>(true);
  out.b1_ = b1_.template cast<To>(true);
  out.w2_ = w2_.template cast<To>(true);
  out.b2_ = b2_.template cast<To>(true);
  return out;
}

// ---------------------------------------------------------------------------

BasicTensor<float> synthetic_class_tokens(const std::vector<std::vector<std::size_t>>& class_groups,
                                          std::size_t dim, std::uint64_t seed) {
  if (class_groups.empty() || dim == 0) throw ShapeError("class token table must be non-empty");
  std::size_t num_groups = 0;
  for (const auto& g : class_groups)
    for (const auto id : g) num_groups = std::max(num_groups, id + 1);
  Rng rng = derive_rng(seed, streams::kClassTokens);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto unit = [&](std::vector<double>& v) {
    double acc = 0.0;
    for (auto& x : v) {
      x = gauss(rng);
      acc += x * x;
    }
    const double n = std::sqrt(acc);
    for (auto& x : v) x /= n;
  };
  std::vector<std::vector<double>> groups(num_groups, std::vector<double>(dim));
  for (auto& g : groups) unit(g);
  const double own_weight = 0.5;
  std::vector<float> table(class_groups.size() * dim);
  std::vector<double> own(dim);
  for (std::size_t c = 0; c < class_groups.size(); ++c) {
    unit(own);
    std::vector<double> row(dim, 0.0);
    for (const auto id : class_groups[c])
      for (std::size_t j = 0; j < dim; ++j) row[j] += groups[id][j];
    for (std::size_t j = 0; j < dim; ++j) row[j] += own_weight * own[j];
    double acc = 0.0;
    for (const auto x : row) acc += x * x;
    const double n = std::sqrt(acc);
    for (std::size_t j = 0; j < dim; ++j) table[c * dim + j] = static_cast<float>(row[j] / n);
  }
  return normalize_table(BasicTensor<float>({class_groups.size(), dim}, std::move(table)));
}

template class PromptBank<float>;
template class PromptBank<double>;
template PromptBank<double> PromptBank<float>::cast<double>() const;
template PromptBank<float> PromptBank<double>::cast<float>() const;
template class FrozenEncoder<float>;
template class FrozenEncoder<double>;
template FrozenEncoder<double> FrozenEncoder<float>::cast<double>() const;
template FrozenEncoder<float> FrozenEncoder<double>::cast<float>() const;
template class MappingNet<float>;
template class MappingNet<double>;
template MappingNet<double> MappingNet<float>::cast<double>() const;
template MappingNet<float> MappingNet<double>::cast<float>() const;
template BasicTensor<float> normalize_table(const BasicTensor<float>&);
template BasicTensor<double> normalize_table(const BasicTensor<double>&);

}  // namespace lico
