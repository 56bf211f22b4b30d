#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "lico/params.hpp"
#include "lico/rng.hpp"
#include "lico/tensor.hpp"

namespace lico {

enum class PromptMode { learnable, random_frozen, fixed_template };

struct TextConfig {
  std::size_t context_tokens = 12;  // M - 1
  std::size_t embed_dim = 32;       // d
  std::size_t mapping_hidden = 64;  // hidden units of h_psi
  std::size_t visual_dim = 16;      // d', must equal the encoder's h*w
  PromptMode mode = PromptMode::learnable;

  std::size_t token_count() const { return context_tokens + 1; }
};

/// Hidden/output widths of a mapping net, written h_psi[a, b].
struct MappingNetShape {
  std::size_t hidden = 0;
  std::size_t output = 0;
};

/// Mapping-net shapes used with full-size backbones.
namespace reference_mapping {
inline constexpr MappingNetShape kResNet50{512, 49};
inline constexpr MappingNetShape kWideResNet{512, 64};
inline constexpr MappingNetShape kPreActResNet18{512, 49};
}  // namespace reference_mapping

/// Row order of a prompt: output row i is input row perm[i].
using Permutation = std::vector<std::size_t>;

Permutation identity_permutation(std::size_t n);
/// ContractError unless perm is a bijection on [0, n).
void validate_permutation(const Permutation& perm, std::size_t n);

/// Learnable context tokens X_1..X_{M-1} and the frozen class-token table.
template <class Real>
class PromptBank {
 public:
  PromptBank() = default;
  /// class_tokens: num_classes x d; rows are L2-normalized on construction.
  PromptBank(const TextConfig& config, const BasicTensor<Real>& class_tokens, std::uint64_t seed);

  /// [X_1, ..., X_{M-1}, t_label] reordered by perm -> M x d.
  BasicTensor<Real> build_prompt(std::size_t label, const Permutation& perm) const;

  const BasicTensor<Real>& context_tokens() const { return context_; }
  const BasicTensor<Real>& class_tokens() const { return classes_; }
  /// Replaces the context tokens (fixed-template mode) keeping trainability per mode.
  void set_context_tokens(const BasicTensor<Real>& tokens);

  std::size_t token_count() const { return context_.dim(0) + 1; }
  std::size_t num_classes() const { return classes_.dim(0); }
  std::size_t embed_dim() const { return classes_.dim(1); }
  PromptMode mode() const { return mode_; }

  /// Context tokens in learnable mode; empty otherwise.
  ParamList<Real> parameters() const;

  PromptBank clone() const;
  template <class To>
  PromptBank<To> cast() const;

 private:
  template <class>
  friend class PromptBank;

  PromptMode mode_ = PromptMode::learnable;
  BasicTensor<Real> context_;
  BasicTensor<Real> classes_;
};

/// Fixed stand-in for a pretrained text encoder: positional embedding, one
/// residual self-attention token-mixing layer, rescaling of each token to RMS 1,
/// then a shared per-token affine map.
template <class Real>
class FrozenEncoder {
 public:
  FrozenEncoder() = default;
  FrozenEncoder(std::size_t tokens, std::size_t dim, std::uint64_t seed);

  /// tokens: M x d -> M x d.
  BasicTensor<Real> encode(const BasicTensor<Real>& tokens) const;

  /// Frozen weights in a fixed order: position, query, key, value, out, out_bias.
  std::vector<BasicTensor<Real>> weights() const {
    return {position_, query_, key_, value_, out_, out_bias_};
  }
  static std::vector<const char*> weight_names() {
    return {"position", "query", "key", "value", "out", "out_bias"};
  }
  void set_weights(const std::vector<BasicTensor<Real>>& w);

  template <class To>
  FrozenEncoder<To> cast() const;

 private:
  template <class>
  friend class FrozenEncoder;

  BasicTensor<Real> position_;  // M x d
  BasicTensor<Real> query_;     // d x d
  BasicTensor<Real> key_;
  BasicTensor<Real> value_;
  BasicTensor<Real> out_;
  BasicTensor<Real> out_bias_;  // d
};

/// Per-token one-hidden-layer ReLU MLP from d to d'.
template <class Real>
class MappingNet {
 public:
  MappingNet() = default;
  MappingNet(std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed);

  /// encoded: M x d -> M x d' prompt embedding.
  BasicTensor<Real> map(const BasicTensor<Real>& encoded) const;

  MappingNetShape shape() const { return {w1_.dim(1), w2_.dim(1)}; }
  ParamList<Real> parameters() const;

  MappingNet clone() const;
  template <class To>
  MappingNet<To> cast() const;

 private:
  template <class>
  friend class MappingNet;

  BasicTensor<Real> w1_, b1_, w2_, b2_;
};

/// Seeded unit-norm class tokens. Classes sharing a group id receive
/// correlated vectors: each row is the normalized sum of its group
/// directions plus a class-specific component.
BasicTensor<float> synthetic_class_tokens(const std::vector<std::vector<std::size_t>>& class_groups,
                                          std::size_t dim, std::uint64_t seed);

/// Returns a copy with each row scaled to unit L2 norm (zero rows are left as-is).
template <class Real>
BasicTensor<Real> normalize_table(const BasicTensor<Real>& table);

extern template class PromptBank<float>;
extern template class PromptBank<double>;
extern template class FrozenEncoder<float>;
extern template class FrozenEncoder<double>;
extern template class MappingNet<float>;
extern template class MappingNet<double>;

}  // namespace lico
