#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lico/data_synth.hpp"
#include "lico/image_branch.hpp"
#include "lico/manifold.hpp"
#include "lico/ot.hpp"
#include "lico/params.hpp"
#include "lico/text_branch.hpp"

namespace lico {

struct ModelConfig {
  EncoderConfig encoder;
  TextConfig text;
  double initial_tau = 1.0;
};

/// Every tensor taking part in the language-image consistency objective.
template <class Real>
struct LicoModel {
  ImageBranch<Real> image;
  PromptBank<Real> prompts;
  FrozenEncoder<Real> encoder;
  MappingNet<Real> mapping;
  BasicTensor<Real> log_tau;  // rank-0, trainable

  /// Trainable parameters: image, mapping, context (learnable mode), temperature.
  ParamList<Real> parameters() const;
  /// G_i for one class: h_psi(g_phi(prompt)) -> M x d'.
  BasicTensor<Real> prompt_embedding(std::size_t label, const Permutation& perm) const;
  double tau() const;

  LicoModel clone() const;
  template <class To>
  LicoModel<To> cast() const;
};

/// class_tokens: num_classes x d table (normalized on construction).
LicoModel<float> make_model(const ModelConfig& config, const BasicTensor<float>& class_tokens,
                            std::uint64_t seed);

struct LossConfig {
  double alpha = 10.0;
  double beta = 1.0;
  DistanceMetric metric = DistanceMetric::euclidean;
  bool detach_language_target = false;
  SinkhornOptions sinkhorn;
  /// Differentiate through the Sinkhorn iterations instead of freezing T*.
  bool unrolled_sinkhorn = false;
};

template <class Real>
struct LossTerms {
  BasicTensor<Real> ce;
  BasicTensor<Real> mm;
  BasicTensor<Real> ot;
  BasicTensor<Real> total;
  std::vector<TransportPlan> plans;
  BasicTensor<Real> language_adjacency;
  BasicTensor<Real> image_adjacency;
};

/// Forward pass of the full objective CE + alpha * MM + beta * OT on one batch.
/// When frozen_plans is given those plans replace the Sinkhorn solves.
/// Throws NumericError naming the term and sample when a loss is non-finite.
template <class Real>
LossTerms<Real> compute_losses(const LicoModel<Real>& model,
                               const std::vector<BasicTensor<Real>>& images,
                               const std::vector<std::size_t>& labels, const Permutation& perm,
                               const LossConfig& config,
                               const std::vector<TransportPlan>* frozen_plans = nullptr);

/// eta_0 * cos(7 pi k / (16 K)); k is clamped to [0, K].
double lr_schedule(std::size_t step, std::size_t total_steps, double initial_lr);

/// Uniform permutation of the M prompt positions, or identity when disabled.
/// With pin_class_token the last (class) position stays in place.
Permutation shuffle_context(std::size_t tokens, Rng& rng, bool enabled, bool pin_class_token = false);

struct TrainConfig {
  LossConfig loss;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  /// Global gradient-norm ceiling; 0 disables clipping.
  double grad_clip = 2.0;
  std::size_t batch_size = 16;
  std::size_t epochs = 30;
  bool dynamic_context = true;
  bool pin_class_token = false;
  std::uint64_t seed = 0;
  std::size_t log_every_epochs = 1;

  void validate() const;
};

/// SGD with heavy-ball momentum: g += wd * p; m = mu * m + g; p -= lr * m.
/// With clip_norm > 0 the loss gradient is first rescaled so that its global
/// L2 norm over all parameters is at most clip_norm.
class SgdMomentum {
 public:
  SgdMomentum() = default;
  SgdMomentum(ParamList<float> params, double momentum, double weight_decay,
              double clip_norm = 0.0);

  /// Global L2 norm of the gradients currently held by the parameters.
  double grad_norm() const;

  /// Applies one update using the gradients currently held by the parameters.
  void step(double lr);
  void zero_grad();

  const ParamList<float>& params() const { return params_; }
  std::vector<Tensor>& buffers() { return buffers_; }
  const std::vector<Tensor>& buffers() const { return buffers_; }

 private:
  ParamList<float> params_;
  std::vector<Tensor> buffers_;
  double momentum_ = 0.9;
  double weight_decay_ = 0.0;
  double clip_norm_ = 0.0;
};

struct MetricRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss_ce = 0.0;
  double loss_mm = 0.0;
  double loss_ot = 0.0;
  double loss_total = 0.0;
  double eval_acc = 0.0;
  double eval_kl = 0.0;
  double tau = 0.0;
  double lr = 0.0;

  /// One JSON Lines record with sorted keys.
  std::string to_json_line() const;
};

struct StepResult {
  double ce = 0.0;
  double mm = 0.0;
  double ot = 0.0;
  double total = 0.0;
  Permutation perm;
};

/// Fraction of samples whose argmax logit equals the label.
double evaluate_accuracy(const ImageBranch<float>& image, std::span<const Sample> samples);

/// Mean L_MM over consecutive eval batches of `batch_size` (identity prompt order).
double evaluate_kl(const LicoModel<float>& model, std::span<const Sample> samples,
                   std::size_t batch_size, DistanceMetric metric);

/// Runs the training loop over a dataset, one epoch at a time.
class Trainer {
 public:
  using MetricSink = std::function<void(const MetricRecord&)>;

  Trainer(TrainConfig config, LicoModel<float> model, const Dataset& data);

  /// One optimization step on the given samples.
  StepResult train_step(std::span<const Sample* const> batch);

  /// Trains until the configured epoch count, emitting one record before the
  /// first epoch (epoch 0) and after every logged epoch.
  void run(const MetricSink& sink);
  /// Trains a single epoch and returns its mean losses.
  StepResult run_epoch();

  MetricRecord log_metrics(const StepResult& train_losses) const;

  const LicoModel<float>& model() const { return model_; }
  const TrainConfig& config() const { return config_; }
  std::size_t step() const { return step_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t steps_per_epoch() const;
  std::size_t total_steps() const { return steps_per_epoch() * config_.epochs; }

  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

 private:
  std::vector<std::size_t> epoch_order(std::size_t epoch) const;
  StepResult initial_losses() const;

  TrainConfig config_;
  LicoModel<float> model_;
  const Dataset* data_;
  SgdMomentum optimizer_;
  std::size_t step_ = 0;
  std::size_t epoch_ = 0;
};

/// Named tensors making up a checkpoint of a model (trainable and frozen).
std::vector<std::pair<std::string, Tensor>> model_tensors(const LicoModel<float>& model);
/// Copies values from named tensors into the model; FormatError on missing or misshapen entries.
void assign_model_tensors(LicoModel<float>& model,
                          const std::vector<std::pair<std::string, Tensor>>& tensors);

extern template struct LicoModel<float>;
extern template struct LicoModel<double>;

}  // namespace lico
