#include "lico/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "json.hpp"

#include "lico/errors.hpp"
#include "lico/io.hpp"
#include "lico/ops.hpp"

namespace lico {

namespace {

void require_finite(double value, const char* term, std::optional<std::size_t> sample) {
  if (std::isfinite(value)) return;
  std::string msg = std::string("non-finite ") + term;
  if (sample) msg += " at batch sample " + std::to_string(*sample);
  throw NumericError(msg);
}

template <class Real>
BasicTensor<Real> mean_of(const std::vector<BasicTensor<Real>>& terms) {
  auto acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = ops::add(acc, terms[i]);
  return ops::scale(acc, static_cast<Real>(1.0 / static_cast<double>(terms.size())));
}

const char* kLogTauName = "log_tau";

}  // namespace

// ---------------------------------------------------------------------------
// LicoModel

template <class Real>
ParamList<Real> LicoModel<Real>::parameters() const {
  auto out = image.parameters();
  for (auto& p : mapping.parameters()) out.push_back(p);
  for (auto& p : prompts.parameters()) out.push_back(p);
  out.push_back({kLogTauName, log_tau, ParamGroup::temperature});
  return out;
}

template <class Real>
BasicTensor<Real> LicoModel<Real>::prompt_embedding(std::size_t label, const Permutation& perm) const {
  return mapping.map(encoder.encode(prompts.build_prompt(label, perm)));
}

template <class Real>
double LicoModel<Real>::tau() const {
  return std::exp(static_cast<double>(log_tau.item()));
}

template <class Real>
LicoModel<Real> LicoModel<Real>::clone() const {
  return {image.clone(), prompts.clone(), encoder, mapping.clone(),
          log_tau.clone(true)};
}

template <class Real>
template <class To>
LicoModel<To> LicoModel<Real>::cast() const {
  return {image.template cast<To>(), prompts.template cast<To>(), encoder.template cast<To>(),
          mapping.template cast<To>(), log_tau.template cast<To>(true)};
}

LicoModel<float> make_model(const ModelConfig& config, const BasicTensor<float>& class_tokens,
                            std::uint64_t seed) {
  config.encoder.validate();
  if (config.text.visual_dim != config.encoder.feature_dim()) {
    throw ShapeError("mapping output width " + std::to_string(config.text.visual_dim) +
                     " must equal the feature-map size " +
                     std::to_string(config.encoder.feature_dim()));
  }
  if (class_tokens.rank() != 2 || class_tokens.dim(0) != config.encoder.num_classes) {
    throw ShapeError("class token table " + shape_str(class_tokens.shape()) + " does not have " +
                     std::to_string(config.encoder.num_classes) + " rows");
  }
  if (!(config.initial_tau > 0.0)) throw DomainError("initial tau must be positive");
  LicoModel<float> m;
  m.image = ImageBranch<float>(config.encoder, seed);
  m.prompts = PromptBank<float>(config.text, class_tokens, seed);
  m.encoder = FrozenEncoder<float>(config.text.token_count(), config.text.embed_dim, seed);
  m.mapping = MappingNet<float>(config.text.embed_dim, config.text.mapping_hidden,
                                config.text.visual_dim, seed);
  m.log_tau = Tensor::scalar(static_cast<float>(std::log(config.initial_tau)), true);
  return m;
}

// ---------------------------------------------------------------------------
// Losses

template <class Real>
LossTerms<Real> compute_losses(const LicoModel<Real>& model,
                               const std::vector<BasicTensor<Real>>& images,
                               const std::vector<std::size_t>& labels, const Permutation& perm,
                               const LossConfig& config,
                               const std::vector<TransportPlan>* frozen_plans) {
  const std::size_t b = images.size();
  if (b < 2 || labels.size() != b) {
    throw ShapeError("compute_losses: need at least 2 images with one label each, got " +
                     std::to_string(b) + " images and " + std::to_string(labels.size()) + " labels");
  }
  if (frozen_plans && frozen_plans->size() != b) {
    throw ContractError("compute_losses: expected one frozen plan per sample");
  }
  if (!(config.alpha >= 0.0) || !(config.beta >= 0.0)) {
    throw DomainError("compute_losses: alpha and beta must be non-negative");
  }

  LossTerms<Real> out;
  std::vector<BasicTensor<Real>> features(b);
  std::vector<BasicTensor<Real>> ce(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto maps = model.image.encode(images[i]);
    features[i] = maps.values;
    ce[i] = ops::cross_entropy(model.image.classify(maps), labels[i]);
    require_finite(static_cast<double>(ce[i].item()), "loss_ce", i);
  }
  out.ce = mean_of(ce);

  // Terms with zero weight are still measured but kept off the tape.
  auto weighted = [&](double weight, auto&& body) {
    if (weight == 0.0) {
      NoGradScope<Real> off;
      return body();
    }
    return body();
  };

  // One prompt embedding per distinct class, shared by every sample of that class.
  std::vector<BasicTensor<Real>> per_class(model.prompts.num_classes());
  std::vector<bool> built(per_class.size(), false);
  auto class_embedding = [&](std::size_t label) -> const BasicTensor<Real>& {
    if (label >= per_class.size()) {
      throw DomainError("compute_losses: label " + std::to_string(label) + " out of range");
    }
    if (!built[label]) {
      per_class[label] = model.prompt_embedding(label, perm);
      built[label] = true;
    }
    return per_class[label];
  };

  out.mm = weighted(config.alpha, [&] {
    std::vector<BasicTensor<Real>> prompts(b);
    for (std::size_t i = 0; i < b; ++i) prompts[i] = class_embedding(labels[i]);
    out.language_adjacency = adjacency(pairwise_distance(prompts, config.metric), model.log_tau);
    out.image_adjacency = adjacency(pairwise_distance(features, config.metric), model.log_tau);
    return mm_loss(out.language_adjacency, out.image_adjacency, config.detach_language_target);
  });
  require_finite(static_cast<double>(out.mm.item()), "loss_mm", std::nullopt);

  // Prompt embeddings built above under NoGradScope must not leak into a taped OT term.
  if (config.alpha == 0.0 && config.beta != 0.0) std::fill(built.begin(), built.end(), false);

  out.ot = weighted(config.beta, [&] {
    std::vector<BasicTensor<Real>> costs(b);
    for (std::size_t i = 0; i < b; ++i) costs[i] = cost_matrix(features[i], class_embedding(labels[i]));
    if (frozen_plans) {
      out.plans = *frozen_plans;
    } else {
      std::vector<std::vector<double>> values(b);
      for (std::size_t i = 0; i < b; ++i) {
        values[i] = to_double(costs[i]);
        for (const double c : values[i]) require_finite(c, "OT cost", i);
      }
      out.plans = sinkhorn_batch(values, costs.front().dim(0), costs.front().dim(1), config.sinkhorn);
    }
    std::vector<BasicTensor<Real>> terms(b);
    for (std::size_t i = 0; i < b; ++i) {
      const auto& plan = out.plans[i];
      terms[i] = config.unrolled_sinkhorn
                     ? ot_loss_unrolled(costs[i], plan.source, plan.target, config.sinkhorn.lambda,
                                        plan.iterations)
                     : ot_loss(costs[i], plan);
      require_finite(static_cast<double>(terms[i].item()), "loss_ot", i);
    }
    return mean_of(terms);
  });

  out.total = ops::add(out.ce, ops::add(ops::scale(out.mm, static_cast<Real>(config.alpha)),
                                        ops::scale(out.ot, static_cast<Real>(config.beta))));
  require_finite(static_cast<double>(out.total.item()), "loss_total", std::nullopt);
  return out;
}

// ---------------------------------------------------------------------------
// Schedule and shuffling

double lr_schedule(std::size_t step, std::size_t total_steps, double initial_lr) {
  if (total_steps == 0) throw DomainError("lr_schedule: total steps must be positive");
  const std::size_t k = std::min(step, total_steps);
  return initial_lr * std::cos(7.0 * std::numbers::pi * static_cast<double>(k) /
                               (16.0 * static_cast<double>(total_steps)));
}

Permutation shuffle_context(std::size_t tokens, Rng& rng, bool enabled, bool pin_class_token) {
  auto perm = identity_permutation(tokens);
  if (!enabled || tokens < 2) return perm;
  const std::size_t movable = pin_class_token ? tokens - 1 : tokens;
  // Explicit Fisher-Yates so the sequence does not depend on the standard library.
  for (std::size_t i = movable; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(perm[i - 1], perm[pick(rng)]);
  }
  return perm;
}

void TrainConfig::validate() const {
  if (!(loss.alpha >= 0.0) || !(loss.beta >= 0.0)) throw DomainError("alpha and beta must be >= 0");
  if (batch_size < 2) throw DomainError("batch_size must be at least 2");
  if (epochs == 0) throw DomainError("epochs must be positive");
  if (!(lr > 0.0)) throw DomainError("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw DomainError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw DomainError("weight_decay must be >= 0");
  if (!(grad_clip >= 0.0)) throw DomainError("grad_clip must be >= 0 (0 disables clipping)");
  if (!(loss.sinkhorn.lambda > 0.0)) throw DomainError("sinkhorn lambda must be positive");
  if (log_every_epochs == 0) throw DomainError("log_every_epochs must be positive");
}

// ---------------------------------------------------------------------------
// Optimizer

SgdMomentum::SgdMomentum(ParamList<float> params, double momentum, double weight_decay,
                         double clip_norm)
    : params_(std::move(params)),
      momentum_(momentum),
      weight_decay_(weight_decay),
      clip_norm_(clip_norm) {
  buffers_.reserve(params_.size());
  for (const auto& p : params_) buffers_.push_back(Tensor::zeros(p.tensor.shape()));
}

double SgdMomentum::grad_norm() const {
  double acc = 0.0;
  for (const auto& p : params_) {
    for (const float g : p.tensor.grad()) acc += static_cast<double>(g) * g;
  }
  return std::sqrt(acc);
}

void SgdMomentum::step(double lr) {
  // Clipping rescales the loss gradient only; weight decay is added afterwards.
  double clip = 1.0;
  if (clip_norm_ > 0.0) {
    const double norm = grad_norm();
    if (norm > clip_norm_) clip = clip_norm_ / norm;
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    const double wd = p.group == ParamGroup::temperature ? 0.0 : weight_decay_;
    auto values = p.tensor.mutable_data();
    auto buffer = buffers_[i].mutable_data();
    const auto grad = p.tensor.grad();
    const bool has_grad = grad.size() == values.size();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = (has_grad ? clip * static_cast<double>(grad[j]) : 0.0) + wd * values[j];
      const double m = momentum_ * buffer[j] + g;
      buffer[j] = static_cast<float>(m);
      values[j] = static_cast<float>(values[j] - lr * m);
    }
  }
}

void SgdMomentum::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

// ---------------------------------------------------------------------------
// Metrics

std::string MetricRecord::to_json_line() const {
  nlohmann::json j;
  j["epoch"] = epoch;
  j["step"] = step;
  j["loss_ce"] = loss_ce;
  j["loss_mm"] = loss_mm;
  j["loss_ot"] = loss_ot;
  j["loss_total"] = loss_total;
  j["eval_acc"] = eval_acc;
  j["eval_kl"] = eval_kl;
  j["tau"] = tau;
  j["lr"] = lr;
  return j.dump();
}

double evaluate_accuracy(const ImageBranch<float>& image, std::span<const Sample> samples) {
  if (samples.empty()) throw DomainError("evaluate_accuracy: empty sample set");
  NoGradScope<float> off;
  long hits = 0;
  const long n = static_cast<long>(samples.size());
#pragma omp parallel for schedule(static) reduction(+ : hits)
  for (long i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    const auto logits = image.logits(s.image.to_tensor<float>());
    const auto d = logits.data();
    const auto best = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
    hits += best == s.label ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

double evaluate_kl(const LicoModel<float>& model, std::span<const Sample> samples,
                   std::size_t batch_size, DistanceMetric metric) {
  if (batch_size < 2) throw DomainError("evaluate_kl: batch size must be at least 2");
  const std::size_t batches = samples.size() / batch_size;
  if (batches == 0) throw DomainError("evaluate_kl: fewer eval samples than one batch");
  NoGradScope<float> off;
  const auto perm = identity_permutation(model.prompts.token_count());
  std::vector<Tensor> per_class(model.prompts.num_classes());
  for (std::size_t c = 0; c < per_class.size(); ++c) per_class[c] = model.prompt_embedding(c, perm);

  double total = 0.0;
  std::vector<Tensor> features(batch_size), prompts(batch_size);
  for (std::size_t k = 0; k < batches; ++k) {
    const long n = static_cast<long>(batch_size);
#pragma omp parallel for schedule(static)
    for (long i = 0; i < n; ++i) {
      const auto& s = samples[k * batch_size + static_cast<std::size_t>(i)];
      features[static_cast<std::size_t>(i)] = model.image.encode(s.image.to_tensor<float>()).values;
    }
    for (std::size_t i = 0; i < batch_size; ++i) {
      prompts[i] = per_class.at(samples[k * batch_size + i].label);
    }
    const auto a_g = adjacency(pairwise_distance(prompts, metric), model.log_tau);
    const auto a_f = adjacency(pairwise_distance(features, metric), model.log_tau);
    total += static_cast<double>(mm_loss(a_g, a_f).item());
  }
  return total / static_cast<double>(batches);
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig config, LicoModel<float> model, const Dataset& data)
    : config_(std::move(config)), model_(std::move(model)), data_(&data) {
  config_.validate();
  if (data.train.size() < config_.batch_size) {
    throw DomainError("training set has fewer samples than one batch");
  }
  if (data.eval.size() < config_.batch_size) {
    throw DomainError("eval set has fewer samples than one batch");
  }
  optimizer_ = SgdMomentum(model_.parameters(), config_.momentum, config_.weight_decay,
                           config_.grad_clip);
}

std::size_t Trainer::steps_per_epoch() const { return data_->train.size() / config_.batch_size; }

StepResult Trainer::train_step(std::span<const Sample* const> batch) {
  if (batch.size() != config_.batch_size) {
    throw ShapeError("train_step: batch of " + std::to_string(batch.size()) + ", configured " +
                     std::to_string(config_.batch_size));
  }
  StepResult result;
  Rng rng = derive_rng(config_.seed, streams::kContextShuffle, step_);
  result.perm = shuffle_context(model_.prompts.token_count(), rng, config_.dynamic_context,
                                config_.pin_class_token);

  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  images.reserve(batch.size());
  for (const Sample* s : batch) {
    images.push_back(s->image.to_tensor<float>());
    labels.push_back(s->label);
  }

  optimizer_.zero_grad();
  Tape<float> tape;
  {
    TapeScope<float> scope(tape);
    const auto terms = compute_losses(model_, images, labels, result.perm, config_.loss);
    result.ce = terms.ce.item();
    result.mm = terms.mm.item();
    result.ot = terms.ot.item();
    result.total = result.ce + config_.loss.alpha * result.mm + config_.loss.beta * result.ot;
    tape.backward(terms.total);
  }
  optimizer_.step(lr_schedule(step_, total_steps(), config_.lr));
  optimizer_.zero_grad();
  ++step_;
  return result;
}

std::vector<std::size_t> Trainer::epoch_order(std::size_t epoch) const {
  std::vector<std::size_t> order(data_->train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = derive_rng(config_.seed, streams::kEpochOrder, epoch);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

StepResult Trainer::run_epoch() {
  const std::size_t epoch = epoch_ + 1;
  const auto order = epoch_order(epoch);
  const std::size_t steps = steps_per_epoch();
  StepResult mean;
  std::vector<const Sample*> batch(config_.batch_size);
  for (std::size_t k = 0; k < steps; ++k) {
    for (std::size_t i = 0; i < config_.batch_size; ++i) {
      batch[i] = &data_->train[order[k * config_.batch_size + i]];
    }
    const auto r = train_step(batch);
    mean.ce += r.ce;
    mean.mm += r.mm;
    mean.ot += r.ot;
    mean.total += r.total;
  }
  const double inv = 1.0 / static_cast<double>(steps);
  mean.ce *= inv;
  mean.mm *= inv;
  mean.ot *= inv;
  mean.total *= inv;
  epoch_ = epoch;
  return mean;
}

StepResult Trainer::initial_losses() const {
  NoGradScope<float> off;
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < config_.batch_size; ++i) {
    images.push_back(data_->train[i].image.to_tensor<float>());
    labels.push_back(data_->train[i].label);
  }
  StepResult r;
  r.perm = identity_permutation(model_.prompts.token_count());
  const auto terms = compute_losses(model_, images, labels, r.perm, config_.loss);
  r.ce = terms.ce.item();
  r.mm = terms.mm.item();
  r.ot = terms.ot.item();
  r.total = r.ce + config_.loss.alpha * r.mm + config_.loss.beta * r.ot;
  return r;
}

MetricRecord Trainer::log_metrics(const StepResult& train_losses) const {
  MetricRecord rec;
  rec.epoch = epoch_;
  rec.step = step_;
  rec.loss_ce = train_losses.ce;
  rec.loss_mm = train_losses.mm;
  rec.loss_ot = train_losses.ot;
  rec.loss_total = train_losses.total;
  rec.eval_acc = evaluate_accuracy(model_.image, data_->eval);
  rec.eval_kl = evaluate_kl(model_, data_->eval, config_.batch_size, config_.loss.metric);
  rec.tau = model_.tau();
  rec.lr = lr_schedule(step_, total_steps(), config_.lr);
  return rec;
}

void Trainer::run(const MetricSink& sink) {
  if (epoch_ == 0 && sink) sink(log_metrics(initial_losses()));
  while (epoch_ < config_.epochs) {
    const auto losses = run_epoch();
    if (sink && (epoch_ % config_.log_every_epochs == 0 || epoch_ == config_.epochs)) {
      sink(log_metrics(losses));
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<std::pair<std::string, Tensor>> model_tensors(const LicoModel<float>& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& p : model.parameters()) out.emplace_back(p.name, p.tensor);
  if (model.prompts.mode() != PromptMode::learnable) {
    out.emplace_back("text.context", model.prompts.context_tokens());
  }
  out.emplace_back("text.classes", model.prompts.class_tokens());
  const auto names = FrozenEncoder<float>::weight_names();
  const auto weights = model.encoder.weights();
  for (std::size_t i = 0; i < names.size(); ++i) {
    out.emplace_back(std::string("text.encoder.") + names[i], weights[i]);
  }
  return out;
}

namespace {

const Tensor& find_tensor(const std::vector<std::pair<std::string, Tensor>>& tensors,
                          const std::string& name, const Shape& shape) {
  for (const auto& [n, t] : tensors) {
    if (n != name) continue;
    if (t.shape() != shape) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) +
                        ", expected " + shape_str(shape));
    }
    return t;
  }
  throw FormatError("checkpoint lacks tensor '" + name + "'");
}

void copy_into(Tensor& dst, const Tensor& src) {
  std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
}

}  // namespace

void assign_model_tensors(LicoModel<float>& model,
                          const std::vector<std::pair<std::string, Tensor>>& tensors) {
  for (auto& p : model.parameters()) copy_into(p.tensor, find_tensor(tensors, p.name, p.tensor.shape()));
  if (model.prompts.mode() != PromptMode::learnable) {
    const auto& ctx = model.prompts.context_tokens();
    model.prompts.set_context_tokens(find_tensor(tensors, "text.context", ctx.shape()));
  }
  const auto& classes = model.prompts.class_tokens();
  const auto& stored = find_tensor(tensors, "text.classes", classes.shape());
  if (!std::equal(stored.data().begin(), stored.data().end(), classes.data().begin())) {
    throw FormatError("checkpoint class tokens differ from the configured class table");
  }
  const auto names = FrozenEncoder<float>::weight_names();
  auto weights = model.encoder.weights();
  for (std::size_t i = 0; i < names.size(); ++i) {
    weights[i] = find_tensor(tensors, std::string("text.encoder.") + names[i], weights[i].shape());
  }
  model.encoder.set_weights(weights);
}

void Trainer::save_checkpoint(const std::string& path) const {
  auto tensors = model_tensors(model_);
  const auto& params = optimizer_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    tensors.emplace_back("optim." + params[i].name, optimizer_.buffers()[i]);
  }
  tensors.emplace_back("state.step", Tensor::scalar(static_cast<float>(step_)));
  tensors.emplace_back("state.epoch", Tensor::scalar(static_cast<float>(epoch_)));
  io::write_checkpoint(path, tensors);
}

void Trainer::load_checkpoint(const std::string& path) {
  const auto tensors = io::read_checkpoint(path);
  assign_model_tensors(model_, tensors);
  const auto& params = optimizer_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    copy_into(optimizer_.buffers()[i],
              find_tensor(tensors, "optim." + params[i].name, params[i].tensor.shape()));
  }
  step_ = static_cast<std::size_t>(find_tensor(tensors, "state.step", {}).item());
  epoch_ = static_cast<std::size_t>(find_tensor(tensors, "state.epoch", {}).item());
  if (epoch_ > config_.epochs || step_ != epoch_ * steps_per_epoch()) {
    throw FormatError("checkpoint state (epoch " + std::to_string(epoch_) + ", step " +
                      std::to_string(step_) + ") does not fit this configuration");
  }
}

template struct LicoModel<float>;
template struct LicoModel<double>;
template LicoModel<double> LicoModel<float>::cast<double>() const;
template LicoModel<float> LicoModel<double>::cast<float>() const;
template LossTerms<float> compute_losses(const LicoModel<float>&, const std::vector<Tensor>&,
                                         const std::vector<std::size_t>&, const Permutation&,
                                         const LossConfig&, const std::vector<TransportPlan>*);
template LossTerms<double> compute_losses(const LicoModel<double>&,
                                          const std::vector<BasicTensor<double>>&,
                                          const std::vector<std::size_t>&, const Permutation&,
                                          const LossConfig&, const std::vector<TransportPlan>*);

}  // namespace lico
