#include "lico/app.hpp"

#include <unistd.h>

#include <algorithm>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "lico/errors.hpp"
#include "lico/io.hpp"
#include "lico/ops.hpp"
#include "lico/saliency.hpp"

namespace lico::app {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Walks one JSON object, remembering which keys were read so that anything
// left over can be reported as unknown.
// Programmatic documents store small literals as signed integers.
bool is_count(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

class Section {
 public:
  Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError("config section '" + label() + "' must be an object");
  }

  Section child(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    const auto it = doc_.find(key);
    return Section(it == doc_.end() ? empty : *it, qualified(key));
  }

  void get(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!is_count(*v)) fail(key, "a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void get(const char* key, std::uint64_t& out, int /*seed*/) {
    if (const json* v = find(key)) {
      if (!is_count(*v)) fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::vector<std::size_t>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(key, "an array of non-negative integers");
      out.clear();
      for (const auto& e : *v) {
        if (!is_count(e)) fail(key, "an array of non-negative integers");
        out.push_back(e.get<std::size_t>());
      }
    }
  }
  template <class Enum>
  void get_enum(const char* key, Enum& out, std::initializer_list<std::pair<const char*, Enum>> options) {
    std::string text;
    get(key, text);
    if (text.empty()) return;
    for (const auto& [name, value] : options) {
      if (text == name) {
        out = value;
        return;
      }
    }
    std::string allowed;
    for (const auto& [name, value] : options) allowed += std::string(allowed.empty() ? "" : ", ") + name;
    throw ConfigError("config key '" + qualified(key) + "' must be one of: " + allowed);
  }

  void finish() const {
    for (const auto& [key, value] : doc_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + qualified(key.c_str()) + "'");
    }
  }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    const auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }
  [[noreturn]] void fail(const char* key, const char* expected) const {
    throw ConfigError("config key '" + qualified(key) + "' must be " + expected);
  }
  std::string qualified(const char* key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string label() const { return path_.empty() ? "<root>" : path_; }

  const json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

const char* mode_name(PromptMode m) {
  switch (m) {
    case PromptMode::learnable: return "learnable";
    case PromptMode::random_frozen: return "random-frozen";
    case PromptMode::fixed_template: return "fixed-template";
  }
  return "?";
}

void require_input(const std::string& path, const char* key) {
  if (path.empty()) throw ConfigError("'" + std::string(key) + "' is required for this command");
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) {
    throw ConfigError("'" + std::string(key) + "' file does not exist: " + path);
  }
  if (::access(path.c_str(), R_OK) != 0) {
    throw ConfigError("'" + std::string(key) + "' file is not readable: " + path);
  }
}

void require_writable_dir(const fs::path& dir, const std::string& key) {
  const fs::path d = dir.empty() ? fs::path(".") : dir;
  std::error_code ec;
  if (!fs::is_directory(d, ec)) {
    throw ConfigError("directory for '" + key + "' does not exist: " + d.string());
  }
  if (::access(d.c_str(), W_OK) != 0) {
    throw ConfigError("directory for '" + key + "' is not writable: " + d.string());
  }
}

void require_output(const std::string& path, const char* key) {
  if (path.empty()) throw ConfigError("'" + std::string(key) + "' is required for this command");
  require_writable_dir(fs::path(path).parent_path(), key);
}

ShapesSpec seeded_spec(const RunConfig& config) {
  ShapesSpec spec = config.data;
  spec.seed = config.seed;
  return spec;
}

TrainConfig seeded_train(const RunConfig& config) {
  TrainConfig t = config.train;
  t.seed = config.seed;
  return t;
}

// Index-parallel loop that rethrows the first exception raised by any iteration.
template <class F>
void parallel_for(std::size_t n, F&& body) {
  std::exception_ptr error;
  const long count = static_cast<long>(n);
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(lico_parallel_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

std::span<const Sample> eval_subset(const RunConfig& config, const Dataset& data) {
  std::span<const Sample> all(data.eval);
  if (config.eval.max_images == 0 || config.eval.max_images >= all.size()) return all;
  return all.first(config.eval.max_images);
}

json sanity_json(const SanityCurves& s) {
  json j;
  j["layers"] = s.names;
  j["layer_index"] = s.layers;
  j["cascading"] = s.cascading;
  j["independent"] = s.independent;
  j["reference"] = s.reference;
  return j;
}

SanityCurves sanity_for(const RunConfig& config, const ImageBranch<float>& model,
                        const Dataset& data) {
  const std::size_t n = std::min<std::size_t>(std::max<std::size_t>(config.eval.sanity_images, 1),
                                              data.eval.size());
  std::vector<Image> images;
  std::vector<std::size_t> targets;
  for (std::size_t i = 0; i < n; ++i) {
    images.push_back(data.eval[i].image);
    targets.push_back(data.eval[i].label);
  }
  return sanity_curves(model, images, targets, config.eval.sanity_seed);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw FormatError("write to '" + path + "' failed");
}

}  // namespace

RunConfig parse_run_config(const json& doc) {
  RunConfig c;
  Section root(doc, "");
  root.get("seed", c.seed, 0);

  auto data = root.child("data");
  data.get("image_size", c.data.image_size);
  data.get("per_class_count", c.data.per_class_count);
  data.get("min_object", c.data.min_object);
  data.get("max_object", c.data.max_object);
  data.get("noise_std", c.data.noise_std);
  data.finish();

  auto model = root.child("model");
  model.get("channels", c.model.encoder.channels);
  model.get("strides", c.model.encoder.strides);
  model.get("context_tokens", c.model.text.context_tokens);
  model.get("embed_dim", c.model.text.embed_dim);
  model.get("mapping_hidden", c.model.text.mapping_hidden);
  model.get("initial_tau", c.model.initial_tau);
  model.get_enum("prompt_mode", c.model.text.mode,
                 {{"learnable", PromptMode::learnable},
                  {"random-frozen", PromptMode::random_frozen},
                  {"fixed-template", PromptMode::fixed_template}});
  model.finish();

  auto train = root.child("train");
  train.get("alpha", c.train.loss.alpha);
  train.get("beta", c.train.loss.beta);
  train.get("lr", c.train.lr);
  train.get("momentum", c.train.momentum);
  train.get("weight_decay", c.train.weight_decay);
  train.get("grad_clip", c.train.grad_clip);
  train.get("batch_size", c.train.batch_size);
  train.get("epochs", c.train.epochs);
  train.get("dynamic_context", c.train.dynamic_context);
  train.get("pin_class_token", c.train.pin_class_token);
  train.get("detach_language_target", c.train.loss.detach_language_target);
  train.get("unrolled_sinkhorn", c.train.loss.unrolled_sinkhorn);
  train.get("log_every_epochs", c.train.log_every_epochs);
  train.get_enum("metric", c.train.loss.metric,
                 {{"euclidean", DistanceMetric::euclidean}, {"cosine", DistanceMetric::cosine}});
  train.finish();

  auto sink = root.child("sinkhorn");
  sink.get("lambda", c.train.loss.sinkhorn.lambda);
  sink.get("max_iters", c.train.loss.sinkhorn.max_iters);
  sink.get("tol", c.train.loss.sinkhorn.tol);
  sink.get_enum("log_domain", c.train.loss.sinkhorn.log_domain,
                {{"auto", LogDomain::automatic}, {"always", LogDomain::always}, {"never", LogDomain::never}});
  sink.finish();

  auto eval = root.child("eval");
  eval.get("step_fraction", c.eval.step_fraction);
  eval.get("max_images", c.eval.max_images);
  eval.get("sanity_images", c.eval.sanity_images);
  eval.get("sanity_seed", c.eval.sanity_seed, 0);
  eval.finish();

  auto paths = root.child("paths");
  paths.get("checkpoint", c.paths.checkpoint);
  paths.get("metrics", c.paths.metrics);
  paths.get("report", c.paths.report);
  paths.get("embeddings", c.paths.embeddings);
  paths.get("template_embeddings", c.paths.template_embeddings);
  paths.get("sanity_dir", c.paths.sanity_dir);
  paths.get("features", c.paths.features);
  paths.finish();
  root.finish();

  // Value checks, reported as config errors rather than later domain errors.
  try {
    seeded_spec(c).validate();
    c.model.encoder.height = c.data.image_size;
    c.model.encoder.width = c.data.image_size;
    c.model.encoder.num_classes = c.data.num_classes();
    c.model.encoder.validate();
    c.model.text.visual_dim = c.model.encoder.feature_dim();
    c.train.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  if (!(c.eval.step_fraction > 0.0 && c.eval.step_fraction <= 1.0)) {
    throw ConfigError("config key 'eval.step_fraction' must lie in (0, 1]");
  }
  if (!(c.model.initial_tau > 0.0)) throw ConfigError("config key 'model.initial_tau' must be positive");
  if (c.model.text.context_tokens == 0 || c.model.text.embed_dim == 0 || c.model.text.mapping_hidden == 0) {
    throw ConfigError("model widths and context_tokens must be positive");
  }
  if (c.model.text.mode == PromptMode::fixed_template && c.paths.template_embeddings.empty()) {
    throw ConfigError("prompt_mode 'fixed-template' needs 'paths.template_embeddings'");
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_run_config(doc);
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["data"] = {{"image_size", c.data.image_size},
               {"per_class_count", c.data.per_class_count},
               {"min_object", c.data.min_object},
               {"max_object", c.data.max_object},
               {"noise_std", c.data.noise_std}};
  j["model"] = {{"channels", c.model.encoder.channels},
                {"strides", c.model.encoder.strides},
                {"context_tokens", c.model.text.context_tokens},
                {"embed_dim", c.model.text.embed_dim},
                {"mapping_hidden", c.model.text.mapping_hidden},
                {"initial_tau", c.model.initial_tau},
                {"prompt_mode", mode_name(c.model.text.mode)}};
  const auto& l = c.train.loss;
  j["train"] = {{"alpha", l.alpha},
                {"beta", l.beta},
                {"lr", c.train.lr},
                {"momentum", c.train.momentum},
                {"weight_decay", c.train.weight_decay},
                {"grad_clip", c.train.grad_clip},
                {"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"dynamic_context", c.train.dynamic_context},
                {"pin_class_token", c.train.pin_class_token},
                {"detach_language_target", l.detach_language_target},
                {"unrolled_sinkhorn", l.unrolled_sinkhorn},
                {"log_every_epochs", c.train.log_every_epochs},
                {"metric", l.metric == DistanceMetric::euclidean ? "euclidean" : "cosine"}};
  j["sinkhorn"] = {{"lambda", l.sinkhorn.lambda},
                   {"max_iters", l.sinkhorn.max_iters},
                   {"tol", l.sinkhorn.tol},
                   {"log_domain", l.sinkhorn.log_domain == LogDomain::automatic ? "auto"
                                  : l.sinkhorn.log_domain == LogDomain::always  ? "always"
                                                                                : "never"}};
  j["eval"] = {{"step_fraction", c.eval.step_fraction},
               {"max_images", c.eval.max_images},
               {"sanity_images", c.eval.sanity_images},
               {"sanity_seed", c.eval.sanity_seed}};
  j["paths"] = {{"checkpoint", c.paths.checkpoint},
                {"metrics", c.paths.metrics},
                {"report", c.paths.report},
                {"embeddings", c.paths.embeddings},
                {"template_embeddings", c.paths.template_embeddings},
                {"sanity_dir", c.paths.sanity_dir},
                {"features", c.paths.features}};
  return j;
}

void validate_paths(const RunConfig& config, Command command, const std::string& checkpoint) {
  const auto& p = config.paths;
  if (!p.embeddings.empty()) require_input(p.embeddings, "paths.embeddings");
  if (config.model.text.mode == PromptMode::fixed_template) {
    require_input(p.template_embeddings, "paths.template_embeddings");
  }
  switch (command) {
    case Command::train:
      require_output(p.metrics, "paths.metrics");
      require_output(p.checkpoint, "paths.checkpoint");
      if (!checkpoint.empty()) require_input(checkpoint, "--resume");
      break;
    case Command::eval:
      require_input(checkpoint, "checkpoint");
      require_output(p.report, "paths.report");
      break;
    case Command::sanity: {
      require_input(checkpoint, "checkpoint");
      if (p.sanity_dir.empty()) throw ConfigError("'paths.sanity_dir' is required for this command");
      std::error_code ec;
      if (fs::is_directory(p.sanity_dir, ec)) {
        require_writable_dir(p.sanity_dir, "paths.sanity_dir");
      } else {
        require_writable_dir(fs::path(p.sanity_dir).parent_path(), "paths.sanity_dir");
      }
      break;
    }
    case Command::dump_features:
      require_input(checkpoint, "checkpoint");
      require_output(p.features, "paths.features");
      break;
  }
}

Tensor class_token_table(const RunConfig& config, const Dataset& data) {
  const std::size_t d = config.model.text.embed_dim;
  if (config.paths.embeddings.empty()) {
    std::vector<std::vector<std::size_t>> groups;
    for (const auto& c : data.classes) groups.push_back(c.groups());
    return synthetic_class_tokens(groups, d, config.seed);
  }
  const auto table = io::read_embeddings(config.paths.embeddings);
  if (table.names.size() != data.classes.size()) {
    throw ConfigError("embedding file has " + std::to_string(table.names.size()) +
                      " classes, the dataset has " + std::to_string(data.classes.size()));
  }
  for (std::size_t i = 0; i < table.names.size(); ++i) {
    if (table.names[i] != data.classes[i].name) {
      throw ConfigError("embedding class " + std::to_string(i) + " is '" + table.names[i] +
                        "', expected '" + data.classes[i].name + "'");
    }
  }
  if (table.rows.dim(1) != d) {
    throw ConfigError("embedding width " + std::to_string(table.rows.dim(1)) +
                      " does not match model.embed_dim " + std::to_string(d));
  }
  return table.rows;
}

LicoModel<float> build_model(const RunConfig& config, const Dataset& data) {
  auto model = make_model(config.model, class_token_table(config, data), config.seed);
  if (config.model.text.mode == PromptMode::fixed_template) {
    const auto tmpl = io::read_embeddings(config.paths.template_embeddings);
    const auto& ctx = model.prompts.context_tokens();
    if (tmpl.rows.shape() != ctx.shape()) {
      throw ConfigError("template embeddings " + shape_str(tmpl.rows.shape()) +
                        " do not match the context tokens " + shape_str(ctx.shape()));
    }
    model.prompts.set_context_tokens(tmpl.rows);
  }
  return model;
}

LicoModel<float> load_model(const RunConfig& config, const Dataset& data,
                            const std::string& checkpoint) {
  auto model = build_model(config, data);
  assign_model_tensors(model, io::read_checkpoint(checkpoint));
  return model;
}

json evaluation_report(const RunConfig& config, const ImageBranch<float>& model,
                       const Dataset& data) {
  const auto samples = eval_subset(config, data);
  if (samples.empty()) throw DomainError("evaluation needs at least one eval image");
  const std::size_t n = samples.size();
  std::vector<SaliencyMap> maps(n);
  std::vector<CurveResult> ins(n), del(n);
  parallel_for(n, [&](std::size_t i) {
    const auto& s = samples[i];
    maps[i] = grad_cam(model, s.image, s.label);
    const auto scorer = softmax_scorer(model, s.label);
    ins[i] = insertion(s.image, maps[i].values, scorer, config.eval.step_fraction);
    del[i] = deletion(s.image, maps[i].values, scorer, config.eval.step_fraction);
  });

  std::vector<PointingCase> cases(n);
  json images = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    cases[i].map = &maps[i];
    cases[i].boxes = {samples[i].box};
    const std::size_t p = argmax_pixel(maps[i]);
    const bool hit = samples[i].box.contains(static_cast<int>(p % maps[i].width),
                                             static_cast<int>(p / maps[i].width));
    images.push_back({{"index", samples[i].index},
                      {"label", samples[i].label},
                      {"insertion_auc", ins[i].auc},
                      {"deletion_auc", del[i].auc},
                      {"overall", ins[i].auc - del[i].auc},
                      {"pointing_hit", hit}});
  }
  const auto mean_ins = mean_curve(ins);
  const auto mean_del = mean_curve(del);

  json report;
  report["num_images"] = n;
  report["step_fraction"] = config.eval.step_fraction;
  report["eval_acc"] = evaluate_accuracy(model, samples);
  report["images"] = std::move(images);
  report["insertion_auc"] = mean_ins.auc;
  report["deletion_auc"] = mean_del.auc;
  report["overall"] = mean_ins.auc - mean_del.auc;
  report["insertion_curve"] = mean_ins.scores;
  report["deletion_curve"] = mean_del.scores;
  report["curve_fractions"] = mean_ins.fractions;
  report["pointing_game"] = pointing_game(cases);
  report["sanity"] = sanity_json(sanity_for(config, model, data));
  return report;
}

int run_train(const RunConfig& config, const std::string& resume, std::ostream& log) {
  validate_paths(config, Command::train, resume);
  const auto data = generate(seeded_spec(config));
  Trainer trainer(seeded_train(config), build_model(config, data), data);
  if (!resume.empty()) {
    trainer.load_checkpoint(resume);
    log << "resumed at epoch " << trainer.epoch() << ", step " << trainer.step() << '\n';
  }
  std::ofstream metrics(config.paths.metrics, resume.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw ConfigError("cannot open metrics file '" + config.paths.metrics + "'");
  trainer.run([&](const MetricRecord& rec) {
    metrics << rec.to_json_line() << '\n';
    metrics.flush();
    if (!metrics) {
      log << "warning: metrics write failed at epoch " << rec.epoch << ", continuing\n";
      metrics.clear();
    }
    trainer.save_checkpoint(config.paths.checkpoint);
    log << "epoch " << rec.epoch << " step " << rec.step << " ce " << rec.loss_ce << " mm "
        << rec.loss_mm << " ot " << rec.loss_ot << " acc " << rec.eval_acc << " kl "
        << rec.eval_kl << '\n';
  });
  trainer.save_checkpoint(config.paths.checkpoint);
  return kExitOk;
}

int run_eval(const RunConfig& config, const std::string& checkpoint, std::ostream& log) {
  validate_paths(config, Command::eval, checkpoint);
  const auto data = generate(seeded_spec(config));
  const auto model = load_model(config, data, checkpoint);
  const auto report = evaluation_report(config, model.image, data);
  write_text(config.paths.report, report.dump(2) + "\n");
  log << "insertion " << report["insertion_auc"].get<double>() << " deletion "
      << report["deletion_auc"].get<double>() << " overall " << report["overall"].get<double>()
      << " pointing " << report["pointing_game"].get<double>() << '\n';
  return kExitOk;
}

int run_sanity(const RunConfig& config, const std::string& checkpoint, std::ostream& log) {
  validate_paths(config, Command::sanity, checkpoint);
  const auto data = generate(seeded_spec(config));
  const auto model = load_model(config, data, checkpoint);
  const fs::path dir(config.paths.sanity_dir);
  fs::create_directories(dir);

  const auto curves = sanity_for(config, model.image, data);
  write_text((dir / "sanity.json").string(), sanity_json(curves).dump(2) + "\n");

  const auto& sample = data.eval.front();
  io::write_pgm((dir / "original.pgm").string(),
                grad_cam(model.image, sample.image, sample.label).to_image());
  for (const auto l : curves.layers) {
    const std::string stem = "layer" + std::to_string(l) + "_" + model.image.layer_name(l);
    for (const auto mode : {RandomizationMode::cascading, RandomizationMode::independent}) {
      const auto perturbed = randomize_layer(model.image, l, mode, config.eval.sanity_seed);
      const char* prefix = mode == RandomizationMode::cascading ? "cascading_" : "independent_";
      io::write_pgm((dir / (prefix + stem + ".pgm")).string(),
                    grad_cam(perturbed, sample.image, sample.label).to_image());
    }
  }
  log << "sanity written to " << dir.string() << '\n';
  return kExitOk;
}

int run_dump_features(const RunConfig& config, const std::string& checkpoint, std::ostream& log) {
  validate_paths(config, Command::dump_features, checkpoint);
  const auto data = generate(seeded_spec(config));
  const auto model = load_model(config, data, checkpoint);
  std::vector<std::size_t> labels(data.eval.size());
  std::vector<std::vector<float>> rows(data.eval.size());
  parallel_for(data.eval.size(), [&](std::size_t i) {
    NoGradScope<float> off;
    const auto& image = model.image;
    const auto pooled = image.pool(image.encode(data.eval[i].image.to_tensor<float>()).values);
    labels[i] = data.eval[i].label;
    rows[i].assign(pooled.data().begin(), pooled.data().end());
  });
  io::write_feature_csv(config.paths.features, labels, rows);
  log << rows.size() << " feature rows written to " << config.paths.features << '\n';
  return kExitOk;
}

void print_embed_template(const RunConfig& config, std::ostream& out) {
  out << io::embedding_format_description() << "\nExpected class order (d = "
      << config.model.text.embed_dim << "):\n";
  const auto classes = class_semantics(seeded_spec(config));
  for (std::size_t i = 0; i < classes.size(); ++i) out << "  " << i << "  " << classes[i].name << '\n';
  out << "\nfixed-template mode additionally reads " << config.model.text.context_tokens
      << " context-token rows of width " << config.model.text.embed_dim
      << " from paths.template_embeddings.\n";
}

}  // namespace lico::app
