#pragma once

// Config-driven commands behind the `lico` executable.

#include <cstdint>
#include <iosfwd>
#include <string>

#include "json.hpp"

#include "lico/data_synth.hpp"
#include "lico/evaluation.hpp"
#include "lico/trainer.hpp"

namespace lico::app {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

struct EvalConfig {
  double step_fraction = kDefaultStepFraction;
  /// Eval images used for curves and pointing game; 0 means all.
  std::size_t max_images = 0;
  /// Eval images averaged in the sanity curves.
  std::size_t sanity_images = 8;
  std::uint64_t sanity_seed = 1;
};

struct PathConfig {
  std::string checkpoint;           // written by train
  std::string metrics;              // JSON Lines, written by train
  std::string report;               // written by eval
  std::string embeddings;           // optional LICOEMB1 class tokens
  std::string template_embeddings;  // LICOEMB1 context tokens for fixed-template mode
  std::string sanity_dir;           // written by sanity
  std::string features;             // CSV written by dump-features
};

struct RunConfig {
  std::uint64_t seed = 0;
  ShapesSpec data;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  PathConfig paths;
};

/// Strict conversion: unknown keys and wrongly typed values raise ConfigError
/// naming the offending key.
RunConfig parse_run_config(const nlohmann::json& doc);
/// Reads and parses a JSON file; syntax errors report line and column.
RunConfig load_run_config(const std::string& path);
nlohmann::json to_json(const RunConfig& config);

enum class Command { train, eval, sanity, dump_features };

/// Checks inputs exist and output directories are writable before any compute.
void validate_paths(const RunConfig& config, Command command, const std::string& checkpoint);

/// Class-token table from the embedding file when configured, else synthetic.
Tensor class_token_table(const RunConfig& config, const Dataset& data);
/// Fresh model for the config (context tokens loaded in fixed-template mode).
LicoModel<float> build_model(const RunConfig& config, const Dataset& data);
/// Model with values restored from a checkpoint file.
LicoModel<float> load_model(const RunConfig& config, const Dataset& data,
                            const std::string& checkpoint);

/// Insertion/deletion, pointing game and sanity curves on the eval split.
nlohmann::json evaluation_report(const RunConfig& config, const ImageBranch<float>& model,
                                 const Dataset& data);

int run_train(const RunConfig& config, const std::string& resume, std::ostream& log);
int run_eval(const RunConfig& config, const std::string& checkpoint, std::ostream& log);
int run_sanity(const RunConfig& config, const std::string& checkpoint, std::ostream& log);
int run_dump_features(const RunConfig& config, const std::string& checkpoint, std::ostream& log);
/// Prints the LICOEMB1 layout and the class-name order of the config.
void print_embed_template(const RunConfig& config, std::ostream& out);

}  // namespace lico::app
