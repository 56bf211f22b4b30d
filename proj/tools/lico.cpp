// lico: train, evaluate and inspect language-image consistency models.

#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "lico/app.hpp"
#include "lico/errors.hpp"

namespace {

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const lico::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return lico::app::kExitUsage;
  } catch (const lico::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return lico::app::kExitNumeric;
  } catch (const lico::FormatError& e) {
    std::cerr << "file error: " << e.what() << '\n';
    return lico::app::kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return lico::app::kExitFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Language-image consistency training and saliency evaluation"};
  cli.require_subcommand(1);

  std::string config_path;
  std::string checkpoint;
  std::string resume;

  auto* train = cli.add_subcommand("train", "Train a model and write metrics plus a checkpoint");
  train->add_option("-c,--config", config_path, "JSON run config")->required();
  train->add_option("--resume", resume, "Continue from a checkpoint written by train");

  auto* eval = cli.add_subcommand("eval", "Insertion/deletion, pointing game and sanity report");
  eval->add_option("-c,--config", config_path, "JSON run config")->required();
  eval->add_option("-k,--checkpoint", checkpoint, "Checkpoint to evaluate")->required();

  auto* sanity = cli.add_subcommand("sanity", "Randomization sanity curves and per-layer PGMs");
  sanity->add_option("-c,--config", config_path, "JSON run config")->required();
  sanity->add_option("-k,--checkpoint", checkpoint, "Checkpoint to perturb")->required();

  auto* dump = cli.add_subcommand("dump-features", "Pooled eval-set features as CSV");
  dump->add_option("-c,--config", config_path, "JSON run config")->required();
  dump->add_option("-k,--checkpoint", checkpoint, "Checkpoint to encode with")->required();

  auto* tmpl = cli.add_subcommand("embed-template", "Describe the class-embedding file format");
  tmpl->add_option("-c,--config", config_path, "JSON run config (defaults when omitted)");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? 0 : lico::app::kExitUsage;
  }

  return guarded([&] {
    const auto config = config_path.empty() ? lico::app::RunConfig{}
                                            : lico::app::load_run_config(config_path);
    if (*train) return lico::app::run_train(config, resume, std::cerr);
    if (*eval) return lico::app::run_eval(config, checkpoint, std::cerr);
    if (*sanity) return lico::app::run_sanity(config, checkpoint, std::cerr);
    if (*dump) return lico::app::run_dump_features(config, checkpoint, std::cerr);
    lico::app::print_embed_template(config, std::cout);
    return lico::app::kExitOk;
  });
}
