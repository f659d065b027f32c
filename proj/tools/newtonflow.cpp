#include "newtonflow/cli/run.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

int main(int argc, char** argv) {
  CLI::App app{"Newton / Fisher-scoring flows as particles and as transported densities"};
  app.require_subcommand(1);

  std::string config_path;
  std::string output;
  unsigned threads = 0;
  std::uint64_t seed = 0;

  for (const auto& name : newtonflow::cli::known_commands()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "key=value configuration file")->required();
    sub->add_option("--output", output, "output directory (overrides output_dir)");
    sub->add_option("--threads", threads, "worker threads (default: NEWTONFLOW_THREADS or 1)");
    sub->add_option("--seed", seed, "master seed (overrides seed)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const CLI::App* sub = app.get_subcommands().front();
  std::ifstream in(config_path, std::ios::binary);
  if (!in) {
    std::cerr << newtonflow::cli::error_line("io", "cannot read config '" + config_path + "'") << "\n";
    return 4;
  }
  std::stringstream text;
  text << in.rdbuf();

  newtonflow::cli::Overrides ov;
  ov.threads = threads;
  if (sub->count("--output")) ov.output_dir = output;
  if (sub->count("--seed")) ov.seed = seed;

  const auto status = newtonflow::cli::run(sub->get_name(), text.str(), ov);
  if (status.exit_code != 0) std::cerr << status.error << "\n";
  return status.exit_code;
}
