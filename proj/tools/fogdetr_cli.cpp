#include <CLI11.hpp>

#include <iostream>

#include "fogdetr/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"fogdetr: fog-robust detection transformer experiments"};
  app.require_subcommand(1);

  fogdetr::CommandLine line;
  std::string config, out, checkpoint;
  std::uint64_t seed = 0;
  double fault = 0.0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "run config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "seed; overrides the config");
    sub->add_option("--out", out, "output directory")->required();
    sub->add_flag("--quiet", line.quiet, "only report errors");
  };

  CLI::App* gen = app.add_subcommand("generate", "render clear/foggy dataset splits");
  common(gen);
  CLI::App* train = app.add_subcommand("train", "train a detector variant");
  common(train);
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on each fog split");
  common(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory; overrides eval.checkpoint");
  CLI::App* verify = app.add_subcommand("verify", "run every invariant suite");
  common(verify);
  verify->add_option("--inject-softmax-fault", fault, "add this to every softmax output (mutation check)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  for (CLI::App* sub : {gen, train, eval, verify}) {
    if (!sub->parsed()) continue;
    line.command = sub->get_name();
    if (!config.empty()) line.config = config;
    if (sub->count("--seed")) line.seed = seed;
    line.out = out;
    if (sub == eval && !checkpoint.empty()) line.checkpoint = checkpoint;
    if (sub == verify && sub->count("--inject-softmax-fault")) line.softmax_fault = fault;
  }
  return fogdetr::run_command(line, std::cout, std::cerr);
}
