#include <CLI11.hpp>

#include "semgrad/cli.hpp"

using namespace semgrad;

namespace {

void add_run_flags(CLI::App *cmd, cli::Overrides &o) {
  cmd->add_option("--out", o.out, "output directory (overrides config 'out')");
  cmd->add_option("--seed", o.seed, "sampler seed");
  cmd->add_option("--iterations", o.iterations, "number of optimization iterations");
  cmd->add_option("--gate", o.gate, "update gate: strict-less, leq or off");
  cmd->add_option("--ablation", o.ablation, "none, no-gradient or no-neighbor");
  cmd->add_flag("--no-gradient", o.no_gradient, "propose from examples without feedback");
  cmd->add_flag("--no-neighbor", o.no_neighbor, "backward prompts omit sibling inputs");
  cmd->add_flag("--no-gate", o.no_gate, "accept every proposal");
  cmd->add_option("--single-param", o.single_param, "optimize only parameter K (1-based)");
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Semantic gradient descent over agent graphs"};
  app.require_subcommand(1);

  std::string config, params, split = "val", run_dir;
  cli::Overrides opt, ev;

  auto *optimize = app.add_subcommand("optimize", "optimize the graph parameters");
  optimize->add_option("config", config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  add_run_flags(optimize, opt);

  auto *eval = app.add_subcommand("eval", "evaluate a parameter file on a split");
  eval->add_option("config", config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  eval->add_option("--params", params, "parameter file written by optimize")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--split", split, "train, val or test");
  eval->add_option("--out", ev.out, "output directory (overrides config 'out')");

  auto *trace = app.add_subcommand("trace", "summarize a finished run");
  trace->add_option("run_dir", run_dir, "directory written by optimize")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*optimize) {
      auto cfg = cli::load_run_config(config);
      cli::apply(cfg, opt);
      return cli::cmd_optimize(std::move(cfg));
    }
    if (*eval) {
      auto cfg = cli::load_run_config(config);
      cli::apply(cfg, ev);
      return cli::cmd_eval(std::move(cfg), params, split);
    }
    return cli::cmd_trace(run_dir);
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
