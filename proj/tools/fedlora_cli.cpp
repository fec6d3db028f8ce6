#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedlora/harness.hpp"
#include "fedlora/metrics_cost.hpp"

namespace {

using namespace fedlora;

ExperimentConfig load_with_overrides(const std::string& path,
                                     const std::vector<std::string>& extras) {
  ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : parse_config(path);
  apply_overrides(cfg, extras);
  return cfg;
}

int cmd_validate(const std::string& path, const std::vector<std::string>& extras) {
  ExperimentConfig cfg = load_with_overrides(path, extras);
  cfg.validate();
  std::cout << serialize_config(cfg);
  return 0;
}

int cmd_simulate(const std::string& path, const std::vector<std::string>& extras) {
  ExperimentConfig cfg = load_with_overrides(path, extras);
  cfg.validate();
  std::vector<Strategy> strategies{cfg.schedule.strategy};
  auto results = run_grid(cfg, strategies, cfg.seeds);
  bool all_ok = true;
  for (const auto& r : results) {
    if (r.ok()) {
      std::cout << r.strategy << " seed=" << r.seed
                << " final_accuracy=" << format_g6(r.final_accuracy)
                << " final_loss=" << format_g6(r.final_loss) << '\n';
    } else {
      all_ok = false;
      std::cerr << r.strategy << " seed=" << r.seed << " FAILED: " << r.error << '\n';
    }
  }
  std::cout << "output: " << resolve_output_root(cfg).string() << '\n';
  return all_ok ? 0 : 1;
}

int cmd_gridrun(const std::string& path, const std::vector<std::string>& strategy_names,
                const std::vector<std::uint64_t>& seed_args,
                const std::vector<std::string>& extras) {
  ExperimentConfig cfg = load_with_overrides(path, extras);
  cfg.validate();
  std::vector<Strategy> strategies;
  for (const auto& n : strategy_names) strategies.push_back(strategy_from_string(n));
  if (strategies.empty()) strategies.push_back(cfg.schedule.strategy);
  std::vector<std::uint64_t> seeds = seed_args.empty() ? cfg.seeds : seed_args;

  auto results = run_grid(cfg, strategies, seeds);
  bool all_ok = true;
  for (const auto& r : results) {
    if (r.ok()) {
      std::cout << r.strategy << " seed=" << r.seed
                << " final_accuracy=" << format_g6(r.final_accuracy) << '\n';
    } else {
      all_ok = false;
      std::cerr << r.strategy << " seed=" << r.seed << " FAILED: " << r.error << '\n';
    }
  }
  std::cout << "summary: " << (resolve_output_root(cfg) / "summary.csv").string() << '\n';
  return all_ok ? 0 : 1;
}

int cmd_costs(const std::string& path, const std::vector<std::string>& extras) {
  ExperimentConfig cfg = load_with_overrides(path, extras);
  cfg.validate();
  double n_local = static_cast<double>(cfg.task.n_train) / cfg.federation.n_clients;
  double c_bar = 0.0;
  for (std::size_t h = 0; h < cfg.capability.levels.size(); ++h)
    c_bar += cfg.capability.levels[h] * cfg.capability.ratios[h];
  CostModelInputs in = cost_inputs_from(
      cfg.model, cfg.federation.local_epochs, n_local, cfg.federation.clients_per_round,
      c_bar, cfg.proxy_size, cfg.schedule.t_fim, cfg.federation.rounds);
  in.validate();

  double bw_full = backward_cost_full(in);
  double bw_part = backward_cost_partial(in);
  double cm_full = comm_cost_full(in);
  double cm_part = comm_cost_partial(in);
  std::printf("c_bar                 %s\n", format_g6(in.c_bar).c_str());
  std::printf("backward_full         %s\n", format_g6(bw_full).c_str());
  std::printf("backward_partial      %s\n", format_g6(bw_part).c_str());
  std::printf("backward_ratio        %s\n", format_g6(bw_part / bw_full).c_str());
  std::printf("comm_full             %s\n", format_g6(cm_full).c_str());
  std::printf("comm_partial          %s\n", format_g6(cm_part).c_str());
  std::printf("comm_ratio            %s\n", format_g6(cm_part / cm_full).c_str());
  std::printf("fim_refresh_per_round %s\n", format_g6(fim_refresh_cost(in)).c_str());
  std::printf("memory_proxy_partial  %s\n",
              format_g6(memory_proxy(cfg.model, in.c_bar)).c_str());
  std::printf("memory_proxy_full     %s\n",
              format_g6(memory_proxy(cfg.model, in.l)).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated LoRA fine-tuning simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> strategy_names;
  std::vector<std::uint64_t> seed_args;

  auto* simulate = app.add_subcommand("simulate", "Run one strategy over the config seeds");
  simulate->add_option("-c,--config", config_path, "Config file (dotted key = value)");
  simulate->allow_extras();

  auto* gridrun = app.add_subcommand("gridrun", "Run a strategy x seed grid");
  gridrun->add_option("-c,--config", config_path, "Config file");
  gridrun->add_option("--strategies", strategy_names, "Strategies to run")->delimiter(',');
  gridrun->add_option("--seeds", seed_args, "Seeds to run")->delimiter(',');
  gridrun->allow_extras();

  auto* validate = app.add_subcommand("validate", "Validate a config and print it resolved");
  validate->add_option("-c,--config", config_path, "Config file");
  validate->allow_extras();

  auto* costs = app.add_subcommand("costs", "Print analytic cost estimates, no training");
  costs->add_option("-c,--config", config_path, "Config file");
  costs->allow_extras();

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) return cmd_simulate(config_path, simulate->remaining());
    if (gridrun->parsed())
      return cmd_gridrun(config_path, strategy_names, seed_args, gridrun->remaining());
    if (validate->parsed()) return cmd_validate(config_path, validate->remaining());
    if (costs->parsed()) return cmd_costs(config_path, costs->remaining());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
