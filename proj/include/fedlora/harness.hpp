#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fedlora/allocation.hpp"
#include "fedlora/data.hpp"
#include "fedlora/federation.hpp"

namespace fedlora {

// Full experiment description: model + federation + schedule + capability +
// data parameters + seeds. Parsed from a flat dotted-key "key = value" file;
// unknown keys and invalid values are collected and reported together.
struct ExperimentConfig {
  ModelConfig model;
  FederationConfig federation;
  ScheduleConfig schedule;
  CapabilityProfile capability{{4, 6, 8}, {0.6, 0.3, 0.1}};
  PartitionSpec partition;
  SyntheticSpec task;
  int proxy_size = 50;
  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "runs";

  void validate() const;  // throws std::invalid_argument listing all problems
};

// Parse the dotted-key config dialect. Empty file yields all defaults.
ExperimentConfig parse_config(const std::string& path);
ExperimentConfig parse_config_text(const std::string& text);
// Apply "--key value" style overrides (dotted paths, same keys as the file).
void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& overrides);
std::string serialize_config(const ExperimentConfig& cfg);

struct RunResult {
  std::string strategy;
  std::uint64_t seed = 0;
  std::vector<RoundRecord> records;
  double final_accuracy = 0.0;
  double final_loss = 0.0;
  std::string error;  // non-empty when the cell failed

  bool ok() const { return error.empty(); }
};

// One full experiment: synthetic data, partition, proxy extraction, T rounds.
RunResult run_experiment(const ExperimentConfig& cfg, Strategy strategy, std::uint64_t seed);

// Grid over strategies x seeds. Writes one rounds.csv per cell under
// output_dir/<strategy>_<seed>/ plus a summary.csv; partial failures are
// recorded and the grid continues.
std::vector<RunResult> run_grid(const ExperimentConfig& cfg,
                                const std::vector<Strategy>& strategies,
                                const std::vector<std::uint64_t>& seeds);

// CSV schema v1 (documented in the README): one row per round.
extern const char* kRoundCsvHeader;
std::string round_csv_line(const RoundRecord& rec);
void emit_csv(const std::vector<RoundRecord>& records, const std::filesystem::path& path);
void emit_summary_csv(const std::vector<RunResult>& results,
                      const std::filesystem::path& path);

// Output root: config output_dir unless FEDLORA_OUTPUT_ROOT is set.
std::filesystem::path resolve_output_root(const ExperimentConfig& cfg);

// Fixed-precision float formatting used in every CSV field (6 significant
// digits, locale-independent).
std::string format_g6(double v);

}  // namespace fedlora
