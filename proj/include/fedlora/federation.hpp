#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fedlora/allocation.hpp"
#include "fedlora/data.hpp"
#include "fedlora/metrics_cost.hpp"
#include "fedlora/model.hpp"

namespace fedlora {

struct FederationConfig {
  int n_clients = 30;
  int clients_per_round = 10;  // s
  int rounds = 100;            // T
  int local_epochs = 1;        // tau
  int batch_size = 16;
  int max_steps = 0;  // cap on optimizer steps per round, 0 = unlimited
  AdamWConfig opt;
  int eval_stride = 1;  // evaluate every k-th round (and always the last)

  void validate() const;
};

struct ClientUpdate {
  int client_id = 0;
  AllocationMap map;
  TrainableParams delta;
  std::size_t sample_count = 0;
};

struct RoundRecord {
  int round = 0;
  std::string strategy;
  std::vector<int> selected;
  std::vector<std::string> map_bits;
  std::vector<double> layer_probs;
  std::vector<double> layer_delta_norms;  // L2 per LoRA layer of the aggregate
  double head_delta_norm = 0.0;
  int participants = 0;
  bool evaluated = false;
  double accuracy = 0.0;
  double loss = 0.0;
  double backward_cost = 0.0;  // analytic estimate for this round
  double comm_cost = 0.0;
  std::vector<std::string> warnings;
};

// Uniform without-replacement client subset, ascending order.
std::vector<int> sample_clients(int n, int s, RngStream& rng);

// One client's round: copy the global trainables, freeze per map, run tau
// epochs of AdamW over the local shard, return the delta (exact zeros on
// frozen layers). Optimizer state is discarded.
ClientUpdate local_update(const ModelConfig& cfg, const FrozenBase& base,
                          const TrainableParams& theta_g, const AllocationMap& map,
                          const Dataset& local_data, const FederationConfig& fed,
                          int client_id, RngStream& rng);

// Masked per-layer mean; layers no client trained yield exact-zero deltas.
// The head is averaged over all participants. Reduction order is ascending
// client id.
TrainableParams aggregate(const std::vector<ClientUpdate>& updates,
                          const TrainableParams& shape);

// Algorithm state across rounds plus the round loop.
class FederationRun {
 public:
  FederationRun(ModelConfig model_cfg, FederationConfig fed_cfg, ScheduleConfig schedule,
                CapabilityProfile profile, std::uint64_t seed);

  // Owns model init and data wiring; shards indexed by client id.
  void initialize(RngStream& init_rng);
  void attach_data(std::vector<Dataset> client_shards, Dataset proxy, Dataset eval_set);

  RoundRecord run_round(int t);
  std::vector<RoundRecord> run_all();

  const TrainableParams& global_params() const { return theta_g_; }
  const FrozenBase& frozen_base() const { return base_; }
  const ModelConfig& model_config() const { return model_cfg_; }
  int round() const { return round_; }

 private:
  ModelConfig model_cfg_;
  FederationConfig fed_cfg_;
  ScheduleConfig schedule_;
  CapabilityProfile profile_;
  std::uint64_t seed_;

  FrozenBase base_;
  TrainableParams theta_g_;
  std::vector<int> capabilities_;  // per client id
  std::vector<Dataset> shards_;
  Dataset proxy_;
  Dataset eval_set_;
  std::optional<RoundAllocator> allocator_;
  int round_ = 0;
};

}  // namespace fedlora
