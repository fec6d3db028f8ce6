#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fedlora/data.hpp"
#include "fedlora/model.hpp"
#include "fedlora/rng.hpp"

namespace fedlora {

enum class GdPattern { Triangle, InvertedTriangle, Bottleneck, Uniform };
enum class Strategy { Fim, Gd, Rgd, CoDesign, Random, Straggler, Exclusive };

std::string to_string(GdPattern p);
std::string to_string(Strategy s);
GdPattern pattern_from_string(const std::string& s);
Strategy strategy_from_string(const std::string& s);

// Fleet capability levels (trainable-layer counts, ascending) and the client
// fraction at each level.
struct CapabilityProfile {
  std::vector<int> levels;
  std::vector<double> ratios;

  void validate(int l) const;  // throws std::invalid_argument
  int min_level() const { return levels.front(); }
  // Per-client capabilities for a fleet of n, apportioned by ratios
  // (largest remainder), ordered by ascending client id.
  std::vector<int> assign_capabilities(int n) const;
};

// Binary allocation map over the l LoRA layers. `excluded` marks the
// Exclusive-strategy sentinel: the client sits the round out.
struct AllocationMap {
  std::vector<std::uint8_t> bits;
  bool excluded = false;

  int popcount() const;
  std::string bitstring() const;
  LayerMask as_mask() const { return bits; }
};

struct FimScores {
  std::vector<double> gamma;
  std::vector<double> probs;
};

struct ScheduleConfig {
  Strategy strategy = Strategy::CoDesign;
  GdPattern base_pattern = GdPattern::Bottleneck;
  GdPattern straggler_pattern = GdPattern::InvertedTriangle;
  int t_rgd = 50;
  int t_fim = 50;
  bool literal_bernoulli = false;  // Uniform pattern: raw Bernoulli(c/l) bits

  void validate() const;
};

// Deterministic geometric masks; Uniform draws exactly c layers without
// replacement (or raw Bernoulli(c/l) bits when literal_bernoulli is set,
// in which case the popcount may differ from c).
AllocationMap gd_mask(GdPattern pattern, int l, int c, RngStream& rng,
                      bool literal_bernoulli = false);

// Base per-level allocation probability
// a_h = #[levels >= c_h] / sum_h' c_h' r_h'; strictly decreasing in h.
std::vector<double> base_capability_probs(const CapabilityProfile& profile);

// Mean squared L2 norm of per-sample loss gradients per LoRA layer, evaluated
// sample-by-sample over the proxy set.
std::vector<double> fim_scores(const ModelConfig& cfg, const FrozenBase& base,
                               const TrainableParams& params, const Dataset& proxy);

// 1-D k-means over the scores, solved exactly (optimal clusters are
// contiguous in sorted order). Group 0 holds the highest centroid. Falls back
// to rank-quantile grouping when there are fewer than k distinct values.
std::vector<int> cluster_scores(const std::vector<double>& gamma, int k);

// Layer probabilities: each layer inherits the base probability of its score
// group, then the vector is normalized to sum 1.
std::vector<double> fim_allocation_probs(const std::vector<double>& gamma,
                                         const CapabilityProfile& profile);

// Column-sum prior over a deterministic pattern population of n clients
// distributed per the profile ratios (Uniform uses its expected column sums).
std::vector<double> rgd_prior(const CapabilityProfile& profile, GdPattern pattern,
                              int l, int n);

// Sequential weighted draws without replacement; pads from zero-probability
// layers uniformly when fewer than c layers have positive mass.
AllocationMap sample_allocation(const std::vector<double>& probs, int c, RngStream& rng);

// Per-round allocation state machine implementing the strategy dispatch and
// the warm-start / refresh schedule.
class RoundAllocator {
 public:
  RoundAllocator(ScheduleConfig schedule, CapabilityProfile profile, int l, int n_total);

  // `capabilities` are the selected clients' c_i, in selection order. The
  // model and proxy are needed only by FIM-based strategies.
  std::vector<AllocationMap> allocate(int round, const std::vector<int>& capabilities,
                                      const ModelConfig& cfg, const FrozenBase& base,
                                      const TrainableParams& params,
                                      const Dataset* proxy, RngStream& rng);

  // Probability vector behind the most recent sampled allocation (uniform
  // placeholder for strategies that do not sample from one).
  const std::vector<double>& layer_probs() const { return current_probs_; }
  const std::vector<double>& last_gamma() const { return last_gamma_; }

 private:
  void refresh_fim(const ModelConfig& cfg, const FrozenBase& base,
                   const TrainableParams& params, const Dataset* proxy);

  ScheduleConfig schedule_;
  CapabilityProfile profile_;
  int l_;
  int n_total_;
  std::vector<double> current_probs_;
  std::vector<double> last_gamma_;
  std::vector<double> rgd_prior_;
  bool have_fim_probs_ = false;
};

}  // namespace fedlora
