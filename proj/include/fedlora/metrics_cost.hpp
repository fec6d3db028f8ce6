#pragma once

#include "fedlora/data.hpp"
#include "fedlora/model.hpp"

namespace fedlora {

// Symbols of the analytic cost model. All asymptotic constants are taken as 1
// and results are meant to be compared as ratios between strategies.
struct CostModelInputs {
  double tau = 1;     // local epochs
  double l = 8;       // LoRA layers
  double d = 0;       // frozen parameters per layer
  double R = 0;       // LoRA parameters per layer group
  double N = 0;       // local samples per client per round
  double s = 10;      // clients per round
  double c_bar = 0;   // mean trainable layers over selected clients
  double n_fim = 0;   // proxy samples per FIM refresh
  double t_fim = 50;  // refresh period
  double t_total = 1; // total rounds

  void validate() const;  // throws std::invalid_argument
};

CostModelInputs cost_inputs_from(const ModelConfig& cfg, double tau, double n_local,
                                 double s, double c_bar, double n_fim, double t_fim,
                                 double t_total);

// Backward-compute estimates (FLOP units): full training tau*l*(d+R)^2*N*s,
// partial training tau*c_bar*(d+R)^2*N*s.
double backward_cost_full(const CostModelInputs& in);
double backward_cost_partial(const CostModelInputs& in);

// Per-round communication (parameter-count units): full 2*l*R*s, partial
// 2*c_bar*R*s plus the amortized map term l*s*T_FIM/T.
double comm_cost_full(const CostModelInputs& in);
double comm_cost_partial(const CostModelInputs& in);

// Server-side FIM refresh overhead, amortized per round.
double fim_refresh_cost(const CostModelInputs& in);

// Memory proxy: trainable parameter count plus per-layer adapter activation
// slots for the c_bar active layers.
double memory_proxy(const ModelConfig& cfg, double c_bar);

struct EvalReport {
  double top1_accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t n_samples = 0;
};

// Deterministic full-test-set evaluation (dropout off).
EvalReport evaluate(const ModelConfig& cfg, const FrozenBase& base,
                    const TrainableParams& params, const Dataset& test);

}  // namespace fedlora
