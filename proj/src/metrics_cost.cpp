#include "fedlora/metrics_cost.hpp"

#include <algorithm>
#include <stdexcept>

namespace fedlora {

void CostModelInputs::validate() const {
  for (double v : {tau, l, d, R, N, s, n_fim, t_fim, t_total, c_bar})
    if (!(v > 0.0)) throw std::invalid_argument("cost model: all inputs must be positive");
  if (c_bar > l) throw std::invalid_argument("cost model: c_bar cannot exceed l");
}

CostModelInputs cost_inputs_from(const ModelConfig& cfg, double tau, double n_local,
                                 double s, double c_bar, double n_fim, double t_fim,
                                 double t_total) {
  CostModelInputs in;
  in.tau = tau;
  in.l = cfg.layers;
  // Frozen parameters per transformer layer.
  in.d = 4.0 * cfg.d_model * cfg.d_model + 2.0 * cfg.d_model * cfg.d_ff + cfg.d_ff +
         5.0 * cfg.d_model;
  // LoRA parameters per layer group (q and v pairs).
  in.R = 4.0 * cfg.rank * cfg.d_model;
  in.N = n_local;
  in.s = s;
  in.c_bar = c_bar;
  in.n_fim = n_fim;
  in.t_fim = t_fim;
  in.t_total = t_total;
  return in;
}

double backward_cost_full(const CostModelInputs& in) {
  double dr = in.d + in.R;
  return in.tau * in.l * dr * dr * in.N * in.s;
}

double backward_cost_partial(const CostModelInputs& in) {
  double dr = in.d + in.R;
  return in.tau * in.c_bar * dr * dr * in.N * in.s;
}

double comm_cost_full(const CostModelInputs& in) { return 2.0 * in.l * in.R * in.s; }

double comm_cost_partial(const CostModelInputs& in) {
  return 2.0 * in.c_bar * in.R * in.s + in.l * in.s * in.t_fim / in.t_total;
}

double fim_refresh_cost(const CostModelInputs& in) {
  double dr = in.d + in.R;
  return in.l * dr * dr * in.n_fim * in.t_fim / in.t_total +
         in.R * in.R * in.t_fim / in.t_total;
}

double memory_proxy(const ModelConfig& cfg, double c_bar) {
  double trainable = c_bar * 4.0 * cfg.rank * cfg.d_model +
                     cfg.d_model * cfg.n_classes + cfg.n_classes;
  double activation_slots = c_bar * 2.0 * cfg.seq_len * (cfg.d_model + cfg.rank);
  return trainable + activation_slots;
}

EvalReport evaluate(const ModelConfig& cfg, const FrozenBase& base,
                    const TrainableParams& params, const Dataset& test) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  EvalReport report;
  report.n_samples = test.size();
  LayerMask full = all_ones_mask(cfg.layers);
  std::size_t correct = 0;
  double loss_sum = 0.0;
  // Batch by a fixed stride to bound cache memory; the reduction order is
  // fixed so results are deterministic.
  const std::size_t stride = 64;
  for (std::size_t start = 0; start < test.size(); start += stride) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(start + stride, test.size()); ++i)
      idx.push_back(i);
    ForwardCache cache = forward(cfg, base, params, full, Batch::of(test, idx));
    loss_sum += cache.loss * idx.size();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto& logits = cache.logits[i];
      std::size_t argmax =
          std::max_element(logits.begin(), logits.end()) - logits.begin();
      if (static_cast<int>(argmax) == test.samples[idx[i]].label) ++correct;
    }
  }
  report.top1_accuracy = static_cast<double>(correct) / test.size();
  report.mean_loss = loss_sum / test.size();
  return report;
}

}  // namespace fedlora
