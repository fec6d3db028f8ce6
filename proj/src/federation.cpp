#include "fedlora/federation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fedlora {

void FederationConfig::validate() const {
  if (n_clients < 1) throw std::invalid_argument("federation: n_clients must be >= 1");
  if (clients_per_round < 1 || clients_per_round > n_clients)
    throw std::invalid_argument("federation: requires 1 <= s <= n");
  if (rounds < 0) throw std::invalid_argument("federation: rounds must be >= 0");
  if (local_epochs < 1) throw std::invalid_argument("federation: local_epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("federation: batch_size must be >= 1");
  if (max_steps < 0) throw std::invalid_argument("federation: max_steps must be >= 0");
  if (eval_stride < 1) throw std::invalid_argument("federation: eval_stride must be >= 1");
}

std::vector<int> sample_clients(int n, int s, RngStream& rng) {
  if (s > n) throw std::invalid_argument("sample_clients: s cannot exceed n");
  std::vector<int> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  // Partial Fisher-Yates: the first s positions are a uniform subset.
  for (int i = 0; i < s; ++i) {
    std::size_t j = i + rng.uniform_index(n - i);
    std::swap(ids[i], ids[j]);
  }
  ids.resize(s);
  std::sort(ids.begin(), ids.end());
  return ids;
}

ClientUpdate local_update(const ModelConfig& cfg, const FrozenBase& base,
                          const TrainableParams& theta_g, const AllocationMap& map,
                          const Dataset& local_data, const FederationConfig& fed,
                          int client_id, RngStream& rng) {
  ClientUpdate update;
  update.client_id = client_id;
  update.map = map;
  update.sample_count = local_data.size();
  if (map.excluded || local_data.empty()) {
    update.delta = zeros_like(theta_g);
    return update;
  }

  TrainableParams local = theta_g;
  OptimizerState opt = make_optimizer(local, fed.opt);
  LayerMask mask = map.as_mask();

  std::vector<std::size_t> order(local_data.size());
  std::iota(order.begin(), order.end(), 0);
  int steps = 0;
  for (int epoch = 0; epoch < fed.local_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(fed.batch_size)) {
      if (fed.max_steps > 0 && steps >= fed.max_steps) break;
      std::vector<std::size_t> idx(
          order.begin() + start,
          order.begin() + std::min(order.size(), start + fed.batch_size));
      RngStream* drop = cfg.dropout_p > 0.0 ? &rng : nullptr;
      ForwardCache cache = forward(cfg, base, local, mask, Batch::of(local_data, idx), drop);
      TrainableParams grads = backward(cfg, base, local, cache);
      adamw_step(local, grads, opt, mask);
      ++steps;
    }
  }

  update.delta = flatten_delta(theta_g, local);
  return update;
}

TrainableParams aggregate(const std::vector<ClientUpdate>& updates,
                          const TrainableParams& shape) {
  TrainableParams delta_g = zeros_like(shape);
  std::vector<const ClientUpdate*> active;
  for (const auto& u : updates)
    if (!u.map.excluded) active.push_back(&u);
  if (active.empty()) return delta_g;
  std::sort(active.begin(), active.end(),
            [](const ClientUpdate* a, const ClientUpdate* b) {
              return a->client_id < b->client_id;
            });

  const std::size_t l = shape.layers.size();
  for (std::size_t j = 0; j < l; ++j) {
    int trainers = 0;
    for (const ClientUpdate* u : active) {
      if (!u->map.bits[j]) continue;
      ++trainers;
      delta_g.layers[j].q.a.add_scaled(u->delta.layers[j].q.a, 1.0);
      delta_g.layers[j].q.b.add_scaled(u->delta.layers[j].q.b, 1.0);
      delta_g.layers[j].v.a.add_scaled(u->delta.layers[j].v.a, 1.0);
      delta_g.layers[j].v.b.add_scaled(u->delta.layers[j].v.b, 1.0);
    }
    if (trainers > 0) {
      // Divide rather than multiply by a reciprocal: the masked mean must be
      // bit-exact against a sum-then-divide oracle.
      double n = trainers;
      for (Matrix* m : {&delta_g.layers[j].q.a, &delta_g.layers[j].q.b,
                        &delta_g.layers[j].v.a, &delta_g.layers[j].v.b})
        for (std::size_t t = 0; t < m->size(); ++t) m->data()[t] /= n;
    }
  }

  double n_active = static_cast<double>(active.size());
  for (const ClientUpdate* u : active) {
    delta_g.head_w.add_scaled(u->delta.head_w, 1.0);
    for (std::size_t i = 0; i < delta_g.head_b.size(); ++i)
      delta_g.head_b[i] += u->delta.head_b[i];
  }
  for (std::size_t t = 0; t < delta_g.head_w.size(); ++t)
    delta_g.head_w.data()[t] /= n_active;
  for (auto& v : delta_g.head_b) v /= n_active;
  return delta_g;
}

FederationRun::FederationRun(ModelConfig model_cfg, FederationConfig fed_cfg,
                             ScheduleConfig schedule, CapabilityProfile profile,
                             std::uint64_t seed)
    : model_cfg_(model_cfg),
      fed_cfg_(fed_cfg),
      schedule_(schedule),
      profile_(profile),
      seed_(seed) {
  model_cfg_.validate();
  fed_cfg_.validate();
  schedule_.validate();
  profile_.validate(model_cfg_.layers);
  capabilities_ = profile_.assign_capabilities(fed_cfg_.n_clients);
  allocator_.emplace(schedule_, profile_, model_cfg_.layers, fed_cfg_.n_clients);
}

void FederationRun::initialize(RngStream& init_rng) {
  auto [base, params] = init_model(model_cfg_, init_rng);
  base_ = std::move(base);
  theta_g_ = std::move(params);
}

void FederationRun::attach_data(std::vector<Dataset> client_shards, Dataset proxy,
                                Dataset eval_set) {
  if (static_cast<int>(client_shards.size()) != fed_cfg_.n_clients)
    throw std::invalid_argument("federation: shard count must equal n_clients");
  shards_ = std::move(client_shards);
  proxy_ = std::move(proxy);
  eval_set_ = std::move(eval_set);
}

RoundRecord FederationRun::run_round(int t) {
  RoundRecord rec;
  rec.round = t;
  rec.strategy = to_string(schedule_.strategy);

  RngStream select_rng(seed_, "client-sample/r" + std::to_string(t));
  rec.selected = sample_clients(fed_cfg_.n_clients, fed_cfg_.clients_per_round, select_rng);

  std::vector<int> caps;
  caps.reserve(rec.selected.size());
  for (int id : rec.selected) caps.push_back(capabilities_[id]);

  RngStream alloc_rng(seed_, "alloc-sample/r" + std::to_string(t));
  std::vector<AllocationMap> maps = allocator_->allocate(
      t, caps, model_cfg_, base_, theta_g_, proxy_.empty() ? nullptr : &proxy_, alloc_rng);
  rec.layer_probs = allocator_->layer_probs();

  std::vector<ClientUpdate> updates;
  double c_sum = 0.0;
  double n_sum = 0.0;
  for (std::size_t i = 0; i < rec.selected.size(); ++i) {
    int id = rec.selected[i];
    rec.map_bits.push_back(maps[i].bitstring());
    if (maps[i].excluded) continue;
    if (shards_[id].empty()) {
      rec.warnings.push_back("client " + std::to_string(id) + " skipped: empty shard");
      continue;
    }
    RngStream local_rng(seed_, "local/r" + std::to_string(t) + "/c" + std::to_string(id));
    updates.push_back(local_update(model_cfg_, base_, theta_g_, maps[i], shards_[id],
                                   fed_cfg_, id, local_rng));
    c_sum += maps[i].popcount();
    n_sum += static_cast<double>(shards_[id].size());
  }
  rec.participants = static_cast<int>(updates.size());

  if (updates.empty()) {
    rec.warnings.push_back("round skipped: no participating clients");
    rec.layer_delta_norms.assign(model_cfg_.layers, 0.0);
  } else {
    TrainableParams delta_g = aggregate(updates, theta_g_);
    for (int j = 0; j < model_cfg_.layers; ++j)
      rec.layer_delta_norms.push_back(std::sqrt(delta_g.layer_squared_norm(j)));
    rec.head_delta_norm = std::sqrt(delta_g.head_squared_norm());
    theta_g_.add_scaled(delta_g, 1.0);
    if (!theta_g_.is_finite())
      throw std::runtime_error("federation: non-finite global parameters at round " +
                               std::to_string(t));
  }

  if (rec.participants > 0) {
    double c_bar = c_sum / rec.participants;
    double n_bar = std::max(1.0, n_sum / rec.participants);
    if (c_bar > 0.0) {
      CostModelInputs in = cost_inputs_from(
          model_cfg_, fed_cfg_.local_epochs, n_bar, rec.participants, c_bar,
          std::max<std::size_t>(proxy_.size(), 1), schedule_.t_fim,
          std::max(fed_cfg_.rounds, 1));
      rec.backward_cost = backward_cost_partial(in);
      rec.comm_cost = comm_cost_partial(in);
    }
  }

  bool last = (t == fed_cfg_.rounds - 1);
  if (!eval_set_.empty() && (t % fed_cfg_.eval_stride == 0 || last)) {
    EvalReport report = evaluate(model_cfg_, base_, theta_g_, eval_set_);
    rec.evaluated = true;
    rec.accuracy = report.top1_accuracy;
    rec.loss = report.mean_loss;
  }

  round_ = t + 1;
  return rec;
}

std::vector<RoundRecord> FederationRun::run_all() {
  std::vector<RoundRecord> records;
  records.reserve(fed_cfg_.rounds);
  for (int t = 0; t < fed_cfg_.rounds; ++t) records.push_back(run_round(t));
  return records;
}

}  // namespace fedlora
