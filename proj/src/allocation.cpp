#include "fedlora/allocation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <limits>
#include <stdexcept>

namespace fedlora {

std::string to_string(GdPattern p) {
  switch (p) {
    case GdPattern::Triangle: return "Triangle";
    case GdPattern::InvertedTriangle: return "InvertedTriangle";
    case GdPattern::Bottleneck: return "Bottleneck";
    case GdPattern::Uniform: return "Uniform";
  }
  return "?";
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Fim: return "FIM";
    case Strategy::Gd: return "GD";
    case Strategy::Rgd: return "RGD";
    case Strategy::CoDesign: return "CoDesign";
    case Strategy::Random: return "Random";
    case Strategy::Straggler: return "Straggler";
    case Strategy::Exclusive: return "Exclusive";
  }
  return "?";
}

GdPattern pattern_from_string(const std::string& s) {
  if (s == "Triangle") return GdPattern::Triangle;
  if (s == "InvertedTriangle") return GdPattern::InvertedTriangle;
  if (s == "Bottleneck") return GdPattern::Bottleneck;
  if (s == "Uniform") return GdPattern::Uniform;
  throw std::invalid_argument("unknown GD pattern: " + s);
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "FIM") return Strategy::Fim;
  if (s == "GD") return Strategy::Gd;
  if (s == "RGD") return Strategy::Rgd;
  if (s == "CoDesign") return Strategy::CoDesign;
  if (s == "Random") return Strategy::Random;
  if (s == "Straggler") return Strategy::Straggler;
  if (s == "Exclusive") return Strategy::Exclusive;
  throw std::invalid_argument("unknown strategy: " + s);
}

void CapabilityProfile::validate(int l) const {
  if (levels.empty() || levels.size() != ratios.size())
    throw std::invalid_argument("capability: levels/ratios must be non-empty and equal length");
  double sum = 0.0;
  for (std::size_t h = 0; h < levels.size(); ++h) {
    if (levels[h] < 1 || levels[h] > l)
      throw std::invalid_argument("capability: level outside [1, l]");
    if (h > 0 && levels[h] <= levels[h - 1])
      throw std::invalid_argument("capability: levels must be strictly ascending");
    if (!(ratios[h] > 0.0)) throw std::invalid_argument("capability: ratios must be positive");
    sum += ratios[h];
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("capability: ratios must sum to 1");
}

std::vector<int> CapabilityProfile::assign_capabilities(int n) const {
  // Largest-remainder apportionment of n clients over the levels.
  std::vector<int> counts(levels.size(), 0);
  std::vector<std::pair<double, std::size_t>> rema;
  int assigned = 0;
  for (std::size_t h = 0; h < levels.size(); ++h) {
    double exact = ratios[h] * n;
    counts[h] = static_cast<int>(std::floor(exact));
    assigned += counts[h];
    rema.emplace_back(exact - std::floor(exact), h);
  }
  std::stable_sort(rema.begin(), rema.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int j = 0; assigned < n; ++j, ++assigned) counts[rema[j % rema.size()].second]++;
  std::vector<int> caps;
  caps.reserve(n);
  for (std::size_t h = 0; h < levels.size(); ++h)
    caps.insert(caps.end(), counts[h], levels[h]);
  return caps;
}

int AllocationMap::popcount() const {
  int c = 0;
  for (auto b : bits) c += b;
  return c;
}

std::string AllocationMap::bitstring() const {
  if (excluded) return "excluded";
  std::string s;
  s.reserve(bits.size());
  for (auto b : bits) s.push_back(b ? '1' : '0');
  return s;
}

void ScheduleConfig::validate() const {
  if (t_rgd < 0) throw std::invalid_argument("schedule: T_RGD must be >= 0");
  if (t_fim < 1) throw std::invalid_argument("schedule: T_FIM must be >= 1");
}

AllocationMap gd_mask(GdPattern pattern, int l, int c, RngStream& rng,
                      bool literal_bernoulli) {
  if (c < 1 || c > l) throw std::invalid_argument("gd_mask: requires 1 <= c <= l");
  AllocationMap map;
  map.bits.assign(l, 0);
  switch (pattern) {
    case GdPattern::Triangle:
      std::fill(map.bits.begin(), map.bits.begin() + c, 1);
      break;
    case GdPattern::InvertedTriangle:
      std::fill(map.bits.end() - c, map.bits.end(), 1);
      break;
    case GdPattern::Bottleneck: {
      int head = (c + 1) / 2, tail = c / 2;
      std::fill(map.bits.begin(), map.bits.begin() + head, 1);
      std::fill(map.bits.end() - tail, map.bits.end(), 1);
      break;
    }
    case GdPattern::Uniform: {
      if (literal_bernoulli) {
        double p = static_cast<double>(c) / l;
        for (auto& b : map.bits) b = rng.unit() < p ? 1 : 0;
      } else {
        std::vector<int> idx(l);
        std::iota(idx.begin(), idx.end(), 0);
        rng.shuffle(idx);
        for (int i = 0; i < c; ++i) map.bits[idx[i]] = 1;
      }
      break;
    }
  }
  return map;
}

std::vector<double> base_capability_probs(const CapabilityProfile& profile) {
  const std::size_t k = profile.levels.size();
  double denom = 0.0;
  for (std::size_t h = 0; h < k; ++h) denom += profile.levels[h] * profile.ratios[h];
  std::vector<double> a(k);
  for (std::size_t h = 0; h < k; ++h) {
    int count_ge = 0;
    for (std::size_t hp = 0; hp < k; ++hp)
      if (profile.levels[hp] >= profile.levels[h]) ++count_ge;
    a[h] = count_ge / denom;
  }
  return a;
}

std::vector<double> fim_scores(const ModelConfig& cfg, const FrozenBase& base,
                               const TrainableParams& params, const Dataset& proxy) {
  if (proxy.empty()) throw std::invalid_argument("fim_scores: proxy dataset is empty");
  LayerMask full = all_ones_mask(cfg.layers);
  std::vector<double> gamma(cfg.layers, 0.0);
  for (const auto& sample : proxy.samples) {
    Dataset one;
    one.n_classes = proxy.n_classes;
    one.samples.push_back(sample);
    ForwardCache cache = forward(cfg, base, params, full, Batch::whole(one));
    TrainableParams grads = backward(cfg, base, params, cache);
    for (int j = 0; j < cfg.layers; ++j) gamma[j] += grads.layer_squared_norm(j);
  }
  for (auto& g : gamma) g /= static_cast<double>(proxy.size());
  return gamma;
}

namespace {

// Rank-quantile fallback: sort layers by descending score and cut into k
// contiguous near-equal groups.
std::vector<int> rank_quantile_groups(const std::vector<double>& gamma, int k) {
  const int l = static_cast<int>(gamma.size());
  std::vector<int> order(l);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return gamma[a] > gamma[b]; });
  std::vector<int> labels(l, 0);
  for (int pos = 0; pos < l; ++pos) labels[order[pos]] = pos * k / l;
  return labels;
}

}  // namespace

std::vector<int> cluster_scores(const std::vector<double>& gamma, int k) {
  const int l = static_cast<int>(gamma.size());
  if (k < 1 || k > l) throw std::invalid_argument("cluster_scores: requires 1 <= k <= l");
  for (double g : gamma)
    if (g < 0.0) throw std::invalid_argument("cluster_scores: scores must be non-negative");

  std::vector<double> distinct = gamma;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (static_cast<int>(distinct.size()) < k) return rank_quantile_groups(gamma, k);

  // Optimal clusters in 1-D are contiguous in sorted order, so the k-means
  // objective is solved exactly by an interval DP over the descending scores.
  std::vector<int> order(l);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return gamma[a] > gamma[b]; });
  std::vector<double> pre(l + 1, 0.0), pre2(l + 1, 0.0);
  for (int i = 0; i < l; ++i) {
    pre[i + 1] = pre[i] + gamma[order[i]];
    pre2[i + 1] = pre2[i] + gamma[order[i]] * gamma[order[i]];
  }
  // Within-group variance of the sorted segment [a, b).
  auto seg_cost = [&](int a, int b) {
    double s = pre[b] - pre[a], s2 = pre2[b] - pre2[a];
    return std::max(0.0, s2 - s * s / (b - a));
  };
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // dp[h][i]: best cost of splitting the first i sorted scores into h groups.
  std::vector<std::vector<double>> dp(k + 1, std::vector<double>(l + 1, kInf));
  std::vector<std::vector<int>> cut(k + 1, std::vector<int>(l + 1, 0));
  dp[0][0] = 0.0;
  for (int h = 1; h <= k; ++h)
    for (int i = h; i <= l - (k - h); ++i)
      for (int a = h - 1; a < i; ++a) {
        double c = dp[h - 1][a] + seg_cost(a, i);
        if (c < dp[h][i]) {
          dp[h][i] = c;
          cut[h][i] = a;
        }
      }

  std::vector<int> labels(l, 0);
  int end = l;
  for (int h = k; h >= 1; --h) {
    int start = cut[h][end];
    for (int i = start; i < end; ++i) labels[order[i]] = h - 1;
    end = start;
  }
  return labels;
}

std::vector<double> fim_allocation_probs(const std::vector<double>& gamma,
                                         const CapabilityProfile& profile) {
  const int k = static_cast<int>(profile.levels.size());
  std::vector<int> labels = cluster_scores(gamma, k);
  std::vector<double> a = base_capability_probs(profile);
  std::vector<double> probs(gamma.size());
  double total = 0.0;
  for (std::size_t j = 0; j < gamma.size(); ++j) {
    probs[j] = a[labels[j]];  // group h inherits base probability a_h
    total += probs[j];
  }
  for (auto& p : probs) p /= total;
  return probs;
}

std::vector<double> rgd_prior(const CapabilityProfile& profile, GdPattern pattern,
                              int l, int n) {
  profile.validate(l);
  if (n < 1) throw std::invalid_argument("rgd_prior: population must be >= 1");
  std::vector<double> column(l, 0.0);
  std::vector<int> caps = profile.assign_capabilities(n);
  if (pattern == GdPattern::Uniform) {
    // Uniform masks are random; use their expected column sums c_i/l.
    double mass = 0.0;
    for (int c : caps) mass += static_cast<double>(c) / l;
    for (auto& v : column) v = mass;
  } else {
    RngStream unused(0, "rgd-prior-noop");
    for (int c : caps) {
      AllocationMap m = gd_mask(pattern, l, c, unused);
      for (int j = 0; j < l; ++j) column[j] += m.bits[j];
    }
  }
  double total = std::accumulate(column.begin(), column.end(), 0.0);
  if (!(total > 0.0)) throw std::invalid_argument("rgd_prior: zero total mask mass");
  for (auto& v : column) v /= total;
  return column;
}

AllocationMap sample_allocation(const std::vector<double>& probs, int c, RngStream& rng) {
  const int l = static_cast<int>(probs.size());
  if (c < 1 || c > l) throw std::invalid_argument("sample_allocation: requires 1 <= c <= l");
  AllocationMap map;
  map.bits.assign(l, 0);
  std::vector<double> w = probs;
  int drawn = 0;
  for (; drawn < c; ++drawn) {
    double total = std::accumulate(w.begin(), w.end(), 0.0);
    if (!(total > 0.0)) break;
    double u = rng.unit() * total;
    int pick = l - 1;
    double acc = 0.0;
    for (int j = 0; j < l; ++j) {
      acc += w[j];
      if (u < acc && w[j] > 0.0) {
        pick = j;
        break;
      }
    }
    // Guard against picking an exhausted slot through rounding.
    while (w[pick] <= 0.0 && pick > 0) --pick;
    map.bits[pick] = 1;
    w[pick] = 0.0;
  }
  if (drawn < c) {
    // Fewer than c layers had positive mass; pad uniformly from the rest.
    std::vector<int> zero_layers;
    for (int j = 0; j < l; ++j)
      if (!map.bits[j]) zero_layers.push_back(j);
    rng.shuffle(zero_layers);
    for (int i = 0; drawn < c; ++drawn, ++i) map.bits[zero_layers[i]] = 1;
  }
  return map;
}

RoundAllocator::RoundAllocator(ScheduleConfig schedule, CapabilityProfile profile, int l,
                               int n_total)
    : schedule_(std::move(schedule)), profile_(std::move(profile)), l_(l), n_total_(n_total) {
  schedule_.validate();
  profile_.validate(l_);
  current_probs_.assign(l_, 1.0 / l_);
  rgd_prior_ = rgd_prior(profile_, schedule_.base_pattern, l_, n_total_);
}

void RoundAllocator::refresh_fim(const ModelConfig& cfg, const FrozenBase& base,
                                 const TrainableParams& params, const Dataset* proxy) {
  if (proxy == nullptr || proxy->empty())
    throw std::invalid_argument("allocation: FIM strategy requires a proxy dataset");
  last_gamma_ = fim_scores(cfg, base, params, *proxy);
  current_probs_ = fim_allocation_probs(last_gamma_, profile_);
  have_fim_probs_ = true;
}

std::vector<AllocationMap> RoundAllocator::allocate(int round,
                                                    const std::vector<int>& capabilities,
                                                    const ModelConfig& cfg,
                                                    const FrozenBase& base,
                                                    const TrainableParams& params,
                                                    const Dataset* proxy, RngStream& rng) {
  std::vector<AllocationMap> maps;
  maps.reserve(capabilities.size());

  auto sample_all = [&](const std::vector<double>& probs) {
    current_probs_ = probs;
    for (int c : capabilities) maps.push_back(sample_allocation(probs, c, rng));
  };

  switch (schedule_.strategy) {
    case Strategy::CoDesign:
      if (round < schedule_.t_rgd) {
        sample_all(rgd_prior_);
      } else {
        // Refresh on schedule, and unconditionally on the first post-warm-start
        // round so sampling never runs on the stale prior.
        if (!have_fim_probs_ || (round - schedule_.t_rgd) % schedule_.t_fim == 0)
          refresh_fim(cfg, base, params, proxy);
        sample_all(current_probs_);
      }
      break;
    case Strategy::Fim:
      if (!have_fim_probs_ || round % schedule_.t_fim == 0)
        refresh_fim(cfg, base, params, proxy);
      sample_all(current_probs_);
      break;
    case Strategy::Rgd:
      sample_all(rgd_prior_);
      break;
    case Strategy::Gd:
      for (int c : capabilities)
        maps.push_back(gd_mask(schedule_.base_pattern, l_, c, rng, schedule_.literal_bernoulli));
      current_probs_.assign(l_, 1.0 / l_);
      break;
    case Strategy::Random: {
      RngStream* r = &rng;
      for (int c : capabilities) maps.push_back(gd_mask(GdPattern::Uniform, l_, c, *r));
      current_probs_.assign(l_, 1.0 / l_);
      break;
    }
    case Strategy::Straggler: {
      AllocationMap m = gd_mask(schedule_.straggler_pattern, l_, profile_.min_level(), rng);
      for (std::size_t i = 0; i < capabilities.size(); ++i) maps.push_back(m);
      current_probs_.assign(l_, 1.0 / l_);
      break;
    }
    case Strategy::Exclusive:
      for (int c : capabilities) {
        AllocationMap m;
        if (c >= l_) {
          m.bits.assign(l_, 1);
        } else {
          m.bits.assign(l_, 0);
          m.excluded = true;
        }
        maps.push_back(std::move(m));
      }
      current_probs_.assign(l_, 1.0 / l_);
      break;
  }
  return maps;
}

}  // namespace fedlora
