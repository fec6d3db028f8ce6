#include "fedlora/data.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace fedlora {

namespace {

// Marsaglia-Tsang gamma variate; handles shape < 1 via the boost trick.
double gamma_variate(RngStream& rng, double shape) {
  if (shape < 1.0) {
    double u = rng.unit();
    while (u <= 0.0) u = rng.unit();
    return gamma_variate(rng, shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  double d = shape - 1.0 / 3.0;
  double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = rng.gaussian(0.0, 1.0);
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    double u = rng.unit();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

std::vector<double> dirichlet(RngStream& rng, double alpha, std::size_t k) {
  std::vector<double> w(k);
  double total = 0.0;
  for (auto& v : w) {
    v = gamma_variate(rng, alpha);
    total += v;
  }
  if (total <= 0.0) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(k));
    return w;
  }
  for (auto& v : w) v /= total;
  return w;
}

// Largest-remainder apportionment of `total` items proportional to weights.
std::vector<int> apportion(const std::vector<double>& weights, int total) {
  double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<int> counts(weights.size(), 0);
  if (wsum <= 0.0 || total <= 0) return counts;
  std::vector<std::pair<double, std::size_t>> rema(weights.size());
  int assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    double exact = weights[i] / wsum * total;
    counts[i] = static_cast<int>(std::floor(exact));
    assigned += counts[i];
    rema[i] = {exact - std::floor(exact), i};
  }
  std::stable_sort(rema.begin(), rema.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int j = 0; assigned < total; ++j, ++assigned) counts[rema[j % rema.size()].second]++;
  return counts;
}

Dataset make_split(const SyntheticSpec& spec, int n_samples, RngStream& rng) {
  Dataset ds;
  ds.n_classes = spec.n_classes;
  ds.samples.reserve(n_samples);
  // Balanced classes; remainder spread over the lowest class ids.
  for (int i = 0; i < n_samples; ++i) {
    Sample s;
    s.label = i % spec.n_classes;
    if (spec.kind == TaskKind::TokenSequence) {
      s.tokens.resize(spec.seq_len);
      for (int p = 0; p < spec.seq_len; ++p) {
        if (rng.unit() < spec.separation)
          s.tokens[p] = s.label;
        else
          s.tokens[p] = static_cast<int>(rng.uniform_index(spec.vocab));
      }
    } else {
      s.features.resize(spec.vocab);
      double shift = std::sqrt(2.0) * spec.separation;
      for (int d = 0; d < spec.vocab; ++d) {
        s.features[d] = rng.gaussian(0.0, 1.0);
        if (d == s.label % spec.vocab) s.features[d] += shift;
      }
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace

std::pair<Dataset, Dataset> generate_synthetic(const SyntheticSpec& spec, RngStream& rng) {
  if (spec.n_classes <= 0 || spec.n_train <= 0 || spec.n_test < 0 || spec.vocab <= 0)
    throw std::invalid_argument("generate_synthetic: counts must be positive");
  if (spec.n_classes > spec.vocab)
    throw std::invalid_argument("generate_synthetic: n_classes exceeds vocab/feature dim");
  if (spec.kind == TaskKind::TokenSequence && spec.seq_len <= 0)
    throw std::invalid_argument("generate_synthetic: seq_len must be positive");
  Dataset train = make_split(spec, spec.n_train, rng);
  Dataset test = make_split(spec, spec.n_test, rng);
  return {std::move(train), std::move(test)};
}

void PartitionSpec::validate(int n_classes) const {
  if (n_clients < 1) throw std::invalid_argument("partition: n_clients must be >= 1");
  if (mode == PartitionMode::LabelSkew) {
    if (classes_per_client < 1 || classes_per_client > n_classes)
      throw std::invalid_argument("partition: classes_per_client out of range");
    if (!(dirichlet_alpha > 0.0))
      throw std::invalid_argument("partition: dirichlet_alpha must be positive");
    if (static_cast<long long>(n_clients) * classes_per_client < n_classes)
      throw std::invalid_argument("partition: clients*C cannot cover all classes");
  }
}

namespace {

std::vector<Dataset> label_skew_partition(const Dataset& train, const PartitionSpec& spec,
                                          RngStream& rng) {
  const int n_classes = train.n_classes;
  const int n = spec.n_clients;
  const int c_per = spec.classes_per_client;

  // Round-robin class assignment: a running class counter over clients.
  std::vector<std::vector<int>> client_classes(n);
  int cls = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c_per; ++j) {
      int k = cls++ % n_classes;
      if (std::find(client_classes[i].begin(), client_classes[i].end(), k) ==
          client_classes[i].end())
        client_classes[i].push_back(k);
    }
  }

  std::vector<std::vector<std::size_t>> by_class(n_classes);
  for (std::size_t idx = 0; idx < train.size(); ++idx)
    by_class[train.samples[idx].label].push_back(idx);

  double quota = static_cast<double>(train.size()) / n;
  for (int attempt = 0; attempt < 100; ++attempt) {
    // Per-client Dirichlet weights over its classes become per-class demands.
    std::vector<std::vector<double>> demand(n_classes);  // parallel to holders
    std::vector<std::vector<int>> holders(n_classes);
    for (int i = 0; i < n; ++i) {
      auto w = dirichlet(rng, spec.dirichlet_alpha, client_classes[i].size());
      for (std::size_t j = 0; j < client_classes[i].size(); ++j) {
        holders[client_classes[i][j]].push_back(i);
        demand[client_classes[i][j]].push_back(quota * w[j]);
      }
    }
    std::vector<Dataset> shards(n);
    for (auto& s : shards) s.n_classes = n_classes;
    for (int k = 0; k < n_classes; ++k) {
      if (holders[k].empty()) continue;  // unreachable given coverage check
      auto counts = apportion(demand[k], static_cast<int>(by_class[k].size()));
      std::size_t cursor = 0;
      for (std::size_t j = 0; j < holders[k].size(); ++j) {
        for (int c = 0; c < counts[j]; ++c)
          shards[holders[k][j]].samples.push_back(train.samples[by_class[k][cursor++]]);
      }
    }
    bool ok = std::all_of(shards.begin(), shards.end(),
                          [](const Dataset& d) { return !d.empty(); });
    if (ok) return shards;
  }
  throw std::runtime_error("partition: could not produce non-empty shards in 100 attempts");
}

}  // namespace

std::vector<Dataset> partition(const Dataset& train, const PartitionSpec& spec, RngStream& rng) {
  spec.validate(train.n_classes);
  if (train.size() < static_cast<std::size_t>(spec.n_clients))
    throw std::invalid_argument("partition: fewer samples than clients");

  if (spec.mode == PartitionMode::LabelSkew) return label_skew_partition(train, spec, rng);

  // IID: shuffled equal split (remainder spread over leading clients).
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<Dataset> shards(spec.n_clients);
  for (auto& s : shards) s.n_classes = train.n_classes;
  for (std::size_t i = 0; i < order.size(); ++i)
    shards[i % spec.n_clients].samples.push_back(train.samples[order[i]]);
  return shards;
}

std::pair<Dataset, Dataset> extract_proxy(const Dataset& test, int n_fim, RngStream& rng) {
  if (n_fim < 1) throw std::invalid_argument("extract_proxy: N_FIM must be >= 1");
  if (static_cast<std::size_t>(n_fim) >= test.size())
    throw std::invalid_argument("extract_proxy: N_FIM must be smaller than the test set");
  std::vector<std::size_t> order(test.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  Dataset proxy, rest;
  proxy.n_classes = rest.n_classes = test.n_classes;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& target = (i < static_cast<std::size_t>(n_fim)) ? proxy : rest;
    target.samples.push_back(test.samples[order[i]]);
  }
  return {std::move(proxy), std::move(rest)};
}

void dump_dataset(const Dataset& ds, std::ostream& out) {
  for (const auto& s : ds.samples) {
    out << s.label;
    for (int t : s.tokens) out << ' ' << t;
    for (double f : s.features) out << ' ' << f;
    out << '\n';
  }
}

Dataset load_dataset(std::istream& in, TaskKind kind, int n_classes) {
  Dataset ds;
  ds.n_classes = n_classes;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    Sample s;
    ls >> s.label;
    if (kind == TaskKind::TokenSequence) {
      int t;
      while (ls >> t) s.tokens.push_back(t);
    } else {
      double f;
      while (ls >> f) s.features.push_back(f);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::vector<int> class_histogram(const Dataset& ds) {
  std::vector<int> hist(ds.n_classes, 0);
  for (const auto& s : ds.samples) hist[s.label]++;
  return hist;
}

}  // namespace fedlora
