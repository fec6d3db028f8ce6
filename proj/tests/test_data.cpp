#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "fedlora/data.hpp"

using namespace fedlora;

namespace {

SyntheticSpec token_spec() {
  SyntheticSpec s;
  s.kind = TaskKind::TokenSequence;
  s.n_classes = 10;
  s.vocab = 32;
  s.seq_len = 8;
  s.n_train = 1000;
  s.n_test = 500;
  return s;
}

// Multiset fingerprint of a sample for partition-exactness checks.
std::string key_of(const Sample& s) {
  std::ostringstream os;
  os << s.label << '|';
  for (int t : s.tokens) os << t << ',';
  for (double f : s.features) os << f << ',';
  return os.str();
}

}  // namespace

TEST_CASE("synthetic generation is balanced and deterministic") {
  SyntheticSpec spec = token_spec();
  RngStream r1(5, "data"), r2(5, "data");
  auto [train1, test1] = generate_synthetic(spec, r1);
  auto [train2, test2] = generate_synthetic(spec, r2);

  auto hist = class_histogram(train1);
  for (int c : hist) CHECK(c == 100);
  CHECK(train1.size() == 1000);
  CHECK(test1.size() == 500);

  REQUIRE(train1.size() == train2.size());
  for (std::size_t i = 0; i < train1.size(); ++i)
    CHECK(train1.samples[i].tokens == train2.samples[i].tokens);
}

TEST_CASE("synthetic generation validates parameters") {
  SyntheticSpec spec = token_spec();
  spec.n_classes = 64;  // > vocab
  RngStream rng(1, "data");
  CHECK_THROWS_AS(generate_synthetic(spec, rng), std::invalid_argument);
}

TEST_CASE("nearest-centroid accuracy on the Gaussian task at separation 3") {
  SyntheticSpec spec;
  spec.kind = TaskKind::GaussianVector;
  spec.n_classes = 10;
  spec.vocab = 16;
  spec.separation = 3.0;
  spec.n_train = 2000;
  spec.n_test = 1000;
  RngStream rng(7, "data");
  auto [train, test] = generate_synthetic(spec, rng);

  // Empirical class centroids from train.
  std::vector<std::vector<double>> centroid(spec.n_classes,
                                            std::vector<double>(spec.vocab, 0.0));
  std::vector<int> count(spec.n_classes, 0);
  for (const auto& s : train.samples) {
    for (int d = 0; d < spec.vocab; ++d) centroid[s.label][d] += s.features[d];
    count[s.label]++;
  }
  for (int c = 0; c < spec.n_classes; ++c)
    for (int d = 0; d < spec.vocab; ++d) centroid[c][d] /= count[c];

  int correct = 0;
  for (const auto& s : test.samples) {
    int best = -1;
    double best_d = 1e300;
    for (int c = 0; c < spec.n_classes; ++c) {
      double d2 = 0.0;
      for (int d = 0; d < spec.vocab; ++d) {
        double diff = s.features[d] - centroid[c][d];
        d2 += diff * diff;
      }
      if (d2 < best_d) {
        best_d = d2;
        best = c;
      }
    }
    if (best == s.label) ++correct;
  }
  CHECK(static_cast<double>(correct) / test.size() > 0.9);
}

TEST_CASE("IID partition splits equally and exactly") {
  SyntheticSpec spec = token_spec();
  RngStream rng(11, "data");
  auto [train, test] = generate_synthetic(spec, rng);
  PartitionSpec ps;
  ps.mode = PartitionMode::IID;
  ps.n_clients = 4;
  RngStream prng(11, "partition");
  auto shards = partition(train, ps, prng);
  REQUIRE(shards.size() == 4);
  for (const auto& s : shards) CHECK(s.size() == 250);

  std::multiset<std::string> before, after;
  for (const auto& s : train.samples) before.insert(key_of(s));
  for (const auto& sh : shards)
    for (const auto& s : sh.samples) after.insert(key_of(s));
  CHECK(before == after);
}

TEST_CASE("label-skew respects C, covers classes, and partitions exactly") {
  SyntheticSpec spec = token_spec();
  RngStream rng(13, "data");
  auto [train, test] = generate_synthetic(spec, rng);
  PartitionSpec ps;
  ps.mode = PartitionMode::LabelSkew;
  ps.n_clients = 12;
  ps.classes_per_client = 2;
  ps.dirichlet_alpha = 1.0;
  RngStream prng(13, "partition");
  auto shards = partition(train, ps, prng);
  REQUIRE(shards.size() == 12);

  std::set<int> covered;
  std::size_t total = 0;
  for (const auto& sh : shards) {
    CHECK(!sh.empty());
    std::set<int> labels;
    for (const auto& s : sh.samples) labels.insert(s.label);
    CHECK(labels.size() <= 2);
    covered.insert(labels.begin(), labels.end());
    total += sh.size();
  }
  CHECK(total == train.size());
  CHECK(covered.size() == 10);

  std::multiset<std::string> before, after;
  for (const auto& s : train.samples) before.insert(key_of(s));
  for (const auto& sh : shards)
    for (const auto& s : sh.samples) after.insert(key_of(s));
  CHECK(before == after);
}

TEST_CASE("label-skew with huge alpha approaches uniform quantities") {
  SyntheticSpec spec = token_spec();
  spec.n_train = 5000;
  RngStream rng(17, "data");
  auto [train, test] = generate_synthetic(spec, rng);
  PartitionSpec ps;
  ps.mode = PartitionMode::LabelSkew;
  ps.n_clients = 5;
  ps.classes_per_client = 10;
  ps.dirichlet_alpha = 1e6;
  RngStream prng(17, "partition");
  auto shards = partition(train, ps, prng);
  for (const auto& sh : shards) {
    auto hist = class_histogram(sh);
    double mean = static_cast<double>(sh.size()) / 10;
    for (int c : hist)
      CHECK(std::abs(c - mean) / mean < 0.01 + 2.0 / mean);  // 1% plus rounding slack
  }
}

TEST_CASE("partition validates infeasible coverage") {
  SyntheticSpec spec = token_spec();
  RngStream rng(19, "data");
  auto [train, test] = generate_synthetic(spec, rng);
  PartitionSpec ps;
  ps.mode = PartitionMode::LabelSkew;
  ps.n_clients = 3;
  ps.classes_per_client = 2;  // 3*2 < 10 classes
  RngStream prng(19, "partition");
  CHECK_THROWS_AS(partition(train, ps, prng), std::invalid_argument);
}

TEST_CASE("proxy extraction is disjoint, sized, and seeded") {
  SyntheticSpec spec = token_spec();
  RngStream rng(23, "data");
  auto [train, test] = generate_synthetic(spec, rng);

  RngStream p1(23, "proxy"), p2(23, "proxy");
  auto [proxy1, rest1] = extract_proxy(test, 50, p1);
  auto [proxy2, rest2] = extract_proxy(test, 50, p2);
  CHECK(proxy1.size() == 50);
  CHECK(rest1.size() == 450);
  for (std::size_t i = 0; i < proxy1.size(); ++i)
    CHECK(proxy1.samples[i].tokens == proxy2.samples[i].tokens);

  std::multiset<std::string> prox, rest, all;
  for (const auto& s : proxy1.samples) prox.insert(key_of(s));
  for (const auto& s : rest1.samples) rest.insert(key_of(s));
  for (const auto& s : test.samples) all.insert(key_of(s));
  std::multiset<std::string> merged = prox;
  merged.insert(rest.begin(), rest.end());
  CHECK(merged == all);

  RngStream p3(23, "proxy");
  CHECK_THROWS_AS(extract_proxy(test, 500, p3), std::invalid_argument);
}

TEST_CASE("proxy class histogram tracks the test histogram over seeds") {
  SyntheticSpec spec = token_spec();
  RngStream rng(29, "data");
  auto [train, test] = generate_synthetic(spec, rng);
  std::vector<double> freq(10, 0.0);
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    RngStream prng(1000 + t, "proxy");
    auto [proxy, rest] = extract_proxy(test, 100, prng);
    auto hist = class_histogram(proxy);
    for (int c = 0; c < 10; ++c) freq[c] += hist[c] / 100.0;
  }
  for (int c = 0; c < 10; ++c) CHECK(std::abs(freq[c] / trials - 0.1) < 0.03);
}

TEST_CASE("dataset dump/load round-trip") {
  SyntheticSpec spec = token_spec();
  spec.n_train = 20;
  spec.n_test = 10;
  RngStream rng(31, "data");
  auto [train, test] = generate_synthetic(spec, rng);
  std::stringstream ss;
  dump_dataset(train, ss);
  Dataset loaded = load_dataset(ss, TaskKind::TokenSequence, spec.n_classes);
  REQUIRE(loaded.size() == train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    CHECK(loaded.samples[i].label == train.samples[i].label);
    CHECK(loaded.samples[i].tokens == train.samples[i].tokens);
  }
}
