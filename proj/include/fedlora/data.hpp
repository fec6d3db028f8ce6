#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "fedlora/rng.hpp"

namespace fedlora {

// One classification sample: either a token sequence (token task) or a dense
// feature vector (Gaussian task). Exactly one of the two payloads is set.
struct Sample {
  std::vector<int> tokens;
  std::vector<double> features;
  int label = 0;
};

struct Dataset {
  std::vector<Sample> samples;
  int n_classes = 0;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

enum class TaskKind { TokenSequence, GaussianVector };

struct SyntheticSpec {
  TaskKind kind = TaskKind::TokenSequence;
  int n_classes = 10;
  int vocab = 32;        // token task: vocabulary; Gaussian task: feature dim
  int seq_len = 16;      // token task only
  double separation = 0.35;  // token task: signal-token probability;
                             // Gaussian task: half the pairwise centroid
                             // distance in noise-sigma units
  int n_train = 1000;
  int n_test = 500;
};

// Balanced class-conditional train/test splits. Token task draws each position
// from a mixture of the class signal token and a uniform background; Gaussian
// task places class centroids at sqrt(2)*separation along distinct axes with
// unit noise.
std::pair<Dataset, Dataset> generate_synthetic(const SyntheticSpec& spec, RngStream& rng);

enum class PartitionMode { IID, LabelSkew };

struct PartitionSpec {
  PartitionMode mode = PartitionMode::IID;
  int classes_per_client = 2;   // C in the "C/alpha" notation
  double dirichlet_alpha = 1.0;
  int n_clients = 1;

  void validate(int n_classes) const;  // throws std::invalid_argument
};

// Exact set partition of `train` across clients. LabelSkew assigns each client
// classes_per_client classes round-robin (all classes covered), then skews
// per-client quantities by Dirichlet(alpha) weights.
std::vector<Dataset> partition(const Dataset& train, const PartitionSpec& spec, RngStream& rng);

// Uniform sample of n_fim test samples for server-side scoring; the remainder
// is the evaluation split. The two are disjoint by construction.
std::pair<Dataset, Dataset> extract_proxy(const Dataset& test, int n_fim, RngStream& rng);

// Text dump/load, one sample per line: label then whitespace-separated tokens
// or feature values.
void dump_dataset(const Dataset& ds, std::ostream& out);
Dataset load_dataset(std::istream& in, TaskKind kind, int n_classes);

std::vector<int> class_histogram(const Dataset& ds);

}  // namespace fedlora
