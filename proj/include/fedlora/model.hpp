#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedlora/data.hpp"
#include "fedlora/matrix.hpp"
#include "fedlora/rng.hpp"

namespace fedlora {

// Binary per-layer trainability mask; length equals the layer count.
using LayerMask = std::vector<std::uint8_t>;

LayerMask all_ones_mask(int layers);
LayerMask all_zeros_mask(int layers);

struct ModelConfig {
  int layers = 8;
  int d_model = 32;
  int n_heads = 4;
  int d_ff = 64;
  int rank = 16;
  double lora_alpha = 16.0;
  double dropout_p = 0.1;
  int n_classes = 10;
  int seq_len = 16;
  int vocab = 32;  // token vocabulary, or feature dim for dense inputs

  int head_dim() const { return d_model / n_heads; }
  double lora_scale() const { return lora_alpha / rank; }
  void validate() const;  // throws std::invalid_argument
};

// Frozen per-layer transformer weights. Projection convention: y = x * W with
// activations as rows, so every attention matrix is d_model x d_model.
struct LayerWeights {
  Matrix wq, wk, wv, wo;
  Matrix w1;  // d_model x d_ff
  Matrix w2;  // d_ff x d_model
  std::vector<double> b1, b2;
  std::vector<double> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

struct FrozenBase {
  Matrix embedding;   // vocab x d_model
  Matrix positional;  // seq_len x d_model
  std::vector<LayerWeights> layers;
};

// One LoRA pair: the effective update is scale * B * A with A: r x d_model and
// B: d_model x r. B starts at zero so a fresh adapter is a no-op.
struct LoraAdapter {
  Matrix a, b;
};

struct LoraLayer {
  LoraAdapter q, v;
};

// Trainable parameter set; also reused as the shape for gradients, deltas and
// optimizer moments.
struct TrainableParams {
  std::vector<LoraLayer> layers;
  Matrix head_w;  // d_model x n_classes
  std::vector<double> head_b;

  void fill(double v);
  void add_scaled(const TrainableParams& other, double scale);
  double layer_squared_norm(std::size_t j) const;
  double head_squared_norm() const;
  bool is_finite() const;
  bool same_shape(const TrainableParams& other) const;
};

TrainableParams zeros_like(const TrainableParams& p);

std::pair<FrozenBase, TrainableParams> init_model(const ModelConfig& cfg, RngStream& rng);

// W0 + (alpha/r) * B * A.
Matrix effective_weight(const Matrix& w0, const Matrix& a, const Matrix& b,
                        double alpha, int rank);

struct LayerCache {
  Matrix x_in;
  Matrix q, k, v;
  std::vector<Matrix> attn;  // per-head seq x seq softmax weights
  Matrix z;                  // concatenated head outputs
  Matrix x1, x1_hat;         // post-LN1 and its normalized pre-gain form
  std::vector<double> ln1_inv_std;
  Matrix ff_pre, ff_act;     // pre/post ReLU
  Matrix x2_hat;
  std::vector<double> ln2_inv_std;
  Matrix xb_q, xb_v;  // x_in * B caches, kept only for trainable adapters
  std::vector<std::uint8_t> drop_attn, drop_ff;  // inverted-dropout keep masks
};

struct SampleCache {
  Matrix x0;
  std::vector<LayerCache> layers;
  Matrix x_out;
  std::vector<double> pooled;
  std::vector<double> probs;
  int label = 0;
};

struct ForwardCache {
  double loss = 0.0;
  std::vector<std::vector<double>> logits;  // per sample
  std::vector<SampleCache> samples;
  LayerMask mask;
  std::vector<Matrix> eff_q, eff_v;  // per-layer effective projections
  std::uint64_t model_stamp = 0;     // guards backward against a stale cache
};

struct Batch {
  std::vector<const Sample*> samples;

  static Batch whole(const Dataset& ds);
  static Batch of(const Dataset& ds, const std::vector<std::size_t>& idx);
  std::size_t size() const { return samples.size(); }
};

// Forward pass over a batch with mean-reduction cross-entropy. Adapter
// activations are cached only for layers the mask marks trainable. Pass a
// stream to enable dropout; null keeps the pass deterministic.
ForwardCache forward(const ModelConfig& cfg, const FrozenBase& base,
                     const TrainableParams& params, const LayerMask& mask,
                     const Batch& batch, RngStream* dropout_rng = nullptr);

// Hand-derived backward. Gradients of masked-out adapters are exact zeros and
// are never computed; the classifier head always receives gradients.
TrainableParams backward(const ModelConfig& cfg, const FrozenBase& base,
                         const TrainableParams& params, const ForwardCache& cache);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct OptimizerState {
  TrainableParams m, v;
  long step = 0;
  AdamWConfig hp;
};

OptimizerState make_optimizer(const TrainableParams& params, const AdamWConfig& hp);

// Decoupled-weight-decay Adam with bias correction. Only adapters with mask=1
// plus the head are updated; everything else is untouched bit-for-bit.
void adamw_step(TrainableParams& params, const TrainableParams& grads,
                OptimizerState& state, const LayerMask& mask);

// after - before, per tensor. Frozen layers yield exact zeros.
TrainableParams flatten_delta(const TrainableParams& before, const TrainableParams& after);

// Checkpoint format: "FLCK" magic + version, then named tensors with shape
// headers and little-endian float64 payloads (see docs in the .cpp).
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const FrozenBase& base, const TrainableParams& params);
void load_checkpoint(const std::string& path, ModelConfig& cfg, FrozenBase& base,
                     TrainableParams& params);

}  // namespace fedlora
