#include "fedlora/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace fedlora {

LayerMask all_ones_mask(int layers) { return LayerMask(layers, 1); }
LayerMask all_zeros_mask(int layers) { return LayerMask(layers, 0); }

void ModelConfig::validate() const {
  if (layers < 1) throw std::invalid_argument("model: layers must be >= 1");
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
    throw std::invalid_argument("model: d_model must be a positive multiple of n_heads");
  if (d_ff < 1) throw std::invalid_argument("model: d_ff must be >= 1");
  if (rank < 1 || 2 * rank > d_model)
    throw std::invalid_argument("model: rank must satisfy 1 <= rank <= d_model/2");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0))
    throw std::invalid_argument("model: dropout_p must be in [0,1)");
  if (n_classes < 2) throw std::invalid_argument("model: n_classes must be >= 2");
  if (seq_len < 1 || vocab < 1)
    throw std::invalid_argument("model: seq_len and vocab must be >= 1");
  if (!(lora_alpha > 0.0)) throw std::invalid_argument("model: lora_alpha must be positive");
}

void TrainableParams::fill(double v) {
  for (auto& l : layers) {
    l.q.a.fill(v);
    l.q.b.fill(v);
    l.v.a.fill(v);
    l.v.b.fill(v);
  }
  head_w.fill(v);
  head_b.assign(head_b.size(), v);
}

void TrainableParams::add_scaled(const TrainableParams& other, double scale) {
  for (std::size_t j = 0; j < layers.size(); ++j) {
    layers[j].q.a.add_scaled(other.layers[j].q.a, scale);
    layers[j].q.b.add_scaled(other.layers[j].q.b, scale);
    layers[j].v.a.add_scaled(other.layers[j].v.a, scale);
    layers[j].v.b.add_scaled(other.layers[j].v.b, scale);
  }
  head_w.add_scaled(other.head_w, scale);
  for (std::size_t i = 0; i < head_b.size(); ++i) head_b[i] += scale * other.head_b[i];
}

double TrainableParams::layer_squared_norm(std::size_t j) const {
  const auto& l = layers[j];
  return l.q.a.squared_norm() + l.q.b.squared_norm() + l.v.a.squared_norm() +
         l.v.b.squared_norm();
}

double TrainableParams::head_squared_norm() const {
  double acc = head_w.squared_norm();
  for (double v : head_b) acc += v * v;
  return acc;
}

bool TrainableParams::is_finite() const {
  for (const auto& l : layers)
    if (!l.q.a.is_finite() || !l.q.b.is_finite() || !l.v.a.is_finite() || !l.v.b.is_finite())
      return false;
  if (!head_w.is_finite()) return false;
  for (double v : head_b)
    if (!std::isfinite(v)) return false;
  return true;
}

bool TrainableParams::same_shape(const TrainableParams& other) const {
  if (layers.size() != other.layers.size() || head_b.size() != other.head_b.size() ||
      !head_w.same_shape(other.head_w))
    return false;
  for (std::size_t j = 0; j < layers.size(); ++j) {
    if (!layers[j].q.a.same_shape(other.layers[j].q.a) ||
        !layers[j].q.b.same_shape(other.layers[j].q.b) ||
        !layers[j].v.a.same_shape(other.layers[j].v.a) ||
        !layers[j].v.b.same_shape(other.layers[j].v.b))
      return false;
  }
  return true;
}

TrainableParams zeros_like(const TrainableParams& p) {
  TrainableParams z = p;
  z.fill(0.0);
  return z;
}

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, double stddev, RngStream& rng) {
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.gaussian(0.0, stddev);
  return m;
}

std::uint64_t param_fingerprint(const TrainableParams& p) {
  double acc = p.head_squared_norm();
  for (std::size_t j = 0; j < p.layers.size(); ++j) acc += p.layer_squared_norm(j);
  return std::bit_cast<std::uint64_t>(acc);
}

}  // namespace

std::pair<FrozenBase, TrainableParams> init_model(const ModelConfig& cfg, RngStream& rng) {
  cfg.validate();
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  // Residual-branch outputs shrink with depth so the stream stays
  // signal-dominated, mimicking a trained network's per-layer contribution.
  const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.layers);
  const double out_std = proj_std * resid_scale;
  const double ff_std = resid_scale / std::sqrt(static_cast<double>(cfg.d_ff));

  FrozenBase base;
  base.embedding = random_matrix(cfg.vocab, cfg.d_model, 0.5, rng);
  base.positional = random_matrix(cfg.seq_len, cfg.d_model, 0.5, rng);
  base.layers.resize(cfg.layers);
  for (auto& lw : base.layers) {
    lw.wq = random_matrix(cfg.d_model, cfg.d_model, proj_std, rng);
    lw.wk = random_matrix(cfg.d_model, cfg.d_model, proj_std, rng);
    lw.wv = random_matrix(cfg.d_model, cfg.d_model, proj_std, rng);
    lw.wo = random_matrix(cfg.d_model, cfg.d_model, out_std, rng);
    lw.w1 = random_matrix(cfg.d_model, cfg.d_ff, proj_std, rng);
    lw.w2 = random_matrix(cfg.d_ff, cfg.d_model, ff_std, rng);
    lw.b1.assign(cfg.d_ff, 0.0);
    lw.b2.assign(cfg.d_model, 0.0);
    lw.ln1_gain.assign(cfg.d_model, 1.0);
    lw.ln1_bias.assign(cfg.d_model, 0.0);
    lw.ln2_gain.assign(cfg.d_model, 1.0);
    lw.ln2_bias.assign(cfg.d_model, 0.0);
  }

  TrainableParams params;
  params.layers.resize(cfg.layers);
  for (auto& ll : params.layers) {
    ll.q.a = random_matrix(cfg.rank, cfg.d_model, 0.02, rng);
    ll.q.b = Matrix(cfg.d_model, cfg.rank, 0.0);
    ll.v.a = random_matrix(cfg.rank, cfg.d_model, 0.02, rng);
    ll.v.b = Matrix(cfg.d_model, cfg.rank, 0.0);
  }
  params.head_w = random_matrix(cfg.d_model, cfg.n_classes, 0.02, rng);
  params.head_b.assign(cfg.n_classes, 0.0);
  return {std::move(base), std::move(params)};
}

Matrix effective_weight(const Matrix& w0, const Matrix& a, const Matrix& b,
                        double alpha, int rank) {
  if (b.cols() != a.rows() || w0.rows() != b.rows() || w0.cols() != a.cols())
    throw std::invalid_argument("effective_weight: shape mismatch");
  Matrix delta = matmul(b, a);
  delta.scale(alpha / rank);
  return add(w0, delta);
}

namespace {

constexpr double kLnEps = 1e-5;

// y = gain .* (x - mean)/sqrt(var + eps) + bias, per row;
// caches x_hat and 1/sqrt(var+eps).
void layer_norm(const Matrix& x, const std::vector<double>& gain,
                const std::vector<double>& bias, Matrix& y, Matrix& x_hat,
                std::vector<double>& inv_std) {
  const std::size_t rows = x.rows(), d = x.cols();
  y = Matrix(rows, d);
  x_hat = Matrix(rows, d);
  inv_std.assign(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
    mean /= d;
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double c = x(i, j) - mean;
      var += c * c;
    }
    var /= d;
    double is = 1.0 / std::sqrt(var + kLnEps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      double xh = (x(i, j) - mean) * is;
      x_hat(i, j) = xh;
      y(i, j) = gain[j] * xh + bias[j];
    }
  }
}

// Backward of the row-wise layer norm above: given dY, returns dX.
Matrix layer_norm_backward(const Matrix& dy, const Matrix& x_hat,
                           const std::vector<double>& inv_std,
                           const std::vector<double>& gain) {
  const std::size_t rows = dy.rows(), d = dy.cols();
  Matrix dx(rows, d);
  for (std::size_t i = 0; i < rows; ++i) {
    double sum_dh = 0.0, sum_dh_xh = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double dh = dy(i, j) * gain[j];
      sum_dh += dh;
      sum_dh_xh += dh * x_hat(i, j);
    }
    double m1 = sum_dh / d, m2 = sum_dh_xh / d;
    for (std::size_t j = 0; j < d; ++j) {
      double dh = dy(i, j) * gain[j];
      dx(i, j) = inv_std[i] * (dh - m1 - x_hat(i, j) * m2);
    }
  }
  return dx;
}

void apply_dropout(Matrix& x, double p, RngStream& rng, std::vector<std::uint8_t>& keep) {
  keep.resize(x.size());
  double inv_keep = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < x.size(); ++i) {
    bool k = rng.unit() >= p;
    keep[i] = k;
    x.data()[i] = k ? x.data()[i] * inv_keep : 0.0;
  }
}

void apply_dropout_backward(Matrix& dx, double p, const std::vector<std::uint8_t>& keep) {
  double inv_keep = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < dx.size(); ++i)
    dx.data()[i] = keep[i] ? dx.data()[i] * inv_keep : 0.0;
}

Matrix embed_sample(const ModelConfig& cfg, const FrozenBase& base, const Sample& s) {
  if (!s.tokens.empty()) {
    Matrix x(s.tokens.size(), cfg.d_model);
    for (std::size_t p = 0; p < s.tokens.size(); ++p) {
      int tok = s.tokens[p];
      if (tok < 0 || tok >= cfg.vocab)
        throw std::invalid_argument("forward: token id outside vocabulary");
      for (int j = 0; j < cfg.d_model; ++j)
        x(p, j) = base.embedding(tok, j) + base.positional(p % cfg.seq_len, j);
    }
    return x;
  }
  // Dense feature vector: a single-position sequence projected through the
  // embedding matrix.
  if (static_cast<int>(s.features.size()) != cfg.vocab)
    throw std::invalid_argument("forward: feature dim mismatch");
  Matrix x(1, cfg.d_model);
  for (int j = 0; j < cfg.d_model; ++j) {
    double acc = base.positional(0, j);
    for (int f = 0; f < cfg.vocab; ++f) acc += s.features[f] * base.embedding(f, j);
    x(0, j) = acc;
  }
  return x;
}

}  // namespace

Batch Batch::whole(const Dataset& ds) {
  Batch b;
  b.samples.reserve(ds.size());
  for (const auto& s : ds.samples) b.samples.push_back(&s);
  return b;
}

Batch Batch::of(const Dataset& ds, const std::vector<std::size_t>& idx) {
  Batch b;
  b.samples.reserve(idx.size());
  for (auto i : idx) b.samples.push_back(&ds.samples[i]);
  return b;
}

ForwardCache forward(const ModelConfig& cfg, const FrozenBase& base,
                     const TrainableParams& params, const LayerMask& mask,
                     const Batch& batch, RngStream* dropout_rng) {
  if (static_cast<int>(mask.size()) != cfg.layers)
    throw std::invalid_argument("forward: mask length must equal layer count");
  if (batch.size() == 0) throw std::invalid_argument("forward: empty batch");

  const int dh = cfg.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double s = cfg.lora_scale();
  const bool dropout = dropout_rng != nullptr && cfg.dropout_p > 0.0;

  ForwardCache cache;
  cache.mask = mask;
  cache.model_stamp = param_fingerprint(params);
  cache.eff_q.reserve(cfg.layers);
  cache.eff_v.reserve(cfg.layers);
  for (int j = 0; j < cfg.layers; ++j) {
    const auto& ll = params.layers[j];
    cache.eff_q.push_back(
        effective_weight(base.layers[j].wq, ll.q.a, ll.q.b, cfg.lora_alpha, cfg.rank));
    cache.eff_v.push_back(
        effective_weight(base.layers[j].wv, ll.v.a, ll.v.b, cfg.lora_alpha, cfg.rank));
  }

  double total_loss = 0.0;
  for (const Sample* sp : batch.samples) {
    SampleCache sc;
    sc.label = sp->label;
    sc.x0 = embed_sample(cfg, base, *sp);
    const std::size_t S = sc.x0.rows();
    Matrix x = sc.x0;
    sc.layers.resize(cfg.layers);
    for (int j = 0; j < cfg.layers; ++j) {
      const auto& lw = base.layers[j];
      LayerCache& lc = sc.layers[j];
      lc.x_in = x;
      lc.q = matmul(x, cache.eff_q[j]);
      lc.k = matmul(x, lw.wk);
      lc.v = matmul(x, cache.eff_v[j]);
      if (mask[j]) {
        lc.xb_q = matmul(x, params.layers[j].q.b);
        lc.xb_v = matmul(x, params.layers[j].v.b);
      }

      lc.attn.resize(cfg.n_heads);
      lc.z = Matrix(S, cfg.d_model);
      for (int h = 0; h < cfg.n_heads; ++h) {
        const int off = h * dh;
        Matrix& attn = lc.attn[h];
        attn = Matrix(S, S);
        for (std::size_t i = 0; i < S; ++i) {
          double row_max = -1e300;
          for (std::size_t jj = 0; jj < S; ++jj) {
            double dot = 0.0;
            for (int e = 0; e < dh; ++e) dot += lc.q(i, off + e) * lc.k(jj, off + e);
            attn(i, jj) = dot * attn_scale;
            row_max = std::max(row_max, attn(i, jj));
          }
          double denom = 0.0;
          for (std::size_t jj = 0; jj < S; ++jj) {
            attn(i, jj) = std::exp(attn(i, jj) - row_max);
            denom += attn(i, jj);
          }
          for (std::size_t jj = 0; jj < S; ++jj) {
            attn(i, jj) /= denom;
            for (int e = 0; e < dh; ++e)
              lc.z(i, off + e) += attn(i, jj) * lc.v(jj, off + e);
          }
        }
      }

      Matrix attn_out = matmul(lc.z, lw.wo);
      if (dropout) apply_dropout(attn_out, cfg.dropout_p, *dropout_rng, lc.drop_attn);
      attn_out.add_scaled(x, 1.0);  // residual
      layer_norm(attn_out, lw.ln1_gain, lw.ln1_bias, lc.x1, lc.x1_hat, lc.ln1_inv_std);

      lc.ff_pre = matmul(lc.x1, lw.w1);
      for (std::size_t i = 0; i < S; ++i)
        for (int e = 0; e < cfg.d_ff; ++e) lc.ff_pre(i, e) += lw.b1[e];
      lc.ff_act = lc.ff_pre;
      for (std::size_t i = 0; i < lc.ff_act.size(); ++i)
        lc.ff_act.data()[i] = std::max(0.0, lc.ff_act.data()[i]);
      Matrix ff_out = matmul(lc.ff_act, lw.w2);
      for (std::size_t i = 0; i < S; ++i)
        for (int e = 0; e < cfg.d_model; ++e) ff_out(i, e) += lw.b2[e];
      if (dropout) apply_dropout(ff_out, cfg.dropout_p, *dropout_rng, lc.drop_ff);
      ff_out.add_scaled(lc.x1, 1.0);  // residual
      Matrix x2, x2_hat;
      layer_norm(ff_out, lw.ln2_gain, lw.ln2_bias, x2, lc.x2_hat, lc.ln2_inv_std);
      x = std::move(x2);
    }
    sc.x_out = x;

    sc.pooled.assign(cfg.d_model, 0.0);
    for (std::size_t i = 0; i < S; ++i)
      for (int e = 0; e < cfg.d_model; ++e) sc.pooled[e] += x(i, e) / S;

    std::vector<double> logits(cfg.n_classes, 0.0);
    for (int c = 0; c < cfg.n_classes; ++c) {
      double acc = params.head_b[c];
      for (int e = 0; e < cfg.d_model; ++e) acc += sc.pooled[e] * params.head_w(e, c);
      logits[c] = acc;
    }
    double lmax = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    sc.probs.resize(cfg.n_classes);
    for (int c = 0; c < cfg.n_classes; ++c) {
      sc.probs[c] = std::exp(logits[c] - lmax);
      denom += sc.probs[c];
    }
    for (int c = 0; c < cfg.n_classes; ++c) sc.probs[c] /= denom;
    total_loss += -std::log(std::max(sc.probs[sc.label], 1e-300));

    cache.logits.push_back(std::move(logits));
    cache.samples.push_back(std::move(sc));
  }

  cache.loss = total_loss / batch.size();
  if (!std::isfinite(cache.loss))
    throw std::runtime_error("forward: non-finite loss (batch size " +
                             std::to_string(batch.size()) + ")");
  (void)s;
  return cache;
}

TrainableParams backward(const ModelConfig& cfg, const FrozenBase& base,
                         const TrainableParams& params, const ForwardCache& cache) {
  if (cache.samples.empty() || static_cast<int>(cache.mask.size()) != cfg.layers)
    throw std::runtime_error("backward: cache does not match config");
  if (cache.model_stamp != param_fingerprint(params))
    throw std::runtime_error("backward: stale cache (parameters changed since forward)");

  const int dh = cfg.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double lscale = cfg.lora_scale();
  const double inv_batch = 1.0 / static_cast<double>(cache.samples.size());
  const bool dropout = cfg.dropout_p > 0.0 && !cache.samples[0].layers[0].drop_attn.empty();

  TrainableParams grads = zeros_like(params);

  for (const SampleCache& sc : cache.samples) {
    const std::size_t S = sc.x_out.rows();

    // Head and pooling.
    std::vector<double> dlogits(cfg.n_classes);
    for (int c = 0; c < cfg.n_classes; ++c)
      dlogits[c] = (sc.probs[c] - (c == sc.label ? 1.0 : 0.0)) * inv_batch;
    std::vector<double> dpooled(cfg.d_model, 0.0);
    for (int e = 0; e < cfg.d_model; ++e) {
      for (int c = 0; c < cfg.n_classes; ++c) {
        grads.head_w(e, c) += sc.pooled[e] * dlogits[c];
        dpooled[e] += dlogits[c] * params.head_w(e, c);
      }
    }
    for (int c = 0; c < cfg.n_classes; ++c) grads.head_b[c] += dlogits[c];

    Matrix dx(S, cfg.d_model);
    for (std::size_t i = 0; i < S; ++i)
      for (int e = 0; e < cfg.d_model; ++e) dx(i, e) = dpooled[e] / S;

    for (int j = cfg.layers - 1; j >= 0; --j) {
      const auto& lw = base.layers[j];
      const LayerCache& lc = sc.layers[j];

      // LN2.
      Matrix dadd2 = layer_norm_backward(dx, lc.x2_hat, lc.ln2_inv_std, lw.ln2_gain);
      Matrix dff_out = dadd2;  // residual: dx1 also receives dadd2 below
      if (dropout) apply_dropout_backward(dff_out, cfg.dropout_p, lc.drop_ff);

      // FFN (frozen weights: only the input gradient is needed).
      Matrix dff_act = matmul(dff_out, transpose(lw.w2));
      for (std::size_t i = 0; i < dff_act.size(); ++i)
        if (lc.ff_pre.data()[i] <= 0.0) dff_act.data()[i] = 0.0;
      Matrix dx1 = matmul(dff_act, transpose(lw.w1));
      dx1.add_scaled(dadd2, 1.0);

      // LN1.
      Matrix dadd1 = layer_norm_backward(dx1, lc.x1_hat, lc.ln1_inv_std, lw.ln1_gain);
      Matrix dattn_out = dadd1;
      if (dropout) apply_dropout_backward(dattn_out, cfg.dropout_p, lc.drop_attn);

      // Attention.
      Matrix dz = matmul(dattn_out, transpose(lw.wo));
      Matrix dq(S, cfg.d_model), dk(S, cfg.d_model), dv(S, cfg.d_model);
      for (int h = 0; h < cfg.n_heads; ++h) {
        const int off = h * dh;
        const Matrix& attn = lc.attn[h];
        Matrix dattn(S, S);
        for (std::size_t i = 0; i < S; ++i) {
          for (std::size_t jj = 0; jj < S; ++jj) {
            double acc = 0.0;
            for (int e = 0; e < dh; ++e) acc += dz(i, off + e) * lc.v(jj, off + e);
            dattn(i, jj) = acc;
            for (int e = 0; e < dh; ++e)
              dv(jj, off + e) += attn(i, jj) * dz(i, off + e);
          }
        }
        // Softmax rows.
        for (std::size_t i = 0; i < S; ++i) {
          double dot = 0.0;
          for (std::size_t jj = 0; jj < S; ++jj) dot += dattn(i, jj) * attn(i, jj);
          for (std::size_t jj = 0; jj < S; ++jj) {
            double ds = attn(i, jj) * (dattn(i, jj) - dot) * attn_scale;
            for (int e = 0; e < dh; ++e) {
              dq(i, off + e) += ds * lc.k(jj, off + e);
              dk(jj, off + e) += ds * lc.q(i, off + e);
            }
          }
        }
      }

      // Input gradient through the (effective) projections plus the residual.
      Matrix dx_in = matmul(dq, transpose(cache.eff_q[j]));
      dx_in.add_scaled(matmul(dk, transpose(lw.wk)), 1.0);
      dx_in.add_scaled(matmul(dv, transpose(cache.eff_v[j])), 1.0);
      dx_in.add_scaled(dadd1, 1.0);

      // Adapter gradients only where the map allows training.
      if (cache.mask[j]) {
        auto& g = grads.layers[j];
        const auto& p = params.layers[j];
        // dA += s (xB)^T dY ; dB += s x^T (dY A^T)
        g.q.a.add_scaled(matmul(transpose(lc.xb_q), dq), lscale);
        g.q.b.add_scaled(matmul(transpose(lc.x_in), matmul(dq, transpose(p.q.a))), lscale);
        g.v.a.add_scaled(matmul(transpose(lc.xb_v), dv), lscale);
        g.v.b.add_scaled(matmul(transpose(lc.x_in), matmul(dv, transpose(p.v.a))), lscale);
      }

      dx = std::move(dx_in);
    }
  }

  if (!grads.is_finite()) throw std::runtime_error("backward: non-finite gradient");
  return grads;
}

OptimizerState make_optimizer(const TrainableParams& params, const AdamWConfig& hp) {
  OptimizerState st;
  st.m = zeros_like(params);
  st.v = zeros_like(params);
  st.step = 0;
  st.hp = hp;
  return st;
}

namespace {

void adamw_tensor(double* w, const double* g, double* m, double* v, std::size_t n,
                  const AdamWConfig& hp, double bc1, double bc2) {
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
    v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
    double mhat = m[i] / bc1;
    double vhat = v[i] / bc2;
    w[i] -= hp.lr * (mhat / (std::sqrt(vhat) + hp.eps) + hp.weight_decay * w[i]);
  }
}

}  // namespace

void adamw_step(TrainableParams& params, const TrainableParams& grads,
                OptimizerState& state, const LayerMask& mask) {
  if (!params.same_shape(grads) || !params.same_shape(state.m))
    throw std::invalid_argument("adamw_step: shape mismatch");
  if (mask.size() != params.layers.size())
    throw std::invalid_argument("adamw_step: mask length mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.hp.beta2, static_cast<double>(state.step));
  auto upd = [&](Matrix& w, const Matrix& g, Matrix& m, Matrix& v) {
    adamw_tensor(w.data(), g.data(), m.data(), v.data(), w.size(), state.hp, bc1, bc2);
  };
  for (std::size_t j = 0; j < params.layers.size(); ++j) {
    if (!mask[j]) continue;
    upd(params.layers[j].q.a, grads.layers[j].q.a, state.m.layers[j].q.a, state.v.layers[j].q.a);
    upd(params.layers[j].q.b, grads.layers[j].q.b, state.m.layers[j].q.b, state.v.layers[j].q.b);
    upd(params.layers[j].v.a, grads.layers[j].v.a, state.m.layers[j].v.a, state.v.layers[j].v.a);
    upd(params.layers[j].v.b, grads.layers[j].v.b, state.m.layers[j].v.b, state.v.layers[j].v.b);
  }
  upd(params.head_w, grads.head_w, state.m.head_w, state.v.head_w);
  adamw_tensor(params.head_b.data(), grads.head_b.data(), state.m.head_b.data(),
               state.v.head_b.data(), params.head_b.size(), state.hp, bc1, bc2);
}

TrainableParams flatten_delta(const TrainableParams& before, const TrainableParams& after) {
  if (!before.same_shape(after))
    throw std::invalid_argument("flatten_delta: parameter sets differ in shape");
  TrainableParams delta = after;
  delta.add_scaled(before, -1.0);
  return delta;
}

// --- checkpoint I/O ------------------------------------------------------
//
// Layout (little-endian):
//   magic "FLCK", uint32 version (=1)
//   int32 x 8: layers, d_model, n_heads, d_ff, rank, n_classes, seq_len, vocab
//   float64 x 2: lora_alpha, dropout_p
//   uint32 tensor_count, then per tensor:
//     uint32 name_len, name bytes, uint64 rows, uint64 cols, rows*cols float64

namespace {

void write_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void write_i32(std::ostream& out, std::int32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_f64(std::ostream& out, double v) { out.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t read_u32(std::istream& in) { std::uint32_t v; in.read(reinterpret_cast<char*>(&v), 4); return v; }
std::uint64_t read_u64(std::istream& in) { std::uint64_t v; in.read(reinterpret_cast<char*>(&v), 8); return v; }
std::int32_t read_i32(std::istream& in) { std::int32_t v; in.read(reinterpret_cast<char*>(&v), 4); return v; }
double read_f64(std::istream& in) { double v; in.read(reinterpret_cast<char*>(&v), 8); return v; }

void write_tensor(std::ostream& out, const std::string& name, const Matrix& m) {
  write_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u64(out, m.rows());
  write_u64(out, m.cols());
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
}

void write_vector(std::ostream& out, const std::string& name, const std::vector<double>& v) {
  Matrix m(1, v.size());
  std::memcpy(m.data(), v.data(), v.size() * sizeof(double));
  write_tensor(out, name, m);
}

Matrix read_tensor(std::istream& in, std::string& name) {
  std::uint32_t len = read_u32(in);
  name.resize(len);
  in.read(name.data(), len);
  std::uint64_t rows = read_u64(in), cols = read_u64(in);
  Matrix m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(m.size() * sizeof(double)));
  return m;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const FrozenBase& base, const TrainableParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write("FLCK", 4);
  write_u32(out, 1);
  for (int v : {cfg.layers, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.rank, cfg.n_classes,
                cfg.seq_len, cfg.vocab})
    write_i32(out, v);
  write_f64(out, cfg.lora_alpha);
  write_f64(out, cfg.dropout_p);

  std::vector<std::pair<std::string, const Matrix*>> tensors;
  std::vector<std::pair<std::string, const std::vector<double>*>> vectors;
  tensors.emplace_back("embedding", &base.embedding);
  tensors.emplace_back("positional", &base.positional);
  for (int j = 0; j < cfg.layers; ++j) {
    std::string p = "layer" + std::to_string(j) + ".";
    const auto& lw = base.layers[j];
    tensors.emplace_back(p + "wq", &lw.wq);
    tensors.emplace_back(p + "wk", &lw.wk);
    tensors.emplace_back(p + "wv", &lw.wv);
    tensors.emplace_back(p + "wo", &lw.wo);
    tensors.emplace_back(p + "w1", &lw.w1);
    tensors.emplace_back(p + "w2", &lw.w2);
    vectors.emplace_back(p + "b1", &lw.b1);
    vectors.emplace_back(p + "b2", &lw.b2);
    vectors.emplace_back(p + "ln1_gain", &lw.ln1_gain);
    vectors.emplace_back(p + "ln1_bias", &lw.ln1_bias);
    vectors.emplace_back(p + "ln2_gain", &lw.ln2_gain);
    vectors.emplace_back(p + "ln2_bias", &lw.ln2_bias);
    const auto& ll = params.layers[j];
    tensors.emplace_back(p + "lora_q.a", &ll.q.a);
    tensors.emplace_back(p + "lora_q.b", &ll.q.b);
    tensors.emplace_back(p + "lora_v.a", &ll.v.a);
    tensors.emplace_back(p + "lora_v.b", &ll.v.b);
  }
  tensors.emplace_back("head_w", &params.head_w);
  vectors.emplace_back("head_b", &params.head_b);

  write_u32(out, static_cast<std::uint32_t>(tensors.size() + vectors.size()));
  for (const auto& [name, m] : tensors) write_tensor(out, name, *m);
  for (const auto& [name, v] : vectors) write_vector(out, name, *v);
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path, ModelConfig& cfg, FrozenBase& base,
                     TrainableParams& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (std::memcmp(magic, "FLCK", 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  if (read_u32(in) != 1) throw std::runtime_error("load_checkpoint: unsupported version");
  cfg.layers = read_i32(in);
  cfg.d_model = read_i32(in);
  cfg.n_heads = read_i32(in);
  cfg.d_ff = read_i32(in);
  cfg.rank = read_i32(in);
  cfg.n_classes = read_i32(in);
  cfg.seq_len = read_i32(in);
  cfg.vocab = read_i32(in);
  cfg.lora_alpha = read_f64(in);
  cfg.dropout_p = read_f64(in);
  cfg.validate();

  base.layers.assign(cfg.layers, {});
  params.layers.assign(cfg.layers, {});
  std::uint32_t count = read_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name;
    Matrix m = read_tensor(in, name);
    auto as_vec = [&m]() {
      return std::vector<double>(m.data(), m.data() + m.size());
    };
    if (name == "embedding") base.embedding = std::move(m);
    else if (name == "positional") base.positional = std::move(m);
    else if (name == "head_w") params.head_w = std::move(m);
    else if (name == "head_b") params.head_b = as_vec();
    else if (name.rfind("layer", 0) == 0) {
      auto dot = name.find('.');
      int j = std::stoi(name.substr(5, dot - 5));
      std::string field = name.substr(dot + 1);
      auto& lw = base.layers[j];
      auto& ll = params.layers[j];
      if (field == "wq") lw.wq = std::move(m);
      else if (field == "wk") lw.wk = std::move(m);
      else if (field == "wv") lw.wv = std::move(m);
      else if (field == "wo") lw.wo = std::move(m);
      else if (field == "w1") lw.w1 = std::move(m);
      else if (field == "w2") lw.w2 = std::move(m);
      else if (field == "b1") lw.b1 = as_vec();
      else if (field == "b2") lw.b2 = as_vec();
      else if (field == "ln1_gain") lw.ln1_gain = as_vec();
      else if (field == "ln1_bias") lw.ln1_bias = as_vec();
      else if (field == "ln2_gain") lw.ln2_gain = as_vec();
      else if (field == "ln2_bias") lw.ln2_bias = as_vec();
      else if (field == "lora_q.a") ll.q.a = std::move(m);
      else if (field == "lora_q.b") ll.q.b = std::move(m);
      else if (field == "lora_v.a") ll.v.a = std::move(m);
      else if (field == "lora_v.b") ll.v.b = std::move(m);
      else throw std::runtime_error("load_checkpoint: unknown tensor " + name);
    } else {
      throw std::runtime_error("load_checkpoint: unknown tensor " + name);
    }
  }
  if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path);
}

}  // namespace fedlora
