#pragma once

#include "crate/config.hpp"
#include "crate/image.hpp"

#include <numbers>
#include <optional>
#include <utility>

namespace crate {

constexpr Scalar kLayerNormEps = 1e-6;

struct LayerNormParams {
  Mat gamma;  // d x 1
  Mat beta;   // d x 1
};

struct PatchEmbedding {
  Mat w_patch;    // d x D_patch
  Mat cls_token;  // d x 1
  Mat pos;        // d x (N+1), column 0 belongs to the class token
};

struct MlpParams {
  Mat w1;  // hidden x d
  Mat b1;  // hidden x 1
  Mat w2;  // d x hidden
  Mat b2;  // d x 1
};

// Per-layer parameters. Only the selected variant's fields are allocated:
// subspaces for Mssa, w_q/w_k/w_v for Mhsa, dict for Ista, mlp for Mlp.
struct LayerParams {
  std::vector<Mat> subspaces;  // K matrices, each d x p
  Mat dict;                    // d x d
  LayerNormParams ln1, ln2;
  Mat w_out;  // d x d attention output projection
  Mat b_out;  // d x 1
  Mat w_q, w_k, w_v;  // d x d; head k occupies columns [k*p, (k+1)*p)
  MlpParams mlp;
};

struct CrateModel {
  ModelConfig config;
  PatchEmbedding embedding;
  std::vector<LayerParams> layers;
  Mat w_head;  // num_classes x d
};

// Captures every intermediate of a forward pass for layer-wise analysis.
struct ForwardTrace {
  std::vector<TokenMatrix> z;               // Z^1 .. Z^{L+1}
  std::vector<TokenMatrix> z_half;          // per layer, pre-second-norm
  std::vector<std::vector<Mat>> attention;  // [layer][head], (N+1) x (N+1) row-stochastic
};

struct ForwardResult {
  TokenMatrix tokens;  // Z^{L+1}
  Vec logits;
  std::optional<ForwardTrace> trace;
};

// ---------------------------------------------------------------------------
// initialization

inline CrateModel init_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int d = cfg.model_dim, p = cfg.head_dim, K = cfg.num_heads;
  CrateModel m;
  m.config = cfg;
  m.embedding.w_patch = kaiming_uniform(d, cfg.patch_dim(), cfg.patch_dim(), rng);
  m.embedding.cls_token = gaussian_matrix(d, 1, 0.02, rng);
  m.embedding.pos = gaussian_matrix(d, cfg.num_tokens(), 0.02, rng);
  m.layers.resize(cfg.num_layers);
  for (auto& layer : m.layers) {
    if (cfg.attention == AttentionKind::Mssa) {
      layer.subspaces.reserve(K);
      for (int k = 0; k < K; ++k) layer.subspaces.push_back(kaiming_uniform(d, p, d, rng));
    } else {
      layer.w_q = kaiming_uniform(d, d, d, rng);
      layer.w_k = kaiming_uniform(d, d, d, rng);
      layer.w_v = kaiming_uniform(d, d, d, rng);
    }
    if (cfg.mlp == MlpKind::Ista) {
      layer.dict = kaiming_uniform(d, d, d, rng);
    } else {
      layer.mlp.w1 = kaiming_uniform(cfg.mlp_hidden, d, d, rng);
      layer.mlp.b1 = Mat::Zero(cfg.mlp_hidden, 1);
      layer.mlp.w2 = kaiming_uniform(d, cfg.mlp_hidden, cfg.mlp_hidden, rng);
      layer.mlp.b2 = Mat::Zero(d, 1);
    }
    layer.ln1.gamma = Mat::Ones(d, 1);
    layer.ln1.beta = Mat::Zero(d, 1);
    layer.ln2.gamma = Mat::Ones(d, 1);
    layer.ln2.beta = Mat::Zero(d, 1);
    layer.w_out = kaiming_uniform(d, d, d, rng);
    layer.b_out = Mat::Zero(d, 1);
  }
  m.w_head = kaiming_uniform(cfg.num_classes, d, d, rng);
  return m;
}

// Deterministic traversal of every parameter tensor; the same order defines
// checkpoint layout, optimizer state keys, and gradient packing.
template <class ModelT, class F>
void visit_params(ModelT& m, F&& f) {
  f("embedding.w_patch", m.embedding.w_patch);
  f("embedding.cls_token", m.embedding.cls_token);
  f("embedding.pos", m.embedding.pos);
  for (size_t i = 0; i < m.layers.size(); ++i) {
    auto& layer = m.layers[i];
    const std::string prefix = "layers." + std::to_string(i) + ".";
    for (size_t k = 0; k < layer.subspaces.size(); ++k)
      f(prefix + "u" + std::to_string(k), layer.subspaces[k]);
    if (layer.w_q.size() > 0) {
      f(prefix + "w_q", layer.w_q);
      f(prefix + "w_k", layer.w_k);
      f(prefix + "w_v", layer.w_v);
    }
    if (layer.dict.size() > 0) f(prefix + "dict", layer.dict);
    if (layer.mlp.w1.size() > 0) {
      f(prefix + "mlp.w1", layer.mlp.w1);
      f(prefix + "mlp.b1", layer.mlp.b1);
      f(prefix + "mlp.w2", layer.mlp.w2);
      f(prefix + "mlp.b2", layer.mlp.b2);
    }
    f(prefix + "ln1.gamma", layer.ln1.gamma);
    f(prefix + "ln1.beta", layer.ln1.beta);
    f(prefix + "ln2.gamma", layer.ln2.gamma);
    f(prefix + "ln2.beta", layer.ln2.beta);
    f(prefix + "w_out", layer.w_out);
    f(prefix + "b_out", layer.b_out);
  }
  f("head.w", m.w_head);
}

// ---------------------------------------------------------------------------
// forward operations

// Cuts the image into non-overlapping patches; column i holds patch i of the
// row-major patch grid, flattened in (channel, row, col) order.
inline Mat patchify(const Image& img, const ModelConfig& cfg) {
  if (img.channels != cfg.channels || img.height != cfg.height || img.width != cfg.width)
    throw ConfigError("patchify: image shape does not match config");
  const int gx = cfg.patches_x(), gy = cfg.patches_y();
  Mat out(cfg.patch_dim(), cfg.num_patches());
  for (int py = 0; py < gy; ++py)
    for (int px = 0; px < gx; ++px) {
      const Index col = static_cast<Index>(py) * gx + px;
      Index row = 0;
      for (int c = 0; c < cfg.channels; ++c)
        for (int y = 0; y < cfg.patch_h; ++y)
          for (int x = 0; x < cfg.patch_w; ++x)
            out(row++, col) = img.at(c, py * cfg.patch_h + y, px * cfg.patch_w + x);
    }
  return out;
}

// Z^1 = [cls, W X] + E_pos
inline TokenMatrix embed(const Mat& patches, const PatchEmbedding& emb) {
  if (patches.rows() != emb.w_patch.cols())
    throw ConfigError("embed: patch dimension does not match projection");
  if (patches.cols() + 1 != emb.pos.cols())
    throw ConfigError("embed: patch count does not match positional encoding");
  TokenMatrix z(emb.w_patch.rows(), patches.cols() + 1);
  z.col(0) = emb.cls_token;
  z.rightCols(patches.cols()).noalias() = emb.w_patch * patches;
  z += emb.pos;
  return z;
}

// Column-wise standardization over the d entries, then scale/shift.
inline TokenMatrix layer_norm(const TokenMatrix& z, const Mat& gamma, const Mat& beta) {
  TokenMatrix out(z.rows(), z.cols());
  const Scalar d = static_cast<Scalar>(z.rows());
  for (Index j = 0; j < z.cols(); ++j) {
    const Scalar mean = z.col(j).mean();
    const Scalar var = (z.col(j).array() - mean).square().sum() / d;
    const Scalar inv = 1.0 / std::sqrt(var + kLayerNormEps);
    out.col(j) = ((z.col(j).array() - mean) * inv) * gamma.col(0).array() + beta.col(0).array();
  }
  return out;
}

// Row-wise stable softmax.
inline Mat row_softmax(const Mat& scores) {
  Mat out(scores.rows(), scores.cols());
  for (Index i = 0; i < scores.rows(); ++i) {
    const Scalar mx = scores.row(i).maxCoeff();
    out.row(i) = (scores.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

// Subspace attention: per head the query, key, and value projection is the
// same U_k. dots are scaled by 1/sqrt(p); the learned output projection
// absorbs the rate-gradient prefactor.
inline std::pair<TokenMatrix, std::vector<Mat>> mssa_forward(const TokenMatrix& z,
                                                             const LayerParams& layer,
                                                             const ModelConfig& cfg) {
  const int p = cfg.head_dim, K = cfg.num_heads;
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(p));
  Mat heads(cfg.model_dim, z.cols());
  std::vector<Mat> attn(K);
  for (int k = 0; k < K; ++k) {
    Mat w = layer.subspaces[k].transpose() * z;  // p x (N+1)
    Mat dots = (w.transpose() * w) * scale;
    attn[k] = row_softmax(dots);
    heads.middleRows(static_cast<Index>(k) * p, p).noalias() = w * attn[k].transpose();
  }
  TokenMatrix out = layer.w_out * heads;
  out.colwise() += Vec(layer.b_out.col(0));
  return {std::move(out), std::move(attn)};
}

// Conventional multi-head attention with separate projections per head;
// head k lives in columns [k*p, (k+1)*p) of w_q / w_k / w_v.
inline std::pair<TokenMatrix, std::vector<Mat>> mhsa_forward(const TokenMatrix& z,
                                                             const LayerParams& layer,
                                                             const ModelConfig& cfg) {
  const int p = cfg.head_dim, K = cfg.num_heads;
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(p));
  Mat heads(cfg.model_dim, z.cols());
  std::vector<Mat> attn(K);
  for (int k = 0; k < K; ++k) {
    const Index c0 = static_cast<Index>(k) * p;
    Mat q = layer.w_q.middleCols(c0, p).transpose() * z;
    Mat key = layer.w_k.middleCols(c0, p).transpose() * z;
    Mat v = layer.w_v.middleCols(c0, p).transpose() * z;
    Mat dots = (q.transpose() * key) * scale;
    attn[k] = row_softmax(dots);
    heads.middleRows(c0, p).noalias() = v * attn[k].transpose();
  }
  TokenMatrix out = layer.w_out * heads;
  out.colwise() += Vec(layer.b_out.col(0));
  return {std::move(out), std::move(attn)};
}

// One shrinkage-thresholding step on the nonnegative sparse coding problem
// min_A 0.5*||Z - D A||^2 + lambda*||A||_1, A >= 0, initialized at A = Z:
// ReLU(Z + eta D^T (Z - D Z) - eta*lambda).
inline TokenMatrix ista_forward(const TokenMatrix& z, const Mat& dict, Scalar eta,
                                Scalar lambda) {
  Mat pre = z + eta * (dict.transpose() * (z - dict * z));
  return ((pre.array() - eta * lambda).max(0.0)).matrix();
}

inline Scalar gelu(Scalar x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

// Two affine maps with a GELU between, plus the residual from its input.
inline TokenMatrix mlp_forward(const TokenMatrix& z, const LayerParams& layer) {
  Mat h = layer.mlp.w1 * z;
  h.colwise() += Vec(layer.mlp.b1.col(0));
  h = h.unaryExpr([](Scalar v) { return gelu(v); });
  Mat out = layer.mlp.w2 * h;
  out.colwise() += Vec(layer.mlp.b2.col(0));
  return z + out;
}

struct LayerStep {
  TokenMatrix z_half;
  std::vector<Mat> attention;
};

// One full layer: normalize, attend with the residual taken from the
// normalized input, normalize again, then sparsify (or run the MLP).
inline std::pair<TokenMatrix, LayerStep> crate_layer_forward(const TokenMatrix& z,
                                                             const LayerParams& layer,
                                                             const ModelConfig& cfg) {
  TokenMatrix zn = layer_norm(z, layer.ln1.gamma, layer.ln1.beta);
  auto [attn_out, attn] = cfg.attention == AttentionKind::Mssa
                              ? mssa_forward(zn, layer, cfg)
                              : mhsa_forward(zn, layer, cfg);
  TokenMatrix z_half = zn + attn_out;
  TokenMatrix zn2 = layer_norm(z_half, layer.ln2.gamma, layer.ln2.beta);
  TokenMatrix z_out = cfg.mlp == MlpKind::Ista
                          ? ista_forward(zn2, layer.dict, cfg.ista_step, cfg.sparsity)
                          : mlp_forward(zn2, layer);
  return {std::move(z_out), LayerStep{std::move(z_half), std::move(attn)}};
}

// Runs the layer stack from an already-embedded token matrix.
inline ForwardResult forward_tokens(TokenMatrix z, const CrateModel& m, bool want_trace) {
  const auto& cfg = m.config;
  if (z.rows() != cfg.model_dim || z.cols() != cfg.num_tokens())
    throw ConfigError("forward_tokens: token matrix shape does not match config");
  ForwardResult res;
  if (want_trace) {
    res.trace.emplace();
    res.trace->z.reserve(cfg.num_layers + 1);
    res.trace->z.push_back(z);
  }
  for (const auto& layer : m.layers) {
    auto [z_next, step] = crate_layer_forward(z, layer, cfg);
    z = std::move(z_next);
    if (want_trace) {
      res.trace->z.push_back(z);
      res.trace->z_half.push_back(std::move(step.z_half));
      res.trace->attention.push_back(std::move(step.attention));
    }
  }
  res.logits = m.w_head * z.col(0);
  res.tokens = std::move(z);
  return res;
}

inline ForwardResult model_forward(const Image& img, const CrateModel& m,
                                   bool want_trace = false) {
  return forward_tokens(embed(patchify(img, m.config), m.embedding), m, want_trace);
}

inline ForwardResult model_forward(const Mat& patches, const CrateModel& m,
                                   bool want_trace = false) {
  return forward_tokens(embed(patches, m.embedding), m, want_trace);
}

}  // namespace crate
