#pragma once

#include "crate/autodiff.hpp"
#include "crate/model.hpp"

#include <algorithm>
#include <numeric>

namespace crate {

// Tape ids of every model parameter, in visit_params order.
struct TapeLayerIds {
  std::vector<int> u;
  int w_q = -1, w_k = -1, w_v = -1;
  int dict = -1;
  int mlp_w1 = -1, mlp_b1 = -1, mlp_w2 = -1, mlp_b2 = -1;
  int ln1_g = -1, ln1_b = -1, ln2_g = -1, ln2_b = -1;
  int w_out = -1, b_out = -1;
};

struct TapeModelIds {
  int w_patch = -1, cls = -1, pos = -1;
  std::vector<TapeLayerIds> layers;
  int w_head = -1;
  std::vector<std::pair<std::string, int>> flat;  // visit_params order
};

// Registers every parameter as a tape leaf. Must stay aligned with
// visit_params; a unit test pins the correspondence.
inline TapeModelIds register_model(ad::Tape& t, const CrateModel& m) {
  TapeModelIds ids;
  auto put = [&](const std::string& name, const Mat& v) {
    int id = ad::leaf(t, v);
    ids.flat.emplace_back(name, id);
    return id;
  };
  ids.w_patch = put("embedding.w_patch", m.embedding.w_patch);
  ids.cls = put("embedding.cls_token", m.embedding.cls_token);
  ids.pos = put("embedding.pos", m.embedding.pos);
  ids.layers.resize(m.layers.size());
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const auto& layer = m.layers[i];
    auto& lid = ids.layers[i];
    const std::string prefix = "layers." + std::to_string(i) + ".";
    for (size_t k = 0; k < layer.subspaces.size(); ++k)
      lid.u.push_back(put(prefix + "u" + std::to_string(k), layer.subspaces[k]));
    if (layer.w_q.size() > 0) {
      lid.w_q = put(prefix + "w_q", layer.w_q);
      lid.w_k = put(prefix + "w_k", layer.w_k);
      lid.w_v = put(prefix + "w_v", layer.w_v);
    }
    if (layer.dict.size() > 0) lid.dict = put(prefix + "dict", layer.dict);
    if (layer.mlp.w1.size() > 0) {
      lid.mlp_w1 = put(prefix + "mlp.w1", layer.mlp.w1);
      lid.mlp_b1 = put(prefix + "mlp.b1", layer.mlp.b1);
      lid.mlp_w2 = put(prefix + "mlp.w2", layer.mlp.w2);
      lid.mlp_b2 = put(prefix + "mlp.b2", layer.mlp.b2);
    }
    lid.ln1_g = put(prefix + "ln1.gamma", layer.ln1.gamma);
    lid.ln1_b = put(prefix + "ln1.beta", layer.ln1.beta);
    lid.ln2_g = put(prefix + "ln2.gamma", layer.ln2.gamma);
    lid.ln2_b = put(prefix + "ln2.beta", layer.ln2.beta);
    lid.w_out = put(prefix + "w_out", layer.w_out);
    lid.b_out = put(prefix + "b_out", layer.b_out);
  }
  ids.w_head = put("head.w", m.w_head);
  return ids;
}

struct LossGraph {
  int loss = -1;    // scalar node
  int logits = -1;  // C x 1 node
};

// Builds the differentiable forward pass for one example; mirrors
// forward_tokens exactly (the finite-difference suite checks the match).
inline LossGraph build_loss_graph(ad::Tape& t, const TapeModelIds& ids, const ModelConfig& cfg,
                                  const Mat& patches, int label) {
  const int p = cfg.head_dim, K = cfg.num_heads;
  const Scalar att_scale = 1.0 / std::sqrt(static_cast<Scalar>(p));

  int x = ad::leaf(t, patches);
  int z = ad::hstack2(t, ids.cls, ad::matmul(t, ids.w_patch, x));
  z = ad::add(t, z, ids.pos);

  for (const auto& lid : ids.layers) {
    int zn = ad::layer_norm_op(t, z, lid.ln1_g, lid.ln1_b, kLayerNormEps);
    std::vector<int> heads;
    heads.reserve(K);
    for (int k = 0; k < K; ++k) {
      int w, q, key;
      if (!lid.u.empty()) {
        w = ad::matmul_tn(t, lid.u[k], zn);
        q = key = w;
      } else {
        const Index c0 = static_cast<Index>(k) * p;
        q = ad::matmul_tn(t, ad::slice_cols(t, lid.w_q, c0, p), zn);
        key = ad::matmul_tn(t, ad::slice_cols(t, lid.w_k, c0, p), zn);
        w = ad::matmul_tn(t, ad::slice_cols(t, lid.w_v, c0, p), zn);
      }
      int dots = ad::scale(t, ad::matmul_tn(t, q, key), att_scale);
      int attn = ad::row_softmax_op(t, dots);
      heads.push_back(ad::matmul_nt(t, w, attn));
    }
    int attn_out = ad::add_col_bias(t, ad::matmul(t, lid.w_out, ad::vstack(t, heads)),
                                    lid.b_out);
    int z_half = ad::add(t, zn, attn_out);
    int zn2 = ad::layer_norm_op(t, z_half, lid.ln2_g, lid.ln2_b, kLayerNormEps);
    if (lid.dict >= 0) {
      int dz = ad::matmul(t, lid.dict, zn2);
      int corr = ad::matmul_tn(t, lid.dict, ad::sub(t, zn2, dz));
      int pre = ad::add(t, zn2, ad::scale(t, corr, cfg.ista_step));
      pre = ad::add_scalar(t, pre, -cfg.ista_step * cfg.sparsity);
      z = ad::relu(t, pre);
    } else {
      int h = ad::gelu_op(t, ad::add_col_bias(t, ad::matmul(t, lid.mlp_w1, zn2), lid.mlp_b1));
      int out = ad::add_col_bias(t, ad::matmul(t, lid.mlp_w2, h), lid.mlp_b2);
      z = ad::add(t, zn2, out);
    }
  }

  LossGraph g;
  g.logits = ad::matmul(t, ids.w_head, ad::col(t, z, 0));
  g.loss = ad::cross_entropy_op(t, g.logits, label);
  return g;
}

struct Example {
  Mat patches;  // D_patch x N
  int label = 0;
};

struct GradItem {
  std::string name;
  Mat grad;
};

struct BackwardResult {
  std::vector<GradItem> grads;  // visit_params order
  Scalar mean_loss = 0.0;
  std::vector<int> predictions;  // argmax logits, ties toward the lower index
};

// Gradients of the mean cross-entropy over the batch with respect to every
// parameter. Throws NumericError naming the offending quantity when the loss
// or any gradient turns non-finite.
inline BackwardResult backward(const CrateModel& m, const std::vector<Example>& batch) {
  if (batch.empty()) throw ConfigError("backward: batch must be nonempty");
  BackwardResult res;
  const Scalar inv_b = 1.0 / static_cast<Scalar>(batch.size());
  for (const auto& ex : batch) {
    ad::Tape tape;
    TapeModelIds ids = register_model(tape, m);
    LossGraph g = build_loss_graph(tape, ids, m.config, ex.patches, ex.label);
    const Scalar loss = tape.value(g.loss)(0, 0);
    if (!std::isfinite(loss)) throw NumericError("backward: non-finite loss");
    res.mean_loss += loss * inv_b;
    const Mat& logits = tape.value(g.logits);
    Index best = 0;
    logits.col(0).maxCoeff(&best);
    res.predictions.push_back(static_cast<int>(best));
    tape.backward(g.loss);
    if (res.grads.empty()) {
      res.grads.reserve(ids.flat.size());
      for (const auto& [name, id] : ids.flat)
        res.grads.push_back({name, Mat::Zero(tape.value(id).rows(), tape.value(id).cols())});
    }
    for (size_t i = 0; i < ids.flat.size(); ++i) {
      const int id = ids.flat[i].second;
      if (tape.has_grad(id)) res.grads[i].grad += inv_b * tape.grad(id);
    }
  }
  for (const auto& item : res.grads)
    if (!item.grad.allFinite())
      throw NumericError("backward: non-finite gradient in parameter group " + item.name);
  return res;
}

}  // namespace crate
