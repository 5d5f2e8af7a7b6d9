#pragma once

#include "crate/common.hpp"

#include <string>

namespace crate {

// Attention block selection: subspace attention (shared query/key/value per
// head) or the conventional multi-head attention with separate projections.
enum class AttentionKind { Mssa, Mhsa };

// Second-block selection: one shrinkage-thresholding step against a learned
// dictionary, or a conventional two-layer GELU perceptron.
enum class MlpKind { Ista, Mlp };

struct ModelConfig {
  int num_layers = 4;  // L
  int model_dim = 64;  // d
  int num_heads = 4;   // K
  int head_dim = 16;   // p, with K*p == d

  int channels = 1;
  int height = 32;
  int width = 32;
  int patch_h = 8;
  int patch_w = 8;

  Scalar quant_eps = 1.0;  // quantization precision used by the rate objective
  Scalar sparsity = 0.1;   // lambda
  Scalar ista_step = 0.1;  // eta

  int num_classes = 3;

  AttentionKind attention = AttentionKind::Mssa;
  MlpKind mlp = MlpKind::Ista;
  int mlp_hidden = 256;  // used only by the Mlp variant

  int patches_x() const { return width / patch_w; }
  int patches_y() const { return height / patch_h; }
  int num_patches() const { return patches_x() * patches_y(); }  // N
  int num_tokens() const { return num_patches() + 1; }           // N+1
  int patch_dim() const { return channels * patch_h * patch_w; }

  void validate() const {
    auto require = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("invalid model config: " + what);
    };
    require(num_layers >= 0, "num_layers must be >= 0");
    require(model_dim > 0, "model_dim must be positive");
    require(num_heads > 0, "num_heads must be positive");
    require(head_dim > 0, "head_dim must be positive");
    require(num_heads * head_dim == model_dim, "num_heads * head_dim must equal model_dim");
    require(channels > 0 && height > 0 && width > 0, "image shape must be positive");
    require(patch_h > 0 && patch_w > 0, "patch shape must be positive");
    require(height % patch_h == 0, "patch_h must divide height");
    require(width % patch_w == 0, "patch_w must divide width");
    require(quant_eps > 0.0, "quant_eps must be positive");
    require(sparsity >= 0.0, "sparsity must be nonnegative");
    require(ista_step > 0.0, "ista_step must be positive");
    require(num_classes > 0, "num_classes must be positive");
    require(mlp != MlpKind::Mlp || mlp_hidden > 0, "mlp_hidden must be positive");
  }
};

inline std::string to_string(AttentionKind k) {
  return k == AttentionKind::Mssa ? "mssa" : "mhsa";
}

inline std::string to_string(MlpKind k) { return k == MlpKind::Ista ? "ista" : "mlp"; }

// Architecture names used by the CLI and the ablation matrix:
//   crate      = subspace attention + ISTA block
//   crate-mlp  = subspace attention + MLP block
//   crate-mhsa = standard attention + ISTA block
//   vit        = standard attention + MLP block
inline void apply_arch(ModelConfig& cfg, const std::string& arch) {
  if (arch == "crate") {
    cfg.attention = AttentionKind::Mssa;
    cfg.mlp = MlpKind::Ista;
  } else if (arch == "crate-mlp") {
    cfg.attention = AttentionKind::Mssa;
    cfg.mlp = MlpKind::Mlp;
  } else if (arch == "crate-mhsa") {
    cfg.attention = AttentionKind::Mhsa;
    cfg.mlp = MlpKind::Ista;
  } else if (arch == "vit") {
    cfg.attention = AttentionKind::Mhsa;
    cfg.mlp = MlpKind::Mlp;
  } else {
    throw ConfigError("unknown architecture '" + arch +
                      "' (expected crate, crate-mlp, crate-mhsa, or vit)");
  }
}

inline std::string arch_name(const ModelConfig& cfg) {
  if (cfg.attention == AttentionKind::Mssa)
    return cfg.mlp == MlpKind::Ista ? "crate" : "crate-mlp";
  return cfg.mlp == MlpKind::Ista ? "crate-mhsa" : "vit";
}

}  // namespace crate
