#pragma once

#include "crate/model.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace crate {

// Class-token attention over the N patch tokens of one head at one layer.
struct AttentionMap {
  Vec values;  // length N, nonnegative, sums to 1
  int layer = 0;  // 1-based
  int head = 0;   // 0-based
};

struct SegMask {
  std::vector<uint8_t> bits;
  std::string source;

  size_t count() const {
    return static_cast<size_t>(std::count(bits.begin(), bits.end(), uint8_t(1)));
  }
};

struct AffinityMatrix {
  Mat m;  // N x N, symmetric, thresholded
  Scalar tau = 0.15;
  std::vector<int> zeroed_tokens;  // zero-norm features, row/col forced to 0
};

struct MaskCutConfig {
  int num_objects = 3;  // n
  Scalar tau = 0.15;

  void validate() const {
    if (num_objects < 1) throw ConfigError("maskcut: n must be >= 1");
    if (tau < 0.0 || tau >= 1.0) throw ConfigError("maskcut: tau must be in [0,1)");
  }
};

struct IoUReport {
  std::vector<int> class_ids;
  std::vector<Scalar> per_class;  // best-head IoU per evaluated class
  std::vector<int> chosen_head;
  std::vector<int> skipped_classes;  // empty ground truth
  Scalar miou = 0.0;
};

struct NcutResult {
  std::vector<uint8_t> foreground;
  Scalar value = 0.0;
};

struct PatchBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive patch coordinates
};

struct MaskCutResult {
  std::vector<SegMask> masks;  // pairwise disjoint
  std::vector<PatchBox> boxes;
  std::vector<Scalar> ncut_values;
  bool early_stop = false;
};

// ---------------------------------------------------------------------------
// attention maps and coarse segmentation

// Attention between the class token and the patch tokens, computed on the
// same normalized tokens and with the same 1/sqrt(p) temperature the forward
// pass uses; the softmax support excludes the class token itself.
inline AttentionMap class_token_attention(const CrateModel& m, const ForwardTrace& trace,
                                          int layer, int head) {
  const auto& cfg = m.config;
  if (layer < 1 || layer > static_cast<int>(m.layers.size()))
    throw ConfigError("class_token_attention: layer out of range");
  if (head < 0 || head >= cfg.num_heads)
    throw ConfigError("class_token_attention: head out of range");
  const auto& lp = m.layers[static_cast<size_t>(layer - 1)];
  const TokenMatrix zn = layer_norm(trace.z[static_cast<size_t>(layer - 1)], lp.ln1.gamma,
                                    lp.ln1.beta);
  const int p = cfg.head_dim;
  Mat proj_q, proj_k;
  if (cfg.attention == AttentionKind::Mssa) {
    proj_q = proj_k = lp.subspaces[static_cast<size_t>(head)];
  } else {
    proj_q = lp.w_q.middleCols(static_cast<Index>(head) * p, p);
    proj_k = lp.w_k.middleCols(static_cast<Index>(head) * p, p);
  }
  const Vec q = proj_q.transpose() * zn.col(0);
  const Mat keys = proj_k.transpose() * zn.rightCols(zn.cols() - 1);
  Vec scores = (keys.transpose() * q) / std::sqrt(static_cast<Scalar>(p));
  const Scalar mx = scores.maxCoeff();
  AttentionMap map;
  map.values = (scores.array() - mx).exp();
  map.values /= map.values.sum();
  map.layer = layer;
  map.head = head;
  return map;
}

// Marks the ceil(P*N) largest entries true; ties go to the lower patch index.
inline SegMask attention_to_mask(const AttentionMap& map, Scalar top_fraction) {
  if (top_fraction <= 0.0 || top_fraction > 1.0)
    throw ConfigError("attention_to_mask: fraction must be in (0,1]");
  const Index n = map.values.size();
  // epsilon guards float noise in P*N without changing exact-integer products
  Index count = static_cast<Index>(
      std::ceil(top_fraction * static_cast<Scalar>(n) - 1e-9));
  count = std::clamp<Index>(count, 1, n);
  std::vector<Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return map.values[a] > map.values[b];
  });
  SegMask mask;
  mask.bits.assign(static_cast<size_t>(n), 0);
  for (Index i = 0; i < count; ++i) mask.bits[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
  mask.source = "attention L" + std::to_string(map.layer) + " H" + std::to_string(map.head);
  return mask;
}

inline Scalar mask_iou(const SegMask& a, const SegMask& b) {
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.bits.size(); ++i) {
    inter += (a.bits[i] && b.bits[i]) ? 1 : 0;
    uni += (a.bits[i] || b.bits[i]) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<Scalar>(inter) / static_cast<Scalar>(uni);
}

// Best-matched-head IoU per class, then the mean over evaluated classes.
// Classes with empty ground truth are skipped and flagged.
inline IoUReport miou(const std::vector<SegMask>& head_masks,
                      const std::vector<std::pair<int, SegMask>>& gt_per_class) {
  IoUReport rep;
  for (const auto& [class_id, gt] : gt_per_class) {
    if (gt.count() == 0) {
      rep.skipped_classes.push_back(class_id);
      continue;
    }
    Scalar best = -1.0;
    int best_head = -1;
    for (size_t k = 0; k < head_masks.size(); ++k) {
      const Scalar iou = mask_iou(head_masks[k], gt);
      if (iou > best) {
        best = iou;
        best_head = static_cast<int>(k);
      }
    }
    rep.class_ids.push_back(class_id);
    rep.per_class.push_back(best);
    rep.chosen_head.push_back(best_head);
  }
  if (!rep.per_class.empty())
    rep.miou = std::accumulate(rep.per_class.begin(), rep.per_class.end(), 0.0) /
               static_cast<Scalar>(rep.per_class.size());
  return rep;
}

// ---------------------------------------------------------------------------
// token features, affinity, spectral cuts

// Per-patch aggregated features at a layer: the stacked per-head projections
// [U_1^T z_i; ...; U_K^T z_i] (key projections for the standard-attention
// variant), taken on the same normalized tokens the layer's attention sees.
// Columns are patch tokens; the class token is excluded.
inline Mat token_features(const CrateModel& m, const ForwardTrace& trace, int layer) {
  const auto& cfg = m.config;
  if (layer < 1 || layer > static_cast<int>(m.layers.size()))
    throw ConfigError("token_features: layer out of range");
  const auto& lp = m.layers[static_cast<size_t>(layer - 1)];
  const TokenMatrix z =
      layer_norm(trace.z[static_cast<size_t>(layer - 1)], lp.ln1.gamma, lp.ln1.beta);
  const Mat patches = z.rightCols(z.cols() - 1);
  const int p = cfg.head_dim, K = cfg.num_heads;
  Mat features(static_cast<Index>(K) * p, patches.cols());
  for (int k = 0; k < K; ++k) {
    const Mat proj = cfg.attention == AttentionKind::Mssa
                         ? lp.subspaces[static_cast<size_t>(k)]
                         : Mat(lp.w_k.middleCols(static_cast<Index>(k) * p, p));
    features.middleRows(static_cast<Index>(k) * p, p).noalias() = proj.transpose() * patches;
  }
  return features;
}

// Token affinity M_ij = <f_i, f_j> with optional per-token unit normalization
// (cosine affinity, the default); entries below tau are set to exactly 0.
inline AffinityMatrix affinity_matrix(const CrateModel& m, const ForwardTrace& trace,
                                      int layer, Scalar tau, bool normalize = true) {
  Mat f = token_features(m, trace, layer);
  AffinityMatrix out;
  out.tau = tau;
  if (normalize) {
    for (Index j = 0; j < f.cols(); ++j) {
      const Scalar nrm = f.col(j).norm();
      if (nrm < 1e-12) {
        out.zeroed_tokens.push_back(static_cast<int>(j));
        f.col(j).setZero();
      } else {
        f.col(j) /= nrm;
      }
    }
  }
  Mat gram = f.transpose() * f;
  gram = ((gram + gram.transpose()) * 0.5).eval();
  out.m = (gram.array() < tau).select(0.0, gram);
  for (int j : out.zeroed_tokens) {
    out.m.row(j).setZero();
    out.m.col(j).setZero();
  }
  return out;
}

namespace detail {

inline Scalar ncut_objective(const Mat& m, const Vec& degrees,
                             const std::vector<uint8_t>& side_a,
                             const std::vector<int>& nodes) {
  Scalar cut = 0.0, assoc_a = 0.0, assoc_b = 0.0;
  for (size_t ii = 0; ii < nodes.size(); ++ii) {
    if (side_a[ii])
      assoc_a += degrees[static_cast<Index>(ii)];
    else
      assoc_b += degrees[static_cast<Index>(ii)];
    for (size_t jj = ii + 1; jj < nodes.size(); ++jj)
      if (side_a[ii] != side_a[jj]) cut += m(nodes[ii], nodes[jj]);
  }
  if (assoc_a <= 0.0 || assoc_b <= 0.0) return std::numeric_limits<Scalar>::infinity();
  return cut / assoc_a + cut / assoc_b;
}

}  // namespace detail

// Two-way normalized cut. The relaxation solves (D - M) y = mu D y through
// the symmetric normalized Laplacian; the returned bipartition is the best
// threshold of the second eigenvector over all sweep positions. Tokens with
// no positive off-diagonal weight are assigned to the background. Foreground
// is the side holding the largest-magnitude eigenvector entry (on a magnitude
// tie, the smaller side).
inline NcutResult ncut_bipartition(const AffinityMatrix& affinity) {
  const Mat& m = affinity.m;
  const Index n = m.rows();
  if (m.cols() != n) throw ConfigError("ncut: affinity must be square");
  std::vector<int> nodes;  // tokens with positive off-diagonal degree
  for (Index i = 0; i < n; ++i) {
    Scalar off = m.row(i).sum() - m(i, i);
    if (off > 1e-12) nodes.push_back(static_cast<int>(i));
  }
  if (nodes.size() < 2)
    throw ConfigError("ncut: affinity has no positive off-diagonal entries");

  const Index a = static_cast<Index>(nodes.size());
  Mat sub(a, a);
  for (Index i = 0; i < a; ++i)
    for (Index j = 0; j < a; ++j) sub(i, j) = m(nodes[static_cast<size_t>(i)], nodes[static_cast<size_t>(j)]);
  Vec degrees = sub.rowwise().sum();
  Vec dinv_sqrt = degrees.array().rsqrt();
  Mat lsym = Mat::Identity(a, a) - (dinv_sqrt.asDiagonal() * sub * dinv_sqrt.asDiagonal());
  lsym = ((lsym + lsym.transpose()) * 0.5).eval();
  Eigen::SelfAdjointEigenSolver<Mat> eig(lsym);
  if (eig.info() != Eigen::Success) throw NumericError("ncut: eigensolver failed");
  Vec y = dinv_sqrt.asDiagonal() * eig.eigenvectors().col(1);

  // sweep every split position of the sorted eigenvector
  std::vector<Index> order(static_cast<size_t>(a));
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(), [&](Index l, Index r) { return y[l] < y[r]; });
  Scalar best_value = std::numeric_limits<Scalar>::infinity();
  std::vector<uint8_t> best_side;
  std::vector<uint8_t> side(static_cast<size_t>(a), 0);
  for (Index cut_pos = 0; cut_pos + 1 < a; ++cut_pos) {
    side[static_cast<size_t>(order[static_cast<size_t>(cut_pos)])] = 1;
    if (y[order[static_cast<size_t>(cut_pos)]] == y[order[static_cast<size_t>(cut_pos + 1)]])
      continue;  // not a valid threshold between equal values
    const Scalar value = detail::ncut_objective(m, degrees, side, nodes);
    if (value < best_value) {
      best_value = value;
      best_side = side;
    }
  }
  if (best_side.empty()) {
    // all eigenvector entries equal; fall back to the first sweep position
    side.assign(static_cast<size_t>(a), 0);
    side[static_cast<size_t>(order[0])] = 1;
    best_side = side;
    best_value = detail::ncut_objective(m, degrees, best_side, nodes);
  }

  // foreground side: the one containing the largest |y| entry
  Index max_idx = 0;
  Scalar max_mag = -1.0;
  for (Index i = 0; i < a; ++i) {
    if (std::abs(y[i]) > max_mag + 1e-15) {
      max_mag = std::abs(y[i]);
      max_idx = i;
    } else if (std::abs(y[i]) >= max_mag - 1e-15 &&
               best_side[static_cast<size_t>(i)] != best_side[static_cast<size_t>(max_idx)]) {
      // magnitude tie across sides: prefer the smaller side
      size_t size_i = 0, size_m = 0;
      for (size_t s = 0; s < best_side.size(); ++s) {
        size_i += best_side[s] == best_side[static_cast<size_t>(i)];
        size_m += best_side[s] == best_side[static_cast<size_t>(max_idx)];
      }
      if (size_i < size_m) max_idx = i;
    }
  }
  const uint8_t fg_label = best_side[static_cast<size_t>(max_idx)];
  NcutResult res;
  res.value = best_value;
  res.foreground.assign(static_cast<size_t>(n), 0);
  for (size_t ii = 0; ii < nodes.size(); ++ii)
    if (best_side[ii] == fg_label) res.foreground[static_cast<size_t>(nodes[ii])] = 1;
  return res;
}

inline PatchBox tight_box(const std::vector<uint8_t>& bits, int grid_w) {
  PatchBox box{1 << 30, 1 << 30, -1, -1};
  for (size_t i = 0; i < bits.size(); ++i) {
    if (!bits[i]) continue;
    const int y = static_cast<int>(i) / grid_w;
    const int x = static_cast<int>(i) % grid_w;
    box.x0 = std::min(box.x0, x);
    box.y0 = std::min(box.y0, y);
    box.x1 = std::max(box.x1, x);
    box.y1 = std::max(box.y1, y);
  }
  return box;
}

// Iterated normalized cuts: after each cut the claimed tokens' rows and
// columns are zeroed before the next round, so masks are pairwise disjoint.
// Stops early (flagged, not an error) once no positive off-diagonal remains.
inline MaskCutResult maskcut_on_affinity(AffinityMatrix affinity, const MaskCutConfig& cfg,
                                         int grid_w) {
  cfg.validate();
  MaskCutResult res;
  for (int round = 0; round < cfg.num_objects; ++round) {
    bool has_edge = false;
    for (Index i = 0; i < affinity.m.rows() && !has_edge; ++i)
      for (Index j = i + 1; j < affinity.m.cols(); ++j)
        if (affinity.m(i, j) > 1e-12) {
          has_edge = true;
          break;
        }
    if (!has_edge) {
      res.early_stop = true;
      break;
    }
    NcutResult cut = ncut_bipartition(affinity);
    SegMask mask;
    mask.bits = cut.foreground;
    mask.source = "maskcut round " + std::to_string(round);
    for (size_t i = 0; i < cut.foreground.size(); ++i) {
      if (!cut.foreground[i]) continue;
      affinity.m.row(static_cast<Index>(i)).setZero();
      affinity.m.col(static_cast<Index>(i)).setZero();
    }
    res.boxes.push_back(tight_box(mask.bits, grid_w));
    res.masks.push_back(std::move(mask));
    res.ncut_values.push_back(cut.value);
  }
  return res;
}

inline MaskCutResult maskcut(const CrateModel& m, const ForwardTrace& trace, int layer,
                             const MaskCutConfig& cfg) {
  return maskcut_on_affinity(affinity_matrix(m, trace, layer, cfg.tau), cfg,
                             m.config.patches_x());
}

// ---------------------------------------------------------------------------
// PCA feature visualization

// Eigenpairs of a symmetric matrix, the `k` largest, eigenvalues descending.
// Eigenvector signs are fixed so each vector's largest-magnitude entry is
// positive.
inline std::pair<Vec, Mat> sym_top_eigenpairs(const Mat& c, int k) {
  if (k > c.rows()) throw ConfigError("sym_top_eigenpairs: k exceeds matrix size");
  Eigen::SelfAdjointEigenSolver<Mat> eig(c);
  if (eig.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  const Index n = c.rows();
  Vec values(k);
  Mat vectors(n, k);
  for (int i = 0; i < k; ++i) {
    values[i] = eig.eigenvalues()[n - 1 - i];
    Vec v = eig.eigenvectors().col(n - 1 - i);
    Index mi = 0;
    v.cwiseAbs().maxCoeff(&mi);
    if (v[mi] < 0) v = -v;
    vectors.col(i) = v;
  }
  return {std::move(values), std::move(vectors)};
}

struct PcaVis {
  std::vector<Mat> rgb;                    // per image, 3 x N; unselected tokens are 0
  std::vector<std::vector<uint8_t>> kept;  // per image foreground selection
  Vec first_direction;                     // selection direction u0
  Mat component_directions;                // D_f x 3: u1, u2, u3
};

// First principal direction selects foreground tokens by hard threshold;
// the next three principal directions of the kept tokens become RGB. Features
// are rescaled to unit per-token RMS first so the threshold has a fixed scale;
// u0 is oriented so the largest-magnitude projection is positive.
inline PcaVis pca_patch_visualization(const std::vector<Mat>& features_per_image,
                                      Scalar threshold = 0.5) {
  if (features_per_image.size() < 2)
    throw ConfigError("pca_patch_visualization: need at least 2 images of one class");
  const Index dim = features_per_image.front().rows();
  Index total = 0;
  for (const auto& f : features_per_image) {
    if (f.rows() != dim) throw ConfigError("pca_patch_visualization: feature dims differ");
    total += f.cols();
  }
  Mat stacked(dim, total);
  Index at = 0;
  for (const auto& f : features_per_image) {
    stacked.middleCols(at, f.cols()) = f;
    at += f.cols();
  }
  const Scalar fro = stacked.norm();
  if (fro < 1e-300) throw NumericError("pca_patch_visualization: all features are zero");
  stacked *= std::sqrt(static_cast<Scalar>(total)) / fro;  // unit mean squared column norm

  auto [val0, vec0] = sym_top_eigenpairs(stacked * stacked.transpose(), 1);
  Vec u0 = vec0.col(0);
  Vec proj = stacked.transpose() * u0;
  Index mi = 0;
  proj.cwiseAbs().maxCoeff(&mi);
  if (proj[mi] < 0) {
    u0 = -u0;
    proj = -proj;
  }

  std::vector<uint8_t> kept_flat(static_cast<size_t>(total), 0);
  Index kept_count = 0;
  for (Index i = 0; i < total; ++i)
    if (proj[i] >= threshold) {
      kept_flat[static_cast<size_t>(i)] = 1;
      ++kept_count;
    }
  if (kept_count < 3) throw NumericError("foreground selection empty");

  Mat kept_features(dim, kept_count);
  Index kc = 0;
  for (Index i = 0; i < total; ++i)
    if (kept_flat[static_cast<size_t>(i)]) kept_features.col(kc++) = stacked.col(i);
  auto [vals, vecs] = sym_top_eigenpairs(kept_features * kept_features.transpose(), 3);

  PcaVis vis;
  vis.first_direction = u0;
  vis.component_directions = vecs;
  at = 0;
  for (const auto& f : features_per_image) {
    const Index n = f.cols();
    Mat rgb = Mat::Zero(3, n);
    std::vector<uint8_t> kept(static_cast<size_t>(n), 0);
    for (Index i = 0; i < n; ++i) {
      if (!kept_flat[static_cast<size_t>(at + i)]) continue;
      kept[static_cast<size_t>(i)] = 1;
      rgb.col(i) = vecs.transpose() * stacked.col(at + i);
    }
    // min-max per channel over this image's kept tokens
    for (int c = 0; c < 3; ++c) {
      Scalar lo = std::numeric_limits<Scalar>::infinity(), hi = -lo;
      for (Index i = 0; i < n; ++i)
        if (kept[static_cast<size_t>(i)]) {
          lo = std::min(lo, rgb(c, i));
          hi = std::max(hi, rgb(c, i));
        }
      for (Index i = 0; i < n; ++i) {
        if (!kept[static_cast<size_t>(i)]) continue;
        rgb(c, i) = (hi - lo) < 1e-12 ? 0.5 : (rgb(c, i) - lo) / (hi - lo);
      }
    }
    vis.rgb.push_back(std::move(rgb));
    vis.kept.push_back(std::move(kept));
    at += n;
  }
  return vis;
}

// ---------------------------------------------------------------------------
// simplified single-class average precision

struct Detections {
  std::vector<SegMask> preds;
  std::vector<Scalar> scores;
  std::vector<SegMask> gts;
};

struct ApSummary {
  Scalar ap50 = 0.0;
  Scalar ap75 = 0.0;
  Scalar ap = 0.0;  // mean over IoU thresholds 0.50:0.05:0.95
  bool defined = false;
};

// Greedy matching by descending score (ties: image order, then prediction
// order); a prediction matches the unmatched ground truth of highest IoU in
// its image when that IoU reaches the threshold. AP is the area under the
// monotone precision envelope of the PR curve.
inline Scalar average_precision(const std::vector<Detections>& images, Scalar iou_thr,
                                bool* has_gt = nullptr) {
  size_t total_gt = 0;
  for (const auto& im : images) total_gt += im.gts.size();
  if (has_gt) *has_gt = total_gt > 0;
  if (total_gt == 0) return std::numeric_limits<Scalar>::quiet_NaN();

  struct Pred {
    size_t image, index;
    Scalar score;
  };
  std::vector<Pred> preds;
  for (size_t i = 0; i < images.size(); ++i) {
    if (images[i].preds.size() != images[i].scores.size())
      throw ConfigError("average_precision: scores/preds size mismatch");
    for (size_t j = 0; j < images[i].preds.size(); ++j) {
      if (!std::isfinite(images[i].scores[j]))
        throw ConfigError("average_precision: non-finite score");
      preds.push_back({i, j, images[i].scores[j]});
    }
  }
  std::stable_sort(preds.begin(), preds.end(),
                   [](const Pred& a, const Pred& b) { return a.score > b.score; });

  std::vector<std::vector<uint8_t>> matched(images.size());
  for (size_t i = 0; i < images.size(); ++i) matched[i].assign(images[i].gts.size(), 0);

  std::vector<Scalar> precision, recall;
  size_t tp = 0, fp = 0;
  for (const auto& pr : preds) {
    const auto& im = images[pr.image];
    Scalar best_iou = 0.0;
    int best_gt = -1;
    for (size_t g = 0; g < im.gts.size(); ++g) {
      if (matched[pr.image][g]) continue;
      const Scalar iou = mask_iou(im.preds[pr.index], im.gts[g]);
      if (iou > best_iou) {
        best_iou = iou;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0 && best_iou >= iou_thr) {
      matched[pr.image][static_cast<size_t>(best_gt)] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<Scalar>(tp) / static_cast<Scalar>(tp + fp));
    recall.push_back(static_cast<Scalar>(tp) / static_cast<Scalar>(total_gt));
  }

  // monotone precision envelope, then sum recall increments
  for (size_t i = precision.size(); i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  Scalar ap = 0.0, prev_recall = 0.0;
  for (size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

inline ApSummary ap_summary(const std::vector<Detections>& images) {
  ApSummary s;
  bool has_gt = false;
  s.ap50 = average_precision(images, 0.50, &has_gt);
  s.defined = has_gt;
  if (!has_gt) return s;
  s.ap75 = average_precision(images, 0.75);
  Scalar sum = 0.0;
  for (int i = 0; i < 10; ++i) sum += average_precision(images, 0.50 + 0.05 * i);
  s.ap = sum / 10.0;
  return s;
}

}  // namespace crate
