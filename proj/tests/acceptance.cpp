// Acceptance suite: runs every gate criterion end to end and prints one
// PASS/FAIL line per criterion. Returns the number of failed criteria.
//
// The desk-scale experiment (criteria 8 and 9) trains the subspace-attention
// model and the standard-transformer ablation on the same synthetic data and
// compares their emergent segmentation behavior.

#include "crate/crate.hpp"

#include "oracles.hpp"

#include <chrono>
#include <filesystem>
#include <iostream>

using namespace crate;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;
nlohmann::json archive;

void report(int number, const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "[PASS] " : "[FAIL] ") << number << ". " << name << ": " << detail
            << "\n";
  if (!pass) ++failures;
  archive["criteria"].push_back(
      {{"number", number}, {"name", name}, {"pass", pass}, {"detail", detail}});
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.model_dim = 8;
  cfg.num_heads = 2;
  cfg.head_dim = 4;
  cfg.channels = 1;
  cfg.height = 4;
  cfg.width = 4;
  cfg.patch_h = 2;
  cfg.patch_w = 2;
  cfg.num_classes = 3;
  return cfg;
}

// --- criterion 1: full-model gradients against central finite differences --

void criterion_gradients() {
  const auto start = Clock::now();
  ModelConfig cfg = tiny_config();  // d=8, p=4, K=2, L=2, N=4, 3 classes
  CrateModel m = init_model(cfg, 11);
  Rng rng(5);
  std::vector<Example> batch;
  for (int b = 0; b < 2; ++b)
    batch.push_back({uniform_matrix(cfg.patch_dim(), cfg.num_patches(), 0.0, 1.0, rng), b % 3});
  auto loss_at = [&](const CrateModel& model) {
    Scalar total = 0.0;
    for (const auto& ex : batch)
      total += cross_entropy(model_forward(ex.patches, model).logits, ex.label);
    return total / static_cast<Scalar>(batch.size());
  };
  BackwardResult res = backward(m, batch);
  const Scalar h = 1e-5;
  Scalar worst = 0.0;
  std::string worst_group;
  size_t gi = 0;
  visit_params(m, [&](const std::string& name, Mat& param) {
    const Mat& grad = res.grads[gi++].grad;
    Mat fd(param.rows(), param.cols());
    for (Index c = 0; c < param.cols(); ++c)
      for (Index r = 0; r < param.rows(); ++r) {
        const Scalar orig = param(r, c);
        param(r, c) = orig + h;
        const Scalar lp = loss_at(m);
        param(r, c) = orig - h;
        const Scalar lm = loss_at(m);
        param(r, c) = orig;
        fd(r, c) = (lp - lm) / (2.0 * h);
      }
    const Scalar rel = (grad - fd).norm() / std::max(1e-12, fd.norm());
    if (rel > worst) {
      worst = rel;
      worst_group = name;
    }
  });
  const double seconds = std::chrono::duration<double>(Clock::now() - start).count();
  archive["gradient_check"] = {{"worst_rel_err", worst}, {"seconds", seconds}};
  report(1, "gradient correctness", worst < 1e-4 && seconds < 60.0,
         "worst group rel err " + fmt(worst) + " (" + worst_group + "), " + fmt(seconds) + "s");
}

// --- criterion 2: objective gradient and the exact compression step --------

void criterion_objective() {
  Scalar worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(mix_seed(99, trial));
    const int d = 5 + static_cast<int>(mix_seed(5, trial) % 4);
    const int p = 2 + static_cast<int>(mix_seed(6, trial) % 2);
    const int k = 1 + static_cast<int>(mix_seed(8, trial) % 3);
    const int n = 3 + static_cast<int>(mix_seed(9, trial) % 5);
    std::vector<Mat> u;
    for (int i = 0; i < k; ++i) u.push_back(gaussian_matrix(d, p, 0.7, rng));
    Mat z = gaussian_matrix(d, n, 1.0, rng);
    Mat g = grad_coding_rate_subspaces(z, u, 1.0);
    Mat fd(d, n);
    const Scalar h = 1e-5;
    for (Index c = 0; c < n; ++c)
      for (Index r = 0; r < d; ++r) {
        Mat zp = z, zm = z;
        zp(r, c) += h;
        zm(r, c) -= h;
        fd(r, c) =
            (coding_rate_subspaces(zp, u, 1.0) - coding_rate_subspaces(zm, u, 1.0)) / (2 * h);
      }
    worst = std::max(worst, (g - fd).norm() / fd.norm());
  }

  int monotone = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(mix_seed(7, trial));
    std::vector<Mat> u{oracle::random_orthonormal(6, 2, rng),
                       oracle::random_orthonormal(6, 2, rng)};
    Mat z = gaussian_matrix(6, 5, 1.0, rng);
    const Scalar before = coding_rate_subspaces(z, u, 1.0);
    const Scalar after =
        coding_rate_subspaces(exact_compression_step(z, u, 1.0, 1e-3), u, 1.0);
    monotone += after < before ? 1 : 0;
  }
  archive["objective"] = {{"worst_rel_err", worst}, {"monotone_trials", monotone}};
  report(2, "objective correctness", worst < 1e-5 && monotone == 100,
         "grad rel err " + fmt(worst) + ", rate decreased in " + std::to_string(monotone) +
             "/100 steps");
}

// --- criterion 3: the sparsification block is an exact prox step -----------

void criterion_ista() {
  Scalar worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(mix_seed(14, trial));
    const int d = 4 + static_cast<int>(mix_seed(2, trial) % 5);
    const int n = 2 + static_cast<int>(mix_seed(3, trial) % 6);
    Mat dict = oracle::random_orthonormal(d, d, rng);
    Mat z = uniform_matrix(d, n, -1.0, 1.0, rng);
    Mat got = ista_forward(z, dict, 0.1, 0.1);
    Mat expected = oracle::nonneg_lasso_prox_step(z, dict, 0.1, 0.1);
    worst = std::max(worst, (got - expected).cwiseAbs().maxCoeff());
  }
  archive["ista_identity_max_err"] = worst;
  report(3, "ISTA prox identity", worst < 1e-12,
         "max deviation from the prox oracle " + fmt(worst) + " over 100 instances");
}

// --- criterion 4: attention operator fidelity -------------------------------

void criterion_attention() {
  Scalar worst = 0.0, worst_row = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    Rng rng(mix_seed(21, trial));
    ModelConfig cfg = tiny_config();
    CrateModel m = init_model(cfg, mix_seed(22, trial));
    Mat z = uniform_matrix(8, 5, -1.5, 1.5, rng);
    auto [out, attn] = mssa_forward(z, m.layers[0], cfg);
    Mat expected = oracle::subspace_attention(z, m.layers[0].subspaces, m.layers[0].w_out,
                                              m.layers[0].b_out);
    worst = std::max(worst, (out - expected).cwiseAbs().maxCoeff());
    for (const auto& a : attn)
      for (Index i = 0; i < a.rows(); ++i)
        worst_row = std::max(worst_row, std::abs(a.row(i).sum() - 1.0));
  }
  archive["mssa"] = {{"max_err", worst}, {"max_row_sum_err", worst_row}};
  report(4, "attention fidelity", worst < 1e-10 && worst_row < 1e-6,
         "loop-oracle deviation " + fmt(worst) + ", row-sum deviation " + fmt(worst_row));
}

// --- criterion 5: attention approximates the rate gradient ------------------

void criterion_diagnostic() {
  int positive = 0;
  Scalar mean_cosine = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(mix_seed(42, trial));
    std::vector<Mat> u;
    for (int k = 0; k < 4; ++k) u.push_back(oracle::random_orthonormal(32, 8, rng));
    Mat z = gaussian_matrix(32, 17, 1.0, rng);  // 16 patch tokens plus the class token
    auto diag = mssa_gradient_diagnostic(z, u, 1.0);
    positive += diag.cosine > 0.0 ? 1 : 0;
    mean_cosine += diag.cosine / 100.0;
  }
  archive["gradient_diagnostic"] = {{"positive_trials", positive},
                                    {"mean_cosine", mean_cosine}};
  report(5, "attention-gradient alignment", positive >= 90,
         "cosine positive in " + std::to_string(positive) + "/100 trials, mean cosine " +
             fmt(mean_cosine));
}

// --- criterion 6: spectral cut against exhaustive search --------------------

void criterion_ncut() {
  int matched = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Rng rng(mix_seed(74, trial));
    const int n = 5 + static_cast<int>(mix_seed(5, trial) % 4);
    const int split = 2 + static_cast<int>(mix_seed(6, trial) % (n - 3));
    std::uniform_real_distribution<Scalar> intra(0.6, 1.0), inter(0.0, 0.05);
    Mat m = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        const bool same = (i < split) == (j < split);
        m(i, j) = m(j, i) = same ? intra(rng) : inter(rng);
      }
    NcutResult cut = ncut_bipartition({m, 0.0, {}});
    auto [best, value] = oracle::brute_force_ncut(m);
    matched += std::abs(cut.value - value) < 1e-9 ? 1 : 0;
  }

  Mat blocks = Mat::Zero(9, 9);
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 9; ++j)
      if (i != j && i / 3 == j / 3) blocks(i, j) = 1.0;
  MaskCutConfig mc;  // n = 3
  MaskCutResult cuts = maskcut_on_affinity({blocks, 0.0, {}}, mc, 3);
  bool planted = cuts.masks.size() == 3;
  std::vector<int> claimed(9, 0);
  for (const auto& mask : cuts.masks) {
    planted = planted && mask.count() == 3;
    int block = -1;
    for (int i = 0; i < 9; ++i)
      if (mask.bits[i]) {
        if (block < 0) block = i / 3;
        planted = planted && i / 3 == block;
        claimed[i] += 1;
      }
  }
  for (int i = 0; i < 9; ++i) planted = planted && claimed[i] == 1;
  archive["ncut"] = {{"brute_force_matches", matched}, {"planted_blocks_recovered", planted}};
  report(6, "normalized-cut oracle", matched == 50 && planted,
         std::to_string(matched) + "/50 brute-force matches; 3 planted blocks " +
             (planted ? "recovered" : "missed"));
}

// --- criterion 7: segmentation metric arithmetic ----------------------------

void criterion_miou_arithmetic() {
  SegMask gt, pred;
  gt.bits = {1, 1, 1, 1, 0, 0, 0, 0};
  pred.bits = {1, 1, 0, 0, 1, 1, 0, 0};
  IoUReport rep = miou({pred}, {{0, gt}});
  const bool fixture_ok = std::abs(rep.miou - 2.0 / 6.0) < 1e-9;

  bool cardinality_ok = true;
  for (int n = 1; n <= 64 && cardinality_ok; ++n) {
    Rng rng(mix_seed(31, n));
    AttentionMap map;
    map.values = uniform_matrix(n, 1, 0.0, 1.0, rng).col(0);
    map.values /= map.values.sum();
    const auto expected = static_cast<size_t>(std::ceil(0.6 * n - 1e-9));
    cardinality_ok = attention_to_mask(map, 0.6).count() == std::max<size_t>(1, expected);
  }
  archive["miou_fixture"] = rep.miou;
  report(7, "mIoU arithmetic", fixture_ok && cardinality_ok,
         "fixture IoU " + fmt(rep.miou) + ", mask cardinality exact for N=1..64 at P=0.6");
}

// --- criteria 8 and 9: desk-scale emergence ---------------------------------

struct EmergenceEval {
  Scalar trained = 0.0, untrained = 0.0, random_baseline = 0.0;
};

// One best head per class, selected over the evaluation set (the protocol the
// coarse-segmentation figure uses), on masks sized to each image's ground
// truth patch count.
Scalar fixed_head_miou(const std::vector<std::vector<SegMask>>& masks_per_image,
                       const std::vector<Sample>& samples, int heads, int classes) {
  std::vector<std::vector<Scalar>> head_class(static_cast<size_t>(heads),
                                              std::vector<Scalar>(static_cast<size_t>(classes), 0.0));
  std::vector<int> class_count(static_cast<size_t>(classes), 0);
  for (size_t i = 0; i < samples.size(); ++i) {
    SegMask gt;
    gt.bits = samples[i].patch_gt;
    class_count[static_cast<size_t>(samples[i].label)] += 1;
    for (int k = 0; k < heads; ++k)
      head_class[static_cast<size_t>(k)][static_cast<size_t>(samples[i].label)] +=
          mask_iou(masks_per_image[i][static_cast<size_t>(k)], gt);
  }
  Scalar total = 0.0;
  int evaluated = 0;
  for (int c = 0; c < classes; ++c) {
    if (class_count[static_cast<size_t>(c)] == 0) continue;
    Scalar best = 0.0;
    for (int k = 0; k < heads; ++k)
      best = std::max(best, head_class[static_cast<size_t>(k)][static_cast<size_t>(c)] /
                                class_count[static_cast<size_t>(c)]);
    total += best;
    ++evaluated;
  }
  return total / static_cast<Scalar>(evaluated);
}

SegMask top_count_mask(const Vec& values, size_t count) {
  std::vector<Index> order(static_cast<size_t>(values.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return values[a] > values[b]; });
  SegMask mask;
  mask.bits.assign(static_cast<size_t>(values.size()), 0);
  for (size_t i = 0; i < count && i < order.size(); ++i)
    mask.bits[static_cast<size_t>(order[i])] = 1;
  return mask;
}

std::vector<std::vector<SegMask>> attention_masks(const CrateModel& m,
                                                  const std::vector<Sample>& samples,
                                                  int layer) {
  std::vector<std::vector<SegMask>> out;
  for (const auto& s : samples) {
    auto res = model_forward(s.image, m, true);
    std::vector<SegMask> heads;
    const size_t gt_count =
        static_cast<size_t>(std::count(s.patch_gt.begin(), s.patch_gt.end(), uint8_t(1)));
    for (int k = 0; k < m.config.num_heads; ++k)
      heads.push_back(
          top_count_mask(class_token_attention(m, *res.trace, layer, k).values, gt_count));
    out.push_back(std::move(heads));
  }
  return out;
}

std::vector<std::vector<SegMask>> random_masks(const std::vector<Sample>& samples, int heads,
                                               int patches, uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<SegMask>> out;
  for (const auto& s : samples) {
    const size_t gt_count =
        static_cast<size_t>(std::count(s.patch_gt.begin(), s.patch_gt.end(), uint8_t(1)));
    std::vector<SegMask> hm;
    for (int k = 0; k < heads; ++k) {
      std::vector<int> idx(static_cast<size_t>(patches));
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng);
      SegMask mask;
      mask.bits.assign(static_cast<size_t>(patches), 0);
      for (size_t i = 0; i < gt_count; ++i) mask.bits[static_cast<size_t>(idx[i])] = 1;
      hm.push_back(std::move(mask));
    }
    out.push_back(std::move(hm));
  }
  return out;
}

void criteria_desk_scale(const std::string& out_dir) {
  // pinned desk experiment: 32x32 grayscale, patch 8, 3 classes
  SynthDataConfig data_cfg;
  data_cfg.seed = 1;
  auto train_set = generate_dataset(data_cfg, 2000);
  data_cfg.seed = 2;
  auto test_set = generate_dataset(data_cfg, 500);

  ModelConfig cfg;  // defaults: L=4, d=64, K=4, p=16, patch 8
  CrateModel untrained = init_model(cfg, 0);
  // round-trip the untrained model through the checkpoint format
  const std::string untrained_path = out_dir + "/untrained.cr8w";
  save_checkpoint(untrained, untrained_path);
  CrateModel untrained_ckpt = load_checkpoint(untrained_path);

  OptimizerConfig opt;  // Lion, lr 5e-4, wd 0.01, batch 64, 20 epochs
  const auto start = Clock::now();
  TrainState crate_state = make_train_state(untrained_ckpt, 0);
  train(crate_state, train_set, opt);
  const double train_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  const Scalar accuracy = evaluate_accuracy(crate_state.model, test_set);

  ModelConfig vit_cfg = cfg;
  apply_arch(vit_cfg, "vit");
  TrainState vit_state = make_train_state(init_model(vit_cfg, 0), 0);
  train(vit_state, train_set, opt);
  const Scalar vit_accuracy = evaluate_accuracy(vit_state.model, test_set);

  const std::vector<Sample> eval(test_set.begin(), test_set.begin() + 200);
  const int last_layer = cfg.num_layers;
  EmergenceEval miou_eval;
  miou_eval.trained = fixed_head_miou(attention_masks(crate_state.model, eval, last_layer),
                                      eval, cfg.num_heads, 3);
  miou_eval.untrained = fixed_head_miou(attention_masks(untrained_ckpt, eval, last_layer), eval,
                                        cfg.num_heads, 3);
  miou_eval.random_baseline =
      fixed_head_miou(random_masks(eval, cfg.num_heads, cfg.num_patches(), 99), eval,
                      cfg.num_heads, 3);
  const Scalar vit_miou = fixed_head_miou(attention_masks(vit_state.model, eval, last_layer),
                                          eval, vit_cfg.num_heads, 3);

  const bool pass8 = accuracy >= 0.85 && train_seconds < 900.0 &&
                     miou_eval.trained >= miou_eval.untrained + 0.10 &&
                     miou_eval.trained >= miou_eval.random_baseline + 0.10 &&
                     vit_miou < miou_eval.trained;
  archive["desk"] = {{"accuracy", accuracy},
                     {"vit_accuracy", vit_accuracy},
                     {"train_seconds", train_seconds},
                     {"miou_trained", miou_eval.trained},
                     {"miou_untrained", miou_eval.untrained},
                     {"miou_random", miou_eval.random_baseline},
                     {"miou_vit", vit_miou},
                     {"eval_layer", last_layer}};
  report(8, "desk-scale emergence", pass8,
         "acc " + fmt(accuracy) + " in " + fmt(train_seconds) + "s; mIoU trained " +
             fmt(miou_eval.trained) + " vs untrained " + fmt(miou_eval.untrained) +
             " vs random " + fmt(miou_eval.random_baseline) + "; standard-transformer mIoU " +
             fmt(vit_miou));

  // criterion 9: object-discovery quality per layer
  std::vector<Scalar> ap_by_layer;
  for (int layer = 1; layer <= cfg.num_layers; ++layer) {
    std::vector<Detections> dets;
    for (const auto& s : eval) {
      auto res = model_forward(s.image, crate_state.model, true);
      MaskCutConfig mc;  // n = 3, tau = 0.15
      auto cuts = maskcut(crate_state.model, *res.trace, layer, mc);
      Detections d;
      for (size_t i = 0; i < cuts.masks.size(); ++i) {
        d.preds.push_back(cuts.masks[i]);
        d.scores.push_back(-cuts.ncut_values[i]);
      }
      SegMask gt;
      gt.bits = s.patch_gt;
      d.gts.push_back(gt);
      dets.push_back(std::move(d));
    }
    ap_by_layer.push_back(average_precision(dets, 0.5));
  }
  int best_layer = 1;
  for (int layer = 2; layer <= cfg.num_layers; ++layer)
    if (ap_by_layer[static_cast<size_t>(layer - 1)] >
        ap_by_layer[static_cast<size_t>(best_layer - 1)])
      best_layer = layer;
  std::string detail = "AP@0.5 by layer:";
  for (size_t i = 0; i < ap_by_layer.size(); ++i)
    detail += " L" + std::to_string(i + 1) + "=" + fmt(ap_by_layer[i]);
  detail += "; max at layer " + std::to_string(best_layer) +
            (best_layer * 2 >= cfg.num_layers ? " (>= L/2)" : " (< L/2)");
  archive["layer_depth"] = {{"ap50_by_layer", ap_by_layer}, {"best_layer", best_layer}};
  report(9, "layer-depth trend", best_layer != 1, detail);
}

// --- criterion 10: persistence round trip and run determinism ---------------

void criterion_determinism(const std::string& out_dir) {
  ModelConfig cfg = tiny_config();
  CrateModel m = init_model(cfg, 101);
  const std::string p1 = out_dir + "/det_a.cr8w";
  const std::string p2 = out_dir + "/det_b.cr8w";
  save_checkpoint(m, p1);
  CrateModel loaded = load_checkpoint(p1);
  save_checkpoint(loaded, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  const bool roundtrip = !b1.empty() && b1 == b2;

  // two identically seeded runs must produce identical metrics files
  SynthDataConfig data_cfg;
  data_cfg.seed = 12;
  auto samples = generate_dataset(data_cfg, 300);
  auto run_once = [&](const std::string& path) {
    ModelConfig desk;
    CrateModel model = init_model(desk, 7);
    TrainState st = make_train_state(std::move(model), 7);
    OptimizerConfig opt;
    opt.epochs = 3;
    train(st, samples, opt);
    MetricsReport rep;
    rep.run = "determinism-probe";
    rep.config = config_to_json(desk);
    rep.epochs = st.history;
    write_json(rep.to_json(), path);
    return st;
  };
  run_once(out_dir + "/metrics_a.json");
  run_once(out_dir + "/metrics_b.json");
  std::ifstream m1(out_dir + "/metrics_a.json"), m2(out_dir + "/metrics_b.json");
  const std::string j1((std::istreambuf_iterator<char>(m1)), std::istreambuf_iterator<char>());
  const std::string j2((std::istreambuf_iterator<char>(m2)), std::istreambuf_iterator<char>());
  const bool repeatable = !j1.empty() && j1 == j2;
  archive["determinism"] = {{"checkpoint_roundtrip", roundtrip}, {"metrics_identical", repeatable}};
  report(10, "round trip and determinism", roundtrip && repeatable,
         std::string("checkpoint bytes ") + (roundtrip ? "identical" : "differ") +
             ", same-seed metrics " + (repeatable ? "identical" : "differ"));
}

}  // namespace

int main(int argc, char** argv) {
  std::string out_dir = "acceptance_out";
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--out") out_dir = argv[i + 1];
  fs::create_directories(out_dir);
  archive["criteria"] = nlohmann::json::array();

  criterion_gradients();
  criterion_objective();
  criterion_ista();
  criterion_attention();
  criterion_diagnostic();
  criterion_ncut();
  criterion_miou_arithmetic();
  criteria_desk_scale(out_dir);
  criterion_determinism(out_dir);

  write_json(archive, out_dir + "/acceptance_metrics.json");
  std::cout << (failures == 0 ? "all criteria passed"
                              : std::to_string(failures) + " criteria failed")
            << "; metrics archived in " << out_dir << "/acceptance_metrics.json\n";
  return failures;
}
