// Command-line front end: dataset generation, training, and the analysis
// pipelines (attention maps, PCA components, coarse segmentation mIoU,
// MaskCut object discovery, per-layer rate reports, gradient checking).
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure.

#include "crate/crate.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <filesystem>
#include <iostream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace crate;

namespace {

// Deterministic regardless of thread count: worker i only writes slot i.
template <class F>
void parallel_for(int n, int threads, F&& f) {
  threads = std::max(1, threads);
  if (threads == 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (int i; (i = next.fetch_add(1)) < n;) f(i);
    });
  for (auto& th : pool) th.join();
}

json load_config_file(int argc, char** argv) {
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--config") {
      std::ifstream in(argv[i + 1]);
      if (!in) throw ConfigError(std::string("cannot open config file: ") + argv[i + 1]);
      json j;
      try {
        in >> j;
      } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed config file: ") + e.what());
      }
      return j;
    }
  return json::object();
}

template <class T>
void from_file(const json& file_cfg, const char* key, T& value) {
  if (file_cfg.contains(key)) value = file_cfg.at(key).get<T>();
}

void ensure_run_dirs(const std::string& out) {
  fs::create_directories(fs::path(out) / "checkpoints");
  fs::create_directories(fs::path(out) / "figures");
  fs::create_directories(fs::path(out) / "reports");
}

void write_resolved_config(const std::string& out, const json& resolved) {
  fs::create_directories(out);
  write_json(resolved, (fs::path(out) / "resolved_config.json").string());
}

int default_layer(const ModelConfig& cfg) { return std::max(1, cfg.num_layers - 1); }

Image sample_to_display(const Image& img) { return img; }

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string out;
  int classes = 3, count = 100, size = 32, patch = 8, channels = 1;
  double min_area = 0.15, max_area = 0.38, jitter = 0.5, noise = 0.10, pattern = 0.25;
  uint64_t seed = 0;
};

int cmd_generate_data(const GenerateArgs& a) {
  SynthDataConfig cfg;
  cfg.num_classes = a.classes;
  cfg.channels = a.channels;
  cfg.height = cfg.width = a.size;
  cfg.patch_h = cfg.patch_w = a.patch;
  cfg.min_area = a.min_area;
  cfg.max_area = a.max_area;
  cfg.jitter = a.jitter;
  cfg.bg_noise = cfg.fg_noise = a.noise;
  cfg.pattern_amp = a.pattern;
  cfg.seed = a.seed;
  auto samples = generate_dataset(cfg, a.count);
  save_dataset(a.out, samples, cfg);
  write_resolved_config(a.out, {{"out", a.out},
                                {"classes", a.classes},
                                {"count", a.count},
                                {"size", a.size},
                                {"patch", a.patch},
                                {"channels", a.channels},
                                {"min_area", a.min_area},
                                {"max_area", a.max_area},
                                {"jitter", a.jitter},
                                {"noise", a.noise},
                                {"pattern", a.pattern},
                                {"seed", a.seed}});
  std::cout << "wrote " << samples.size() << " samples to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data, test, out = "run";
  std::string arch = "crate", opt = "lion";
  int depth = 4, dim = 64, heads = 4, patch = 8, epochs = 20, batch = 64, mlp_hidden = 256;
  double lr = 5e-4, wd = 0.01, eps = 1.0, lambda = 0.1, eta = 0.1;
  uint64_t seed = 0;
};

json train_args_json(const TrainArgs& a) {
  return {{"data", a.data},   {"test", a.test},     {"out", a.out},
          {"arch", a.arch},   {"opt", a.opt},       {"depth", a.depth},
          {"dim", a.dim},     {"heads", a.heads},   {"patch", a.patch},
          {"epochs", a.epochs}, {"batch", a.batch}, {"mlp_hidden", a.mlp_hidden},
          {"lr", a.lr},       {"wd", a.wd},         {"eps", a.eps},
          {"lambda", a.lambda}, {"eta", a.eta},     {"seed", a.seed}};
}

ModelConfig model_config_for(const TrainArgs& a, const Dataset& ds) {
  ModelConfig cfg;
  cfg.num_layers = a.depth;
  cfg.model_dim = a.dim;
  cfg.num_heads = a.heads;
  if (a.dim % a.heads != 0)
    throw ConfigError("model dim must be divisible by the number of heads");
  cfg.head_dim = a.dim / a.heads;
  cfg.channels = ds.channels;
  cfg.height = ds.height;
  cfg.width = ds.width;
  cfg.patch_h = cfg.patch_w = a.patch;
  cfg.quant_eps = a.eps;
  cfg.sparsity = a.lambda;
  cfg.ista_step = a.eta;
  cfg.num_classes = ds.num_classes;
  cfg.mlp_hidden = a.mlp_hidden;
  apply_arch(cfg, a.arch);
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainArgs& a) {
  Dataset ds = load_dataset(a.data);
  ModelConfig cfg = model_config_for(a, ds);
  ensure_run_dirs(a.out);
  write_resolved_config(a.out, train_args_json(a));

  CrateModel model = init_model(cfg, a.seed);
  save_checkpoint(model, (fs::path(a.out) / "checkpoints" / "init.cr8w").string());

  OptimizerConfig opt;
  opt.kind = optimizer_from_name(a.opt);
  opt.lr = a.lr;
  opt.weight_decay = a.wd;
  opt.batch_size = a.batch;
  opt.epochs = a.epochs;
  opt.seed = a.seed;

  TrainState st = make_train_state(std::move(model), a.seed);
  for (int e = 0; e < a.epochs; ++e) {
    OptimizerConfig one = opt;
    one.epochs = 1;
    train(st, ds.samples, one);
    const auto& s = st.history.back();
    std::cout << "epoch " << (e + 1) << "/" << a.epochs << "  loss " << s.loss << "  acc "
              << s.accuracy << "\n";
  }
  save_checkpoint(st.model, (fs::path(a.out) / "checkpoints" / "final.cr8w").string());

  MetricsReport report;
  report.run = "train-" + a.arch + "-seed" + std::to_string(a.seed);
  report.config = config_to_json(cfg);
  report.epochs = st.history;
  if (!a.test.empty()) {
    Dataset test = load_dataset(a.test);
    report.analysis["test_accuracy"] = evaluate_accuracy(st.model, test.samples);
    std::cout << "test accuracy " << report.analysis["test_accuracy"] << "\n";
  }
  write_json(report.to_json(), (fs::path(a.out) / "reports" / "metrics.json").string());
  return 0;
}

// ---------------------------------------------------------------------------

struct AnalysisArgs {
  std::string checkpoint, data, out = "run";
  int layer = 0;  // 0 = penultimate
  int head = -1;  // -1 = all heads
  int count = 8;
  int image_index = 0;
  int class_id = 0;
  int threads = 1;
  int n_objects = 3;
  double p_fraction = 0.6;
  double tau = 0.15;
  double pca_threshold = 0.5;
};

json analysis_args_json(const AnalysisArgs& a) {
  return {{"checkpoint", a.checkpoint}, {"data", a.data},   {"out", a.out},
          {"layer", a.layer},           {"head", a.head},   {"count", a.count},
          {"image_index", a.image_index}, {"class", a.class_id}, {"threads", a.threads},
          {"n", a.n_objects},           {"P", a.p_fraction}, {"tau", a.tau},
          {"thr", a.pca_threshold}};
}

struct LoadedRun {
  CrateModel model;
  Dataset ds;
  int layer;
};

LoadedRun load_run(const AnalysisArgs& a) {
  LoadedRun run{load_checkpoint(a.checkpoint), load_dataset(a.data), 0};
  const auto& cfg = run.model.config;
  if (run.ds.channels != cfg.channels || run.ds.height != cfg.height ||
      run.ds.width != cfg.width)
    throw ConfigError("dataset geometry does not match checkpoint config");
  run.layer = a.layer == 0 ? default_layer(cfg) : a.layer;
  if (run.layer < 1 || run.layer > cfg.num_layers)
    throw ConfigError("layer out of range (1.." + std::to_string(cfg.num_layers) + ")");
  return run;
}

int cmd_attn(const AnalysisArgs& a) {
  LoadedRun run = load_run(a);
  const auto& cfg = run.model.config;
  if (a.head >= cfg.num_heads) throw ConfigError("head out of range");
  ensure_run_dirs(a.out);
  write_resolved_config(a.out, analysis_args_json(a));
  const int count = std::min<int>(a.count, static_cast<int>(run.ds.samples.size()));
  parallel_for(count, a.threads, [&](int i) {
    const Sample& s = run.ds.samples[static_cast<size_t>(i)];
    auto res = model_forward(s.image, run.model, true);
    write_image(sample_to_display(s.image),
                (fs::path(a.out) / "figures" / ("attn_img" + std::to_string(i) + "_input.png"))
                    .string());
    for (int k = 0; k < cfg.num_heads; ++k) {
      if (a.head >= 0 && k != a.head) continue;
      auto map = class_token_attention(run.model, *res.trace, run.layer, k);
      Image heat = render_heatmap(map.values, cfg.patches_y(), cfg.patches_x(), cfg.patch_h);
      write_image(heat, (fs::path(a.out) / "figures" /
                         ("attn_img" + std::to_string(i) + "_L" + std::to_string(run.layer) +
                          "_H" + std::to_string(k) + ".png"))
                            .string());
    }
  });
  std::cout << "wrote attention heatmaps for " << count << " images (layer " << run.layer
            << ") to " << a.out << "/figures\n";
  return 0;
}

int cmd_pca(const AnalysisArgs& a) {
  LoadedRun run = load_run(a);
  const auto& cfg = run.model.config;
  ensure_run_dirs(a.out);
  write_resolved_config(a.out, analysis_args_json(a));
  std::vector<int> picked;
  for (size_t i = 0; i < run.ds.samples.size() && static_cast<int>(picked.size()) < a.count; ++i)
    if (run.ds.samples[i].label == a.class_id) picked.push_back(static_cast<int>(i));
  if (picked.size() < 2)
    throw ConfigError("pca needs at least 2 images of class " + std::to_string(a.class_id));
  std::vector<Mat> features(picked.size());
  parallel_for(static_cast<int>(picked.size()), a.threads, [&](int i) {
    auto res = model_forward(run.ds.samples[static_cast<size_t>(picked[static_cast<size_t>(i)])].image,
                             run.model, true);
    features[static_cast<size_t>(i)] = token_features(run.model, *res.trace, run.layer);
  });
  PcaVis vis = pca_patch_visualization(features, a.pca_threshold);
  for (size_t i = 0; i < picked.size(); ++i) {
    Image rgb(3, cfg.patches_y() * cfg.patch_h, cfg.patches_x() * cfg.patch_w);
    for (int py = 0; py < cfg.patches_y(); ++py)
      for (int px = 0; px < cfg.patches_x(); ++px) {
        const Index t = static_cast<Index>(py) * cfg.patches_x() + px;
        for (int y = py * cfg.patch_h; y < (py + 1) * cfg.patch_h; ++y)
          for (int x = px * cfg.patch_w; x < (px + 1) * cfg.patch_w; ++x)
            for (int c = 0; c < 3; ++c) rgb.at(c, y, x) = vis.rgb[i](c, t);
      }
    write_image(rgb, (fs::path(a.out) / "figures" /
                      ("pca_class" + std::to_string(a.class_id) + "_img" + std::to_string(picked[i]) +
                       "_L" + std::to_string(run.layer) + ".png"))
                         .string());
  }
  std::cout << "wrote PCA component images for " << picked.size() << " images to " << a.out
            << "/figures\n";
  return 0;
}

int cmd_seg_miou(const AnalysisArgs& a) {
  LoadedRun run = load_run(a);
  const auto& cfg = run.model.config;
  ensure_run_dirs(a.out);
  write_resolved_config(a.out, analysis_args_json(a));
  const int count = std::min<int>(a.count, static_cast<int>(run.ds.samples.size()));
  std::vector<IoUReport> reports(static_cast<size_t>(count));
  parallel_for(count, a.threads, [&](int i) {
    const Sample& s = run.ds.samples[static_cast<size_t>(i)];
    auto res = model_forward(s.image, run.model, true);
    std::vector<SegMask> head_masks;
    for (int k = 0; k < cfg.num_heads; ++k)
      head_masks.push_back(attention_to_mask(
          class_token_attention(run.model, *res.trace, run.layer, k), a.p_fraction));
    SegMask gt;
    gt.bits = s.patch_gt;
    reports[static_cast<size_t>(i)] = miou(head_masks, {{s.label, gt}});
  });

  // aggregate per class across images, then average over classes
  std::map<int, std::pair<Scalar, int>> per_class;
  std::map<int, std::map<int, int>> head_votes;
  for (int i = 0; i < count; ++i)
    for (size_t c = 0; c < reports[static_cast<size_t>(i)].class_ids.size(); ++c) {
      const int cls = reports[static_cast<size_t>(i)].class_ids[c];
      per_class[cls].first += reports[static_cast<size_t>(i)].per_class[c];
      per_class[cls].second += 1;
      head_votes[cls][reports[static_cast<size_t>(i)].chosen_head[c]] += 1;
    }
  json per_class_json = json::object();
  json head_json = json::object();
  Scalar total = 0.0;
  for (const auto& [cls, acc] : per_class) {
    const Scalar mean = acc.first / acc.second;
    per_class_json[std::to_string(cls)] = mean;
    total += mean;
    int best_head = -1, best_votes = -1;
    for (const auto& [head, votes] : head_votes[cls])
      if (votes > best_votes) {
        best_votes = votes;
        best_head = head;
      }
    head_json[std::to_string(cls)] = best_head;
  }
  json out = {{"layer", run.layer},
              {"P", a.p_fraction},
              {"images", count},
              {"miou", per_class.empty() ? 0.0 : total / static_cast<Scalar>(per_class.size())},
              {"per_class", per_class_json},
              {"head", head_json}};
  write_json(out, (fs::path(a.out) / "reports" / "miou.json").string());
  std::cout << "mIoU (layer " << run.layer << ", P=" << a.p_fraction << ", " << count
            << " images): " << out["miou"] << "\n";
  return 0;
}

int cmd_maskcut(const AnalysisArgs& a) {
  LoadedRun run = load_run(a);
  const auto& cfg = run.model.config;
  ensure_run_dirs(a.out);
  write_resolved_config(a.out, analysis_args_json(a));
  MaskCutConfig mc;
  mc.num_objects = a.n_objects;
  mc.tau = a.tau;
  mc.validate();
  const int count = std::min<int>(a.count, static_cast<int>(run.ds.samples.size()));
  std::vector<Detections> dets(static_cast<size_t>(count));
  std::vector<json> boxes(static_cast<size_t>(count));
  parallel_for(count, a.threads, [&](int i) {
    const Sample& s = run.ds.samples[static_cast<size_t>(i)];
    auto res = model_forward(s.image, run.model, true);
    auto cuts = maskcut(run.model, *res.trace, run.layer, mc);
    Detections d;
    json box_list = json::array();
    for (size_t j = 0; j < cuts.masks.size(); ++j) {
      d.preds.push_back(cuts.masks[j]);
      d.scores.push_back(-cuts.ncut_values[j]);
      box_list.push_back({{"x0", cuts.boxes[j].x0},
                          {"y0", cuts.boxes[j].y0},
                          {"x1", cuts.boxes[j].x1},
                          {"y1", cuts.boxes[j].y1},
                          {"ncut", cuts.ncut_values[j]}});
    }
    SegMask gt;
    gt.bits = s.patch_gt;
    d.gts.push_back(gt);
    dets[static_cast<size_t>(i)] = d;
    boxes[static_cast<size_t>(i)] = box_list;

    Image overlay = sample_to_display(s.image);
    static const std::array<std::array<Scalar, 3>, 3> colors = {
        {{1.0, 0.15, 0.15}, {0.15, 1.0, 0.15}, {0.2, 0.4, 1.0}}};
    for (size_t j = 0; j < cuts.masks.size(); ++j)
      overlay = overlay_mask(overlay, cuts.masks[j].bits, cfg.patches_y(), cfg.patches_x(),
                             0.45, colors[j % colors.size()]);
    write_image(overlay, (fs::path(a.out) / "figures" /
                          ("maskcut_img" + std::to_string(i) + "_L" + std::to_string(run.layer) +
                           ".png"))
                             .string());
  });
  ApSummary ap = ap_summary(dets);
  json out = {{"layer", run.layer}, {"n", mc.num_objects}, {"tau", mc.tau}, {"images", count},
              {"boxes", boxes}};
  if (ap.defined) {
    out["ap50"] = ap.ap50;
    out["ap75"] = ap.ap75;
    out["ap"] = ap.ap;
  } else {
    out["ap_defined"] = false;
  }
  write_json(out, (fs::path(a.out) / "reports" / "maskcut.json").string());
  std::cout << "maskcut (layer " << run.layer << ", n=" << mc.num_objects << ", tau=" << mc.tau
            << "): ap50=" << (ap.defined ? std::to_string(ap.ap50) : "undefined") << "\n";
  return 0;
}

int cmd_rates(const AnalysisArgs& a) {
  LoadedRun run = load_run(a);
  ensure_run_dirs(a.out);
  write_resolved_config(a.out, analysis_args_json(a));
  if (a.image_index < 0 || a.image_index >= static_cast<int>(run.ds.samples.size()))
    throw ConfigError("image index out of range");
  auto res = model_forward(run.ds.samples[static_cast<size_t>(a.image_index)].image, run.model,
                           true);
  CodingRateParams params{run.model.config.quant_eps, run.model.config.sparsity};
  auto rates = layer_rate_reports(run.model, *res.trace, params);
  json arr = json::array();
  for (const auto& lr : rates)
    arr.push_back({{"layer", lr.layer},
                   {"R", lr.report.r},
                   {"Rc", lr.report.rc},
                   {"l0", lr.report.l0},
                   {"l1", lr.report.l1},
                   {"objective", lr.report.objective}});
  json out = {{"image_index", a.image_index}, {"rates", arr}};
  write_json(out, (fs::path(a.out) / "reports" / "rates.json").string());
  for (const auto& lr : rates)
    std::cout << "layer " << lr.layer << "  R " << lr.report.r << "  Rc " << lr.report.rc
              << "  l0 " << lr.report.l0 << "  l1 " << lr.report.l1 << "\n";
  return 0;
}

// Finite-difference validation per parameter group. Without a checkpoint it
// builds a tiny config and checks every entry; with one it spot-checks a
// seeded sample of entries per group.
int cmd_grad_check(const AnalysisArgs& a) {
  CrateModel model;
  std::vector<Example> batch;
  bool full = a.checkpoint.empty();
  if (full) {
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
    model = init_model(cfg, 11);
    Rng rng(5);
    for (int b = 0; b < 2; ++b)
      batch.push_back(
          {uniform_matrix(cfg.patch_dim(), cfg.num_patches(), 0.0, 1.0, rng), b % 3});
  } else {
    model = load_checkpoint(a.checkpoint);
    if (a.data.empty()) throw ConfigError("grad-check with a checkpoint needs --data");
    Dataset ds = load_dataset(a.data);
    const int count = std::min<int>(2, static_cast<int>(ds.samples.size()));
    for (int i = 0; i < count; ++i)
      batch.push_back({patchify(ds.samples[static_cast<size_t>(i)].image, model.config),
                       ds.samples[static_cast<size_t>(i)].label});
  }

  auto loss_at = [&](const CrateModel& m) {
    Scalar total = 0.0;
    for (const auto& ex : batch)
      total += cross_entropy(model_forward(ex.patches, m).logits, ex.label);
    return total / static_cast<Scalar>(batch.size());
  };
  BackwardResult res = backward(model, batch);

  const Scalar h = 1e-5;
  const Scalar tolerance = 1e-4;
  bool all_pass = true;
  json table = json::array();
  size_t gi = 0;
  Rng pick_rng(123);
  visit_params(model, [&](const std::string& name, Mat& param) {
    const Mat& grad = res.grads[gi++].grad;
    std::vector<std::pair<Index, Index>> entries;
    if (full || param.size() <= 32) {
      for (Index c = 0; c < param.cols(); ++c)
        for (Index r = 0; r < param.rows(); ++r) entries.emplace_back(r, c);
    } else {
      std::uniform_int_distribution<Index> rd(0, param.rows() - 1), cd(0, param.cols() - 1);
      for (int i = 0; i < 32; ++i) entries.emplace_back(rd(pick_rng), cd(pick_rng));
    }
    Scalar num = 0.0, den = 0.0;
    for (auto [r, c] : entries) {
      const Scalar orig = param(r, c);
      param(r, c) = orig + h;
      const Scalar lp = loss_at(model);
      param(r, c) = orig - h;
      const Scalar lm = loss_at(model);
      param(r, c) = orig;
      const Scalar fd = (lp - lm) / (2.0 * h);
      num += (grad(r, c) - fd) * (grad(r, c) - fd);
      den += fd * fd;
    }
    const Scalar rel = std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
    const bool pass = rel < tolerance;
    all_pass = all_pass && pass;
    std::cout << (pass ? "[pass] " : "[FAIL] ") << name << "  rel err " << rel << "\n";
    table.push_back({{"group", name}, {"rel_err", rel}, {"pass", pass}});
  });
  if (!a.out.empty()) {
    ensure_run_dirs(a.out);
    write_resolved_config(a.out, analysis_args_json(a));
    write_json({{"tolerance", tolerance}, {"groups", table}, {"all_pass", all_pass}},
               (fs::path(a.out) / "reports" / "grad_check.json").string());
  }
  if (!all_pass) throw NumericError("gradient check failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    json file_cfg = load_config_file(argc, argv);

    CLI::App app{"white-box transformer workbench"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file; flags override its values");

    GenerateArgs ga;
    from_file(file_cfg, "classes", ga.classes);
    from_file(file_cfg, "count", ga.count);
    from_file(file_cfg, "size", ga.size);
    from_file(file_cfg, "patch", ga.patch);
    from_file(file_cfg, "seed", ga.seed);
    from_file(file_cfg, "min_area", ga.min_area);
    from_file(file_cfg, "max_area", ga.max_area);
    from_file(file_cfg, "jitter", ga.jitter);
    from_file(file_cfg, "noise", ga.noise);
    from_file(file_cfg, "pattern", ga.pattern);
    auto* gen = app.add_subcommand("generate-data", "write a synthetic shapes dataset");
    gen->add_option("--out", ga.out, "output dataset directory")->required();
    gen->add_option("--classes", ga.classes, "number of shape families (2 or 3)");
    gen->add_option("--count", ga.count, "number of samples");
    gen->add_option("--size", ga.size, "image height/width");
    gen->add_option("--patch", ga.patch, "patch height/width (for patch ground truth)");
    gen->add_option("--channels", ga.channels, "image channels (1 or 3)");
    gen->add_option("--min-area", ga.min_area, "min mask area fraction");
    gen->add_option("--max-area", ga.max_area, "max mask area fraction");
    gen->add_option("--jitter", ga.jitter, "placement jitter fraction");
    gen->add_option("--noise", ga.noise, "pixel noise amplitude");
    gen->add_option("--pattern", ga.pattern, "foreground pattern amplitude");
    gen->add_option("--seed", ga.seed, "generation seed");

    TrainArgs ta;
    from_file(file_cfg, "arch", ta.arch);
    from_file(file_cfg, "opt", ta.opt);
    from_file(file_cfg, "depth", ta.depth);
    from_file(file_cfg, "dim", ta.dim);
    from_file(file_cfg, "heads", ta.heads);
    from_file(file_cfg, "patch", ta.patch);
    from_file(file_cfg, "epochs", ta.epochs);
    from_file(file_cfg, "batch", ta.batch);
    from_file(file_cfg, "mlp_hidden", ta.mlp_hidden);
    from_file(file_cfg, "lr", ta.lr);
    from_file(file_cfg, "wd", ta.wd);
    from_file(file_cfg, "eps", ta.eps);
    from_file(file_cfg, "lambda", ta.lambda);
    from_file(file_cfg, "eta", ta.eta);
    from_file(file_cfg, "seed", ta.seed);
    auto* tr = app.add_subcommand("train", "train a model variant on a dataset");
    tr->add_option("--data", ta.data, "training dataset directory")->required();
    tr->add_option("--test", ta.test, "held-out dataset for final accuracy");
    tr->add_option("--arch", ta.arch, "crate | crate-mlp | crate-mhsa | vit");
    tr->add_option("--depth", ta.depth, "number of layers L");
    tr->add_option("--dim", ta.dim, "model dimension d");
    tr->add_option("--heads", ta.heads, "number of heads K (head dim p = d/K)");
    tr->add_option("--patch", ta.patch, "patch size");
    tr->add_option("--epochs", ta.epochs, "training epochs");
    tr->add_option("--batch", ta.batch, "batch size");
    tr->add_option("--mlp-hidden", ta.mlp_hidden, "hidden width of the MLP variant");
    tr->add_option("--opt", ta.opt, "lion | sgd");
    tr->add_option("--lr", ta.lr, "learning rate");
    tr->add_option("--wd", ta.wd, "weight decay");
    tr->add_option("--eps", ta.eps, "quantization precision (rate objective)");
    tr->add_option("--lambda", ta.lambda, "sparsity level of the ISTA block");
    tr->add_option("--eta", ta.eta, "step size of the ISTA block");
    tr->add_option("--seed", ta.seed, "init/shuffle seed");
    tr->add_option("--out", ta.out, "run output directory");

    AnalysisArgs aa;
    from_file(file_cfg, "layer", aa.layer);
    from_file(file_cfg, "head", aa.head);
    from_file(file_cfg, "count", aa.count);
    from_file(file_cfg, "threads", aa.threads);
    from_file(file_cfg, "P", aa.p_fraction);
    from_file(file_cfg, "tau", aa.tau);
    from_file(file_cfg, "n", aa.n_objects);
    from_file(file_cfg, "thr", aa.pca_threshold);
    auto add_common = [&](CLI::App* sub, bool needs_checkpoint = true) {
      if (needs_checkpoint) {
        sub->add_option("--checkpoint", aa.checkpoint, "model checkpoint")->required();
        sub->add_option("--data", aa.data, "dataset directory")->required();
      } else {
        sub->add_option("--checkpoint", aa.checkpoint, "model checkpoint");
        sub->add_option("--data", aa.data, "dataset directory");
      }
      sub->add_option("--layer", aa.layer, "1-based layer (default: penultimate)");
      sub->add_option("--out", aa.out, "run output directory");
      sub->add_option("--threads", aa.threads, "worker threads for per-image analysis");
      sub->add_option("--count", aa.count, "number of images to analyze");
    };
    auto* attn = app.add_subcommand("attn", "class-token attention heatmaps");
    add_common(attn);
    attn->add_option("--head", aa.head, "head index (default: all)");
    auto* pca = app.add_subcommand("pca", "principal-component feature images");
    add_common(pca);
    pca->add_option("--class", aa.class_id, "class whose images are analyzed");
    pca->add_option("--thr", aa.pca_threshold, "foreground selection threshold");
    auto* segm = app.add_subcommand("seg-miou", "coarse segmentation score from attention");
    add_common(segm);
    segm->add_option("--P", aa.p_fraction, "fraction of patches marked foreground");
    auto* mcut = app.add_subcommand("maskcut", "iterated normalized-cut object discovery");
    add_common(mcut);
    mcut->add_option("--n", aa.n_objects, "number of objects to extract");
    mcut->add_option("--tau", aa.tau, "affinity threshold");
    auto* rates = app.add_subcommand("rates", "per-layer coding-rate reports");
    add_common(rates);
    rates->add_option("--image-index", aa.image_index, "sample to analyze");
    auto* gradc = app.add_subcommand("grad-check", "finite-difference gradient validation");
    add_common(gradc, false);

    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      app.exit(e);
      return 2;
    }

    if (gen->parsed()) return cmd_generate_data(ga);
    if (tr->parsed()) return cmd_train(ta);
    if (attn->parsed()) return cmd_attn(aa);
    if (pca->parsed()) return cmd_pca(aa);
    if (segm->parsed()) return cmd_seg_miou(aa);
    if (mcut->parsed()) return cmd_maskcut(aa);
    if (rates->parsed()) return cmd_rates(aa);
    if (gradc->parsed()) return cmd_grad_check(aa);
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
