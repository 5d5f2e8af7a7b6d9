#pragma once

#include "crate/data.hpp"
#include "crate/grad.hpp"

#include <map>

namespace crate {

enum class OptimizerKind { SgdMomentum, Lion };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Lion;
  Scalar lr = 5e-4;
  Scalar weight_decay = 0.01;
  Scalar momentum = 0.9;  // SGD only
  Scalar beta1 = 0.9;     // Lion
  Scalar beta2 = 0.99;    // Lion
  int batch_size = 64;
  int epochs = 20;
  uint64_t seed = 0;
  Scalar divergence_threshold = 1e4;

  void validate() const {
    if (lr < 0.0) throw ConfigError("optimizer: lr must be nonnegative");
    if (weight_decay < 0.0) throw ConfigError("optimizer: weight_decay must be nonnegative");
    if (batch_size <= 0) throw ConfigError("optimizer: batch_size must be positive");
    if (epochs < 0) throw ConfigError("optimizer: epochs must be nonnegative");
  }
};

inline OptimizerKind optimizer_from_name(const std::string& name) {
  if (name == "lion") return OptimizerKind::Lion;
  if (name == "sgd") return OptimizerKind::SgdMomentum;
  throw ConfigError("unknown optimizer '" + name + "' (expected lion or sgd)");
}

struct EpochStats {
  Scalar loss = 0.0;
  Scalar accuracy = 0.0;  // running accuracy over the epoch's training batches
};

struct TrainState {
  CrateModel model;
  std::map<std::string, Mat> moments;  // one slot per parameter
  long step = 0;
  int epoch = 0;
  Rng rng;  // shuffle stream
  std::vector<EpochStats> history;
};

inline TrainState make_train_state(CrateModel model, uint64_t seed) {
  TrainState st;
  st.model = std::move(model);
  st.rng.seed(mix_seed(seed, 0x7261696e /* "rain" */));
  return st;
}

// Softmax cross-entropy, computed with max subtraction.
inline Scalar cross_entropy(const Vec& logits, int label) {
  if (!logits.allFinite()) throw NumericError("cross_entropy: non-finite logits");
  if (label < 0 || label >= logits.size()) throw ConfigError("cross_entropy: label out of range");
  const Scalar mx = logits.maxCoeff();
  const Scalar lse = mx + std::log((logits.array() - mx).exp().sum());
  return lse - logits[label];
}

inline int predict(const CrateModel& m, const Mat& patches) {
  const Vec logits = forward_tokens(embed(patches, m.embedding), m, false).logits;
  Index best = 0;
  logits.maxCoeff(&best);  // ties resolve to the lowest class index
  return static_cast<int>(best);
}

inline Scalar evaluate_accuracy(const CrateModel& m, const std::vector<Sample>& samples) {
  if (samples.empty()) return 0.0;
  size_t hits = 0;
  for (const auto& s : samples)
    hits += predict(m, patchify(s.image, m.config)) == s.label ? 1 : 0;
  return static_cast<Scalar>(hits) / static_cast<Scalar>(samples.size());
}

namespace detail {

// LayerNorm parameters, the class token, and the positional encoding are
// excluded from weight decay.
inline bool decay_exempt(const std::string& name) {
  return name.find(".ln") != std::string::npos || name == "embedding.cls_token" ||
         name == "embedding.pos";
}

inline void apply_update(TrainState& st, const std::vector<GradItem>& grads,
                         const OptimizerConfig& opt) {
  size_t cursor = 0;
  visit_params(st.model, [&](const std::string& name, Mat& param) {
    const GradItem& item = grads[cursor++];
    if (item.name != name)
      throw NumericError("optimizer: gradient order mismatch at " + name);
    Mat& moment = st.moments.try_emplace(name, Mat::Zero(param.rows(), param.cols()))
                      .first->second;
    const Scalar wd = decay_exempt(name) ? 0.0 : opt.weight_decay;
    if (opt.kind == OptimizerKind::Lion) {
      Mat update = (opt.beta1 * moment + (1.0 - opt.beta1) * item.grad)
                       .unaryExpr([](Scalar v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
      param -= opt.lr * (update + wd * param);
      moment = opt.beta2 * moment + (1.0 - opt.beta2) * item.grad;
    } else {
      moment = opt.momentum * moment + (item.grad + wd * param);
      param -= opt.lr * moment;
    }
  });
}

}  // namespace detail

// Minibatch training with a fixed shuffle stream; bit-reproducible for a
// given seed. Per-epoch loss is the mean batch loss, accuracy the running
// training accuracy measured before each update.
inline TrainState& train(TrainState& st, const std::vector<Sample>& dataset,
                         const OptimizerConfig& opt) {
  opt.validate();
  if (dataset.empty()) throw ConfigError("train: dataset must be nonempty");

  std::vector<Example> examples;
  examples.reserve(dataset.size());
  for (const auto& s : dataset)
    examples.push_back({patchify(s.image, st.model.config), s.label});

  std::vector<size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), size_t{0});

  for (int e = 0; e < opt.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), st.rng);
    Scalar loss_sum = 0.0;  // sample-weighted, so epoch loss is shuffle-invariant
    size_t hit = 0, seen = 0;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(opt.batch_size)) {
      const size_t end = std::min(order.size(), at + static_cast<size_t>(opt.batch_size));
      std::vector<Example> batch;
      batch.reserve(end - at);
      std::vector<int> labels;
      for (size_t i = at; i < end; ++i) {
        batch.push_back(examples[order[i]]);
        labels.push_back(examples[order[i]].label);
      }
      BackwardResult res = backward(st.model, batch);
      if (!std::isfinite(res.mean_loss) || res.mean_loss > opt.divergence_threshold)
        throw NumericError("training diverged at epoch " + std::to_string(st.epoch) +
                           " step " + std::to_string(st.step) +
                           ": loss=" + std::to_string(res.mean_loss));
      for (size_t i = 0; i < labels.size(); ++i)
        hit += res.predictions[i] == labels[i] ? 1 : 0;
      seen += labels.size();
      loss_sum += res.mean_loss * static_cast<Scalar>(labels.size());
      detail::apply_update(st, res.grads, opt);
      ++st.step;
    }
    st.history.push_back({loss_sum / static_cast<Scalar>(seen),
                          static_cast<Scalar>(hit) / static_cast<Scalar>(seen)});
    ++st.epoch;
  }
  return st;
}

}  // namespace crate
