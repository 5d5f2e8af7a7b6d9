#pragma once

#include "crate/analysis.hpp"
#include "crate/objective.hpp"
#include "crate/train.hpp"

#include <json.hpp>

namespace crate {

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers}, {"model_dim", c.model_dim},
          {"num_heads", c.num_heads},   {"head_dim", c.head_dim},
          {"channels", c.channels},     {"height", c.height},
          {"width", c.width},           {"patch_h", c.patch_h},
          {"patch_w", c.patch_w},       {"quant_eps", c.quant_eps},
          {"sparsity", c.sparsity},     {"ista_step", c.ista_step},
          {"num_classes", c.num_classes},
          {"attention", to_string(c.attention)},
          {"mlp", to_string(c.mlp)},    {"mlp_hidden", c.mlp_hidden},
          {"arch", arch_name(c)}};
}

struct LayerRates {
  int layer = 0;
  RateReport report;
};

// Run report with a stable JSON layout:
// {"run": str, "config": obj, "epochs": [{"loss","acc"}],
//  "analysis": {"miou", "per_class", "ap": {"ap50","ap75","ap"}, "rates": [...]}}
struct MetricsReport {
  std::string run;
  nlohmann::json config = nlohmann::json::object();
  std::vector<EpochStats> epochs;
  nlohmann::json analysis = nlohmann::json::object();

  void set_miou(const IoUReport& rep) {
    analysis["miou"] = rep.miou;
    nlohmann::json per_class = nlohmann::json::object();
    for (size_t i = 0; i < rep.class_ids.size(); ++i)
      per_class[std::to_string(rep.class_ids[i])] = rep.per_class[i];
    analysis["per_class"] = per_class;
  }

  void set_ap(const ApSummary& ap) {
    if (ap.defined)
      analysis["ap"] = {{"ap50", ap.ap50}, {"ap75", ap.ap75}, {"ap", ap.ap}};
    else
      analysis["ap"] = {{"defined", false}};
  }

  void set_rates(const std::vector<LayerRates>& rates) {
    auto arr = nlohmann::json::array();
    for (const auto& lr : rates)
      arr.push_back({{"layer", lr.layer},
                     {"R", lr.report.r},
                     {"Rc", lr.report.rc},
                     {"l0", lr.report.l0},
                     {"l1", lr.report.l1},
                     {"objective", lr.report.objective}});
    analysis["rates"] = arr;
  }

  nlohmann::json to_json() const {
    auto epoch_arr = nlohmann::json::array();
    for (const auto& e : epochs) epoch_arr.push_back({{"loss", e.loss}, {"acc", e.accuracy}});
    return {{"run", run}, {"config", config}, {"epochs", epoch_arr}, {"analysis", analysis}};
  }
};

inline void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open file for writing: " + path);
  out << j.dump(2) << "\n";
}

// Per-layer rate reports over a forward trace. Layers 1..L pair Z^l with
// that layer's signal model; the final entry pairs Z^{L+1} with layer L's.
inline std::vector<LayerRates> layer_rate_reports(const CrateModel& m,
                                                  const ForwardTrace& trace,
                                                  const CodingRateParams& params) {
  if (m.config.attention != AttentionKind::Mssa)
    throw ConfigError("rate reports need the subspace-attention variant");
  std::vector<LayerRates> out;
  const size_t layer_count = m.layers.size();
  for (size_t l = 0; l < trace.z.size(); ++l) {
    const auto& subspaces = m.layers[std::min(l, layer_count - 1)].subspaces;
    out.push_back({static_cast<int>(l + 1), rate_report(trace.z[l], subspaces, params)});
  }
  return out;
}

}  // namespace crate
