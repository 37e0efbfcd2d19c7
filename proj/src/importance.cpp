#include "intrafusion/importance.hpp"

#include <algorithm>
#include <cmath>

#include "intrafusion/engine.hpp"
#include "intrafusion/errors.hpp"
#include "intrafusion/prune.hpp"
#include "intrafusion/rng.hpp"

namespace intrafusion {

std::string_view metric_name(ImportanceMetric metric) {
  switch (metric) {
    case ImportanceMetric::kL1: return "l1";
    case ImportanceMetric::kL2: return "l2";
    case ImportanceMetric::kTaylor: return "taylor";
    case ImportanceMetric::kLamp: return "lamp";
    case ImportanceMetric::kRandom: return "random";
  }
  return "?";
}

ImportanceMetric parse_metric(std::string_view name) {
  for (auto m : {ImportanceMetric::kL1, ImportanceMetric::kL2, ImportanceMetric::kTaylor, ImportanceMetric::kLamp,
                 ImportanceMetric::kRandom}) {
    if (metric_name(m) == name) return m;
  }
  throw InputError("unknown importance metric '" + std::string(name) + "'");
}

std::vector<CalibrationBatch> make_calibration(const Dataset& data, int batches, int batch_size) {
  if (batches <= 0 || batch_size <= 0) throw InputError("calibration needs positive batch count and size");
  std::vector<CalibrationBatch> out;
  for (int b = 0; b < batches; ++b) {
    const std::size_t begin = static_cast<std::size_t>(b) * static_cast<std::size_t>(batch_size);
    if (begin >= data.size()) break;
    const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(batch_size), data.size() - begin);
    Dataset part = data.slice(begin, count);
    out.push_back({std::move(part.features), std::move(part.labels)});
  }
  return out;
}

std::vector<double> lp_norm_importance(const ModelGraph& folded, const Group& group, double p) {
  if (!(p >= 1.0)) throw InputError("lp importance needs p >= 1");
  std::vector<double> out;
  for (const auto& v : pairing_vectors(folded, group)) {
    double s = 0.0;
    for (float x : v) s += std::pow(std::fabs(static_cast<double>(x)), p);
    out.push_back(std::pow(s, 1.0 / p));
  }
  return out;
}

std::vector<double> lamp_importance(const ModelGraph& folded, const Group& group) {
  std::vector<double> s;
  for (const auto& v : pairing_vectors(folded, group)) {
    double acc = 0.0;
    for (float x : v) acc += static_cast<double>(x) * static_cast<double>(x);
    s.push_back(acc);
  }
  std::vector<double> out(s.size(), 0.0);
  for (std::size_t j = 0; j < s.size(); ++j) {
    double denom = 0.0;
    for (double sk : s) {
      if (sk >= s[j]) denom += sk;
    }
    out[j] = denom > 0.0 ? s[j] / denom : 0.0;
  }
  return out;
}

double taylor_score(std::span<const float> weights, std::span<const float> grads, TaylorAggregation aggregation) {
  if (weights.size() != grads.size()) throw InputError("weights and gradients differ in length");
  double acc = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    const double prod = static_cast<double>(weights[k]) * static_cast<double>(grads[k]);
    acc += aggregation == TaylorAggregation::kSumAbs ? std::fabs(prod) : prod;
  }
  return aggregation == TaylorAggregation::kSumAbs ? acc : std::fabs(acc);
}

std::vector<double> taylor_importance(const ModelGraph& model, const Group& group,
                                      std::span<const CalibrationBatch> batches, TaylorAggregation aggregation) {
  if (batches.empty()) throw InputError("taylor importance needs at least one calibration batch");
  std::vector<std::vector<ParamEntries>> entries;
  for (int j = 0; j < group.cardinality; ++j) entries.push_back(pairing_entries(model, group, j, true));
  std::vector<double> out(static_cast<std::size_t>(group.cardinality), 0.0);
  for (const auto& batch : batches) {
    if (batch.labels.empty()) throw InputError("empty calibration batch");
    const GradientSet grads = backward(model, batch.inputs, batch.labels);
    for (std::size_t j = 0; j < entries.size(); ++j) {
      std::vector<float> w, g;
      for (const auto& e : entries[j]) {
        const Tensor& wt = model.node(e.layer).param(e.param);
        const Tensor& gt = grads.at({e.layer, e.param});
        for (std::size_t off : e.offsets) {
          w.push_back(wt[off]);
          g.push_back(gt[off]);
        }
      }
      out[j] += taylor_score(w, g, aggregation);
    }
  }
  return out;
}

std::vector<double> random_importance(const Group& group, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> out(static_cast<std::size_t>(group.cardinality));
  for (double& v : out) v = rng.uniform();
  return out;
}

ImportanceVector compute_importance(const ModelGraph& model, const Group& group, const ImportanceConfig& config) {
  ImportanceVector iv;
  iv.group = group.id;
  iv.metric = config.metric;
  switch (config.metric) {
    case ImportanceMetric::kL1:
      iv.scores = lp_norm_importance(fold_batchnorm(model), group, 1.0);
      break;
    case ImportanceMetric::kL2:
      iv.scores = lp_norm_importance(fold_batchnorm(model), group, 2.0);
      break;
    case ImportanceMetric::kLamp:
      iv.scores = lamp_importance(fold_batchnorm(model), group);
      break;
    case ImportanceMetric::kTaylor:
      iv.scores = taylor_importance(model, group, config.calibration, config.taylor);
      break;
    case ImportanceMetric::kRandom:
      iv.seed = derive_seed(config.seed, static_cast<std::uint64_t>(group.id));
      iv.scores = random_importance(group, iv.seed);
      break;
  }
  return iv;
}

}  // namespace intrafusion
