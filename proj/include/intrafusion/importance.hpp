#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "intrafusion/depgraph.hpp"
#include "intrafusion/model_io.hpp"

namespace intrafusion {

enum class ImportanceMetric { kL1, kL2, kTaylor, kLamp, kRandom };

std::string_view metric_name(ImportanceMetric metric);
ImportanceMetric parse_metric(std::string_view name);

struct ImportanceVector {
  int group = 0;
  std::vector<double> scores;
  ImportanceMetric metric = ImportanceMetric::kL1;
  std::uint64_t seed = 0;
};

struct CalibrationBatch {
  Tensor inputs;
  std::vector<int> labels;
};

// Consecutive batches from the start of `data`; the last one may be short.
std::vector<CalibrationBatch> make_calibration(const Dataset& data, int batches, int batch_size);

enum class TaylorAggregation { kSumAbs, kAbsSum };

// Taylor score of one pairing from its weights and their gradients.
double taylor_score(std::span<const float> weights, std::span<const float> grads, TaylorAggregation aggregation);

// Scores on an already folded model.
std::vector<double> lp_norm_importance(const ModelGraph& folded, const Group& group, double p);
std::vector<double> lamp_importance(const ModelGraph& folded, const Group& group);
// Scores on the live model: sum over batches of |w * dL/dw| per pairing entry
// (including BN gamma/beta), or |sum w * dL/dw| with kAbsSum.
std::vector<double> taylor_importance(const ModelGraph& model, const Group& group,
                                      std::span<const CalibrationBatch> batches,
                                      TaylorAggregation aggregation = TaylorAggregation::kSumAbs);
std::vector<double> random_importance(const Group& group, std::uint64_t seed);

struct ImportanceConfig {
  ImportanceMetric metric = ImportanceMetric::kL1;
  std::uint64_t seed = 0;
  std::span<const CalibrationBatch> calibration;
  TaylorAggregation taylor = TaylorAggregation::kSumAbs;
};

// Folds BatchNorm first for l1/l2/lamp. Random scores are seeded by
// derive_seed(config.seed, group.id).
ImportanceVector compute_importance(const ModelGraph& model, const Group& group, const ImportanceConfig& config);

}  // namespace intrafusion
