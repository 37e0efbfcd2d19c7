#pragma once

#include <string_view>
#include <vector>

#include "intrafusion/graph.hpp"
#include "intrafusion/ot.hpp"

namespace intrafusion {

enum class FusionCost { kWeight, kActivation };

std::string_view fusion_cost_name(FusionCost cost);
FusionCost parse_fusion_cost(std::string_view name);

struct FusionSpec {
  std::vector<ModelGraph> models;  // models[0] is the anchor
  std::vector<double> weights;     // convex mixing weights, one per model
  FusionCost cost = FusionCost::kWeight;
  int samples = 200;
};

// Throws StructuralError unless both graphs share nodes, edges and parameter shapes.
void check_same_topology(const ModelGraph& a, const ModelGraph& b);

// `other` with each prunable group's channels transported onto the anchor's
// indexing, groups processed from the input towards the output. Calibration
// inputs are needed only for activation cost.
ModelGraph align_to_anchor(const ModelGraph& anchor, const ModelGraph& other, FusionCost cost,
                           const Tensor* calibration = nullptr, int samples = 200,
                           std::vector<Matrix>* plans = nullptr);

// Aligns every non-anchor model and averages all parameters with the mixing
// weights. Models with weight zero are skipped.
ModelGraph fuse_models(const FusionSpec& spec, const Tensor* calibration = nullptr);

}  // namespace intrafusion
