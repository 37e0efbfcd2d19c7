#include "intrafusion/fusion.hpp"

#include <algorithm>
#include <cmath>

#include "intrafusion/depgraph.hpp"
#include "intrafusion/engine.hpp"
#include "intrafusion/errors.hpp"
#include "intrafusion/prune.hpp"

namespace intrafusion {

std::string_view fusion_cost_name(FusionCost cost) { return cost == FusionCost::kWeight ? "weight" : "activation"; }

FusionCost parse_fusion_cost(std::string_view name) {
  if (name == "weight") return FusionCost::kWeight;
  if (name == "activation") return FusionCost::kActivation;
  throw InputError("unknown fusion cost '" + std::string(name) + "' (weight, activation)");
}

void check_same_topology(const ModelGraph& a, const ModelGraph& b) {
  if (a.nodes.size() != b.nodes.size() || a.input_id != b.input_id || a.output_id != b.output_id) {
    throw StructuralError("models differ in topology");
  }
  for (const auto& na : a.nodes) {
    const int idx = b.index_of(na.id);
    if (idx < 0) throw StructuralError("layer " + na.id + " missing from second model");
    const LayerNode& nb = b.nodes[static_cast<std::size_t>(idx)];
    if (na.kind != nb.kind || na.inputs != nb.inputs || na.params.size() != nb.params.size()) {
      throw StructuralError("layer " + na.id + " differs between models");
    }
    for (std::size_t p = 0; p < na.params.size(); ++p) {
      if (na.params[p].name != nb.params[p].name || na.params[p].value.shape() != nb.params[p].value.shape()) {
        throw StructuralError("parameter " + na.id + "." + na.params[p].name + " differs between models");
      }
    }
  }
}

namespace {

// Per channel: post-ReLU activation of each sample, spatially averaged, for
// every ReLU on the group's axis (the producers' outputs when there is none).
std::vector<std::vector<float>> activation_vectors(const ModelGraph& model, const Group& group, const ForwardTrace& trace) {
  std::vector<std::string> nodes;
  for (const auto& id : group.members) {
    if (model.node(id).kind == LayerKind::kReLU) nodes.push_back(id);
  }
  if (nodes.empty()) {
    for (const auto& s : group.slices) {
      if (s.role == SliceRole::kProducer) nodes.push_back(s.layer);
    }
  }
  std::vector<std::vector<float>> out(static_cast<std::size_t>(group.cardinality));
  for (const auto& id : nodes) {
    const Tensor& act = trace.activations[static_cast<std::size_t>(model.index_of(id))];
    const std::size_t batch = static_cast<std::size_t>(act.dim(0));
    const std::size_t per_sample = act.numel() / batch;
    const std::size_t spatial = per_sample / static_cast<std::size_t>(group.cardinality);
    for (std::size_t s = 0; s < batch; ++s) {
      for (std::size_t c = 0; c < out.size(); ++c) {
        double acc = 0.0;
        const std::size_t base = s * per_sample + c * spatial;
        for (std::size_t q = 0; q < spatial; ++q) acc += static_cast<double>(act[base + q]);
        out[c].push_back(static_cast<float>(acc / static_cast<double>(spatial)));
      }
    }
  }
  return out;
}

Tensor first_samples(const Tensor& data, int samples) {
  if (data.rank() == 0 || data.dim(0) < samples) {
    throw InputError("activation fusion needs " + std::to_string(samples) + " calibration samples, got " +
                     std::to_string(data.rank() == 0 ? 0 : data.dim(0)));
  }
  Shape s = data.shape();
  s[0] = samples;
  const std::size_t count = shape_numel(s);
  return Tensor(s, std::vector<float>(data.values().begin(), data.values().begin() + static_cast<std::ptrdiff_t>(count)));
}

}  // namespace

ModelGraph align_to_anchor(const ModelGraph& anchor, const ModelGraph& other, FusionCost cost, const Tensor* calibration,
                           int samples, std::vector<Matrix>* plans) {
  check_same_topology(anchor, other);
  Tensor calib;
  if (cost == FusionCost::kActivation) {
    if (!calibration) throw InputError("activation fusion needs calibration inputs");
    if (samples <= 0) throw InputError("activation fusion needs a positive sample size");
    calib = first_samples(*calibration, samples);
  }
  const auto groups = build_groups(anchor);
  std::vector<const Group*> order = prunable_groups(groups);
  std::sort(order.begin(), order.end(), [](const Group* a, const Group* b) { return a->id > b->id; });

  ModelGraph aligned = other;
  ForwardTrace anchor_trace;
  if (cost == FusionCost::kActivation) anchor_trace = forward_trace(anchor, calib);
  const ModelGraph anchor_folded = cost == FusionCost::kWeight ? fold_batchnorm(anchor) : ModelGraph{};
  for (const Group* g : order) {
    std::vector<std::vector<float>> src, dst;
    if (cost == FusionCost::kWeight) {
      src = incoming_vectors(fold_batchnorm(aligned), *g);
      dst = incoming_vectors(anchor_folded, *g);
    } else {
      src = activation_vectors(aligned, *g, forward_trace(aligned, calib));
      dst = activation_vectors(anchor, *g, anchor_trace);
    }
    const int n = g->cardinality;
    const auto uniform = make_distribution(n, {}, DistMode::kUniform);
    const TransportPlan plan = solve_ot(uniform, uniform, cost_matrix(src, dst));
    const Matrix m = normalize_transport(plan);
    aligned = mix_pairings(aligned, *g, m, m, &m);
    if (plans) plans->push_back(m);
  }
  return aligned;
}

ModelGraph fuse_models(const FusionSpec& spec, const Tensor* calibration) {
  if (spec.models.empty()) throw InputError("fusion needs at least one model");
  if (spec.weights.size() != spec.models.size()) throw InputError("one mixing weight per model is required");
  double total = 0.0;
  for (double w : spec.weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InputError("mixing weights must be non-negative");
    total += w;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw InputError("mixing weights must sum to 1");
  const ModelGraph& anchor = spec.models.front();
  for (std::size_t k = 1; k < spec.models.size(); ++k) check_same_topology(anchor, spec.models[k]);

  std::vector<ModelGraph> aligned;
  std::vector<double> weights;
  for (std::size_t k = 0; k < spec.models.size(); ++k) {
    if (spec.weights[k] == 0.0) continue;
    aligned.push_back(k == 0 ? anchor : align_to_anchor(anchor, spec.models[k], spec.cost, calibration, spec.samples));
    weights.push_back(spec.weights[k]);
  }
  ModelGraph out = anchor;
  for (auto& node : out.nodes) {
    for (auto& p : node.params) {
      std::vector<double> acc;
      for (std::size_t k = 0; k < aligned.size(); ++k) {
        const Tensor& src = aligned[k].node(node.id).param(p.name);
        if (k == 0) {
          acc.resize(src.numel());
          for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = weights[k] * static_cast<double>(src[i]);
        } else {
          for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weights[k] * static_cast<double>(src[i]);
        }
      }
      for (std::size_t i = 0; i < acc.size(); ++i) p.value[i] = static_cast<float>(acc[i]);
    }
  }
  return out;
}

}  // namespace intrafusion
