#pragma once

#include <string>
#include <vector>

#include "intrafusion/graph.hpp"

namespace intrafusion {

enum class SliceRole { kProducer, kConsumer, kElementwise };

// One coupled axis of a layer: a producer's output channels, a consumer's
// input channels (each channel spanning `block` consecutive columns, >1 only
// behind a Flatten) or a BatchNorm's per-channel entries.
struct AxisSlice {
  std::string layer;
  SliceRole role = SliceRole::kProducer;
  int block = 1;
};

// Layer slices that must be pruned in unison. Prunable groups are numbered
// from the model output backwards (id 0 is nearest the output); groups that
// touch the model input or output follow them and are never pruned.
struct Group {
  int id = 0;
  int cardinality = 0;
  bool prunable = false;
  // Producers, then consumers, then elementwise slices, each in topological order.
  std::vector<AxisSlice> slices;
  // Every node whose output lives on this channel axis, in topological order.
  std::vector<std::string> members;
};

std::vector<Group> build_groups(const ModelGraph& model);
const Group& find_group(const std::vector<Group>& groups, int id);
std::vector<const Group*> prunable_groups(const std::vector<Group>& groups);

// Tensor axis a slice addresses for a given parameter (0 or 1), and the
// parameters it touches.
int slice_axis(const AxisSlice& slice);
std::vector<std::string> slice_params(const ModelGraph& model, const AxisSlice& slice);

// Flat offsets of the entries of `param` belonging to channel j.
std::vector<std::size_t> channel_offsets(const Tensor& param, int axis, int block, int channel);

struct ParamEntries {
  std::string layer;
  SliceRole role = SliceRole::kProducer;
  std::string param;
  std::vector<std::size_t> offsets;
};

// Parameter entries owned by pairing j. Elementwise (BN) entries are included
// only when `with_elementwise` is set; running statistics never are.
std::vector<ParamEntries> pairing_entries(const ModelGraph& model, const Group& group, int j,
                                          bool with_elementwise);

// Concatenated producer rows + biases, then consumer columns, for every
// pairing. Expects a BN-folded model so BN layers carry no information.
std::vector<std::vector<float>> pairing_vectors(const ModelGraph& folded, const Group& group);
// Producer rows + biases only (incoming weights).
std::vector<std::vector<float>> incoming_vectors(const ModelGraph& model, const Group& group);

}  // namespace intrafusion
