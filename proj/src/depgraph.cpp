#include "intrafusion/depgraph.hpp"

#include <algorithm>
#include <map>
#include <numeric>

#include "intrafusion/errors.hpp"

namespace intrafusion {

namespace {

std::size_t uz(int v) { return static_cast<std::size_t>(v); }

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[uz(x)] != x) {
      parent[uz(x)] = parent[uz(parent[uz(x)])];
      x = parent[uz(x)];
    }
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[uz(std::max(a, b))] = std::min(a, b);
  }
};

bool passes_channels(LayerKind k) {
  return k == LayerKind::kBatchNorm || k == LayerKind::kReLU || k == LayerKind::kAvgPool ||
         k == LayerKind::kMaxPool || k == LayerKind::kFlatten || k == LayerKind::kAdd;
}

}  // namespace

std::vector<Group> build_groups(const ModelGraph& model) {
  const auto shapes = model.infer_shapes();
  const auto order = model.topo_order();
  const std::size_t count = model.nodes.size();
  std::vector<int> topo_pos(count);
  for (std::size_t i = 0; i < order.size(); ++i) topo_pos[uz(order[i])] = static_cast<int>(i);

  // Longest path from a source; invariant under node storage order.
  std::vector<int> depth(count, 0);
  for (int idx : order) {
    for (const auto& in : model.nodes[uz(idx)].inputs) {
      depth[uz(idx)] = std::max(depth[uz(idx)], depth[uz(model.index_of(in))] + 1);
    }
  }

  UnionFind uf(count);
  for (std::size_t i = 0; i < count; ++i) {
    const LayerNode& n = model.nodes[i];
    if (!passes_channels(n.kind)) continue;
    for (const auto& in : n.inputs) uf.unite(static_cast<int>(i), model.index_of(in));
  }

  struct Acc {
    std::vector<int> members, producers, consumers, elementwise;
  };
  std::map<int, Acc> classes;
  for (int idx : order) {
    const LayerNode& n = model.nodes[uz(idx)];
    Acc& own = classes[uf.find(idx)];
    own.members.push_back(idx);
    if (n.is_affine()) own.producers.push_back(idx);
    if (n.kind == LayerKind::kBatchNorm) own.elementwise.push_back(idx);
    if (n.is_affine()) classes[uf.find(model.index_of(n.inputs[0]))].consumers.push_back(idx);
  }
  for (auto& [root, acc] : classes) std::sort(acc.consumers.begin(), acc.consumers.end(),
                                              [&](int a, int b) { return topo_pos[uz(a)] < topo_pos[uz(b)]; });

  const int out_idx = model.index_of(model.output_id);
  struct Pending {
    Group g;
    int key;
    std::string tie;
  };
  std::vector<Pending> pending;
  for (auto& [root, acc] : classes) {
    Group g;
    bool has_input = false;
    int n = 0;
    for (int idx : acc.members) {
      const LayerNode& node = model.nodes[uz(idx)];
      g.members.push_back(node.id);
      if (node.kind == LayerKind::kInput) has_input = true;
      if (node.kind != LayerKind::kFlatten) {
        const int c = shapes[uz(idx)][0];
        if (n == 0) n = c;
        if (c != n) throw StructuralError("channel axis of " + node.id + " has " + std::to_string(c) +
                                          " channels, coupled axis has " + std::to_string(n));
      }
    }
    if (n == 0) continue;  // only a Flatten over a 1-D input: no channel axis
    g.cardinality = n;
    for (int idx : acc.producers) g.slices.push_back({model.nodes[uz(idx)].id, SliceRole::kProducer, 1});
    for (int idx : acc.consumers) {
      const LayerNode& c = model.nodes[uz(idx)];
      if (c.in_channels % n != 0) {
        throw StructuralError("layer " + c.id + " input width " + std::to_string(c.in_channels) +
                              " is not a multiple of coupled channel count " + std::to_string(n));
      }
      if (c.kind == LayerKind::kConv2d && c.in_channels != n) {
        throw StructuralError("conv layer " + c.id + " cannot consume a flattened axis");
      }
      g.slices.push_back({c.id, SliceRole::kConsumer, c.in_channels / n});
    }
    for (int idx : acc.elementwise) g.slices.push_back({model.nodes[uz(idx)].id, SliceRole::kElementwise, 1});
    const bool touches_output = std::find(acc.members.begin(), acc.members.end(), out_idx) != acc.members.end();
    g.prunable = !has_input && !touches_output && !acc.producers.empty() && !acc.consumers.empty();
    int key = -1;
    std::string tie;
    for (int idx : acc.producers) {
      if (depth[uz(idx)] > key || (depth[uz(idx)] == key && model.nodes[uz(idx)].id < tie)) {
        key = depth[uz(idx)];
        tie = model.nodes[uz(idx)].id;
      }
    }
    if (acc.producers.empty()) tie = g.members.front();
    pending.push_back({std::move(g), key, tie});
  }
  std::sort(pending.begin(), pending.end(), [](const Pending& a, const Pending& b) {
    if (a.g.prunable != b.g.prunable) return a.g.prunable;
    if (a.key != b.key) return a.key > b.key;
    return a.tie < b.tie;
  });
  std::vector<Group> groups;
  for (auto& p : pending) {
    p.g.id = static_cast<int>(groups.size());
    groups.push_back(std::move(p.g));
  }
  return groups;
}

const Group& find_group(const std::vector<Group>& groups, int id) {
  for (const auto& g : groups) {
    if (g.id == id) return g;
  }
  throw InputError("no group with id " + std::to_string(id));
}

std::vector<const Group*> prunable_groups(const std::vector<Group>& groups) {
  std::vector<const Group*> out;
  for (const auto& g : groups) {
    if (g.prunable) out.push_back(&g);
  }
  return out;
}

int slice_axis(const AxisSlice& slice) { return slice.role == SliceRole::kConsumer ? 1 : 0; }

std::vector<std::string> slice_params(const ModelGraph& model, const AxisSlice& slice) {
  const LayerNode& n = model.node(slice.layer);
  switch (slice.role) {
    case SliceRole::kProducer:
      return n.find_param("bias") ? std::vector<std::string>{"weight", "bias"} : std::vector<std::string>{"weight"};
    case SliceRole::kConsumer:
      return {"weight"};
    case SliceRole::kElementwise:
      return {"gamma", "beta", "running_mean", "running_var"};
  }
  return {};
}

std::vector<std::size_t> channel_offsets(const Tensor& param, int axis, int block, int channel) {
  const auto& s = param.shape();
  std::size_t outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= uz(s[uz(a)]);
  for (std::size_t a = uz(axis) + 1; a < s.size(); ++a) inner *= uz(s[a]);
  const std::size_t len = uz(s[uz(axis)]);
  if (uz((channel + 1) * block) > len) throw InputError("channel index out of range for parameter axis");
  std::vector<std::size_t> out;
  out.reserve(outer * uz(block) * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (int r = 0; r < block; ++r) {
      const std::size_t base = (o * len + uz(channel * block + r)) * inner;
      for (std::size_t i = 0; i < inner; ++i) out.push_back(base + i);
    }
  }
  return out;
}

std::vector<ParamEntries> pairing_entries(const ModelGraph& model, const Group& group, int j, bool with_elementwise) {
  if (j < 0 || j >= group.cardinality) throw InputError("pairing index out of range");
  std::vector<ParamEntries> out;
  for (const auto& s : group.slices) {
    if (s.role == SliceRole::kElementwise && !with_elementwise) continue;
    const LayerNode& n = model.node(s.layer);
    for (const auto& pname : slice_params(model, s)) {
      if (pname == "running_mean" || pname == "running_var") continue;
      const Tensor& t = n.param(pname);
      const int axis = slice_axis(s);
      if (t.dim(uz(axis)) != group.cardinality * s.block) {
        throw InputError("group " + std::to_string(group.id) + " does not match layer " + s.layer);
      }
      out.push_back({s.layer, s.role, pname, channel_offsets(t, axis, s.block, j)});
    }
  }
  return out;
}

namespace {
std::vector<std::vector<float>> gather(const ModelGraph& model, const Group& group, bool consumers) {
  std::vector<std::vector<float>> out(uz(group.cardinality));
  for (int j = 0; j < group.cardinality; ++j) {
    for (const auto& e : pairing_entries(model, group, j, false)) {
      if (!consumers && e.role == SliceRole::kConsumer) continue;
      const Tensor& t = model.node(e.layer).param(e.param);
      for (std::size_t off : e.offsets) out[uz(j)].push_back(t[off]);
    }
  }
  return out;
}
}  // namespace

std::vector<std::vector<float>> pairing_vectors(const ModelGraph& folded, const Group& group) {
  return gather(folded, group, true);
}

std::vector<std::vector<float>> incoming_vectors(const ModelGraph& model, const Group& group) {
  return gather(model, group, false);
}

}  // namespace intrafusion
