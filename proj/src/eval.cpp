#include "intrafusion/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "intrafusion/depgraph.hpp"
#include "intrafusion/engine.hpp"
#include "intrafusion/errors.hpp"
#include "intrafusion/pipelines.hpp"

namespace intrafusion {

namespace {
std::size_t uz(int v) { return static_cast<std::size_t>(v); }
}  // namespace

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::size_t rows = labels.size();
  if (rows == 0) return 0;
  const std::size_t classes = logits.numel() / rows;
  std::size_t correct = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (logits[r * classes + c] > logits[r * classes + best]) best = c;
    }
    correct += static_cast<int>(best) == labels[r];
  }
  return correct;
}

double accuracy(const ModelGraph& model, const Dataset& data, int batch_size) {
  if (data.size() == 0) throw InputError("accuracy of an empty dataset is undefined");
  if (batch_size <= 0) throw InputError("batch size must be positive");
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += uz(batch_size)) {
    const Dataset part = data.slice(begin, std::min(uz(batch_size), data.size() - begin));
    correct += count_correct(forward(model, part.features), part.labels);
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double output_divergence(const ModelGraph& original, const ModelGraph& pruned, const Dataset& data, int batch_size) {
  if (original.output_shape() != pruned.output_shape()) throw InputError("models differ in output dimension");
  if (data.size() == 0) throw InputError("divergence over an empty dataset is undefined");
  if (batch_size <= 0) throw InputError("batch size must be positive");
  double total = 0.0;
  for (std::size_t begin = 0; begin < data.size(); begin += uz(batch_size)) {
    const std::size_t count = std::min(uz(batch_size), data.size() - begin);
    const Dataset part = data.slice(begin, count);
    const Tensor a = forward(original, part.features);
    const Tensor b = forward(pruned, part.features);
    const std::size_t width = a.numel() / count;
    for (std::size_t r = 0; r < count; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < width; ++c) {
        const double d = static_cast<double>(a[r * width + c]) - static_cast<double>(b[r * width + c]);
        s += d * d;
      }
      total += std::sqrt(s);
    }
  }
  return total / static_cast<double>(data.size());
}

void write_eval_csv(std::ostream& out, std::span<const EvalRecord> records) {
  out << "model,dataset,accuracy,divergence,params,original_params,neuron_sparsity,weight_sparsity\n";
  out << std::setprecision(9);
  for (const auto& r : records) {
    out << r.model_id << ',' << r.dataset_id << ',' << r.accuracy << ',' << r.divergence << ',' << r.params << ','
        << r.original_params << ',' << r.neuron_sparsity << ',' << r.weight_sparsity << '\n';
  }
}

std::vector<float> vectorize(const ModelGraph& model) {
  std::vector<float> out;
  for (const auto& n : model.nodes) {
    for (const auto& p : n.params) out.insert(out.end(), p.value.values().begin(), p.value.values().end());
  }
  return out;
}

ModelGraph devectorize(const ModelGraph& layout, std::span<const float> values) {
  ModelGraph out = layout;
  std::size_t pos = 0;
  for (auto& n : out.nodes) {
    for (auto& p : n.params) {
      if (pos + p.value.numel() > values.size()) throw InputError("parameter vector too short for the layout");
      std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(pos), p.value.numel(), p.value.values().begin());
      pos += p.value.numel();
    }
  }
  if (pos != values.size()) throw InputError("parameter vector longer than the layout");
  return out;
}

IndexMap index_map_from(const PruneReport& report) {
  IndexMap map;
  for (const auto& g : report.groups) {
    if (g.positions.empty()) throw InputError("group " + std::to_string(g.group) + " has no positional index map");
    map[g.group] = g.positions;
  }
  return map;
}

namespace {

// Per layer: original position of each pruned index along axis 0 and axis 1.
struct AxisMaps {
  std::map<std::string, std::vector<int>> axis0;
  std::map<std::string, std::vector<int>> axis1;  // already block-expanded
};

AxisMaps axis_maps(const ModelGraph& original, const ModelGraph& pruned, const IndexMap& index_map) {
  AxisMaps maps;
  const auto groups = build_groups(original);
  for (const auto& g : groups) {
    const auto it = index_map.find(g.id);
    std::vector<int> pos;
    if (it != index_map.end()) {
      pos = it->second;
      for (int p : pos) {
        if (p < 0 || p >= g.cardinality) throw InputError("index map position out of range");
      }
    } else {
      pos.resize(uz(g.cardinality));
      for (int i = 0; i < g.cardinality; ++i) pos[uz(i)] = i;
    }
    for (const auto& s : g.slices) {
      const Tensor& p = pruned.node(s.layer).param(s.role == SliceRole::kElementwise ? "gamma" : "weight");
      if (p.dim(uz(slice_axis(s))) != static_cast<int>(pos.size()) * s.block) {
        throw InputError("missing or inconsistent index map for group " + std::to_string(g.id) + " at layer " + s.layer);
      }
      if (s.role == SliceRole::kConsumer) {
        std::vector<int> expanded;
        for (int c : pos) {
          for (int r = 0; r < s.block; ++r) expanded.push_back(c * s.block + r);
        }
        maps.axis1[s.layer] = std::move(expanded);
      } else {
        maps.axis0[s.layer] = pos;
      }
    }
  }
  return maps;
}

// Calls fn(pruned flat index, original flat index) for every pruned entry.
template <typename Fn>
void for_each_entry(const Tensor& small, const Tensor& big, const std::vector<int>* m0, const std::vector<int>* m1, Fn fn) {
  const Shape& s = small.shape();
  const Shape& b = big.shape();
  const std::size_t d0 = uz(s[0]);
  const std::size_t d1 = s.size() > 1 ? uz(s[1]) : 1;
  const std::size_t big1 = b.size() > 1 ? uz(b[1]) : 1;
  const std::size_t inner = small.numel() / (d0 * d1);
  for (std::size_t i0 = 0; i0 < d0; ++i0) {
    const std::size_t o0 = m0 ? uz((*m0)[i0]) : i0;
    for (std::size_t i1 = 0; i1 < d1; ++i1) {
      const std::size_t o1 = m1 ? uz((*m1)[i1]) : i1;
      for (std::size_t q = 0; q < inner; ++q) fn((i0 * d1 + i1) * inner + q, (o0 * big1 + o1) * inner + q);
    }
  }
}

const std::vector<int>* lookup(const std::map<std::string, std::vector<int>>& m, const std::string& layer) {
  const auto it = m.find(layer);
  return it == m.end() ? nullptr : &it->second;
}

}  // namespace

ModelGraph embed_pruned(const ModelGraph& pruned, const ModelGraph& original, const IndexMap& index_map) {
  const AxisMaps maps = axis_maps(original, pruned, index_map);
  ModelGraph out = original;
  for (auto& n : out.nodes) {
    for (auto& p : n.params) p.value.fill(p.name == "running_var" ? 1.0f - n.eps : 0.0f);
  }
  for (auto& n : out.nodes) {
    const LayerNode& src = pruned.node(n.id);
    for (auto& p : n.params) {
      const Tensor& small = src.param(p.name);
      const bool rank1 = small.rank() == 1;
      for_each_entry(small, p.value, lookup(maps.axis0, n.id), rank1 ? nullptr : lookup(maps.axis1, n.id),
                     [&](std::size_t from, std::size_t to) { p.value[to] = small[from]; });
    }
  }
  return out;
}

ModelGraph extract_pruned(const ModelGraph& embedded, const ModelGraph& pruned_layout, const IndexMap& index_map) {
  const AxisMaps maps = axis_maps(embedded, pruned_layout, index_map);
  ModelGraph out = pruned_layout;
  for (auto& n : out.nodes) {
    const LayerNode& big = embedded.node(n.id);
    for (auto& p : n.params) {
      const Tensor& full = big.param(p.name);
      const bool rank1 = p.value.rank() == 1;
      for_each_entry(p.value, full, lookup(maps.axis0, n.id), rank1 ? nullptr : lookup(maps.axis1, n.id),
                     [&](std::size_t to, std::size_t from) { p.value[to] = full[from]; });
    }
  }
  return out;
}

LandscapeGrid landscape_grid(const ModelGraph& layout, std::span<const float> theta0, std::span<const float> a,
                             std::span<const float> b, const Dataset& data, const LandscapeOptions& options) {
  const std::size_t dim = theta0.size();
  if (a.size() != dim || b.size() != dim) throw InputError("landscape anchors differ in dimension");
  if (options.resolution < 2) throw InputError("landscape resolution must be at least 2");
  if (!(options.margin >= 0.0)) throw InputError("landscape margin must be non-negative");
  std::vector<double> u(dim), v(dim);
  double uu = 0.0, uv = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    u[i] = static_cast<double>(a[i]) - static_cast<double>(theta0[i]);
    v[i] = static_cast<double>(b[i]) - static_cast<double>(theta0[i]);
    uu += u[i] * u[i];
    uv += u[i] * v[i];
  }
  if (uu == 0.0) throw InputError("degenerate landscape plane: model A equals the origin");
  LandscapeGrid grid;
  grid.b_alpha = uv / uu;
  double vv = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double w = v[i] - grid.b_alpha * u[i];
    vv += w * w;
  }
  if (vv <= 1e-20 * uu) throw InputError("degenerate landscape plane: the three models are collinear");

  // theta0 + alpha u + beta v_hat == theta0 + (alpha - beta b_alpha) u + beta v, which
  // lands exactly on a and b at their coordinates.
  auto point = [&](double alpha, double beta) {
    std::vector<float> p(dim);
    const double cu = alpha - beta * grid.b_alpha;
    for (std::size_t i = 0; i < dim; ++i) {
      p[i] = static_cast<float>(static_cast<double>(theta0[i]) + cu * u[i] + beta * v[i]);
    }
    return p;
  };
  const int res = options.resolution;
  const double lo = -options.margin, span = 1.0 + 2.0 * options.margin;
  grid.cells.push_back({"origin", 0.0, 0.0, 0.0});
  grid.cells.push_back({"a", 1.0, 0.0, 0.0});
  grid.cells.push_back({"b", grid.b_alpha, 1.0, 0.0});
  for (int i = 0; i < res; ++i) {
    for (int j = 0; j < res; ++j) {
      grid.cells.push_back({"grid", lo + span * i / (res - 1), lo + span * j / (res - 1), 0.0});
    }
  }
  parallel_for(static_cast<int>(grid.cells.size()), options.threads, [&](int k) {
    LandscapeCell& c = grid.cells[uz(k)];
    c.accuracy = accuracy(devectorize(layout, point(c.alpha, c.beta)), data);
  });
  return grid;
}

void write_landscape_csv(std::ostream& out, const LandscapeGrid& grid) {
  out << "kind,alpha,beta,accuracy\n" << std::setprecision(9);
  for (const auto& c : grid.cells) out << c.kind << ',' << c.alpha << ',' << c.beta << ',' << c.accuracy << '\n';
}

std::vector<AblationRow> ablation_grid(const ModelGraph& model, const Dataset& data, std::span<const int> groups,
                                       std::span<const double> sparsities, const ImportanceConfig& importance,
                                       const IntraFusionOptions& base, DistMode importance_mode) {
  if (importance_mode == DistMode::kUniform) throw InputError("importance-informed mode must not be uniform");
  std::vector<AblationRow> rows;
  const auto all = build_groups(model);
  for (int gid : groups) {
    const Group& g = find_group(all, gid);
    if (!g.prunable) throw InputError("group " + std::to_string(gid) + " is not prunable");
    const ImportanceVector iv = compute_importance(model, g, importance);
    for (double s : sparsities) {
      const int m = sparsity_to_m(g.cardinality, s);
      for (bool target_informed : {false, true}) {
        for (bool source_informed : {false, true}) {
          IntraFusionOptions opt = base;
          opt.source_dist = source_informed ? importance_mode : DistMode::kUniform;
          opt.target_dist = target_informed ? importance_mode : DistMode::kUniform;
          AblationRow row;
          row.group = gid;
          row.sparsity = s;
          row.n = g.cardinality;
          row.m = m;
          row.source_dist = source_informed ? "importance" : "uniform";
          row.target_dist = target_informed ? "importance" : "uniform";
          row.label = std::string(target_informed ? "i" : "u") + "T" + (source_informed ? "i" : "u") + "S";
          row.accuracy = accuracy(intra_fuse(model, g, iv.scores, m, opt), data);
          rows.push_back(std::move(row));
        }
      }
    }
  }
  return rows;
}

void write_ablation_csv(std::ostream& out, std::span<const AblationRow> rows) {
  out << "group,sparsity,n,m,source_dist,target_dist,label,accuracy\n" << std::setprecision(9);
  for (const auto& r : rows) {
    out << r.group << ',' << r.sparsity << ',' << r.n << ',' << r.m << ',' << r.source_dist << ',' << r.target_dist
        << ',' << r.label << ',' << r.accuracy << '\n';
  }
}

}  // namespace intrafusion
