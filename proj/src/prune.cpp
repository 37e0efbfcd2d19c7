#include "intrafusion/prune.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "intrafusion/errors.hpp"
#include "intrafusion/rng.hpp"

namespace intrafusion {

namespace {

std::size_t uz(int v) { return static_cast<std::size_t>(v); }

struct AxisLayout {
  std::size_t outer = 1, len = 0, inner = 1;
};

AxisLayout layout(const Shape& s, int axis) {
  AxisLayout l;
  for (int a = 0; a < axis; ++a) l.outer *= uz(s[uz(a)]);
  l.len = uz(s[uz(axis)]);
  for (std::size_t a = uz(axis) + 1; a < s.size(); ++a) l.inner *= uz(s[a]);
  return l;
}

void resize_node(LayerNode& node, const AxisSlice& slice, int m) {
  switch (slice.role) {
    case SliceRole::kProducer: node.out_channels = m; break;
    case SliceRole::kConsumer: node.in_channels = m * slice.block; break;
    case SliceRole::kElementwise:
      node.in_channels = m;
      node.out_channels = m;
      break;
  }
}

void check_group(const ModelGraph& model, const Group& group) {
  if (!group.prunable) throw InputError("group " + std::to_string(group.id) + " is not prunable");
  for (const auto& s : group.slices) {
    const LayerNode& n = model.node(s.layer);
    const Tensor& w = n.param(s.role == SliceRole::kElementwise ? "gamma" : "weight");
    if (w.dim(uz(slice_axis(s))) != group.cardinality * s.block) {
      throw InputError("group " + std::to_string(group.id) + " does not match layer " + s.layer);
    }
  }
}

}  // namespace

ModelGraph fold_batchnorm(const ModelGraph& model) {
  ModelGraph out = model;
  const auto consumers = model.consumers();
  for (std::size_t i = 0; i < out.nodes.size(); ++i) {
    LayerNode& bn = out.nodes[i];
    if (bn.kind != LayerKind::kBatchNorm) continue;
    const int pidx = out.index_of(bn.inputs[0]);
    LayerNode& prod = out.nodes[uz(pidx)];
    if (!prod.is_affine()) {
      throw StructuralError("batchnorm " + bn.id + " does not directly follow a linear or conv layer");
    }
    if (consumers[uz(pidx)].size() != 1) {
      throw StructuralError("layer " + prod.id + " feeds batchnorm " + bn.id + " and other layers; cannot fold");
    }
    const int c = bn.out_channels;
    Tensor& w = prod.param("weight");
    if (!prod.find_param("bias")) prod.params.push_back({"bias", Tensor({prod.out_channels})});
    Tensor& b = prod.param("bias");
    const Tensor& gamma = bn.param("gamma");
    const Tensor& beta = bn.param("beta");
    const Tensor& mean = bn.param("running_mean");
    const Tensor& var = bn.param("running_var");
    const std::size_t row = w.numel() / uz(c);
    for (int ch = 0; ch < c; ++ch) {
      const auto k = uz(ch);
      const double scale = static_cast<double>(gamma[k]) /
                           std::sqrt(static_cast<double>(var[k]) + static_cast<double>(bn.eps));
      for (std::size_t t = 0; t < row; ++t) {
        w[k * row + t] = static_cast<float>(static_cast<double>(w[k * row + t]) * scale);
      }
      b[k] = static_cast<float>((static_cast<double>(b[k]) - static_cast<double>(mean[k])) * scale +
                                static_cast<double>(beta[k]));
    }
    bn.param("gamma").fill(1.0f);
    bn.param("beta").fill(0.0f);
    bn.param("running_mean").fill(0.0f);
    bn.param("running_var").fill(1.0f - bn.eps);
  }
  return out;
}

int sparsity_to_m(int n, double sparsity) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw InputError("sparsity must lie in [0, 1)");
  return std::max(1, static_cast<int>(std::lround(static_cast<double>(n) * (1.0 - sparsity))));
}

std::vector<int> select_top_m(std::span<const double> importance, int m) {
  const int n = static_cast<int>(importance.size());
  if (m < 1 || m > n) throw InputError("target cardinality " + std::to_string(m) + " outside [1, " + std::to_string(n) + "]");
  std::vector<int> idx(uz(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return importance[uz(a)] > importance[uz(b)]; });
  idx.resize(uz(m));
  std::sort(idx.begin(), idx.end());
  return idx;
}

Tensor select_axis(const Tensor& t, int axis, int block, std::span<const int> channels) {
  const AxisLayout l = layout(t.shape(), axis);
  Shape shape = t.shape();
  shape[uz(axis)] = static_cast<int>(channels.size()) * block;
  Tensor out(shape);
  const std::size_t new_len = uz(shape[uz(axis)]);
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t c = 0; c < channels.size(); ++c) {
      for (int r = 0; r < block; ++r) {
        const std::size_t src = (o * l.len + uz(channels[c] * block + r)) * l.inner;
        const std::size_t dst = (o * new_len + c * uz(block) + uz(r)) * l.inner;
        std::copy_n(t.values().begin() + static_cast<std::ptrdiff_t>(src), l.inner,
                    out.values().begin() + static_cast<std::ptrdiff_t>(dst));
      }
    }
  }
  return out;
}

Tensor mix_axis(const Tensor& t, int axis, int block, const Matrix& coeffs) {
  const AxisLayout l = layout(t.shape(), axis);
  if (uz(coeffs.cols * block) != l.len) throw InputError("mixing matrix does not match tensor axis");
  Shape shape = t.shape();
  shape[uz(axis)] = coeffs.rows * block;
  Tensor out(shape);
  const std::size_t new_len = uz(shape[uz(axis)]);
  std::vector<double> acc(l.inner);
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (int i = 0; i < coeffs.rows; ++i) {
      for (int r = 0; r < block; ++r) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int j = 0; j < coeffs.cols; ++j) {
          const double c = coeffs(i, j);
          if (c == 0.0) continue;
          const std::size_t src = (o * l.len + uz(j * block + r)) * l.inner;
          for (std::size_t q = 0; q < l.inner; ++q) acc[q] += c * static_cast<double>(t[src + q]);
        }
        const std::size_t dst = (o * new_len + uz(i * block + r)) * l.inner;
        for (std::size_t q = 0; q < l.inner; ++q) out[dst + q] = static_cast<float>(acc[q]);
      }
    }
  }
  return out;
}

ModelGraph select_pairings(const ModelGraph& model, const Group& group, std::span<const int> kept) {
  check_group(model, group);
  for (std::size_t k = 0; k < kept.size(); ++k) {
    if (kept[k] < 0 || kept[k] >= group.cardinality) throw InputError("pairing index out of range");
  }
  if (kept.empty()) throw InputError("cannot remove every pairing of a group");
  ModelGraph out = model;
  for (const auto& s : group.slices) {
    LayerNode& node = out.node(s.layer);
    for (const auto& pname : slice_params(model, s)) {
      Tensor& p = node.param(pname);
      p = select_axis(p, slice_axis(s), s.block, kept);
    }
    resize_node(node, s, static_cast<int>(kept.size()));
  }
  out.validate();
  return out;
}

ModelGraph mix_pairings(const ModelGraph& model, const Group& group, const Matrix& producer, const Matrix& consumer,
                        const Matrix* elementwise) {
  check_group(model, group);
  const int m = producer.rows;
  if (producer.cols != group.cardinality || consumer.cols != group.cardinality || consumer.rows != m ||
      (elementwise && (elementwise->rows != m || elementwise->cols != group.cardinality))) {
    throw InputError("mixing matrices do not match group cardinality");
  }
  if (m < 1) throw InputError("cannot remove every pairing of a group");
  std::vector<int> first(uz(m));
  std::iota(first.begin(), first.end(), 0);
  ModelGraph out = model;
  for (const auto& s : group.slices) {
    LayerNode& node = out.node(s.layer);
    for (const auto& pname : slice_params(model, s)) {
      Tensor& p = node.param(pname);
      switch (s.role) {
        case SliceRole::kProducer: p = mix_axis(p, 0, 1, producer); break;
        case SliceRole::kConsumer: p = mix_axis(p, 1, s.block, consumer); break;
        case SliceRole::kElementwise:
          p = elementwise ? mix_axis(p, 0, 1, *elementwise) : select_axis(p, 0, 1, first);
          break;
      }
    }
    resize_node(node, s, m);
  }
  out.validate();
  return out;
}

ModelGraph conventional_prune(const ModelGraph& model, const Group& group, std::span<const double> importance, int m) {
  if (importance.size() != uz(group.cardinality)) throw InputError("importance length does not match group");
  return select_pairings(model, group, select_top_m(importance, m));
}

TargetSelection kmeans_targets(const std::vector<std::vector<float>>& points, std::span<const double> importance,
                               int m, std::uint64_t seed) {
  const int n = static_cast<int>(points.size());
  if (m < 1 || m > n) throw InputError("k-means cluster count outside [1, n]");
  const std::size_t d = points.front().size();
  auto dist2 = [&](const std::vector<double>& c, const std::vector<float>& p) {
    double s = 0.0;
    for (std::size_t t = 0; t < d; ++t) {
      const double diff = c[t] - static_cast<double>(p[t]);
      s += diff * diff;
    }
    return s;
  };
  Rng rng(seed);
  std::vector<std::vector<double>> centers;
  auto as_center = [&](int i) { return std::vector<double>(points[uz(i)].begin(), points[uz(i)].end()); };
  centers.push_back(as_center(static_cast<int>(rng.below(static_cast<std::uint64_t>(n)))));
  std::vector<double> best(uz(n), std::numeric_limits<double>::infinity());
  TargetSelection sel;
  while (static_cast<int>(centers.size()) < m) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      best[uz(i)] = std::min(best[uz(i)], dist2(centers.back(), points[uz(i)]));
      total += best[uz(i)];
    }
    int pick = n - 1;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double run = 0.0;
      for (int i = 0; i < n; ++i) {
        run += best[uz(i)];
        if (best[uz(i)] > 0.0 && r < run) {
          pick = i;
          break;
        }
      }
      while (best[uz(pick)] == 0.0) --pick;
    } else {
      sel.duplicate_centroids = true;
      pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    }
    centers.push_back(as_center(pick));
  }

  std::vector<int> assign(uz(n), 0);
  for (int it = 0; it < 100; ++it) {
    sel.iterations = it + 1;
    for (int i = 0; i < n; ++i) {
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < m; ++c) {
        const double dd = dist2(centers[uz(c)], points[uz(i)]);
        if (dd < bd) {
          bd = dd;
          assign[uz(i)] = c;
        }
      }
    }
    std::vector<std::vector<double>> next(uz(m), std::vector<double>(d, 0.0));
    std::vector<int> count(uz(m), 0);
    for (int i = 0; i < n; ++i) {
      count[uz(assign[uz(i)])]++;
      for (std::size_t t = 0; t < d; ++t) next[uz(assign[uz(i)])][t] += static_cast<double>(points[uz(i)][t]);
    }
    double shift = 0.0, norm = 0.0;
    for (int c = 0; c < m; ++c) {
      if (count[uz(c)] == 0) {
        next[uz(c)] = centers[uz(c)];
      } else {
        for (double& v : next[uz(c)]) v /= count[uz(c)];
      }
      double s = 0.0, q = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        s += (next[uz(c)][t] - centers[uz(c)][t]) * (next[uz(c)][t] - centers[uz(c)][t]);
        q += centers[uz(c)][t] * centers[uz(c)][t];
      }
      shift += std::sqrt(s);
      norm += std::sqrt(q);
    }
    centers = std::move(next);
    if (shift <= 1e-6 * std::max(norm, std::numeric_limits<double>::min())) break;
  }

  sel.assignment = assign;
  sel.importance.assign(uz(m), 0.0);
  for (int i = 0; i < n; ++i) {
    if (!importance.empty()) sel.importance[uz(assign[uz(i)])] += importance[uz(i)];
  }
  for (int a = 0; a < m; ++a) {
    for (int b = a + 1; b < m; ++b) {
      if (centers[uz(a)] == centers[uz(b)]) sel.duplicate_centroids = true;
    }
  }
  for (const auto& c : centers) sel.vectors.emplace_back(c.begin(), c.end());
  return sel;
}

TargetSelection select_target(const ModelGraph& folded, const Group& group, std::span<const double> importance,
                              int m, TargetMode mode, std::uint64_t seed) {
  if (importance.size() != uz(group.cardinality)) throw InputError("importance length does not match group");
  const auto points = pairing_vectors(folded, group);
  if (mode == TargetMode::kKMeans) return kmeans_targets(points, importance, m, seed);
  TargetSelection sel;
  sel.indices = select_top_m(importance, m);
  for (int k : sel.indices) {
    sel.vectors.push_back(points[uz(k)]);
    sel.importance.push_back(importance[uz(k)]);
  }
  return sel;
}

IntraFusionResult intra_fuse_detailed(const ModelGraph& model, const Group& group, std::span<const double> importance,
                                      int m, const IntraFusionOptions& options) {
  check_group(model, group);
  if (importance.size() != uz(group.cardinality)) throw InputError("importance length does not match group");
  const int n = group.cardinality;
  IntraFusionResult r;
  ModelGraph folded = fold_batchnorm(model);
  const auto sources = pairing_vectors(folded, group);
  r.targets = select_target(folded, group, importance, m, options.target, options.kmeans_seed);
  const Matrix cost = cost_matrix(sources, r.targets.vectors);
  const auto mu = make_distribution(n, importance, options.source_dist, options.fallback_uniform);
  const auto nu = make_distribution(m, r.targets.importance, options.target_dist, options.fallback_uniform);
  r.plan = solve_ot(mu, nu, cost);
  r.coefficients = normalize_transport(r.plan);
  Matrix consumer = r.coefficients;
  if (options.consumer == ConsumerAggregation::kMassSum) {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) consumer(i, j) = static_cast<double>(n) * r.plan.T(j, i);
    }
  }
  r.model = mix_pairings(folded, group, r.coefficients, consumer);
  return r;
}

ModelGraph intra_fuse(const ModelGraph& model, const Group& group, std::span<const double> importance, int m,
                      const IntraFusionOptions& options) {
  return intra_fuse_detailed(model, group, importance, m, options).model;
}

std::string_view method_name(PruneMethod method) {
  return method == PruneMethod::kConventional ? "conventional" : "intra-fusion";
}

PruneMethod parse_method(std::string_view name) {
  if (name == "conventional") return PruneMethod::kConventional;
  if (name == "intra-fusion") return PruneMethod::kIntraFusion;
  throw InputError("unknown pruning method '" + std::string(name) + "'");
}

namespace {

struct StepResult {
  ModelGraph model;
  GroupReport report;
};

StepResult prune_step(const ModelGraph& model, const Group& group, int m, const PruneOptions& options) {
  const ImportanceVector iv = compute_importance(model, group, options.importance);
  StepResult step;
  step.report.group = group.id;
  step.report.n = group.cardinality;
  step.report.m = m;
  if (options.method == PruneMethod::kConventional) {
    step.report.positions = select_top_m(iv.scores, m);
    step.model = select_pairings(model, group, step.report.positions);
  } else {
    IntraFusionResult r = intra_fuse_detailed(model, group, iv.scores, m, options.fusion);
    step.report.positions = r.targets.indices;
    step.model = std::move(r.model);
  }
  return step;
}

void finish_report(PruneReport& report, const ModelGraph& before, const ModelGraph& after) {
  report.before = count_params(before);
  report.after = count_params(after);
  int n = 0, m = 0;
  for (const auto& g : report.groups) {
    n += g.n;
    m += g.m;
  }
  report.neuron_sparsity = n > 0 ? 1.0 - static_cast<double>(m) / n : 0.0;
  report.weight_sparsity =
      report.before.total > 0 ? 1.0 - static_cast<double>(report.after.total) / static_cast<double>(report.before.total) : 0.0;
}

}  // namespace

PruneResult prune_group(const ModelGraph& model, int group_id, int m, const PruneOptions& options) {
  const auto groups = build_groups(model);
  StepResult step = prune_step(model, find_group(groups, group_id), m, options);
  PruneResult res{std::move(step.model), {}};
  res.report.groups.push_back(std::move(step.report));
  finish_report(res.report, model, res.model);
  return res;
}

PruneResult prune_to_sizes(const ModelGraph& model, const std::map<int, int>& sizes, const PruneOptions& options) {
  PruneResult res{model, {}};
  for (const auto& [id, m] : sizes) {
    const auto current = build_groups(res.model);
    StepResult step = prune_step(res.model, find_group(current, id), m, options);
    res.model = std::move(step.model);
    res.report.groups.push_back(std::move(step.report));
  }
  finish_report(res.report, model, res.model);
  return res;
}

PruneResult prune_all_groups(const ModelGraph& model, double sparsity, const PruneOptions& options) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw InputError("sparsity must lie in [0, 1)");
  std::map<int, int> sizes;
  const auto groups = build_groups(model);
  for (const Group* g : prunable_groups(groups)) sizes[g->id] = sparsity_to_m(g->cardinality, sparsity);
  return prune_to_sizes(model, sizes, options);
}

}  // namespace intrafusion
