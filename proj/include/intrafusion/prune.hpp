#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "intrafusion/depgraph.hpp"
#include "intrafusion/importance.hpp"
#include "intrafusion/model_io.hpp"
#include "intrafusion/ot.hpp"

namespace intrafusion {

// Absorbs every BatchNorm into the Linear/Conv that feeds it; the BN layers
// remain as identities (gamma 1, beta 0, mean 0, var 1 - eps). A producer
// without a bias gains one.
ModelGraph fold_batchnorm(const ModelGraph& model);

// m = max(1, round(n (1 - s))).
int sparsity_to_m(int n, double sparsity);

// Indices of the m highest scores, ties to the lower index, sorted ascending.
std::vector<int> select_top_m(std::span<const double> importance, int m);

// Copies of `t` restricted to / recombined along one axis. A channel spans
// `block` consecutive positions. `coeffs` is (new channels) x (old channels).
Tensor select_axis(const Tensor& t, int axis, int block, std::span<const int> channels);
Tensor mix_axis(const Tensor& t, int axis, int block, const Matrix& coeffs);

// Group with its n-sized axis replaced by the listed pairings.
ModelGraph select_pairings(const ModelGraph& model, const Group& group, std::span<const int> kept);

// Group with its n-sized axis recombined: producer rows by `producer`,
// consumer columns by `consumer`, BN entries by `elementwise` or, when null,
// truncated to the first m entries.
ModelGraph mix_pairings(const ModelGraph& model, const Group& group, const Matrix& producer, const Matrix& consumer,
                        const Matrix* elementwise = nullptr);

ModelGraph conventional_prune(const ModelGraph& model, const Group& group, std::span<const double> importance, int m);

enum class TargetMode { kTopM, kKMeans };
enum class ConsumerAggregation { kPaper, kMassSum };

struct TargetSelection {
  std::vector<std::vector<float>> vectors;
  std::vector<double> importance;
  std::vector<int> indices;  // top-m only: original pairing of each target
  std::vector<int> assignment;  // k-means only: cluster of each pairing
  bool duplicate_centroids = false;
  int iterations = 0;
};

TargetSelection select_target(const ModelGraph& folded, const Group& group, std::span<const double> importance,
                              int m, TargetMode mode, std::uint64_t seed = 0);

// k-means++ seeding then Lloyd iterations (cap 100, stop on 1e-6 relative shift).
TargetSelection kmeans_targets(const std::vector<std::vector<float>>& points, std::span<const double> importance,
                               int m, std::uint64_t seed);

struct IntraFusionOptions {
  TargetMode target = TargetMode::kTopM;
  DistMode source_dist = DistMode::kUniform;
  DistMode target_dist = DistMode::kUniform;
  ConsumerAggregation consumer = ConsumerAggregation::kPaper;
  std::uint64_t kmeans_seed = 0;
  bool fallback_uniform = false;
};

struct IntraFusionResult {
  ModelGraph model;  // BN-folded
  TransportPlan plan;
  Matrix coefficients;  // m x n, row-stochastic
  TargetSelection targets;
};

IntraFusionResult intra_fuse_detailed(const ModelGraph& model, const Group& group, std::span<const double> importance,
                                      int m, const IntraFusionOptions& options);
ModelGraph intra_fuse(const ModelGraph& model, const Group& group, std::span<const double> importance, int m,
                      const IntraFusionOptions& options);

enum class PruneMethod { kConventional, kIntraFusion };
std::string_view method_name(PruneMethod method);
PruneMethod parse_method(std::string_view name);

struct PruneOptions {
  PruneMethod method = PruneMethod::kIntraFusion;
  ImportanceConfig importance;
  IntraFusionOptions fusion;
};

struct GroupReport {
  int group = 0;
  int n = 0;
  int m = 0;
  // Original pairing index of every surviving channel, in order. Empty when
  // k-means targets leave no positional correspondence.
  std::vector<int> positions;
};

struct PruneReport {
  std::vector<GroupReport> groups;
  ParamCount before;
  ParamCount after;
  double neuron_sparsity = 0.0;
  double weight_sparsity = 0.0;
};

struct PruneResult {
  ModelGraph model;
  PruneReport report;
};

// Prunes one group to m pairings.
PruneResult prune_group(const ModelGraph& model, int group_id, int m, const PruneOptions& options);

// Listed groups (id -> target cardinality) pruned in id order, importance
// recomputed on the partially pruned model.
PruneResult prune_to_sizes(const ModelGraph& model, const std::map<int, int>& sizes, const PruneOptions& options);

// Every prunable group at the same neuron sparsity, in group-id order, with
// importance recomputed on the partially pruned model.
PruneResult prune_all_groups(const ModelGraph& model, double sparsity, const PruneOptions& options);

}  // namespace intrafusion
