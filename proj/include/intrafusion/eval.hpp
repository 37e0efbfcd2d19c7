#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "intrafusion/importance.hpp"
#include "intrafusion/model_io.hpp"
#include "intrafusion/prune.hpp"

namespace intrafusion {

// Rows whose argmax (lowest index on ties) equals the label.
std::size_t count_correct(const Tensor& logits, std::span<const int> labels);

double accuracy(const ModelGraph& model, const Dataset& data, int batch_size = 256);

// Mean over samples of the l2 distance between the two models' logits.
double output_divergence(const ModelGraph& original, const ModelGraph& pruned, const Dataset& data,
                         int batch_size = 256);

struct EvalRecord {
  std::string model_id;
  std::string dataset_id;
  double accuracy = 0.0;
  double divergence = 0.0;
  std::int64_t params = 0;
  std::int64_t original_params = 0;
  double neuron_sparsity = 0.0;
  double weight_sparsity = 0.0;
};

void write_eval_csv(std::ostream& out, std::span<const EvalRecord> records);

// All parameters, node storage order, then parameter order.
std::vector<float> vectorize(const ModelGraph& model);
ModelGraph devectorize(const ModelGraph& layout, std::span<const float> values);

// Group id -> original pairing position of each surviving channel.
using IndexMap = std::map<int, std::vector<int>>;

IndexMap index_map_from(const PruneReport& report);

// `pruned` scattered into the original architecture; removed positions are
// zero, removed BN channels output zero (gamma 0, beta 0, mean 0, var 1 - eps).
ModelGraph embed_pruned(const ModelGraph& pruned, const ModelGraph& original, const IndexMap& index_map);
// Inverse of embed_pruned for the kept positions.
ModelGraph extract_pruned(const ModelGraph& embedded, const ModelGraph& pruned_layout, const IndexMap& index_map);

struct LandscapeOptions {
  int resolution = 21;
  double margin = 0.25;
  int threads = 1;
};

struct LandscapeCell {
  std::string kind;  // grid, origin, a, b
  double alpha = 0.0;
  double beta = 0.0;
  double accuracy = 0.0;
};

struct LandscapeGrid {
  std::vector<LandscapeCell> cells;
  double b_alpha = 0.0;  // alpha coordinate of anchor b (its beta is 1)
};

// Plane through theta0, a, b: point(alpha, beta) = theta0 + alpha u + beta v_hat
// with u = a - theta0 and v_hat = (b - theta0) orthogonalised against u. Every
// cell, anchors included, is de-vectorised into `layout` and evaluated.
LandscapeGrid landscape_grid(const ModelGraph& layout, std::span<const float> theta0, std::span<const float> a,
                             std::span<const float> b, const Dataset& data, const LandscapeOptions& options);

void write_landscape_csv(std::ostream& out, const LandscapeGrid& grid);

struct AblationRow {
  int group = 0;
  double sparsity = 0.0;
  int n = 0;
  int m = 0;
  std::string source_dist;
  std::string target_dist;
  std::string label;  // uTuS, uTiS, iTuS, iTiS
  double accuracy = 0.0;
};

// Data-free Intra-Fusion of each group at each sparsity under the four
// uniform/importance combinations of source and target distributions.
// `importance_mode` is the informed distribution (sum-normalized or softmax).
std::vector<AblationRow> ablation_grid(const ModelGraph& model, const Dataset& data, std::span<const int> groups,
                                       std::span<const double> sparsities, const ImportanceConfig& importance,
                                       const IntraFusionOptions& base, DistMode importance_mode = DistMode::kSumNormalized);

void write_ablation_csv(std::ostream& out, std::span<const AblationRow> rows);

}  // namespace intrafusion
