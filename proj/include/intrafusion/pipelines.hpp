#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "intrafusion/fusion.hpp"
#include "intrafusion/model_io.hpp"
#include "intrafusion/prune.hpp"

namespace intrafusion {

struct TrainConfig {
  int epochs = 0;
  int batch_size = 128;
  double momentum = 0.9;
  double base_lr = 0.05;
  int lr_step = 30;
  double lr_decay = 0.5;
  std::uint64_t seed = 0;
};

constexpr double kTrainBaseLr = 0.05;
constexpr double kFinetuneBaseLr = 0.01;

// base * decay^floor(epoch / step)
double learning_rate(const TrainConfig& config, int epoch);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;      // mean training loss over the epoch
  double accuracy = 0.0;  // training-mode accuracy over the epoch
};

struct TrainResult {
  ModelGraph model;
  std::vector<EpochRecord> trace;
};

// Mini-batch SGD with momentum (v = m v + g; p -= lr v), BatchNorm in
// training mode, a seeded shuffle per epoch.
TrainResult train(const ModelGraph& model, const Dataset& data, const TrainConfig& config);
TrainResult finetune(const ModelGraph& model, const Dataset& data, int epochs, std::uint64_t seed, int batch_size = 128);

void write_trace_csv(std::ostream& out, std::span<const EpochRecord> trace);

struct SplitPlan {
  int k = 0;
  std::vector<std::vector<std::size_t>> subsets;        // partition of [0, size)
  std::vector<std::vector<int>> combinations;          // k/2 subset ids per training set
  std::vector<std::vector<std::size_t>> training_sets;  // sorted union of the chosen subsets
};

// Seeded shuffle, contiguous partition into k parts, remainder dealt round-robin,
// then every union of k/2 subsets in lexicographic order.
SplitPlan make_split_plan(std::size_t size, int k, std::uint64_t seed);

// Runs fn(0..count-1) on up to `threads` workers; rethrows the first failure.
void parallel_for(int count, int threads, const std::function<void(int)>& fn);

enum class PipelineMode { kWhole, kPaf, kFap };
std::string_view pipeline_mode_name(PipelineMode mode);
PipelineMode parse_pipeline_mode(std::string_view name);

struct PipelineConfig {
  PipelineMode mode = PipelineMode::kPaf;
  int k = 2;
  std::uint64_t seed = 0;
  double sparsity = 0.5;
  int train_epochs = 10;
  int steps = 4;
  int step_epochs = 10;
  int finetune_epochs = 80;  // whole-data runs fine-tune twice as long
  int batch_size = 128;
  FusionCost fuse_cost = FusionCost::kActivation;
  int fuse_samples = 200;
  PruneOptions prune;
  int threads = 1;
};

struct StageRecord {
  int seq = 0;
  std::string stage;  // train, prune, fuse, finetune
  std::string model;  // split index, "fused" or "whole"
  double accuracy = 0.0;
  std::int64_t params = 0;
  double seconds = 0.0;  // stage duration
  double elapsed = 0.0;  // since pipeline start, at stage end
};

struct PipelineResult {
  ModelGraph model;
  std::vector<StageRecord> stages;
};

// Iterative pruning: `steps` rounds, each pruning every group towards its
// share of the final sparsity and fine-tuning for `step_epochs`.
ModelGraph iterative_prune(const ModelGraph& model, const Dataset& data, const PipelineConfig& config,
                           std::uint64_t seed);

// `arch` supplies the architecture; every trained model is re-initialised from
// a seed derived from config.seed.
PipelineResult run_pipeline(const ModelGraph& arch, const Dataset& train_data, const Dataset& test_data,
                            const PipelineConfig& config);

// Columns seq,stage,model,accuracy,params and, with timings, seconds,elapsed.
void write_stages_csv(std::ostream& out, std::span<const StageRecord> stages, bool timings);

}  // namespace intrafusion
