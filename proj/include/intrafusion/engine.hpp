#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "intrafusion/graph.hpp"

namespace intrafusion {

// Inference evaluates BatchNorm with running statistics; training uses batch
// statistics and records them so running stats can be updated afterwards.
enum class Mode { kInference, kTraining };

struct ForwardTrace {
  Mode mode = Mode::kInference;
  std::vector<int> order;
  std::vector<Tensor> activations;                // per node index, batch-major
  std::vector<std::vector<float>> bn_mean;        // training mode only
  std::vector<std::vector<float>> bn_var;         // biased batch variance
  std::vector<std::vector<std::uint32_t>> argmax; // max-pool routing

  const Tensor& output(const ModelGraph& model) const;
};

ForwardTrace forward_trace(const ModelGraph& model, const Tensor& batch, Mode mode = Mode::kInference);

// Logits for a batch shaped [N, ...input shape].
Tensor forward(const ModelGraph& model, const Tensor& batch);

// Mean negative log-softmax of the labelled class.
double cross_entropy(const Tensor& logits, std::span<const int> labels);
// d(mean cross entropy)/d(logits).
Tensor cross_entropy_grad(const Tensor& logits, std::span<const int> labels);

struct ParamKey {
  std::string layer;
  std::string name;
  auto operator<=>(const ParamKey&) const = default;
};

// Gradients of trainable parameters (weights, biases, BN gamma/beta). Running
// statistics are never differentiated.
using GradientSet = std::map<ParamKey, Tensor>;

bool is_trainable(LayerKind kind, std::string_view param_name);

// Reverse pass for an existing trace given d(loss)/d(output).
GradientSet backward_from(const ModelGraph& model, const ForwardTrace& trace, const Tensor& output_grad);

// Gradients of mean cross entropy, BatchNorm in inference mode.
GradientSet backward(const ModelGraph& model, const Tensor& batch, std::span<const int> labels);

struct LossAndGradients {
  double loss = 0.0;
  GradientSet grads;
  ForwardTrace trace;
};

LossAndGradients loss_and_gradients(const ModelGraph& model, const Tensor& batch, std::span<const int> labels,
                                    Mode mode);

// Exponential moving update of BN running stats from a training-mode trace.
void update_running_stats(ModelGraph& model, const ForwardTrace& trace, float momentum = 0.1f);

}  // namespace intrafusion
