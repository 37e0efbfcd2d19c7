#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "intrafusion/tensor.hpp"

namespace intrafusion {

enum class LayerKind { kInput, kLinear, kConv2d, kBatchNorm, kReLU, kAdd, kAvgPool, kMaxPool, kFlatten };

std::string_view kind_name(LayerKind kind);
LayerKind parse_kind(std::string_view name);

struct NamedTensor {
  std::string name;
  Tensor value;
};

// One node of a ModelGraph. Attribute fields are interpreted per kind:
//   Linear     in_channels/out_channels are feature counts; params weight[out,in], bias[out]
//   Conv2d     params weight[out,in,k,k], bias[out]
//   BatchNorm  in_channels == out_channels; params gamma, beta, running_mean, running_var
//   Avg/MaxPool  window (stride == window)
//   Input      input_shape is the per-sample shape
struct LayerNode {
  std::string id;
  LayerKind kind = LayerKind::kReLU;
  std::vector<std::string> inputs;

  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  int window = 0;
  float eps = 1e-5f;
  Shape input_shape;

  std::vector<NamedTensor> params;

  Tensor* find_param(std::string_view name);
  const Tensor* find_param(std::string_view name) const;
  Tensor& param(std::string_view name);
  const Tensor& param(std::string_view name) const;
  bool is_affine() const { return kind == LayerKind::kLinear || kind == LayerKind::kConv2d; }
};

// Node factories; parameters are zero-initialised (BN: identity statistics).
LayerNode make_input(std::string id, Shape per_sample_shape);
LayerNode make_linear(std::string id, std::string input, int in_features, int out_features, bool bias = true);
LayerNode make_conv2d(std::string id, std::string input, int in_channels, int out_channels, int kernel,
                      int stride = 1, int padding = 0, bool bias = true);
LayerNode make_batchnorm(std::string id, std::string input, int channels, float eps = 1e-5f);
LayerNode make_relu(std::string id, std::string input);
LayerNode make_add(std::string id, std::string lhs, std::string rhs);
LayerNode make_avgpool(std::string id, std::string input, int window);
LayerNode make_maxpool(std::string id, std::string input, int window);
LayerNode make_flatten(std::string id, std::string input);

// Directed acyclic graph of layers with one input node and one output node.
// Node storage order is arbitrary; evaluation follows topo_order().
class ModelGraph {
 public:
  std::vector<LayerNode> nodes;
  std::string input_id;
  std::string output_id;

  int index_of(std::string_view id) const;  // -1 when absent
  LayerNode& node(std::string_view id);
  const LayerNode& node(std::string_view id) const;

  // Kahn order, ties broken by storage index. Throws StructuralError on cycles
  // or dangling edges.
  std::vector<int> topo_order() const;
  std::vector<std::vector<int>> consumers() const;

  // Per-sample output shape of every node (indexed like `nodes`); validates
  // all shape and parameter contracts.
  std::vector<Shape> infer_shapes() const;
  void validate() const { (void)infer_shapes(); }

  Shape input_shape() const;
  Shape output_shape() const;

  bool bitwise_equal(const ModelGraph& other) const;
};

}  // namespace intrafusion
