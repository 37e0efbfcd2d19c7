#include "intrafusion/graph.hpp"

#include <array>
#include <cstring>
#include <queue>

#include "intrafusion/errors.hpp"

namespace intrafusion {

namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 9> kKindNames{{
    {LayerKind::kInput, "input"},
    {LayerKind::kLinear, "linear"},
    {LayerKind::kConv2d, "conv2d"},
    {LayerKind::kBatchNorm, "batchnorm"},
    {LayerKind::kReLU, "relu"},
    {LayerKind::kAdd, "add"},
    {LayerKind::kAvgPool, "avgpool"},
    {LayerKind::kMaxPool, "maxpool"},
    {LayerKind::kFlatten, "flatten"},
}};

std::string edge_str(const LayerNode& producer, const LayerNode& consumer) {
  return "edge " + producer.id + " -> " + consumer.id;
}

void expect_param(const LayerNode& n, std::string_view name, const Shape& shape) {
  const Tensor* t = n.find_param(name);
  if (!t) throw StructuralError("layer " + n.id + " is missing parameter '" + std::string(name) + "'");
  if (t->shape() != shape) {
    throw StructuralError("layer " + n.id + " parameter '" + std::string(name) + "' has shape " +
                          shape_str(t->shape()) + ", expected " + shape_str(shape));
  }
}

void check_params(const LayerNode& n) {
  switch (n.kind) {
    case LayerKind::kLinear:
      expect_param(n, "weight", {n.out_channels, n.in_channels});
      if (n.find_param("bias")) expect_param(n, "bias", {n.out_channels});
      break;
    case LayerKind::kConv2d:
      expect_param(n, "weight", {n.out_channels, n.in_channels, n.kernel, n.kernel});
      if (n.find_param("bias")) expect_param(n, "bias", {n.out_channels});
      break;
    case LayerKind::kBatchNorm: {
      for (auto name : {"gamma", "beta", "running_mean", "running_var"}) expect_param(n, name, {n.out_channels});
      for (float v : n.param("running_var").values()) {
        if (!(v >= 0.0f)) throw StructuralError("layer " + n.id + " has a negative running_var entry");
      }
      break;
    }
    default:
      if (!n.params.empty()) throw StructuralError("layer " + n.id + " of kind " +
                                                   std::string(kind_name(n.kind)) + " carries parameters");
  }
}

}  // namespace

std::string_view kind_name(LayerKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

LayerKind parse_kind(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name) return k;
  }
  throw FormatError("unknown layer kind '" + std::string(name) + "'");
}

Tensor* LayerNode::find_param(std::string_view name) {
  for (auto& p : params) {
    if (p.name == name) return &p.value;
  }
  return nullptr;
}

const Tensor* LayerNode::find_param(std::string_view name) const {
  for (const auto& p : params) {
    if (p.name == name) return &p.value;
  }
  return nullptr;
}

Tensor& LayerNode::param(std::string_view name) {
  if (Tensor* t = find_param(name)) return *t;
  throw StructuralError("layer " + id + " has no parameter '" + std::string(name) + "'");
}

const Tensor& LayerNode::param(std::string_view name) const {
  if (const Tensor* t = find_param(name)) return *t;
  throw StructuralError("layer " + id + " has no parameter '" + std::string(name) + "'");
}

LayerNode make_input(std::string id, Shape per_sample_shape) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = LayerKind::kInput;
  n.input_shape = std::move(per_sample_shape);
  return n;
}

LayerNode make_linear(std::string id, std::string input, int in_features, int out_features, bool bias) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = LayerKind::kLinear;
  n.inputs = {std::move(input)};
  n.in_channels = in_features;
  n.out_channels = out_features;
  n.params.push_back({"weight", Tensor({out_features, in_features})});
  if (bias) n.params.push_back({"bias", Tensor({out_features})});
  return n;
}

LayerNode make_conv2d(std::string id, std::string input, int in_channels, int out_channels, int kernel,
                      int stride, int padding, bool bias) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = LayerKind::kConv2d;
  n.inputs = {std::move(input)};
  n.in_channels = in_channels;
  n.out_channels = out_channels;
  n.kernel = kernel;
  n.stride = stride;
  n.padding = padding;
  n.params.push_back({"weight", Tensor({out_channels, in_channels, kernel, kernel})});
  if (bias) n.params.push_back({"bias", Tensor({out_channels})});
  return n;
}

LayerNode make_batchnorm(std::string id, std::string input, int channels, float eps) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = LayerKind::kBatchNorm;
  n.inputs = {std::move(input)};
  n.in_channels = channels;
  n.out_channels = channels;
  n.eps = eps;
  n.params.push_back({"gamma", Tensor({channels}, 1.0f)});
  n.params.push_back({"beta", Tensor({channels})});
  n.params.push_back({"running_mean", Tensor({channels})});
  n.params.push_back({"running_var", Tensor({channels}, 1.0f)});
  return n;
}

namespace {
LayerNode simple(std::string id, LayerKind kind, std::vector<std::string> inputs) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = kind;
  n.inputs = std::move(inputs);
  return n;
}
}  // namespace

LayerNode make_relu(std::string id, std::string input) {
  return simple(std::move(id), LayerKind::kReLU, {std::move(input)});
}
LayerNode make_add(std::string id, std::string lhs, std::string rhs) {
  return simple(std::move(id), LayerKind::kAdd, {std::move(lhs), std::move(rhs)});
}
LayerNode make_avgpool(std::string id, std::string input, int window) {
  LayerNode n = simple(std::move(id), LayerKind::kAvgPool, {std::move(input)});
  n.window = window;
  return n;
}
LayerNode make_maxpool(std::string id, std::string input, int window) {
  LayerNode n = simple(std::move(id), LayerKind::kMaxPool, {std::move(input)});
  n.window = window;
  return n;
}
LayerNode make_flatten(std::string id, std::string input) {
  return simple(std::move(id), LayerKind::kFlatten, {std::move(input)});
}

int ModelGraph::index_of(std::string_view id) const {
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].id == id) return static_cast<int>(i);
  }
  return -1;
}

LayerNode& ModelGraph::node(std::string_view id) {
  int i = index_of(id);
  if (i < 0) throw StructuralError("no layer with id '" + std::string(id) + "'");
  return nodes[static_cast<std::size_t>(i)];
}

const LayerNode& ModelGraph::node(std::string_view id) const {
  int i = index_of(id);
  if (i < 0) throw StructuralError("no layer with id '" + std::string(id) + "'");
  return nodes[static_cast<std::size_t>(i)];
}

std::vector<int> ModelGraph::topo_order() const {
  const std::size_t n = nodes.size();
  std::vector<int> indegree(n, 0);
  std::vector<std::vector<int>> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& in : nodes[i].inputs) {
      int p = index_of(in);
      if (p < 0) throw StructuralError("edge " + in + " -> " + nodes[i].id + ": unknown producer");
      out[static_cast<std::size_t>(p)].push_back(static_cast<int>(i));
      ++indegree[i];
    }
  }
  std::priority_queue<int, std::vector<int>, std::greater<>> ready;
  for (std::size_t i = 0; i < n; ++i) {
    if (indegree[i] == 0) ready.push(static_cast<int>(i));
  }
  std::vector<int> order;
  order.reserve(n);
  while (!ready.empty()) {
    int i = ready.top();
    ready.pop();
    order.push_back(i);
    for (int c : out[static_cast<std::size_t>(i)]) {
      if (--indegree[static_cast<std::size_t>(c)] == 0) ready.push(c);
    }
  }
  if (order.size() != n) throw StructuralError("model graph contains a cycle");
  return order;
}

std::vector<std::vector<int>> ModelGraph::consumers() const {
  std::vector<std::vector<int>> out(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& in : nodes[i].inputs) {
      int p = index_of(in);
      if (p < 0) throw StructuralError("edge " + in + " -> " + nodes[i].id + ": unknown producer");
      out[static_cast<std::size_t>(p)].push_back(static_cast<int>(i));
    }
  }
  return out;
}

std::vector<Shape> ModelGraph::infer_shapes() const {
  std::vector<Shape> shapes(nodes.size());
  if (index_of(input_id) < 0) throw StructuralError("input node '" + input_id + "' not found");
  if (index_of(output_id) < 0) throw StructuralError("output node '" + output_id + "' not found");
  for (int idx : topo_order()) {
    const LayerNode& n = nodes[static_cast<std::size_t>(idx)];
    check_params(n);
    std::size_t expected_inputs = n.kind == LayerKind::kInput ? 0 : n.kind == LayerKind::kAdd ? 2 : 1;
    if (n.inputs.size() != expected_inputs) {
      throw StructuralError("layer " + n.id + " expects " + std::to_string(expected_inputs) + " inbound edges, has " +
                            std::to_string(n.inputs.size()));
    }
    if (n.kind == LayerKind::kInput) {
      if (n.id != input_id) throw StructuralError("layer " + n.id + " is an input node but not the model input");
      shape_numel(n.input_shape);
      shapes[static_cast<std::size_t>(idx)] = n.input_shape;
      continue;
    }
    const LayerNode& p = node(n.inputs[0]);
    const Shape& in = shapes[static_cast<std::size_t>(index_of(n.inputs[0]))];
    Shape out;
    switch (n.kind) {
      case LayerKind::kLinear:
        if (in.size() != 1 || in[0] != n.in_channels) {
          throw StructuralError(edge_str(p, n) + ": linear expects [" + std::to_string(n.in_channels) + "], got " +
                                shape_str(in));
        }
        out = {n.out_channels};
        break;
      case LayerKind::kConv2d: {
        if (in.size() != 3 || in[0] != n.in_channels) {
          throw StructuralError(edge_str(p, n) + ": conv2d expects [" + std::to_string(n.in_channels) +
                                ",H,W], got " + shape_str(in));
        }
        if (n.kernel <= 0 || n.stride <= 0 || n.padding < 0) throw StructuralError("layer " + n.id + ": bad conv attrs");
        int oh = (in[1] + 2 * n.padding - n.kernel) / n.stride + 1;
        int ow = (in[2] + 2 * n.padding - n.kernel) / n.stride + 1;
        if (in[1] + 2 * n.padding < n.kernel || in[2] + 2 * n.padding < n.kernel) {
          throw StructuralError(edge_str(p, n) + ": spatial input " + shape_str(in) + " smaller than kernel");
        }
        out = {n.out_channels, oh, ow};
        break;
      }
      case LayerKind::kBatchNorm:
        if (in.empty() || in[0] != n.out_channels || n.in_channels != n.out_channels) {
          throw StructuralError(edge_str(p, n) + ": batchnorm over " + std::to_string(n.out_channels) +
                                " channels, got " + shape_str(in));
        }
        out = in;
        break;
      case LayerKind::kReLU:
        out = in;
        break;
      case LayerKind::kAdd: {
        const Shape& rhs = shapes[static_cast<std::size_t>(index_of(n.inputs[1]))];
        if (rhs != in) {
          throw StructuralError(edge_str(node(n.inputs[1]), n) + ": add operand shape " + shape_str(rhs) +
                                " differs from " + shape_str(in));
        }
        out = in;
        break;
      }
      case LayerKind::kAvgPool:
      case LayerKind::kMaxPool:
        if (in.size() != 3 || n.window <= 0 || in[1] < n.window || in[2] < n.window) {
          throw StructuralError(edge_str(p, n) + ": pool window " + std::to_string(n.window) + " on " + shape_str(in));
        }
        out = {in[0], in[1] / n.window, in[2] / n.window};
        break;
      case LayerKind::kFlatten:
        out = {static_cast<int>(shape_numel(in))};
        break;
      case LayerKind::kInput:
        break;
    }
    shapes[static_cast<std::size_t>(idx)] = std::move(out);
  }
  return shapes;
}

Shape ModelGraph::input_shape() const { return node(input_id).input_shape; }

Shape ModelGraph::output_shape() const {
  auto shapes = infer_shapes();
  return shapes[static_cast<std::size_t>(index_of(output_id))];
}

bool ModelGraph::bitwise_equal(const ModelGraph& other) const {
  if (nodes.size() != other.nodes.size() || input_id != other.input_id || output_id != other.output_id) return false;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const LayerNode& a = nodes[i];
    const LayerNode& b = other.nodes[i];
    if (a.id != b.id || a.kind != b.kind || a.inputs != b.inputs || a.in_channels != b.in_channels ||
        a.out_channels != b.out_channels || a.kernel != b.kernel || a.stride != b.stride || a.padding != b.padding ||
        a.window != b.window || a.input_shape != b.input_shape || a.params.size() != b.params.size()) {
      return false;
    }
    if (std::memcmp(&a.eps, &b.eps, sizeof(float)) != 0) return false;
    for (std::size_t p = 0; p < a.params.size(); ++p) {
      if (a.params[p].name != b.params[p].name || !a.params[p].value.bitwise_equal(b.params[p].value)) return false;
    }
  }
  return true;
}

}  // namespace intrafusion
