#include "intrafusion/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "intrafusion/errors.hpp"

namespace intrafusion {

namespace {

std::size_t uz(int v) { return static_cast<std::size_t>(v); }

Shape batched(int n, const Shape& per_sample) {
  Shape s{n};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

// Per-sample spatial size for [N, C, ...] tensors.
std::size_t inner_size(const Tensor& t) {
  std::size_t s = 1;
  for (std::size_t a = 2; a < t.rank(); ++a) s *= uz(t.dim(a));
  return s;
}

void linear_forward(const LayerNode& n, const Tensor& x, Tensor& y) {
  const int batch = x.dim(0);
  const int in = n.in_channels, out = n.out_channels;
  const float* w = n.param("weight").data().data();
  const Tensor* b = n.find_param("bias");
  y = Tensor({batch, out});
  for (int s = 0; s < batch; ++s) {
    const float* xr = x.data().data() + uz(s) * uz(in);
    float* yr = y.data().data() + uz(s) * uz(out);
    for (int o = 0; o < out; ++o) {
      const float* wr = w + uz(o) * uz(in);
      float acc = b ? (*b)[uz(o)] : 0.0f;
      for (int i = 0; i < in; ++i) acc += wr[i] * xr[i];
      yr[o] = acc;
    }
  }
}

void linear_backward(const LayerNode& n, const Tensor& x, const Tensor& dy, Tensor* dx, GradientSet& grads) {
  const int batch = x.dim(0);
  const int in = n.in_channels, out = n.out_channels;
  const float* w = n.param("weight").data().data();
  Tensor& dw = grads[{n.id, "weight"}];
  float* dwp = dw.data().data();
  Tensor* db = n.find_param("bias") ? &grads[{n.id, "bias"}] : nullptr;
  for (int s = 0; s < batch; ++s) {
    const float* xr = x.data().data() + uz(s) * uz(in);
    const float* gr = dy.data().data() + uz(s) * uz(out);
    float* dxr = dx ? dx->data().data() + uz(s) * uz(in) : nullptr;
    for (int o = 0; o < out; ++o) {
      const float g = gr[o];
      if (db) (*db)[uz(o)] += g;
      if (g == 0.0f) continue;
      float* dwr = dwp + uz(o) * uz(in);
      const float* wr = w + uz(o) * uz(in);
      for (int i = 0; i < in; ++i) dwr[i] += g * xr[i];
      if (dxr) {
        for (int i = 0; i < in; ++i) dxr[i] += g * wr[i];
      }
    }
  }
}

struct ConvGeom {
  int batch, in_c, in_h, in_w, out_c, out_h, out_w, k, stride, pad;
};

ConvGeom conv_geom(const LayerNode& n, const Tensor& x) {
  ConvGeom g{};
  g.batch = x.dim(0);
  g.in_c = x.dim(1);
  g.in_h = x.dim(2);
  g.in_w = x.dim(3);
  g.out_c = n.out_channels;
  g.k = n.kernel;
  g.stride = n.stride;
  g.pad = n.padding;
  g.out_h = (g.in_h + 2 * g.pad - g.k) / g.stride + 1;
  g.out_w = (g.in_w + 2 * g.pad - g.k) / g.stride + 1;
  return g;
}

// Valid output-column range [lo, hi) for kernel column kw.
std::pair<int, int> ow_range(const ConvGeom& g, int kw) {
  int lo = 0;
  while (lo < g.out_w && lo * g.stride - g.pad + kw < 0) ++lo;
  int hi = g.out_w;
  while (hi > lo && (hi - 1) * g.stride - g.pad + kw >= g.in_w) --hi;
  return {lo, hi};
}

void conv_forward(const LayerNode& n, const Tensor& x, Tensor& y) {
  const ConvGeom g = conv_geom(n, x);
  const float* w = n.param("weight").data().data();
  const Tensor* b = n.find_param("bias");
  y = Tensor({g.batch, g.out_c, g.out_h, g.out_w});
  const std::size_t in_plane = uz(g.in_h) * uz(g.in_w);
  const std::size_t out_plane = uz(g.out_h) * uz(g.out_w);
  for (int s = 0; s < g.batch; ++s) {
    for (int oc = 0; oc < g.out_c; ++oc) {
      float* yp = y.data().data() + (uz(s) * uz(g.out_c) + uz(oc)) * out_plane;
      if (b) std::fill(yp, yp + out_plane, (*b)[uz(oc)]);
      for (int ic = 0; ic < g.in_c; ++ic) {
        const float* xp = x.data().data() + (uz(s) * uz(g.in_c) + uz(ic)) * in_plane;
        const float* wk = w + (uz(oc) * uz(g.in_c) + uz(ic)) * uz(g.k) * uz(g.k);
        for (int kh = 0; kh < g.k; ++kh) {
          for (int kw = 0; kw < g.k; ++kw) {
            const float wv = wk[kh * g.k + kw];
            if (wv == 0.0f) continue;
            auto [lo, hi] = ow_range(g, kw);
            for (int oh = 0; oh < g.out_h; ++oh) {
              const int ih = oh * g.stride - g.pad + kh;
              if (ih < 0 || ih >= g.in_h) continue;
              float* yr = yp + uz(oh) * uz(g.out_w);
              const float* xr = xp + uz(ih) * uz(g.in_w) + kw - g.pad;
              if (g.stride == 1) {
                for (int ow = lo; ow < hi; ++ow) yr[ow] += wv * xr[ow];
              } else {
                for (int ow = lo; ow < hi; ++ow) yr[ow] += wv * xr[ow * g.stride];
              }
            }
          }
        }
      }
    }
  }
}

void conv_backward(const LayerNode& n, const Tensor& x, const Tensor& dy, Tensor* dx, GradientSet& grads) {
  const ConvGeom g = conv_geom(n, x);
  const float* w = n.param("weight").data().data();
  float* dw = grads[{n.id, "weight"}].data().data();
  Tensor* db = n.find_param("bias") ? &grads[{n.id, "bias"}] : nullptr;
  const std::size_t in_plane = uz(g.in_h) * uz(g.in_w);
  const std::size_t out_plane = uz(g.out_h) * uz(g.out_w);
  for (int s = 0; s < g.batch; ++s) {
    for (int oc = 0; oc < g.out_c; ++oc) {
      const float* gp = dy.data().data() + (uz(s) * uz(g.out_c) + uz(oc)) * out_plane;
      if (db) {
        float acc = 0.0f;
        for (std::size_t i = 0; i < out_plane; ++i) acc += gp[i];
        (*db)[uz(oc)] += acc;
      }
      for (int ic = 0; ic < g.in_c; ++ic) {
        const float* xp = x.data().data() + (uz(s) * uz(g.in_c) + uz(ic)) * in_plane;
        float* dxp = dx ? dx->data().data() + (uz(s) * uz(g.in_c) + uz(ic)) * in_plane : nullptr;
        const std::size_t wbase = (uz(oc) * uz(g.in_c) + uz(ic)) * uz(g.k) * uz(g.k);
        for (int kh = 0; kh < g.k; ++kh) {
          for (int kw = 0; kw < g.k; ++kw) {
            const float wv = w[wbase + uz(kh * g.k + kw)];
            auto [lo, hi] = ow_range(g, kw);
            float acc = 0.0f;
            for (int oh = 0; oh < g.out_h; ++oh) {
              const int ih = oh * g.stride - g.pad + kh;
              if (ih < 0 || ih >= g.in_h) continue;
              const float* gr = gp + uz(oh) * uz(g.out_w);
              const std::size_t off = uz(ih) * uz(g.in_w);
              const float* xr = xp + off + kw - g.pad;
              if (g.stride == 1) {
                for (int ow = lo; ow < hi; ++ow) acc += gr[ow] * xr[ow];
                if (dxp) {
                  float* dxr = dxp + off + kw - g.pad;
                  for (int ow = lo; ow < hi; ++ow) dxr[ow] += wv * gr[ow];
                }
              } else {
                for (int ow = lo; ow < hi; ++ow) acc += gr[ow] * xr[ow * g.stride];
                if (dxp) {
                  float* dxr = dxp + off + kw - g.pad;
                  for (int ow = lo; ow < hi; ++ow) dxr[ow * g.stride] += wv * gr[ow];
                }
              }
            }
            dw[wbase + uz(kh * g.k + kw)] += acc;
          }
        }
      }
    }
  }
}

float inv_std(float var, float eps) {
  return static_cast<float>(1.0 / std::sqrt(static_cast<double>(var) + static_cast<double>(eps)));
}

void bn_forward(const LayerNode& n, const Tensor& x, Tensor& y, Mode mode, std::vector<float>& bmean,
                std::vector<float>& bvar) {
  const int batch = x.dim(0);
  const int c = n.out_channels;
  const std::size_t inner = inner_size(x);
  const auto& gamma = n.param("gamma");
  const auto& beta = n.param("beta");
  std::vector<float> mean(uz(c)), var(uz(c));
  if (mode == Mode::kTraining) {
    const double count = static_cast<double>(batch) * static_cast<double>(inner);
    for (int ch = 0; ch < c; ++ch) {
      double sum = 0.0;
      for (int s = 0; s < batch; ++s) {
        const float* p = x.data().data() + (uz(s) * uz(c) + uz(ch)) * inner;
        for (std::size_t i = 0; i < inner; ++i) sum += p[i];
      }
      const double mu = sum / count;
      double sq = 0.0;
      for (int s = 0; s < batch; ++s) {
        const float* p = x.data().data() + (uz(s) * uz(c) + uz(ch)) * inner;
        for (std::size_t i = 0; i < inner; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      mean[uz(ch)] = static_cast<float>(mu);
      var[uz(ch)] = static_cast<float>(sq / count);
    }
    bmean = mean;
    bvar = var;
  } else {
    mean = n.param("running_mean").values();
    var = n.param("running_var").values();
  }
  y = Tensor(x.shape());
  for (int s = 0; s < batch; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const float scale = gamma[uz(ch)] * inv_std(var[uz(ch)], n.eps);
      const float shift = beta[uz(ch)] - mean[uz(ch)] * scale;
      const std::size_t off = (uz(s) * uz(c) + uz(ch)) * inner;
      const float* xp = x.data().data() + off;
      float* yp = y.data().data() + off;
      for (std::size_t i = 0; i < inner; ++i) yp[i] = xp[i] * scale + shift;
    }
  }
}

void bn_backward(const LayerNode& n, const ForwardTrace& trace, int idx, const Tensor& x, const Tensor& dy, Tensor* dx,
                 GradientSet& grads) {
  const int batch = x.dim(0);
  const int c = n.out_channels;
  const std::size_t inner = inner_size(x);
  const auto& gamma = n.param("gamma");
  const bool training = trace.mode == Mode::kTraining;
  const auto& mean = training ? trace.bn_mean[uz(idx)] : n.param("running_mean").values();
  const auto& var = training ? trace.bn_var[uz(idx)] : n.param("running_var").values();
  Tensor& dgamma = grads[{n.id, "gamma"}];
  Tensor& dbeta = grads[{n.id, "beta"}];
  const double count = static_cast<double>(batch) * static_cast<double>(inner);
  for (int ch = 0; ch < c; ++ch) {
    const float istd = inv_std(var[uz(ch)], n.eps);
    const float mu = mean[uz(ch)];
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int s = 0; s < batch; ++s) {
      const std::size_t off = (uz(s) * uz(c) + uz(ch)) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const float xhat = (x[off + i] - mu) * istd;
        sum_dy += dy[off + i];
        sum_dy_xhat += dy[off + i] * xhat;
      }
    }
    dgamma[uz(ch)] += static_cast<float>(sum_dy_xhat);
    dbeta[uz(ch)] += static_cast<float>(sum_dy);
    if (!dx) continue;
    const float g = gamma[uz(ch)];
    for (int s = 0; s < batch; ++s) {
      const std::size_t off = (uz(s) * uz(c) + uz(ch)) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        if (training) {
          const double xhat = (x[off + i] - mu) * istd;
          const double v = g * istd / count * (count * dy[off + i] - sum_dy - xhat * sum_dy_xhat);
          (*dx)[off + i] += static_cast<float>(v);
        } else {
          (*dx)[off + i] += dy[off + i] * g * istd;
        }
      }
    }
  }
}

void pool_forward(const LayerNode& n, const Tensor& x, Tensor& y, std::vector<std::uint32_t>* argmax) {
  const int batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int win = n.window, oh = h / win, ow = w / win;
  y = Tensor({batch, c, oh, ow});
  if (argmax) argmax->assign(y.numel(), 0);
  const bool is_max = n.kind == LayerKind::kMaxPool;
  const float inv_area = 1.0f / static_cast<float>(win * win);
  std::size_t out_i = 0;
  for (int s = 0; s < batch; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t plane = (uz(s) * uz(c) + uz(ch)) * uz(h) * uz(w);
      for (int r = 0; r < oh; ++r) {
        for (int q = 0; q < ow; ++q, ++out_i) {
          float best = -std::numeric_limits<float>::infinity();
          std::uint32_t best_i = 0;
          float sum = 0.0f;
          for (int dr = 0; dr < win; ++dr) {
            for (int dq = 0; dq < win; ++dq) {
              const std::size_t i = plane + uz(r * win + dr) * uz(w) + uz(q * win + dq);
              const float v = x[i];
              sum += v;
              if (v > best) {
                best = v;
                best_i = static_cast<std::uint32_t>(i);
              }
            }
          }
          if (is_max) {
            y[out_i] = best;
            (*argmax)[out_i] = best_i;
          } else {
            y[out_i] = sum * inv_area;
          }
        }
      }
    }
  }
}

void pool_backward(const LayerNode& n, const ForwardTrace& trace, int idx, const Tensor& x, const Tensor& dy,
                   Tensor& dx) {
  if (n.kind == LayerKind::kMaxPool) {
    const auto& am = trace.argmax[uz(idx)];
    for (std::size_t i = 0; i < dy.numel(); ++i) dx[am[i]] += dy[i];
    return;
  }
  const int batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int win = n.window, oh = h / win, ow = w / win;
  const float inv_area = 1.0f / static_cast<float>(win * win);
  std::size_t out_i = 0;
  for (int s = 0; s < batch; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t plane = (uz(s) * uz(c) + uz(ch)) * uz(h) * uz(w);
      for (int r = 0; r < oh; ++r) {
        for (int q = 0; q < ow; ++q, ++out_i) {
          const float g = dy[out_i] * inv_area;
          for (int dr = 0; dr < win; ++dr) {
            for (int dq = 0; dq < win; ++dq) dx[plane + uz(r * win + dr) * uz(w) + uz(q * win + dq)] += g;
          }
        }
      }
    }
  }
}

}  // namespace

const Tensor& ForwardTrace::output(const ModelGraph& model) const {
  return activations[uz(model.index_of(model.output_id))];
}

ForwardTrace forward_trace(const ModelGraph& model, const Tensor& batch, Mode mode) {
  const auto shapes = model.infer_shapes();
  const int in_idx = model.index_of(model.input_id);
  const Shape& in_shape = shapes[uz(in_idx)];
  if (batch.rank() != in_shape.size() + 1 || !std::equal(in_shape.begin(), in_shape.end(), batch.shape().begin() + 1)) {
    throw StructuralError("batch shape " + shape_str(batch.shape()) + " does not match model input " +
                          shape_str(in_shape));
  }
  ForwardTrace t;
  t.mode = mode;
  t.order = model.topo_order();
  t.activations.resize(model.nodes.size());
  t.bn_mean.resize(model.nodes.size());
  t.bn_var.resize(model.nodes.size());
  t.argmax.resize(model.nodes.size());
  const int n = batch.dim(0);
  for (int idx : t.order) {
    const LayerNode& node = model.nodes[uz(idx)];
    Tensor& y = t.activations[uz(idx)];
    if (node.kind == LayerKind::kInput) {
      y = batch;
      continue;
    }
    const Tensor& x = t.activations[uz(model.index_of(node.inputs[0]))];
    switch (node.kind) {
      case LayerKind::kLinear:
        linear_forward(node, x, y);
        break;
      case LayerKind::kConv2d:
        conv_forward(node, x, y);
        break;
      case LayerKind::kBatchNorm:
        bn_forward(node, x, y, mode, t.bn_mean[uz(idx)], t.bn_var[uz(idx)]);
        break;
      case LayerKind::kReLU:
        y = x;
        for (float& v : y.values()) v = v > 0.0f ? v : 0.0f;
        break;
      case LayerKind::kAdd: {
        const Tensor& rhs = t.activations[uz(model.index_of(node.inputs[1]))];
        y = x;
        for (std::size_t i = 0; i < y.numel(); ++i) y[i] += rhs[i];
        break;
      }
      case LayerKind::kAvgPool:
        pool_forward(node, x, y, nullptr);
        break;
      case LayerKind::kMaxPool:
        pool_forward(node, x, y, &t.argmax[uz(idx)]);
        break;
      case LayerKind::kFlatten:
        y = x;
        y.reshape(batched(n, shapes[uz(idx)]));
        break;
      case LayerKind::kInput:
        break;
    }
  }
  return t;
}

Tensor forward(const ModelGraph& model, const Tensor& batch) {
  ForwardTrace t = forward_trace(model, batch, Mode::kInference);
  return std::move(t.activations[uz(model.index_of(model.output_id))]);
}

namespace {
void check_logits(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw InputError("logits must be [batch, classes], got " + shape_str(logits.shape()));
  if (uz(logits.dim(0)) != labels.size()) {
    throw InputError("logits rows " + std::to_string(logits.dim(0)) + " != labels " + std::to_string(labels.size()));
  }
  for (int l : labels) {
    if (l < 0 || l >= logits.dim(1)) throw InputError("label " + std::to_string(l) + " out of range");
  }
}

double log_sum_exp(const float* row, int classes) {
  double mx = row[0];
  for (int c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(row[c]));
  double s = 0.0;
  for (int c = 0; c < classes; ++c) s += std::exp(row[c] - mx);
  return mx + std::log(s);
}
}  // namespace

double cross_entropy(const Tensor& logits, std::span<const int> labels) {
  check_logits(logits, labels);
  const int n = logits.dim(0), classes = logits.dim(1);
  double total = 0.0;
  for (int s = 0; s < n; ++s) {
    const float* row = logits.data().data() + uz(s) * uz(classes);
    total += log_sum_exp(row, classes) - row[labels[uz(s)]];
  }
  return total / n;
}

Tensor cross_entropy_grad(const Tensor& logits, std::span<const int> labels) {
  check_logits(logits, labels);
  const int n = logits.dim(0), classes = logits.dim(1);
  Tensor g(logits.shape());
  for (int s = 0; s < n; ++s) {
    const float* row = logits.data().data() + uz(s) * uz(classes);
    const double lse = log_sum_exp(row, classes);
    for (int c = 0; c < classes; ++c) {
      double p = std::exp(row[c] - lse);
      if (c == labels[uz(s)]) p -= 1.0;
      g[uz(s) * uz(classes) + uz(c)] = static_cast<float>(p / n);
    }
  }
  return g;
}

bool is_trainable(LayerKind kind, std::string_view param_name) {
  if (kind == LayerKind::kBatchNorm) return param_name == "gamma" || param_name == "beta";
  return kind == LayerKind::kLinear || kind == LayerKind::kConv2d;
}

GradientSet backward_from(const ModelGraph& model, const ForwardTrace& trace, const Tensor& output_grad) {
  GradientSet grads;
  for (const auto& node : model.nodes) {
    for (const auto& p : node.params) {
      if (is_trainable(node.kind, p.name)) grads[{node.id, p.name}] = Tensor(p.value.shape());
    }
  }
  std::vector<Tensor> dact(model.nodes.size());
  const int out_idx = model.index_of(model.output_id);
  if (output_grad.shape() != trace.activations[uz(out_idx)].shape()) {
    throw InputError("output gradient shape " + shape_str(output_grad.shape()) + " does not match output");
  }
  dact[uz(out_idx)] = output_grad;
  auto accum = [&](const std::string& producer) -> Tensor& {
    const int p = model.index_of(producer);
    Tensor& d = dact[uz(p)];
    if (d.empty()) d = Tensor(trace.activations[uz(p)].shape());
    return d;
  };
  for (auto it = trace.order.rbegin(); it != trace.order.rend(); ++it) {
    const int idx = *it;
    const LayerNode& node = model.nodes[uz(idx)];
    if (dact[uz(idx)].empty() || node.kind == LayerKind::kInput) continue;
    const Tensor& dy = dact[uz(idx)];
    const Tensor& x = trace.activations[uz(model.index_of(node.inputs[0]))];
    const bool need_dx = model.node(node.inputs[0]).kind != LayerKind::kInput;
    switch (node.kind) {
      case LayerKind::kLinear:
        linear_backward(node, x, dy, need_dx ? &accum(node.inputs[0]) : nullptr, grads);
        break;
      case LayerKind::kConv2d:
        conv_backward(node, x, dy, need_dx ? &accum(node.inputs[0]) : nullptr, grads);
        break;
      case LayerKind::kBatchNorm:
        bn_backward(node, trace, idx, x, dy, need_dx ? &accum(node.inputs[0]) : nullptr, grads);
        break;
      case LayerKind::kReLU: {
        if (!need_dx) break;
        Tensor& dx = accum(node.inputs[0]);
        for (std::size_t i = 0; i < dy.numel(); ++i) {
          if (x[i] > 0.0f) dx[i] += dy[i];
        }
        break;
      }
      case LayerKind::kAdd:
        for (const auto& in : node.inputs) {
          if (model.node(in).kind == LayerKind::kInput) continue;
          Tensor& dx = accum(in);
          for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
        }
        break;
      case LayerKind::kAvgPool:
      case LayerKind::kMaxPool:
        if (need_dx) pool_backward(node, trace, idx, x, dy, accum(node.inputs[0]));
        break;
      case LayerKind::kFlatten: {
        if (!need_dx) break;
        Tensor& dx = accum(node.inputs[0]);
        for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
        break;
      }
      case LayerKind::kInput:
        break;
    }
  }
  return grads;
}

LossAndGradients loss_and_gradients(const ModelGraph& model, const Tensor& batch, std::span<const int> labels,
                                    Mode mode) {
  LossAndGradients r;
  r.trace = forward_trace(model, batch, mode);
  const Tensor& logits = r.trace.output(model);
  r.loss = cross_entropy(logits, labels);
  r.grads = backward_from(model, r.trace, cross_entropy_grad(logits, labels));
  return r;
}

GradientSet backward(const ModelGraph& model, const Tensor& batch, std::span<const int> labels) {
  return loss_and_gradients(model, batch, labels, Mode::kInference).grads;
}

void update_running_stats(ModelGraph& model, const ForwardTrace& trace, float momentum) {
  if (trace.mode != Mode::kTraining) throw InputError("running stats update needs a training-mode trace");
  for (std::size_t i = 0; i < model.nodes.size(); ++i) {
    LayerNode& node = model.nodes[i];
    if (node.kind != LayerKind::kBatchNorm || trace.bn_mean[i].empty()) continue;
    const Tensor& x = trace.activations[uz(model.index_of(node.inputs[0]))];
    const double count = static_cast<double>(x.dim(0)) * static_cast<double>(inner_size(x));
    const double unbias = count > 1 ? count / (count - 1) : 1.0;
    Tensor& rm = node.param("running_mean");
    Tensor& rv = node.param("running_var");
    for (std::size_t c = 0; c < rm.numel(); ++c) {
      rm[c] = (1.0f - momentum) * rm[c] + momentum * trace.bn_mean[i][c];
      rv[c] = (1.0f - momentum) * rv[c] + momentum * static_cast<float>(trace.bn_var[i][c] * unbias);
    }
  }
}

}  // namespace intrafusion
