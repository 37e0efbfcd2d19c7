#pragma once

// Straight-line double-precision evaluator used as a test oracle. Shares no
// code with the engine beyond the graph description.

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "intrafusion/graph.hpp"

namespace testing {

using namespace intrafusion;

using RefParams = std::map<std::pair<std::string, std::string>, std::vector<double>>;

inline RefParams ref_params(const ModelGraph& m) {
  RefParams p;
  for (const auto& n : m.nodes) {
    for (const auto& t : n.params) p[{n.id, t.name}] = std::vector<double>(t.value.values().begin(), t.value.values().end());
  }
  return p;
}

struct RefAct {
  std::vector<int> shape;  // per sample
  std::vector<std::vector<double>> rows;
};

struct RefResult {
  double loss = 0.0;
  std::vector<char> pattern;  // ReLU signs and max-pool winners, for kink detection
};

inline RefResult ref_loss(const ModelGraph& m, const RefParams& p, const Tensor& x, std::span<const int> labels,
                          bool batch_stats) {
  const int batch = x.dim(0);
  const std::size_t per = x.numel() / static_cast<std::size_t>(batch);
  std::map<std::string, RefAct> act;
  RefResult res;
  for (int idx : m.topo_order()) {
    const LayerNode& n = m.nodes[static_cast<std::size_t>(idx)];
    RefAct out;
    if (n.kind == LayerKind::kInput) {
      out.shape = std::vector<int>(x.shape().begin() + 1, x.shape().end());
      for (int s = 0; s < batch; ++s) {
        out.rows.emplace_back(x.values().begin() + static_cast<long>(s * per), x.values().begin() + static_cast<long>((s + 1) * per));
      }
      act[n.id] = std::move(out);
      continue;
    }
    const RefAct& in = act.at(n.inputs[0]);
    auto P = [&](const char* name) -> const std::vector<double>& { return p.at({n.id, name}); };
    auto has = [&](const char* name) { return p.count({n.id, name}) > 0; };
    switch (n.kind) {
      case LayerKind::kLinear: {
        out.shape = {n.out_channels};
        for (const auto& r : in.rows) {
          std::vector<double> o(static_cast<std::size_t>(n.out_channels));
          for (int j = 0; j < n.out_channels; ++j) {
            double a = has("bias") ? P("bias")[static_cast<std::size_t>(j)] : 0.0;
            for (int i = 0; i < n.in_channels; ++i) a += P("weight")[static_cast<std::size_t>(j * n.in_channels + i)] * r[static_cast<std::size_t>(i)];
            o[static_cast<std::size_t>(j)] = a;
          }
          out.rows.push_back(std::move(o));
        }
        break;
      }
      case LayerKind::kConv2d: {
        const int ih = in.shape[1], iw = in.shape[2], k = n.kernel;
        const int oh = (ih + 2 * n.padding - k) / n.stride + 1, ow = (iw + 2 * n.padding - k) / n.stride + 1;
        out.shape = {n.out_channels, oh, ow};
        for (const auto& r : in.rows) {
          std::vector<double> o(static_cast<std::size_t>(n.out_channels * oh * ow));
          for (int oc = 0; oc < n.out_channels; ++oc) {
            for (int y = 0; y < oh; ++y) {
              for (int xx = 0; xx < ow; ++xx) {
                double a = has("bias") ? P("bias")[static_cast<std::size_t>(oc)] : 0.0;
                for (int ic = 0; ic < n.in_channels; ++ic) {
                  for (int a1 = 0; a1 < k; ++a1) {
                    for (int a2 = 0; a2 < k; ++a2) {
                      const int sy = y * n.stride - n.padding + a1, sx = xx * n.stride - n.padding + a2;
                      if (sy < 0 || sy >= ih || sx < 0 || sx >= iw) continue;
                      a += P("weight")[static_cast<std::size_t>(((oc * n.in_channels + ic) * k + a1) * k + a2)] *
                           r[static_cast<std::size_t>((ic * ih + sy) * iw + sx)];
                    }
                  }
                }
                o[static_cast<std::size_t>((oc * oh + y) * ow + xx)] = a;
              }
            }
          }
          out.rows.push_back(std::move(o));
        }
        break;
      }
      case LayerKind::kBatchNorm: {
        out = in;
        const int c = n.out_channels;
        const std::size_t inner = in.rows[0].size() / static_cast<std::size_t>(c);
        for (int ch = 0; ch < c; ++ch) {
          double mean = P("running_mean")[static_cast<std::size_t>(ch)];
          double var = P("running_var")[static_cast<std::size_t>(ch)];
          if (batch_stats) {
            double s1 = 0.0, s2 = 0.0;
            for (const auto& r : in.rows) {
              for (std::size_t i = 0; i < inner; ++i) s1 += r[ch * inner + i];
            }
            const double cnt = static_cast<double>(inner * in.rows.size());
            mean = s1 / cnt;
            for (const auto& r : in.rows) {
              for (std::size_t i = 0; i < inner; ++i) s2 += (r[ch * inner + i] - mean) * (r[ch * inner + i] - mean);
            }
            var = s2 / cnt;
          }
          const double den = std::sqrt(var + static_cast<double>(n.eps));
          for (auto& r : out.rows) {
            for (std::size_t i = 0; i < inner; ++i) {
              double& v = r[ch * inner + i];
              v = P("gamma")[static_cast<std::size_t>(ch)] * (v - mean) / den + P("beta")[static_cast<std::size_t>(ch)];
            }
          }
        }
        break;
      }
      case LayerKind::kReLU:
        out = in;
        for (auto& r : out.rows) {
          for (double& v : r) {
            res.pattern.push_back(v > 0);
            v = v > 0 ? v : 0.0;
          }
        }
        break;
      case LayerKind::kAdd: {
        out = in;
        const RefAct& rhs = act.at(n.inputs[1]);
        for (std::size_t s = 0; s < out.rows.size(); ++s) {
          for (std::size_t i = 0; i < out.rows[s].size(); ++i) out.rows[s][i] += rhs.rows[s][i];
        }
        break;
      }
      case LayerKind::kAvgPool:
      case LayerKind::kMaxPool: {
        const int c = in.shape[0], h = in.shape[1], w = in.shape[2], win = n.window;
        out.shape = {c, h / win, w / win};
        for (const auto& r : in.rows) {
          std::vector<double> o;
          for (int ch = 0; ch < c; ++ch) {
            for (int y = 0; y < h / win; ++y) {
              for (int xx = 0; xx < w / win; ++xx) {
                double sum = 0.0, best = -1e300;
                int arg = 0;
                for (int d = 0; d < win * win; ++d) {
                  const double v = r[static_cast<std::size_t>((ch * h + y * win + d / win) * w + xx * win + d % win)];
                  sum += v;
                  if (v > best) {
                    best = v;
                    arg = d;
                  }
                }
                if (n.kind == LayerKind::kMaxPool) res.pattern.push_back(static_cast<char>(arg));
                o.push_back(n.kind == LayerKind::kMaxPool ? best : sum / (win * win));
              }
            }
          }
          out.rows.push_back(std::move(o));
        }
        break;
      }
      case LayerKind::kFlatten: {
        out = in;
        out.shape = {static_cast<int>(in.rows[0].size())};
        break;
      }
      case LayerKind::kInput:
        break;
    }
    act[n.id] = std::move(out);
  }
  for (std::size_t s = 0; s < labels.size(); ++s) {
    const auto& z = act.at(m.output_id).rows[s];
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    res.loss -= z[static_cast<std::size_t>(labels[s])] - mx - std::log(sum);
  }
  res.loss /= static_cast<double>(labels.size());
  return res;
}

}  // namespace testing
