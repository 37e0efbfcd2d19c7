#pragma once

#include <string>
#include <utility>
#include <vector>

#include "intrafusion/engine.hpp"
#include "intrafusion/model_io.hpp"
#include "intrafusion/rng.hpp"

namespace testing {

using namespace intrafusion;

inline Tensor random_batch(const Shape& sample, int n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Shape s{n};
  s.insert(s.end(), sample.begin(), sample.end());
  Tensor t(s);
  Rng rng(seed);
  for (float& v : t.values()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

struct NamedModel {
  std::string name;
  ModelGraph model;
};

inline ArchDims mlp_dims() { return {{12}, {9, 7}, 5, true}; }
inline ArchDims vgg_dims() { return {{2, 8, 8}, {4, 6}, 5, true}; }
inline ArchDims resnet_dims() { return {{1, 8, 8}, {4}, 5, true}; }

// Every builder, small, with randomized BN statistics.
inline std::vector<NamedModel> all_builders(std::uint64_t seed) {
  std::vector<NamedModel> out;
  out.push_back({"mlp", build_arch("mlp", mlp_dims(), seed)});
  out.push_back({"vgg-toy", build_arch("vgg-toy", vgg_dims(), seed + 1)});
  out.push_back({"resnet-toy", build_arch("resnet-toy", resnet_dims(), seed + 2)});
  for (auto& nm : out) randomize_batchnorm(nm.model, seed + 17);
  return out;
}

// Gaussian blobs around random class centres; features [n, dims].
inline Dataset blobs(int n, int dims, int classes, std::uint64_t seed, double spread = 0.5) {
  Rng rng(seed);
  std::vector<std::vector<double>> centres(static_cast<std::size_t>(classes));
  for (auto& c : centres) {
    for (int d = 0; d < dims; ++d) c.push_back(rng.uniform(-2.0, 2.0));
  }
  Dataset data;
  data.classes = classes;
  data.features = Tensor({n, dims});
  for (int i = 0; i < n; ++i) {
    const int label = i % classes;
    data.labels.push_back(label);
    for (int d = 0; d < dims; ++d) {
      data.features[static_cast<std::size_t>(i * dims + d)] =
          static_cast<float>(centres[static_cast<std::size_t>(label)][static_cast<std::size_t>(d)] + spread * rng.normal());
    }
  }
  return data;
}

inline double max_abs(const Tensor& a, const Tensor& b) { return static_cast<double>(max_abs_diff(a, b)); }

}  // namespace testing
