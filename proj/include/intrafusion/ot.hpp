#pragma once

#include <span>
#include <utility>
#include <vector>

namespace intrafusion {

// Dense row-major double matrix.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0);
  double& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(j)]; }
  double operator()(int i, int j) const { return data[static_cast<std::size_t>(i) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(j)]; }
  Matrix transposed() const;
};

enum class DistMode { kUniform, kSumNormalized, kSoftmax };

// Probability masses over k points. Importance is ignored in uniform mode.
// A zero importance sum in sum-normalized mode is an InputError unless
// `fallback_uniform` is set.
std::vector<double> make_distribution(int k, std::span<const double> importance, DistMode mode,
                                      bool fallback_uniform = false);

// Pairwise l1 distances, divided by the largest entry unless all are zero.
Matrix cost_matrix(const std::vector<std::vector<float>>& sources,
                   const std::vector<std::vector<float>>& targets, bool normalize = true);

struct BasisCell {
  int row = 0;
  int col = 0;
};

struct TransportPlan {
  Matrix T;
  double objective = 0.0;
  std::vector<double> mu;
  std::vector<double> nu;
  // Final simplex basis: a spanning tree of n+m-1 cells, zeros allowed.
  std::vector<BasisCell> basis;
  int pivots = 0;
};

// Exact solution of the transportation LP by the tree-basis simplex method,
// northwest-corner start, Bland's rule for entering and leaving cells.
TransportPlan solve_ot(std::span<const double> mu, std::span<const double> nu, const Matrix& cost);

// M = diag(1/nu) T^T, an m x n row-stochastic matrix.
Matrix normalize_transport(const TransportPlan& plan);

}  // namespace intrafusion
