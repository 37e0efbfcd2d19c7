#include "intrafusion/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "intrafusion/errors.hpp"

namespace intrafusion {

namespace {
std::size_t uz(int v) { return static_cast<std::size_t>(v); }
}  // namespace

Matrix::Matrix(int r, int c, double fill) : rows(r), cols(c), data(uz(r) * uz(c), fill) {
  if (r < 0 || c < 0) throw InputError("negative matrix dimension");
}

Matrix Matrix::transposed() const {
  Matrix t(cols, rows);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
  }
  return t;
}

std::vector<double> make_distribution(int k, std::span<const double> importance, DistMode mode, bool fallback_uniform) {
  if (k <= 0) throw InputError("distribution needs at least one point");
  std::vector<double> uniform(uz(k), 1.0 / k);
  if (mode == DistMode::kUniform) return uniform;
  if (importance.size() != uz(k)) {
    throw InputError("importance length " + std::to_string(importance.size()) + " does not match " + std::to_string(k));
  }
  for (double v : importance) {
    if (!std::isfinite(v)) throw InputError("non-finite importance");
  }
  std::vector<double> w(importance.begin(), importance.end());
  if (mode == DistMode::kSumNormalized) {
    double sum = 0.0;
    for (double v : w) {
      if (v < 0) throw InputError("negative importance in sum-normalized distribution");
      sum += v;
    }
    if (sum <= 0.0) {
      if (fallback_uniform) return uniform;
      throw InputError("importance sums to zero: degenerate distribution");
    }
    for (double& v : w) v /= sum;
    return w;
  }
  const double mx = *std::max_element(w.begin(), w.end());
  double sum = 0.0;
  for (double& v : w) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : w) v /= sum;
  return w;
}

Matrix cost_matrix(const std::vector<std::vector<float>>& sources, const std::vector<std::vector<float>>& targets,
                   bool normalize) {
  Matrix c(static_cast<int>(sources.size()), static_cast<int>(targets.size()));
  double mx = 0.0;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    for (std::size_t j = 0; j < targets.size(); ++j) {
      const auto& a = sources[i];
      const auto& b = targets[j];
      if (a.size() != b.size()) {
        throw InputError("cost matrix vector length mismatch: " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
      }
      double d = 0.0;
      for (std::size_t t = 0; t < a.size(); ++t) d += std::fabs(static_cast<double>(a[t]) - static_cast<double>(b[t]));
      c(static_cast<int>(i), static_cast<int>(j)) = d;
      mx = std::max(mx, d);
    }
  }
  if (normalize && mx > 0.0) {
    for (double& v : c.data) v /= mx;
  }
  return c;
}

namespace {

// Basis tree over row nodes [0,n) and column nodes [n,n+m).
struct Tree {
  int n, m;
  std::vector<std::vector<int>> adj;  // node -> incident basis cell ids
  Tree(int n_, int m_, const std::vector<BasisCell>& cells) : n(n_), m(m_), adj(uz(n_ + m_)) {
    for (std::size_t k = 0; k < cells.size(); ++k) {
      adj[uz(cells[k].row)].push_back(static_cast<int>(k));
      adj[uz(n + cells[k].col)].push_back(static_cast<int>(k));
    }
  }
  int other(const BasisCell& c, int node) const { return node < n ? n + c.col : c.row; }
};

}  // namespace

TransportPlan solve_ot(std::span<const double> mu, std::span<const double> nu, const Matrix& cost) {
  const int n = static_cast<int>(mu.size());
  const int m = static_cast<int>(nu.size());
  if (n == 0 || m == 0) throw InputError("empty marginal");
  if (cost.rows != n || cost.cols != m) throw InputError("cost matrix shape does not match marginals");
  double sa = 0.0, sb = 0.0, cmax = 0.0;
  for (double v : mu) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InputError("source marginal has a negative or non-finite entry");
    sa += v;
  }
  for (double v : nu) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InputError("target marginal has a negative or non-finite entry");
    sb += v;
  }
  for (double v : cost.data) {
    if (!std::isfinite(v)) throw InputError("non-finite cost entry");
    cmax = std::max(cmax, std::fabs(v));
  }
  if (std::fabs(sa - sb) > 1e-8 * std::max(1.0, sa)) {
    throw InputError("infeasible marginals: source mass " + std::to_string(sa) + " vs target mass " + std::to_string(sb));
  }

  TransportPlan plan;
  plan.mu.assign(mu.begin(), mu.end());
  plan.nu.assign(nu.begin(), nu.end());
  std::vector<double> value;
  std::vector<int> cell_id(uz(n) * uz(m), -1);

  // Northwest corner: every step advances exactly one index, giving n+m-1 cells.
  {
    std::vector<double> a(plan.mu), b(plan.nu);
    int i = 0, j = 0;
    while (true) {
      const bool last = i == n - 1 && j == m - 1;
      double x;
      bool down;
      if (a[uz(i)] < b[uz(j)]) {
        x = a[uz(i)];
        b[uz(j)] -= x;
        a[uz(i)] = 0.0;
        down = i < n - 1;
      } else {
        x = b[uz(j)];
        a[uz(i)] -= x;
        b[uz(j)] = 0.0;
        down = j == m - 1;
      }
      if (last) x = std::max(0.0, x);
      cell_id[uz(i) * uz(m) + uz(j)] = static_cast<int>(plan.basis.size());
      plan.basis.push_back({i, j});
      value.push_back(x);
      if (last) break;
      if (down) ++i; else ++j;
    }
  }

  const double tol = 1e-12 * std::max(1.0, cmax);
  const long max_pivots = 50L * (n + m) * n * m + 1000;
  std::vector<double> pot(uz(n + m));
  std::vector<int> parent_cell(uz(n + m));
  std::vector<int> stack;
  for (;;) {
    const Tree tree(n, m, plan.basis);
    // Potentials u_i (rows) and v_j (cols) with u_0 = 0 and u_i + v_j = c_ij on the basis.
    std::fill(parent_cell.begin(), parent_cell.end(), -2);
    parent_cell[0] = -1;
    pot[0] = 0.0;
    stack.assign(1, 0);
    while (!stack.empty()) {
      const int node = stack.back();
      stack.pop_back();
      for (int k : tree.adj[uz(node)]) {
        const BasisCell& c = plan.basis[uz(k)];
        const int nb = tree.other(c, node);
        if (parent_cell[uz(nb)] != -2) continue;
        parent_cell[uz(nb)] = k;
        pot[uz(nb)] = cost(c.row, c.col) - pot[uz(node)];
        stack.push_back(nb);
      }
    }
    int ei = -1, ej = -1;
    for (int i = 0; i < n && ei < 0; ++i) {
      for (int j = 0; j < m; ++j) {
        if (cell_id[uz(i) * uz(m) + uz(j)] >= 0) continue;
        if (cost(i, j) - pot[uz(i)] - pot[uz(n + j)] < -tol) {
          ei = i;
          ej = j;
          break;
        }
      }
    }
    if (ei < 0) break;
    if (++plan.pivots > max_pivots) throw InputError("transportation simplex exceeded pivot limit");

    // Tree path from column node of the entering cell back to the root, and from
    // its row node; the cycle is their symmetric difference plus the entering cell.
    auto path_to_root = [&](int node) {
      std::vector<int> path;
      while (parent_cell[uz(node)] >= 0) {
        const int k = parent_cell[uz(node)];
        path.push_back(k);
        node = tree.other(plan.basis[uz(k)], node);
      }
      return path;
    };
    std::vector<int> from_row = path_to_root(ei);
    std::vector<int> from_col = path_to_root(n + ej);
    while (!from_row.empty() && !from_col.empty() && from_row.back() == from_col.back()) {
      from_row.pop_back();
      from_col.pop_back();
    }
    // Walk row ei -> ... -> col ej: cells alternate -, +, -, ... starting at the entering row.
    std::vector<int> cycle(from_row);
    cycle.insert(cycle.end(), from_col.rbegin(), from_col.rend());
    double theta = std::numeric_limits<double>::infinity();
    int leave = -1;
    const auto flat = [&](int k) { return plan.basis[uz(k)].row * m + plan.basis[uz(k)].col; };
    for (std::size_t t = 0; t < cycle.size(); t += 2) {
      const int k = cycle[t];
      const double v = value[uz(k)];
      if (leave < 0 || v < theta || (v == theta && flat(k) < flat(leave))) {
        theta = v;
        leave = k;
      }
    }
    for (std::size_t t = 0; t < cycle.size(); ++t) {
      const int k = cycle[t];
      if (t % 2 == 0) value[uz(k)] -= theta; else value[uz(k)] += theta;
    }
    const BasisCell gone = plan.basis[uz(leave)];
    cell_id[uz(gone.row) * uz(m) + uz(gone.col)] = -1;
    plan.basis[uz(leave)] = {ei, ej};
    value[uz(leave)] = theta;
    cell_id[uz(ei) * uz(m) + uz(ej)] = leave;
  }

  plan.T = Matrix(n, m);
  for (std::size_t k = 0; k < plan.basis.size(); ++k) {
    plan.T(plan.basis[k].row, plan.basis[k].col) = std::max(0.0, value[k]);
  }
  std::sort(plan.basis.begin(), plan.basis.end(),
            [](const BasisCell& a, const BasisCell& b) { return a.row != b.row ? a.row < b.row : a.col < b.col; });
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) plan.objective += plan.T(i, j) * cost(i, j);
  }
  return plan;
}

Matrix normalize_transport(const TransportPlan& plan) {
  const int n = plan.T.rows, m = plan.T.cols;
  if (plan.nu.size() != uz(m)) throw InputError("transport plan is missing its target marginal");
  Matrix out(m, n);
  for (int j = 0; j < m; ++j) {
    const double w = plan.nu[uz(j)];
    if (!(w > 0.0)) throw InputError("degenerate target mass at target " + std::to_string(j));
    for (int i = 0; i < n; ++i) out(j, i) = plan.T(i, j) / w;
  }
  return out;
}

}  // namespace intrafusion
