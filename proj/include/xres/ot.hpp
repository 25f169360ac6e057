#pragma once

// Exact discrete optimal transport between two equally sized point sets with
// uniform marginals. With a = b = 1/N the optimal plans include a scaled
// permutation, so the solver works on the assignment polytope with integer
// unit flows and rescales at the end.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "xres/errors.hpp"

namespace xres {

struct CostMatrix {
  std::size_t n = 0;
  std::vector<double> c;  // n×n row-major, nonnegative

  double operator()(std::size_t i, std::size_t j) const { return c[i * n + j]; }
};

struct TransportPlan {
  std::size_t n = 0;
  std::vector<double> gamma;  // n×n row-major
  std::vector<double> a, b;   // row / column marginals
  double cost = 0.0;

  double operator()(std::size_t i, std::size_t j) const { return gamma[i * n + j]; }

  std::vector<double> row_sums() const {
    std::vector<double> s(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) s[i] += gamma[i * n + j];
    return s;
  }
  std::vector<double> col_sums() const {
    std::vector<double> s(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) s[j] += gamma[i * n + j];
    return s;
  }
};

// Squared Euclidean distance between rows of two N×K sets.
inline CostMatrix cost_matrix(std::span<const double> yhat, std::span<const double> ohat, std::size_t k) {
  if (k == 0 || yhat.size() % k != 0 || ohat.size() != yhat.size())
    throw DimensionError("cost_matrix: row sets of " + std::to_string(yhat.size()) + " and " +
                         std::to_string(ohat.size()) + " values with K=" + std::to_string(k));
  CostMatrix m;
  m.n = yhat.size() / k;
  m.c.resize(m.n * m.n);
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = 0; j < m.n; ++j) {
      double d = 0;
      for (std::size_t q = 0; q < k; ++q) {
        const double e = yhat[i * k + q] - ohat[j * k + q];
        d += e * e;
      }
      m.c[i * m.n + j] = d;
    }
  return m;
}

inline double plan_cost(const CostMatrix& c, std::span<const double> gamma) {
  double s = 0;
  for (std::size_t i = 0; i < c.c.size(); ++i) s += c.c[i] * gamma[i];
  return s;
}

namespace detail {

inline void check_cost(const CostMatrix& c) {
  if (c.c.size() != c.n * c.n || c.n == 0) throw DimensionError("cost matrix is not square n×n");
  for (double v : c.c)
    if (!std::isfinite(v)) throw NumericError("transport: non-finite cost entry");
}

inline TransportPlan plan_from_permutation(const CostMatrix& c, std::span<const std::size_t> perm) {
  const std::size_t n = c.n;
  TransportPlan p;
  p.n = n;
  p.gamma.assign(n * n, 0.0);
  p.a.assign(n, 1.0 / static_cast<double>(n));
  p.b = p.a;
  for (std::size_t i = 0; i < n; ++i) p.gamma[i * n + perm[i]] = 1.0 / static_cast<double>(n);
  p.cost = plan_cost(c, p.gamma);
  return p;
}

// Network simplex on the bipartite assignment network. The starting basis
// carries the identity assignment, and only strictly improving cycles move
// flow, so an optimal identity is never left. Entering arcs follow Dantzig's
// rule, falling back to Bland's rule during long degenerate stretches.
class AssignmentSimplex {
 public:
  explicit AssignmentSimplex(const CostMatrix& c) : c_(c), n_(c.n) {
    double scale = 1.0;
    for (double v : c.c) scale = std::max(scale, std::abs(v));
    tol_ = 1e-12 * scale;
  }

  std::vector<std::size_t> solve() {
    const std::size_t n = n_;
    flow_.assign(n * n, 0);
    basic_.assign(n * n, false);
    for (std::size_t i = 0; i < n; ++i) {
      flow_[i * n + i] = 1;
      basic_[i * n + i] = true;
      if (i + 1 < n) basic_[i * n + i + 1] = true;  // degenerate links joining the tree
    }
    std::size_t degenerate_run = 0;
    for (;;) {
      potentials();
      const bool bland = degenerate_run > 2 * n;
      const std::size_t enter = entering(bland);
      if (enter == npos) break;
      degenerate_run = pivot(enter) ? 0 : degenerate_run + 1;
    }
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (flow_[i * n + j] == 1) perm[i] = j;
    return perm;
  }

  double tolerance() const { return tol_; }

 private:
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  // Node ids: rows 0..n-1, columns n..2n-1.
  void potentials() {
    const std::size_t n = n_;
    u_.assign(n, 0.0);
    v_.assign(n, 0.0);
    std::vector<bool> row_seen(n, false), col_seen(n, false);
    std::vector<std::size_t> stack{0};
    row_seen[0] = true;
    while (!stack.empty()) {
      const std::size_t node = stack.back();
      stack.pop_back();
      if (node < n) {
        for (std::size_t j = 0; j < n; ++j)
          if (basic_[node * n + j] && !col_seen[j]) {
            col_seen[j] = true;
            v_[j] = c_(node, j) - u_[node];
            stack.push_back(n + j);
          }
      } else {
        const std::size_t j = node - n;
        for (std::size_t i = 0; i < n; ++i)
          if (basic_[i * n + j] && !row_seen[i]) {
            row_seen[i] = true;
            u_[i] = c_(i, j) - v_[j];
            stack.push_back(i);
          }
      }
    }
  }

  std::size_t entering(bool bland) const {
    const std::size_t n = n_;
    std::size_t best = npos;
    double best_d = -tol_;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t arc = i * n + j;
        if (basic_[arc]) continue;
        const double d = c_(i, j) - u_[i] - v_[j];
        if (d < best_d) {
          if (bland) return arc;
          best_d = d;
          best = arc;
        }
      }
    return best;
  }

  // Tree path from column node of `enter` back to its row node, as arcs.
  std::vector<std::size_t> tree_path(std::size_t from_col, std::size_t to_row) const {
    const std::size_t n = n_;
    std::vector<std::size_t> parent_arc(2 * n, npos), parent(2 * n, npos);
    std::vector<bool> seen(2 * n, false);
    std::vector<std::size_t> queue{n + from_col};
    seen[n + from_col] = true;
    for (std::size_t q = 0; q < queue.size() && !seen[to_row]; ++q) {
      const std::size_t node = queue[q];
      for (std::size_t other = 0; other < n; ++other) {
        const std::size_t arc = node < n ? node * n + other : other * n + (node - n);
        const std::size_t next = node < n ? n + other : other;
        if (!basic_[arc] || seen[next]) continue;
        seen[next] = true;
        parent[next] = node;
        parent_arc[next] = arc;
        queue.push_back(next);
      }
    }
    std::vector<std::size_t> path;
    for (std::size_t node = to_row; node != n + from_col; node = parent[node]) path.push_back(parent_arc[node]);
    std::reverse(path.begin(), path.end());  // starts at the column end
    return path;
  }

  // Returns true when flow moved.
  bool pivot(std::size_t enter) {
    const std::size_t n = n_;
    const std::size_t i = enter / n, j = enter % n;
    const auto path = tree_path(j, i);
    // Arcs alternate −, +, −, ... starting next to column j; the path has odd length.
    int theta = 1;
    for (std::size_t p = 0; p < path.size(); p += 2) theta = std::min(theta, flow_[path[p]]);
    std::size_t leave = npos;
    for (std::size_t p = 0; p < path.size(); p += 2)
      if (flow_[path[p]] == theta && path[p] < leave) leave = path[p];
    for (std::size_t p = 0; p < path.size(); ++p) flow_[path[p]] += (p % 2 == 0) ? -theta : theta;
    flow_[enter] += theta;
    basic_[leave] = false;
    basic_[enter] = true;
    return theta > 0;
  }

  const CostMatrix& c_;
  std::size_t n_;
  double tol_ = 0;
  std::vector<int> flow_;
  std::vector<bool> basic_;
  std::vector<double> u_, v_;
};

// Moves rows onto the diagonal wherever a two-row exchange does not raise
// the cost beyond `tol`. Fixed points only ever increase.
inline void prefer_diagonal(const CostMatrix& c, std::vector<std::size_t>& perm, double tol) {
  const std::size_t n = c.n;
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (perm[i] == i) continue;
      std::size_t j = 0;
      while (perm[j] != i) ++j;
      const std::size_t pi = perm[i];
      const double delta = c(i, i) + c(j, pi) - c(i, pi) - c(j, i);
      if (delta <= tol) {
        perm[i] = i;
        perm[j] = pi;
        changed = true;
      }
    }
  }
}

}  // namespace detail

// Minimizes <γ, C> subject to γ·1 = a, γᵀ·1 = b for uniform a = b = 1/N.
// Among cost-equal optima, identity-leaning plans are returned.
inline TransportPlan solve_exact(const CostMatrix& c, std::span<const double> a, std::span<const double> b) {
  detail::check_cost(c);
  const std::size_t n = c.n;
  if (a.size() != n || b.size() != n) throw DimensionError("solve_exact: marginal length differs from N");
  const double sa = std::accumulate(a.begin(), a.end(), 0.0), sb = std::accumulate(b.begin(), b.end(), 0.0);
  if (std::abs(sa - sb) > 1e-9) throw ContractError("solve_exact: marginal masses differ");
  const double u = sa / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    if (std::abs(a[i] - u) > 1e-12 || std::abs(b[i] - u) > 1e-12)
      throw ContractError("solve_exact: only equal uniform marginals are supported");
  detail::AssignmentSimplex simplex(c);
  auto perm = simplex.solve();
  detail::prefer_diagonal(c, perm, simplex.tolerance());
  auto plan = detail::plan_from_permutation(c, perm);
  if (std::abs(sa - 1.0) > 1e-12) {
    for (auto& g : plan.gamma) g *= sa;
    for (auto& v : plan.a) v *= sa;
    for (auto& v : plan.b) v *= sa;
    plan.cost *= sa;
  }
  return plan;
}

inline TransportPlan solve_exact(const CostMatrix& c) {
  const std::vector<double> u(c.n, 1.0 / static_cast<double>(c.n));
  return solve_exact(c, u, u);
}

// Hungarian (Kuhn-Munkres with potentials) optimal assignment, scaled by 1/N.
// Reference solver for small instances.
inline TransportPlan solve_oracle(const CostMatrix& c) {
  detail::check_cost(c);
  const std::size_t n = c.n;
  if (n > 10) throw ContractError("solve_oracle: refuses N > 10, got " + std::to_string(n));
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> perm(n);
  for (std::size_t j = 1; j <= n; ++j) perm[p[j] - 1] = j - 1;
  return detail::plan_from_permutation(c, perm);
}

}  // namespace xres
