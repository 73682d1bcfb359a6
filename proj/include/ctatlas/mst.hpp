#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <queue>
#include <span>
#include <tuple>
#include <vector>

#include "ctatlas/volume.hpp"

namespace ctatlas {

// Candidate displacements for discrete optimisation. `priority` lists label
// indices in tie-break order: smaller magnitude first, then lexicographic.
struct LabelSpace {
  std::vector<Vec3> displacements;
  std::vector<int> priority;
  int cube_radius = -1;  // >= 0 when labels are the full cube, x fastest
  double cube_step = 0.0;

  std::size_t size() const { return displacements.size(); }

  static LabelSpace from_list(std::vector<Vec3> labels) {
    LabelSpace ls;
    ls.displacements = std::move(labels);
    ls.build_priority();
    return ls;
  }

  // {-radius*step, ..., 0, ..., radius*step}^3
  static LabelSpace cube(int radius, double step) {
    LabelSpace ls;
    ls.cube_radius = radius;
    ls.cube_step = step;
    for (int c = -radius; c <= radius; ++c)
      for (int b = -radius; b <= radius; ++b)
        for (int a = -radius; a <= radius; ++a) ls.displacements.emplace_back(a * step, b * step, c * step);
    ls.build_priority();
    return ls;
  }

  int zero_label() const { return priority.front(); }

 private:
  void build_priority() {
    priority.resize(displacements.size());
    std::iota(priority.begin(), priority.end(), 0);
    std::stable_sort(priority.begin(), priority.end(), [&](int x, int y) {
      const Vec3& a = displacements[x];
      const Vec3& b = displacements[y];
      const double na = a.squaredNorm(), nb = b.squaredNorm();
      if (na != nb) return na < nb;
      return std::tie(a[0], a[1], a[2]) < std::tie(b[0], b[1], b[2]);
    });
  }
};

struct Graph {
  struct Edge {
    int a;
    int b;
    double weight;
  };
  int nodes = 0;
  std::vector<Edge> edges;
};

struct SpanningTree {
  std::vector<int> parent;  // -1 at the root
  std::vector<int> order;   // every node appears after its parent

  std::size_t size() const { return parent.size(); }
};

// Prim's algorithm from node 0; ties resolved by (weight, node index).
inline SpanningTree minimum_spanning_tree(const Graph& g) {
  if (g.nodes <= 0) throw Error(ErrorCode::Graph, "empty graph");
  std::vector<std::vector<std::pair<int, double>>> adj(g.nodes);
  for (const auto& e : g.edges) {
    if (e.a < 0 || e.b < 0 || e.a >= g.nodes || e.b >= g.nodes) throw Error(ErrorCode::Graph, "edge out of range");
    if (e.a == e.b) continue;
    adj[e.a].push_back({e.b, e.weight});
    adj[e.b].push_back({e.a, e.weight});
  }
  SpanningTree t;
  t.parent.assign(g.nodes, -1);
  std::vector<char> in_tree(g.nodes, 0);
  using Item = std::tuple<double, int, int>;  // weight, node, parent
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  heap.emplace(0.0, 0, -1);
  while (!heap.empty()) {
    const auto [w, v, p] = heap.top();
    heap.pop();
    if (in_tree[v]) continue;
    in_tree[v] = 1;
    t.parent[v] = p;
    t.order.push_back(v);
    for (const auto& [u, wu] : adj[v])
      if (!in_tree[u]) heap.emplace(wu, u, v);
  }
  if (static_cast<int>(t.order.size()) != g.nodes) throw Error(ErrorCode::Graph, "graph is disconnected");
  return t;
}

// Sum of node costs plus alpha * |d_v - d_parent|^2 over tree edges.
inline double tree_objective(std::span<const double> costs, const LabelSpace& labels, const SpanningTree& tree,
                             double alpha, std::span<const int> assignment) {
  const std::size_t L = labels.size();
  auto total = [&](std::size_t v) { return labels.displacements[assignment[v]]; };
  double s = 0.0;
  for (std::size_t v = 0; v < tree.size(); ++v) s += costs[v * L + assignment[v]];
  for (std::size_t v = 0; v < tree.size(); ++v) {
    if (tree.parent[v] < 0) continue;
    s += alpha * (total(v) - total(tree.parent[v])).squaredNorm();
  }
  return s;
}

namespace detail {

// Lower envelope of parabolas: out[p] = min_q f[q] + w (p - q)^2, w > 0.
inline void distance_transform_1d(const double* f, double* out, int n, int stride, double w,
                                  std::vector<int>& v, std::vector<double>& z, std::vector<double>& buf) {
  buf.resize(n);
  for (int q = 0; q < n; ++q) buf[q] = f[q * stride];
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    auto intersect = [&](int r) { return ((buf[q] + w * q * q) - (buf[r] + w * r * r)) / (2.0 * w * (q - r)); };
    double s = intersect(v[k]);
    while (s <= z[k]) {  // z[0] = -inf terminates the loop
      --k;
      s = intersect(v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int p = 0; p < n; ++p) {
    while (z[k + 1] < p) ++k;
    const double d = p - v[k];
    out[p * stride] = w * d * d + buf[v[k]];
  }
}

// msg[l'] = min_l h[l] + alpha * |d_l - d_l'|^2
inline void min_convolve(const LabelSpace& labels, std::span<const double> h, std::span<double> msg, double alpha) {
  const std::size_t L = labels.size();
  if (alpha == 0.0) {
    const double m = *std::min_element(h.begin(), h.end());
    std::fill(msg.begin(), msg.end(), m);
    return;
  }
  if (labels.cube_radius >= 0) {
    const int n = 2 * labels.cube_radius + 1;
    const double w = alpha * labels.cube_step * labels.cube_step;
    std::copy(h.begin(), h.end(), msg.begin());
    std::vector<int> v;
    std::vector<double> z, buf;
    double* m = msg.data();
    for (int c = 0; c < n; ++c)
      for (int b = 0; b < n; ++b)
        distance_transform_1d(m + n * (b + n * c), m + n * (b + n * c), n, 1, w, v, z, buf);
    for (int c = 0; c < n; ++c)
      for (int a = 0; a < n; ++a) distance_transform_1d(m + a + n * n * c, m + a + n * n * c, n, n, w, v, z, buf);
    for (int b = 0; b < n; ++b)
      for (int a = 0; a < n; ++a) distance_transform_1d(m + a + n * b, m + a + n * b, n, n * n, w, v, z, buf);
    return;
  }
  for (std::size_t lp = 0; lp < L; ++lp) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < L; ++l)
      best = std::min(best, h[l] + alpha * (labels.displacements[l] - labels.displacements[lp]).squaredNorm());
    msg[lp] = best;
  }
}

}  // namespace detail

// Exact minimiser of tree_objective by leaf-to-root min-sum message passing
// followed by root-to-leaf decoding. costs is node-major (node * L + label).
inline std::vector<int> mst_optimize(std::span<const double> costs, const LabelSpace& labels,
                                     const SpanningTree& tree, double alpha) {
  const std::size_t n = tree.size(), L = labels.size();
  if (L == 0) throw Error(ErrorCode::Config, "empty label space");
  if (costs.size() != n * L) throw Error(ErrorCode::Shape, "cost table size does not match nodes x labels");
  if (tree.order.size() != n) throw Error(ErrorCode::Graph, "tree does not span all nodes");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw Error(ErrorCode::Config, "alpha must be finite and >= 0");
  for (double c : costs)
    if (!std::isfinite(c)) throw Error(ErrorCode::Validation, "non-finite node cost");

  std::vector<double> belief(costs.begin(), costs.end());
  std::vector<double> msg(L);
  for (auto it = tree.order.rbegin(); it != tree.order.rend(); ++it) {
    const int v = *it, p = tree.parent[v];
    if (p < 0) continue;
    detail::min_convolve(labels, std::span<const double>(belief.data() + v * L, L), msg, alpha);
    double* bp = belief.data() + p * L;
    for (std::size_t l = 0; l < L; ++l) bp[l] += msg[l];
  }

  std::vector<int> assignment(n, labels.zero_label());
  for (const int v : tree.order) {
    const int p = tree.parent[v];
    const double* bv = belief.data() + v * L;
    double best = std::numeric_limits<double>::infinity();
    int best_label = labels.zero_label();
    for (const int l : labels.priority) {
      double e = bv[l];
      if (p >= 0) e += alpha * (labels.displacements[l] - labels.displacements[assignment[p]]).squaredNorm();
      if (e < best) {
        best = e;
        best_label = l;
      }
    }
    assignment[v] = best_label;
  }
  return assignment;
}

inline std::vector<int> mst_optimize(std::span<const double> costs, const LabelSpace& labels, const Graph& graph,
                                     double alpha) {
  return mst_optimize(costs, labels, minimum_spanning_tree(graph), alpha);
}

}  // namespace ctatlas
