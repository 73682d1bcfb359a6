#include <gtest/gtest.h>

#include <random>

#include "ctatlas/mst.hpp"

using namespace ctatlas;

namespace {

// Objective of an assignment, evaluated from scratch.
double oracle_objective(const std::vector<double>& costs, const std::vector<Vec3>& labels,
                        const std::vector<int>& parent, double alpha, const std::vector<int>& x) {
  const std::size_t L = labels.size();
  double s = 0.0;
  for (std::size_t v = 0; v < parent.size(); ++v) s += costs[v * L + x[v]];
  for (std::size_t v = 0; v < parent.size(); ++v)
    if (parent[v] >= 0) s += alpha * (labels[x[v]] - labels[x[parent[v]]]).squaredNorm();
  return s;
}

double brute_force_minimum(const std::vector<double>& costs, const std::vector<Vec3>& labels,
                           const std::vector<int>& parent, double alpha) {
  const int n = static_cast<int>(parent.size()), L = static_cast<int>(labels.size());
  std::vector<int> x(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    best = std::min(best, oracle_objective(costs, labels, parent, alpha, x));
    int v = 0;
    while (v < n && ++x[v] == L) x[v++] = 0;
    if (v == n) break;
  }
  return best;
}

Graph random_connected_graph(int n, std::mt19937& rng) {
  Graph g;
  g.nodes = n;
  std::uniform_real_distribution<double> w(0.0, 1.0);
  for (int v = 1; v < n; ++v) g.edges.push_back({std::uniform_int_distribution<int>(0, v - 1)(rng), v, w(rng)});
  for (int e = 0; e < n; ++e) {
    const int a = std::uniform_int_distribution<int>(0, n - 1)(rng), b = std::uniform_int_distribution<int>(0, n - 1)(rng);
    if (a != b) g.edges.push_back({a, b, w(rng)});
  }
  return g;
}

// Kruskal with union-find; independent of the Prim implementation.
double kruskal_weight(const Graph& g) {
  std::vector<int> root(g.nodes);
  std::iota(root.begin(), root.end(), 0);
  std::function<int(int)> find = [&](int v) { return root[v] == v ? v : root[v] = find(root[v]); };
  auto edges = g.edges;
  std::sort(edges.begin(), edges.end(), [](const auto& a, const auto& b) { return a.weight < b.weight; });
  double total = 0.0;
  for (const auto& e : edges) {
    const int a = find(e.a), b = find(e.b);
    if (a == b) continue;
    root[a] = b;
    total += e.weight;
  }
  return total;
}

double tree_weight(const Graph& g, const SpanningTree& t) {
  double total = 0.0;
  for (int v = 0; v < g.nodes; ++v) {
    if (t.parent[v] < 0) continue;
    double w = std::numeric_limits<double>::infinity();
    for (const auto& e : g.edges)
      if ((e.a == v && e.b == t.parent[v]) || (e.b == v && e.a == t.parent[v])) w = std::min(w, e.weight);
    total += w;
  }
  return total;
}

}  // namespace

TEST(LabelSpace, CubeAndPriority) {
  const LabelSpace ls = LabelSpace::cube(2, 1.5);
  EXPECT_EQ(ls.size(), 125u);
  EXPECT_EQ(ls.displacements[ls.zero_label()], Vec3::Zero());
  for (std::size_t i = 1; i < ls.priority.size(); ++i)
    EXPECT_LE(ls.displacements[ls.priority[i - 1]].squaredNorm(), ls.displacements[ls.priority[i]].squaredNorm());
}

TEST(SpanningTreeTest, MatchesKruskalWeight) {
  std::mt19937 rng(11);
  for (int t = 0; t < 100; ++t) {
    const Graph g = random_connected_graph(std::uniform_int_distribution<int>(1, 30)(rng), rng);
    const SpanningTree tree = minimum_spanning_tree(g);
    ASSERT_EQ(tree.order.size(), static_cast<std::size_t>(g.nodes));
    std::vector<char> seen(g.nodes, 0);
    for (int v : tree.order) {
      if (tree.parent[v] >= 0) EXPECT_TRUE(seen[tree.parent[v]]);
      seen[v] = 1;
    }
    EXPECT_NEAR(tree_weight(g, tree), kruskal_weight(g), 1e-12);
  }
}

TEST(SpanningTreeTest, DisconnectedGraphRejected) {
  Graph g;
  g.nodes = 4;
  g.edges = {{0, 1, 1.0}, {2, 3, 1.0}};
  try {
    minimum_spanning_tree(g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Graph);
  }
  std::vector<double> costs(8, 0.0);
  EXPECT_THROW(mst_optimize(costs, LabelSpace::from_list({Vec3::Zero(), Vec3::UnitX()}), g, 1.0), Error);
}

TEST(MstOptimize, AlphaZeroIsIndependentArgmin) {
  std::mt19937 rng(2);
  const LabelSpace ls = LabelSpace::cube(1, 1.0);
  const int n = 10;
  std::vector<double> costs(n * ls.size());
  for (auto& c : costs) c = std::uniform_real_distribution<double>(0, 1)(rng);
  Graph g;
  g.nodes = n;
  for (int v = 1; v < n; ++v) g.edges.push_back({v - 1, v, 1.0});
  const auto x = mst_optimize(costs, ls, g, 0.0);
  for (int v = 0; v < n; ++v) {
    const auto first = costs.begin() + v * ls.size();
    EXPECT_EQ(x[v], std::min_element(first, first + ls.size()) - first);
  }
}

TEST(MstOptimize, TwoNodeChainHandTable) {
  const LabelSpace ls = LabelSpace::from_list({Vec3(-1, 0, 0), Vec3(0, 0, 0), Vec3(1, 0, 0)});
  // Node 0 prefers +1 weakly, node 1 prefers -1 strongly.
  const std::vector<double> costs{2.0, 1.0, 0.8, 0.0, 1.5, 3.0};
  Graph g;
  g.nodes = 2;
  g.edges = {{0, 1, 1.0}};
  const double alpha = 0.5;
  const auto x = mst_optimize(costs, ls, g, alpha);
  double best = std::numeric_limits<double>::infinity();
  int ba = -1, bb = -1;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      const double e = costs[a] + costs[3 + b] + alpha * std::pow(a - b, 2);
      if (e < best) best = e, ba = a, bb = b;
    }
  EXPECT_EQ(x[0], ba);
  EXPECT_EQ(x[1], bb);
}

TEST(MstOptimize, EqualCostsGiveZeroDisplacement) {
  const LabelSpace ls = LabelSpace::cube(2, 1.0);
  Graph g;
  g.nodes = 5;
  for (int v = 1; v < 5; ++v) g.edges.push_back({v - 1, v, 1.0});
  const std::vector<double> costs(5 * ls.size(), 0.25);
  for (int alpha_i = 0; alpha_i < 2; ++alpha_i)
    for (int l : mst_optimize(costs, ls, g, alpha_i * 1.0)) EXPECT_EQ(ls.displacements[l], Vec3::Zero());
}

TEST(MstOptimize, RejectsBadInput) {
  const LabelSpace ls = LabelSpace::cube(1, 1.0);
  Graph g;
  g.nodes = 1;
  std::vector<double> costs(ls.size(), 0.0);
  EXPECT_THROW(mst_optimize(costs, ls, g, -1.0), Error);
  costs[3] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(mst_optimize(costs, ls, g, 1.0), Error);
  costs.pop_back();
  EXPECT_THROW(mst_optimize(costs, ls, g, 1.0), Error);
}

TEST(MstOptimize, CubeFastPathMatchesGenericLabels) {
  std::mt19937 rng(5);
  const LabelSpace cube = LabelSpace::cube(2, 0.75);
  const LabelSpace list = LabelSpace::from_list(cube.displacements);
  for (int t = 0; t < 20; ++t) {
    const Graph g = random_connected_graph(12, rng);
    std::vector<double> costs(12 * cube.size());
    for (auto& c : costs) c = std::uniform_real_distribution<double>(0, 4)(rng);
    const double alpha = std::uniform_real_distribution<double>(0.01, 2.0)(rng);
    const SpanningTree tree = minimum_spanning_tree(g);
    const auto a = mst_optimize(costs, cube, tree, alpha);
    const auto b = mst_optimize(costs, list, tree, alpha);
    EXPECT_NEAR(tree_objective(costs, cube, tree, alpha, a), tree_objective(costs, list, tree, alpha, b), 1e-9);
  }
}

TEST(MstOptimize, ExactOnRandomSmallInstances) {
  std::mt19937 rng(2024);
  for (int t = 0; t < 200; ++t) {
    const int n = std::uniform_int_distribution<int>(1, 4)(rng);
    const int L = std::uniform_int_distribution<int>(1, 5)(rng);
    std::vector<Vec3> labels;
    for (int l = 0; l < L; ++l)
      labels.emplace_back(std::uniform_int_distribution<int>(-2, 2)(rng), std::uniform_int_distribution<int>(-2, 2)(rng),
                          std::uniform_int_distribution<int>(-2, 2)(rng));
    const LabelSpace ls = LabelSpace::from_list(labels);
    const Graph g = random_connected_graph(n, rng);
    std::vector<double> costs(n * L);
    for (auto& c : costs) c = std::uniform_real_distribution<double>(0, 5)(rng);
    const double alpha = std::uniform_real_distribution<double>(0, 2)(rng);
    const SpanningTree tree = minimum_spanning_tree(g);
    const auto x = mst_optimize(costs, ls, tree, alpha);
    EXPECT_EQ(oracle_objective(costs, labels, tree.parent, alpha, x), brute_force_minimum(costs, labels, tree.parent, alpha))
        << "instance " << t;
  }
}

TEST(MstOptimize, Deterministic) {
  std::mt19937 rng(8);
  const LabelSpace ls = LabelSpace::cube(1, 1.0);
  const Graph g = random_connected_graph(40, rng);
  std::vector<double> costs(40 * ls.size());
  for (auto& c : costs) c = std::uniform_int_distribution<int>(0, 3)(rng);
  EXPECT_EQ(mst_optimize(costs, ls, g, 0.3), mst_optimize(costs, ls, g, 0.3));
}
