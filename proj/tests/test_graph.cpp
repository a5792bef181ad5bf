#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "ccmcd/delaunay.hpp"
#include "ccmcd/graph.hpp"
#include "delaunay_oracle.hpp"

namespace ccmcd {
namespace {

using testing::brute_force_delaunay_edges;
using testing::edges_of;

Points2 pts(std::initializer_list<std::array<double, 2>> rows) {
  Points2 p(static_cast<Eigen::Index>(rows.size()), 2);
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    p(i, 0) = r[0];
    p(i, 1) = r[1];
    ++i;
  }
  return p;
}

double triangle_area(const Points2& p, const Triangle& t) {
  const Eigen::Vector2d a = p.row(t[0]), b = p.row(t[1]), c = p.row(t[2]);
  return 0.5 * std::abs((b - a).x() * (c - a).y() - (b - a).y() * (c - a).x());
}

TEST(Delaunay, ThreePointsGiveOneTriangle) {
  const auto a = delaunay_adjacency(pts({{0, 0}, {1, 0}, {0, 1}}));
  EXPECT_EQ(a.sum(), 6.0);
  EXPECT_EQ(a.diagonal().sum(), 0.0);
}

TEST(Delaunay, SquareHasOneDeterministicDiagonal) {
  const auto sq = pts({{0, 0}, {1, 0}, {1, 1}, {0, 1}});
  const auto t1 = delaunay_triangulate(sq);
  EXPECT_EQ(t1.adjacency.sum() / 2, 5.0);
  EXPECT_EQ(t1.triangles.size(), 2u);
  // Same point set given in a different order yields the same diagonal.
  const auto shuffled = pts({{1, 1}, {0, 0}, {0, 1}, {1, 0}});
  const auto t2 = delaunay_triangulate(shuffled);
  const bool diag02 = t1.adjacency(0, 2) == 1.0;
  EXPECT_EQ(t2.adjacency(1, 2) + t2.adjacency(1, 3), 2.0);  // sanity: corner (0,0) keeps its sides
  EXPECT_EQ(diag02, t2.adjacency(0, 1) == 1.0);
  // Every triangle is empty under the non-strict circumcircle test.
  for (const auto& t : t1.triangles) {
    for (int m = 0; m < 4; ++m) {
      if (m == t[0] || m == t[1] || m == t[2]) continue;
      EXPECT_LE(detail::incircle(sq.row(t[0]).transpose(), sq.row(t[1]).transpose(), sq.row(t[2]).transpose(),
                                 sq.row(m).transpose()),
                0.0);
    }
  }
}

TEST(Delaunay, MatchesBruteForceOracle) {
  for (int instance = 0; instance < 100; ++instance) {
    const std::size_t n = 3 + static_cast<std::size_t>(instance % 8);
    const Points2 p = uniform_support(n, derive_seed(17, std::to_string(instance)));
    const auto tri = delaunay_triangulate(p);
    EXPECT_EQ(edges_of(tri.adjacency), brute_force_delaunay_edges(p)) << "instance " << instance;
  }
  const Points2 seven = uniform_support(7, 123);
  EXPECT_EQ(edges_of(delaunay_adjacency(seven)), brute_force_delaunay_edges(seven));
}

TEST(Delaunay, EdgeBoundAndHullCoverage) {
  for (int instance = 0; instance < 50; ++instance) {
    const std::size_t n = 3 + static_cast<std::size_t>(instance % 20);
    const Points2 p = uniform_support(n, derive_seed(3, std::to_string(instance)));
    const auto tri = delaunay_triangulate(p);
    EXPECT_LE(tri.adjacency.sum() / 2, 3.0 * static_cast<double>(n) - 6.0 + (n == 3 ? 3.0 : 0.0));
    // Triangles tile the hull: their areas add up to the hull area.
    std::vector<Eigen::Vector2d> v;
    for (Eigen::Index i = 0; i < p.rows(); ++i) v.push_back(p.row(i).transpose());
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y()); });
    std::vector<Eigen::Vector2d> hull;
    for (int pass = 0; pass < 2; ++pass) {
      const std::size_t start = hull.size();
      for (const auto& q : v) {
        while (hull.size() >= start + 2 && detail::orient2d(hull[hull.size() - 2], hull.back(), q) <= 0) hull.pop_back();
        hull.push_back(q);
      }
      hull.pop_back();
      std::reverse(v.begin(), v.end());
    }
    double hull_area = 0.0;
    for (std::size_t i = 0; i < hull.size(); ++i) {
      const auto& a = hull[i];
      const auto& b = hull[(i + 1) % hull.size()];
      hull_area += 0.5 * (a.x() * b.y() - b.x() * a.y());
    }
    double area = 0.0;
    for (const auto& t : tri.triangles) area += triangle_area(p, t);
    EXPECT_NEAR(area, hull_area, 1e-9 * std::max(1.0, hull_area));
  }
}

TEST(Delaunay, DegenerateInputs) {
  EXPECT_THROW(delaunay_triangulate(pts({{0, 0}, {1, 1}, {2, 2}, {3, 3}})), DegeneracyError);
  EXPECT_THROW(delaunay_triangulate(pts({{0, 0}, {1, 0}, {0, 0}})), DegeneracyError);
  EXPECT_THROW(delaunay_triangulate(pts({{0, 0}, {1, 0}})), DegeneracyError);
}

TEST(ClassSupport, RadiiAndDisplacements) {
  EXPECT_DOUBLE_EQ(class_radius(1), 10.0);
  EXPECT_NEAR(class_radius(2), 20.0 / 3.0, 1e-14);
  EXPECT_NEAR(class_radius(4), 80.0 / 27.0, 1e-14);
  for (int c = 1; c < 20; ++c) EXPECT_GT(class_radius(c), class_radius(c + 1));

  const Points2 base = uniform_support(7, 1);
  EXPECT_EQ(class_support(base, 0, 9), base);
  for (int c : {1, 2, 5}) {
    const Points2 moved = class_support(base, c, 77);
    const double r = class_radius(c);
    const Points2 delta = moved - base;
    EXPECT_LE(delta.cwiseAbs().maxCoeff(), r + 1e-12);
    EXPECT_GT(delta.norm(), 0.0);
  }
  EXPECT_EQ(class_support(base, 3, 5), class_support(base, 3, 5));
}

TEST(SampleDelaunayGraph, NoiseFreeAndValid) {
  const Points2 base = uniform_support(7, 4);
  const Graph g = sample_delaunay_graph(DelaunayClassSpec{0, base, 0.0}, 1);
  EXPECT_EQ(g.X, Eigen::MatrixXd(base));
  EXPECT_EQ(g.order(), 7u);
  EXPECT_EQ(g.node_features(), 2u);
  EXPECT_EQ(g.edge_features(), 0u);
  EXPECT_NO_THROW(g.validate());
}

// Monte-Carlo oracle: node attributes are the support plus zero-mean noise.
TEST(SampleDelaunayGraph, MeanOfAttributesIsSupport) {
  const Points2 base = uniform_support(7, 8);
  const DelaunayClassSpec spec{0, base, 1.0};
  Rng rng(99);
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(7, 2);
  const int count = 10'000;
  for (int i = 0; i < count; ++i) sum += sample_delaunay_graph(spec, rng).X;
  EXPECT_LE((sum / count - Eigen::MatrixXd(base)).cwiseAbs().maxCoeff(), 0.05);
}

TEST(BenchmarkStream, ShapesGroundTruthDeterminism) {
  BenchmarkOptions opt;
  opt.change_class = 3;
  opt.n_train = 50;
  opt.n_operational = 80;
  opt.tau = 30;
  const auto a = make_benchmark_stream(opt, 11);
  const auto b = make_benchmark_stream(opt, 11);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.operational, b.operational);
  EXPECT_EQ(a.train.size(), 50u);
  EXPECT_EQ(a.operational.size(), 80u);
  ASSERT_TRUE(a.operational.tau.has_value());
  EXPECT_EQ(*a.operational.tau, 30u);
  EXPECT_TRUE(a.operational.change);
  EXPECT_EQ(a.operational.labels[29], 0);
  EXPECT_EQ(a.operational.labels[30], 1);
  EXPECT_NO_THROW(a.operational.validate_labels());

  // The training stream does not depend on the change class.
  opt.change_class = 0;
  const auto null = make_benchmark_stream(opt, 11);
  EXPECT_EQ(null.train, a.train);
  EXPECT_FALSE(null.operational.change);
  EXPECT_EQ(null.change_support, null.base_support);
  for (int label : null.operational.labels) EXPECT_EQ(label, 0);

  opt.tau = 80;
  EXPECT_THROW(make_benchmark_stream(opt, 1), ConfigError);
  opt.tau = 0;
  EXPECT_THROW(make_benchmark_stream(opt, 1), ConfigError);
}

GraphStream edge_attributed_stream(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  GraphStream s;
  for (std::size_t t = 0; t < count; ++t) {
    Eigen::MatrixXd a(4, 4);
    a << 0, 1, 0, 1, 1, 0, 1, 0, 0, 1, 0, 1, 1, 0, 1, 0;
    Eigen::MatrixXd x(4, 3);
    for (Eigen::Index i = 0; i < 4; ++i) {
      x(i, 0) = 2.0 + standard_normal(rng);
      x(i, 1) = -1.0 + 3.0 * standard_normal(rng);
      x(i, 2) = 5.0;  // constant entry
    }
    Graph g(a, x, 2);
    for (Eigen::Index i = 0; i < 4; ++i) {
      for (Eigen::Index j = 0; j < 4; ++j) {
        if (a(i, j) != 0.0) g.edge(i, j) << standard_normal(rng), 1.0 + standard_normal(rng) / 3.0;
      }
    }
    s.graphs.push_back(std::move(g));
  }
  return s;
}

TEST(Normalize, MomentsFromTrainingStreamOnly) {
  const GraphStream train = edge_attributed_stream(400, 1);
  const GraphStream other = edge_attributed_stream(30, 2);
  const auto n = normalize_attributes(train, other);

  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(4, 3), sq = mean;
  for (const auto& g : n.train.graphs) mean += g.X;
  mean /= 400.0;
  for (const auto& g : n.train.graphs) sq += (g.X - mean).cwiseAbs2();
  sq /= 400.0;
  EXPECT_LE(mean.cwiseAbs().maxCoeff(), 1e-9);
  for (Eigen::Index i = 0; i < 4; ++i) {
    EXPECT_NEAR(sq(i, 0), 1.0, 1e-6);
    EXPECT_NEAR(sq(i, 1), 1.0, 1e-6);
    EXPECT_EQ(n.moments.x_scale(i, 2), 1.0);  // zero variance: centred only
    EXPECT_EQ(n.train[0].X(i, 2), 0.0);
  }
  for (const auto& g : n.train.graphs) EXPECT_NO_THROW(g.validate());
  EXPECT_EQ(n.other[5], n.moments.apply(other[5]));

  // Persisted moments reproduce the same outputs.
  const auto restored = moments_from_json(nlohmann::json::parse(moments_to_json(n.moments).dump()));
  EXPECT_EQ(restored, n.moments);
  EXPECT_EQ(restored.apply(other), n.other);
  EXPECT_THROW(fit_moments(GraphStream{}), ConfigError);
}

TEST(StreamFile, RoundTripIsBitExact) {
  GraphStream s = edge_attributed_stream(5, 3);
  s.tau = 2;
  s.change = true;
  s.labels = {0, 0, 1, 1, 1};
  s.seed = 42;
  std::stringstream buf;
  write_stream(buf, s);
  const GraphStream back = read_stream(buf);
  EXPECT_EQ(back, s);

  BenchmarkOptions opt;
  opt.n_train = 3;
  opt.n_operational = 6;
  opt.tau = 3;
  const auto bench = make_benchmark_stream(opt, 5);
  std::stringstream buf2;
  write_stream(buf2, bench.operational);
  EXPECT_EQ(read_stream(buf2), bench.operational);
}

TEST(StreamFile, RejectsCorruptInput) {
  std::stringstream bad_version(R"({"format":"ccmcd-stream","version":9,"N":1,"F":1,"S":0,"tau":null})");
  EXPECT_THROW(read_stream(bad_version), IoError);
  std::stringstream truncated(
      "{\"format\":\"ccmcd-stream\",\"version\":1,\"N\":1,\"F\":1,\"S\":0,\"tau\":null}\n{\"N\":1,\"A\":[[]],\"X\":[");
  EXPECT_THROW(read_stream(truncated), IoError);
  std::stringstream empty;
  EXPECT_THROW(read_stream(empty), IoError);
}

TEST(GraphInvariants, ValidateCatchesViolations) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(3, 3);
  a(0, 1) = 1.0;
  EXPECT_THROW(Graph(a, Eigen::MatrixXd::Zero(3, 1)).validate(), ConfigError);
  a(1, 0) = 1.0;
  Graph g(a, Eigen::MatrixXd::Zero(3, 1), 1);
  EXPECT_NO_THROW(g.validate());
  g.edge(2, 0)[0] = 1.0;
  EXPECT_THROW(g.validate(), ConfigError);
}

}  // namespace
}  // namespace ccmcd
