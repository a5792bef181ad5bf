#pragma once

// Delaunay triangulations of planar point sets (Bowyer-Watson) and the
// synthetic graph streams built from them: a class is a set of N support
// points, and each graph is the triangulation of a Gaussian perturbation of
// that support, with the perturbed coordinates as node attributes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ccmcd/errors.hpp"
#include "ccmcd/graph.hpp"
#include "ccmcd/random.hpp"

namespace ccmcd {

using Points2 = Eigen::Matrix<double, Eigen::Dynamic, 2>;
using Triangle = std::array<int, 3>;

namespace detail {

inline double orient2d(const Eigen::Vector2d& a, const Eigen::Vector2d& b, const Eigen::Vector2d& c) {
  return (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
}

// > 0 when d is strictly inside the circumcircle of the counter-clockwise
// triangle (a, b, c).
inline double incircle(const Eigen::Vector2d& a, const Eigen::Vector2d& b, const Eigen::Vector2d& c,
                       const Eigen::Vector2d& d) {
  const double adx = a.x() - d.x(), ady = a.y() - d.y();
  const double bdx = b.x() - d.x(), bdy = b.y() - d.y();
  const double cdx = c.x() - d.x(), cdy = c.y() - d.y();
  const double alift = adx * adx + ady * ady;
  const double blift = bdx * bdx + bdy * bdy;
  const double clift = cdx * cdx + cdy * cdy;
  return alift * (bdx * cdy - cdx * bdy) + blift * (cdx * ady - adx * cdy) + clift * (adx * bdy - bdx * ady);
}

inline std::size_t convex_hull_size(const std::vector<Eigen::Vector2d>& pts) {
  std::vector<Eigen::Vector2d> p = pts;
  std::sort(p.begin(), p.end(), [](const auto& a, const auto& b) { return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y()); });
  std::vector<Eigen::Vector2d> hull(2 * p.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    while (k >= 2 && orient2d(hull[k - 2], hull[k - 1], p[i]) <= 0) --k;
    hull[k++] = p[i];
  }
  for (std::size_t i = p.size() - 1, t = k + 1; i > 0; --i) {
    while (k >= t && orient2d(hull[k - 2], hull[k - 1], p[i - 1]) <= 0) --k;
    hull[k++] = p[i - 1];
  }
  return k - 1;
}

}  // namespace detail

struct DelaunayTriangulation {
  std::vector<Triangle> triangles;  // counter-clockwise, vertex indices into the input
  Eigen::MatrixXd adjacency;        // N x N, symmetric, zero diagonal
};

/// Bowyer-Watson with a super-triangle. Points are inserted in lexicographic
/// (x, then y) order and a point on a circumcircle does not invalidate the
/// triangle, so cocircular ties resolve deterministically.
inline DelaunayTriangulation delaunay_triangulate(const Eigen::Ref<const Points2>& points) {
  const Eigen::Index n = points.rows();
  if (n < 3) throw DegeneracyError("delaunay: need at least 3 points");
  if (!points.allFinite()) throw DegeneracyError("delaunay: non-finite coordinates");

  std::vector<Eigen::Vector2d> p(static_cast<std::size_t>(n) + 3);
  for (Eigen::Index i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = points.row(i).transpose();

  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const auto& pa = p[static_cast<std::size_t>(a)];
    const auto& pb = p[static_cast<std::size_t>(b)];
    return pa.x() < pb.x() || (pa.x() == pb.x() && pa.y() < pb.y());
  });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (p[static_cast<std::size_t>(order[i])] == p[static_cast<std::size_t>(order[i - 1])]) {
      throw DegeneracyError("delaunay: duplicate points");
    }
  }

  const Eigen::Vector2d lo = points.colwise().minCoeff().transpose();
  const Eigen::Vector2d hi = points.colwise().maxCoeff().transpose();
  const Eigen::Vector2d mid = 0.5 * (lo + hi);
  const double extent = std::max({hi.x() - lo.x(), hi.y() - lo.y(), 1e-9});
  const double big = 1e4 * extent;
  const int s0 = static_cast<int>(n), s1 = s0 + 1, s2 = s0 + 2;
  p[static_cast<std::size_t>(s0)] = mid + Eigen::Vector2d(-big, -big);
  p[static_cast<std::size_t>(s1)] = mid + Eigen::Vector2d(big, -big);
  p[static_cast<std::size_t>(s2)] = mid + Eigen::Vector2d(0.0, big);

  auto at = [&](int i) -> const Eigen::Vector2d& { return p[static_cast<std::size_t>(i)]; };
  std::vector<Triangle> tris{{s0, s1, s2}};

  for (int v : order) {
    std::vector<Triangle> keep;
    std::vector<std::array<int, 2>> boundary;
    std::vector<Triangle> bad;
    for (const auto& t : tris) {
      if (detail::incircle(at(t[0]), at(t[1]), at(t[2]), at(v)) > 0.0) {
        bad.push_back(t);
      } else {
        keep.push_back(t);
      }
    }
    // Edges of the cavity: those that belong to exactly one bad triangle.
    for (const auto& t : bad) {
      for (int e = 0; e < 3; ++e) {
        const int a = t[static_cast<std::size_t>(e)], b = t[static_cast<std::size_t>((e + 1) % 3)];
        bool shared = false;
        for (const auto& u : bad) {
          if (&u == &t) continue;
          for (int f = 0; f < 3 && !shared; ++f) {
            const int c = u[static_cast<std::size_t>(f)], d = u[static_cast<std::size_t>((f + 1) % 3)];
            shared = (a == d && b == c) || (a == c && b == d);
          }
          if (shared) break;
        }
        if (!shared) boundary.push_back({a, b});
      }
    }
    for (const auto& e : boundary) {
      Triangle t{e[0], e[1], v};
      if (detail::orient2d(at(t[0]), at(t[1]), at(t[2])) < 0.0) std::swap(t[0], t[1]);
      keep.push_back(t);
    }
    tris = std::move(keep);
  }

  DelaunayTriangulation out;
  out.adjacency = Eigen::MatrixXd::Zero(n, n);
  for (const auto& t : tris) {
    if (t[0] >= n || t[1] >= n || t[2] >= n) continue;
    if (detail::orient2d(at(t[0]), at(t[1]), at(t[2])) == 0.0) continue;
    out.triangles.push_back(t);
    for (int e = 0; e < 3; ++e) {
      const int a = t[static_cast<std::size_t>(e)], b = t[static_cast<std::size_t>((e + 1) % 3)];
      out.adjacency(a, b) = out.adjacency(b, a) = 1.0;
    }
  }
  if (out.triangles.empty()) throw DegeneracyError("delaunay: points are collinear");

  // A triangulation of n points with h hull vertices has 2n - h - 2 triangles;
  // anything else means the super-triangle swallowed a hull triangle.
  std::vector<Eigen::Vector2d> data(p.begin(), p.begin() + n);
  const std::size_t h = detail::convex_hull_size(data);
  if (out.triangles.size() + h + 2 != 2 * static_cast<std::size_t>(n)) {
    throw DegeneracyError("delaunay: triangulation does not cover the convex hull");
  }
  return out;
}

inline Eigen::MatrixXd delaunay_adjacency(const Eigen::Ref<const Points2>& points) {
  return delaunay_triangulate(points).adjacency;
}

/// r(C) = 10 (2/3)^(C-1): displacement radius of class C's support points.
inline double class_radius(int c) {
  if (c < 1) throw ConfigError("class radius is only defined for C >= 1");
  return 10.0 * std::pow(2.0 / 3.0, c - 1);
}

/// Support of class C: class 0 is `base`; class C >= 1 adds r(C) [cos(theta),
/// sin(phi)] with theta, phi ~ U(0, 2 pi) drawn independently per point.
inline Points2 class_support(const Eigen::Ref<const Points2>& base, int c, std::uint64_t seed) {
  if (c < 0) throw ConfigError("class index must be >= 0");
  if (c == 0) return base;
  Rng rng(seed);
  const Eigen::Index n = base.rows();
  const double two_pi = 2.0 * std::numbers::pi;
  Eigen::VectorXd theta(n), phi(n);
  for (Eigen::Index i = 0; i < n; ++i) theta[i] = uniform(rng, 0.0, two_pi);
  for (Eigen::Index i = 0; i < n; ++i) phi[i] = uniform(rng, 0.0, two_pi);
  const double r = class_radius(c);
  Points2 out = base;
  out.col(0).array() += r * theta.array().cos();
  out.col(1).array() += r * phi.array().sin();
  return out;
}

inline Points2 uniform_support(std::size_t n, std::uint64_t seed, double lo = 0.0, double hi = 10.0) {
  Rng rng(seed);
  Points2 out(static_cast<Eigen::Index>(n), 2);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index j = 0; j < 2; ++j) out(i, j) = uniform(rng, lo, hi);
  }
  return out;
}

struct DelaunayClassSpec {
  int class_index = 0;
  Points2 support;  // N x 2
  double noise_std = 1.0;
};

inline constexpr int kDelaunayRetries = 10;

/// X = support + noise_std * N(0, 1) entries, A = Delaunay(X). A degenerate
/// draw is resampled up to kDelaunayRetries times.
inline Graph sample_delaunay_graph(const DelaunayClassSpec& spec, Rng& rng) {
  const Eigen::Index n = spec.support.rows();
  for (int attempt = 0;; ++attempt) {
    Points2 x = spec.support;
    if (spec.noise_std != 0.0) {
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < 2; ++j) x(i, j) += spec.noise_std * standard_normal(rng);
      }
    }
    try {
      Eigen::MatrixXd a = delaunay_adjacency(x);
      return Graph(std::move(a), Eigen::MatrixXd(x), 0);
    } catch (const DegeneracyError&) {
      if (attempt + 1 >= kDelaunayRetries) throw;
    }
  }
}

inline Graph sample_delaunay_graph(const DelaunayClassSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  return sample_delaunay_graph(spec, rng);
}

struct BenchmarkStreams {
  GraphStream train;
  GraphStream operational;
  Points2 base_support;
  Points2 change_support;
};

struct BenchmarkOptions {
  int change_class = 1;
  std::size_t n_train = 5000;
  std::size_t n_operational = 20000;
  std::size_t tau = 10000;
  std::size_t order = 7;
  double noise_std = 1.0;
};

/// Training stream of class 0 and an operational stream that switches from
/// class 0 to class C at tau. The training stream and base support depend on
/// the seed only, not on C; C = 0 yields a null operational stream whose tau is
/// a pseudo-boundary.
inline BenchmarkStreams make_benchmark_stream(const BenchmarkOptions& opt, std::uint64_t seed) {
  if (opt.change_class < 0) throw ConfigError("benchmark: class must be >= 0");
  if (opt.n_train == 0) throw ConfigError("benchmark: training stream must be nonempty");
  if (!(opt.tau > 0 && opt.tau < opt.n_operational)) throw ConfigError("benchmark: need 0 < tau < n_operational");
  if (opt.order < 3) throw ConfigError("benchmark: graphs need at least 3 nodes");

  BenchmarkStreams out;
  out.base_support = uniform_support(opt.order, derive_seed(seed, "support"));
  out.change_support =
      class_support(out.base_support, opt.change_class, derive_seed(seed, "class-" + std::to_string(opt.change_class)));
  const DelaunayClassSpec nominal{0, out.base_support, opt.noise_std};
  const DelaunayClassSpec changed{opt.change_class, out.change_support, opt.noise_std};

  Rng train_rng(derive_seed(seed, "train"));
  out.train.seed = seed;
  out.train.graphs.reserve(opt.n_train);
  for (std::size_t t = 0; t < opt.n_train; ++t) out.train.graphs.push_back(sample_delaunay_graph(nominal, train_rng));
  out.train.labels.assign(opt.n_train, 0);

  Rng op_rng(derive_seed(seed, "operational-" + std::to_string(opt.change_class)));
  auto& op = out.operational;
  op.seed = seed;
  op.tau = opt.tau;
  op.change = opt.change_class != 0;
  op.graphs.reserve(opt.n_operational);
  for (std::size_t t = 0; t < opt.n_operational; ++t) {
    const bool after = t >= opt.tau;
    op.graphs.push_back(sample_delaunay_graph(after ? changed : nominal, op_rng));
    op.labels.push_back(after && op.change ? 1 : 0);
  }
  return out;
}

}  // namespace ccmcd
