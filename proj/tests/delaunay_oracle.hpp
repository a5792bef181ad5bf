#pragma once

// Brute-force Delaunay oracle for tests: a triple of points is a Delaunay
// triangle iff no other point lies strictly inside its circumcircle. O(N^4).

#include <cmath>
#include <set>
#include <utility>

#include <Eigen/Dense>

namespace ccmcd::testing {

using EdgeSet = std::set<std::pair<int, int>>;

inline EdgeSet brute_force_delaunay_edges(const Eigen::Matrix<double, Eigen::Dynamic, 2>& p) {
  EdgeSet edges;
  const int n = static_cast<int>(p.rows());
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      for (int k = j + 1; k < n; ++k) {
        const double ax = p(i, 0), ay = p(i, 1), bx = p(j, 0), by = p(j, 1), cx = p(k, 0), cy = p(k, 1);
        const double d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by));
        if (std::abs(d) < 1e-12) continue;
        const double ux = ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay) +
                           (cx * cx + cy * cy) * (ay - by)) / d;
        const double uy = ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx) +
                           (cx * cx + cy * cy) * (bx - ax)) / d;
        const double r2 = (ax - ux) * (ax - ux) + (ay - uy) * (ay - uy);
        bool empty = true;
        for (int m = 0; m < n && empty; ++m) {
          if (m == i || m == j || m == k) continue;
          const double dx = p(m, 0) - ux, dy = p(m, 1) - uy;
          if (dx * dx + dy * dy < r2 * (1.0 - 1e-12)) empty = false;
        }
        if (!empty) continue;
        edges.insert({i, j});
        edges.insert({i, k});
        edges.insert({j, k});
      }
    }
  }
  return edges;
}

inline EdgeSet edges_of(const Eigen::MatrixXd& adjacency) {
  EdgeSet edges;
  for (int i = 0; i < adjacency.rows(); ++i) {
    for (int j = i + 1; j < adjacency.cols(); ++j) {
      if (adjacency(i, j) != 0.0) edges.insert({i, j});
    }
  }
  return edges;
}

}  // namespace ccmcd::testing
