#pragma once

// Closed-form geometry of constant-curvature manifolds (CCMs).
//
// A d-dimensional CCM with curvature kappa != 0 lives in a (d+1)-dimensional
// ambient space as the set {x : <x,x>_kappa = 1/kappa}. The product is the
// Euclidean dot product for kappa > 0 (hypersphere of radius kappa^-1/2) and
// the Minkowski product (last coordinate negated) for kappa < 0 (upper sheet
// of the hyperboloid). The flat CCM is taken to be the whole (d+1)-dimensional
// ambient space with the Euclidean metric.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ccmcd/errors.hpp"
#include "ccmcd/random.hpp"

namespace ccmcd {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class Geometry { spherical, flat, hyperbolic };

class Curvature {
 public:
  Curvature() = default;
  explicit Curvature(double kappa) : kappa_(kappa) {
    if (!std::isfinite(kappa)) throw ConfigError("curvature must be a finite real");
  }

  double value() const noexcept { return kappa_; }

  Geometry geometry() const noexcept {
    if (kappa_ > 0.0) return Geometry::spherical;
    if (kappa_ < 0.0) return Geometry::hyperbolic;
    return Geometry::flat;
  }

  bool is_flat() const noexcept { return kappa_ == 0.0; }

  /// |kappa|^(1/2); zero for the flat case.
  double sqrt_abs() const noexcept { return std::sqrt(std::abs(kappa_)); }

  friend bool operator==(Curvature a, Curvature b) noexcept { return a.kappa_ == b.kappa_; }

 private:
  double kappa_ = 0.0;
};

/// A (curvature, intrinsic dimension) pair. Points live in R^(dim+1).
struct Manifold {
  Curvature curvature;
  int dim = 2;

  std::size_t ambient_dim() const noexcept { return static_cast<std::size_t>(dim) + 1; }

  /// Dimension of a tangent space: d for curved CCMs, d+1 for the flat one.
  std::size_t tangent_dim() const noexcept {
    return curvature.is_flat() ? ambient_dim() : static_cast<std::size_t>(dim);
  }

  friend bool operator==(const Manifold&, const Manifold&) = default;
};

inline std::string to_string(const Manifold& m) {
  std::ostringstream os;
  os << "M(" << m.curvature.value() << ", d=" << m.dim << ")";
  return os.str();
}

// Absolute tolerances; scaled up by the coordinate magnitude for points far
// out on the hyperboloid, where the products are sums of large squares.
inline constexpr double kManifoldTolerance = 1e-9;
inline constexpr double kClampTolerance = 1e-9;

namespace detail {

inline void require_same_size(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": length mismatch (" + std::to_string(a) +
                         " vs " + std::to_string(b) + ")");
  }
}

}  // namespace detail

/// Curvature-dependent scalar product: Euclidean for kappa >= 0, Minkowski
/// (last coordinate negated) for kappa < 0.
inline double inner_product(Curvature kappa, const Eigen::Ref<const Vector>& x,
                            const Eigen::Ref<const Vector>& y) {
  detail::require_same_size(x.size(), y.size(), "inner_product");
  if (x.size() == 0) return 0.0;
  if (kappa.value() >= 0.0) return x.dot(y);
  const Eigen::Index d = x.size() - 1;
  return x.head(d).dot(y.head(d)) - x[d] * y[d];
}

namespace detail {

inline double manifold_tolerance(const Vector& x) {
  return kManifoldTolerance * std::max(1.0, x.squaredNorm());
}

inline double on_manifold_residual(Curvature kappa, const Vector& x) {
  return inner_product(kappa, x, x) - 1.0 / kappa.value();
}

}  // namespace detail

/// A point on a CCM in ambient coordinates. The constructor checks the
/// manifold constraint (and the upper sheet on hyperboloids).
class CcmPoint {
 public:
  CcmPoint(Curvature kappa, Vector coords) : kappa_(kappa), coords_(std::move(coords)) {
    if (coords_.size() < 2) throw DimensionError("a CCM point needs at least 2 ambient coordinates");
    if (!coords_.allFinite()) throw GeometryError("CCM point has non-finite coordinates");
    if (kappa_.is_flat()) return;
    const double residual = detail::on_manifold_residual(kappa_, coords_);
    if (std::abs(residual) > detail::manifold_tolerance(coords_)) {
      std::ostringstream os;
      os << "point is off the manifold kappa=" << kappa_.value() << " (residual " << residual << ")";
      throw GeometryError(os.str());
    }
    if (kappa_.value() < 0.0 && coords_[coords_.size() - 1] <= 0.0) {
      throw GeometryError("point lies on the lower sheet of the hyperboloid");
    }
  }

  Curvature curvature() const noexcept { return kappa_; }
  int dim() const noexcept { return static_cast<int>(coords_.size()) - 1; }
  Manifold manifold() const noexcept { return Manifold{kappa_, dim()}; }
  const Vector& coords() const noexcept { return coords_; }

 private:
  Curvature kappa_;
  Vector coords_;
};

/// Ambient representation of a tangent vector at `base`.
class TangentVector {
 public:
  TangentVector(CcmPoint base, Vector coords) : base_(std::move(base)), coords_(std::move(coords)) {
    detail::require_same_size(coords_.size(), base_.coords().size(), "TangentVector");
    if (!coords_.allFinite()) throw GeometryError("tangent vector has non-finite coordinates");
    const Curvature k = base_.curvature();
    if (k.is_flat()) return;
    const double along = inner_product(k, base_.coords(), coords_);
    const double tol = kManifoldTolerance * std::max(1.0, base_.coords().norm() * coords_.norm());
    if (std::abs(along) > tol) {
      std::ostringstream os;
      os << "vector is not tangent at the base point (<x,v> = " << along << ")";
      throw GeometryError(os.str());
    }
  }

  const CcmPoint& base() const noexcept { return base_; }
  const Vector& coords() const noexcept { return coords_; }

 private:
  CcmPoint base_;
  Vector coords_;
};

/// Norm of a tangent vector under the curvature-dependent product.
inline double tangent_norm(const TangentVector& v) {
  const double sq = inner_product(v.base().curvature(), v.coords(), v.coords());
  return std::sqrt(std::max(0.0, sq));
}

/// x_i = 0 for i <= d and x_(d+1) = |kappa|^(-1/2); the zero vector when flat.
inline CcmPoint manifold_origin(const Manifold& m) {
  if (m.dim < 1) throw DimensionError("manifold dimension must be positive");
  Vector coords = Vector::Zero(static_cast<Eigen::Index>(m.ambient_dim()));
  if (!m.curvature.is_flat()) coords[m.dim] = 1.0 / m.curvature.sqrt_abs();
  return CcmPoint(m.curvature, std::move(coords));
}

inline double geodesic_distance(const CcmPoint& x, const CcmPoint& y) {
  if (!(x.curvature() == y.curvature())) throw GeometryError("geodesic_distance: curvature mismatch");
  detail::require_same_size(x.coords().size(), y.coords().size(), "geodesic_distance");
  const Curvature k = x.curvature();
  if (k.is_flat()) return (x.coords() - y.coords()).norm();

  const double tol = kClampTolerance * std::max({1.0, x.coords().squaredNorm(), y.coords().squaredNorm()});
  double a = k.value() * inner_product(k, x.coords(), y.coords());
  if (k.value() > 0.0) {
    if (a > 1.0 || a < -1.0) {
      if (std::abs(a) - 1.0 > tol) throw GeometryError("arccos argument out of range: points are off the sphere");
      a = std::clamp(a, -1.0, 1.0);
    }
    return std::acos(a) / k.sqrt_abs();
  }
  if (a < 1.0) {
    if (1.0 - a > tol) throw GeometryError("arccosh argument below 1: points are off the hyperboloid");
    a = 1.0;
  }
  return std::acosh(a) / k.sqrt_abs();
}

namespace detail {

// Rescale an almost-on-manifold vector back onto the manifold. Used to remove
// rounding drift from closed-form evaluations.
inline Vector renormalize(Curvature k, Vector z) {
  if (k.is_flat()) return z;
  const double q = k.value() * inner_product(k, z, z);
  if (q > 0.0) z /= std::sqrt(q);
  return z;
}

}  // namespace detail

inline CcmPoint exp_map(const CcmPoint& x, const TangentVector& v) {
  detail::require_same_size(x.coords().size(), v.coords().size(), "exp_map");
  if (!(x.curvature() == v.base().curvature()) || x.coords() != v.base().coords()) {
    throw GeometryError("exp_map: tangent vector is based at a different point");
  }
  const Curvature k = x.curvature();
  if (k.is_flat()) return CcmPoint(k, x.coords() + v.coords());

  const double norm = tangent_norm(v);
  if (norm == 0.0) return x;
  const double s = k.sqrt_abs() * norm;
  Vector y;
  if (k.value() > 0.0) {
    y = std::cos(s) * x.coords() + (std::sin(s) / s) * v.coords();
  } else {
    y = std::cosh(s) * x.coords() + (std::sinh(s) / s) * v.coords();
  }
  return CcmPoint(k, detail::renormalize(k, std::move(y)));
}

inline TangentVector log_map(const CcmPoint& x, const CcmPoint& y) {
  if (!(x.curvature() == y.curvature())) throw GeometryError("log_map: curvature mismatch");
  detail::require_same_size(x.coords().size(), y.coords().size(), "log_map");
  const Curvature k = x.curvature();
  if (k.is_flat()) return TangentVector(x, y.coords() - x.coords());

  const double a = k.value() * inner_product(k, x.coords(), y.coords());
  if (k.value() > 0.0 && a + 1.0 <= kClampTolerance) {
    throw GeometryError("log_map: antipodal points on a spherical CCM");
  }
  const double dist = geodesic_distance(x, y);
  Vector u = y.coords() - a * x.coords();
  // Remove the residual component along x left by rounding.
  u -= (k.value() * inner_product(k, x.coords(), u)) * x.coords();
  const double un = std::sqrt(std::max(0.0, inner_product(k, u, u)));
  if (dist == 0.0 || un == 0.0) return TangentVector(x, Vector::Zero(x.coords().size()));
  return TangentVector(x, (dist / un) * u);
}

/// Orthonormal basis of T_x M (columns), orthonormal under the curvature's
/// product. Built by pivoted Gram-Schmidt of the canonical axes: at each step
/// the axis with the largest residual is taken, ties going to the lower axis
/// index, so the frame is a deterministic function of x.
inline Matrix tangent_basis(const CcmPoint& x) {
  const Curvature k = x.curvature();
  const Eigen::Index n = x.coords().size();
  if (k.is_flat()) return Matrix::Identity(n, n);

  const Eigen::Index d = n - 1;
  const Vector& p = x.coords();
  auto project_out = [&](Vector t, const Matrix& basis, Eigen::Index count) {
    for (int pass = 0; pass < 2; ++pass) {
      t -= (k.value() * inner_product(k, p, t)) * p;
      for (Eigen::Index c = 0; c < count; ++c) {
        const Vector b = basis.col(c);
        t -= inner_product(k, b, t) * b;
      }
    }
    return t;
  };

  Matrix basis(n, d);
  std::vector<bool> used(static_cast<std::size_t>(n), false);
  for (Eigen::Index c = 0; c < d; ++c) {
    Eigen::Index best = -1;
    double best_sq = 0.0;
    Vector best_t;
    for (Eigen::Index axis = 0; axis < n; ++axis) {
      if (used[static_cast<std::size_t>(axis)]) continue;
      Vector t = project_out(Vector::Unit(n, axis), basis, c);
      const double sq = inner_product(k, t, t);
      if (sq > best_sq) {
        best_sq = sq;
        best = axis;
        best_t = std::move(t);
      }
    }
    if (best < 0 || best_sq <= 1e-12) throw GeometryError("tangent_basis: degenerate tangent frame");
    used[static_cast<std::size_t>(best)] = true;
    basis.col(c) = best_t / std::sqrt(best_sq);
  }
  return basis;
}

/// Tangent space at a fixed point together with its orthonormal frame, so
/// repeated coordinate conversions reuse one basis.
class TangentFrame {
 public:
  explicit TangentFrame(CcmPoint base) : base_(std::move(base)), basis_(tangent_basis(base_)) {}

  const CcmPoint& base() const noexcept { return base_; }
  const Matrix& basis() const noexcept { return basis_; }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(basis_.cols()); }

  Vector coords(const TangentVector& v) const {
    detail::require_same_size(v.coords().size(), base_.coords().size(), "tangent_coords");
    const Curvature k = base_.curvature();
    if (k.is_flat()) return v.coords();
    Vector out(basis_.cols());
    for (Eigen::Index c = 0; c < basis_.cols(); ++c) out[c] = inner_product(k, basis_.col(c), v.coords());
    return out;
  }

  TangentVector vector(const Eigen::Ref<const Vector>& c) const {
    detail::require_same_size(c.size(), basis_.cols(), "from_tangent_coords");
    return TangentVector(base_, basis_ * c);
  }

 private:
  CcmPoint base_;
  Matrix basis_;
};

inline Vector tangent_coords(const CcmPoint& x, const TangentVector& v) {
  return TangentFrame(x).coords(v);
}

inline TangentVector from_tangent_coords(const CcmPoint& x, const Eigen::Ref<const Vector>& c) {
  return TangentFrame(x).vector(c);
}

/// How a hyperbolic ambient vector is mapped onto the hyperboloid.
enum class HyperbolicProjection {
  /// Scale z so that <z,z>_kappa = 1/kappa. Only defined inside the future
  /// light cone (<z,z> < 0 and z_(d+1) > 0).
  minkowski_rescale,
  /// Keep the first d coordinates and solve for the last one on the upper
  /// sheet. Defined for every z.
  sheet_lift,
};

inline CcmPoint project_to_ccm(Curvature kappa, const Eigen::Ref<const Vector>& z,
                               HyperbolicProjection rule = HyperbolicProjection::minkowski_rescale) {
  if (z.size() < 2) throw DimensionError("project_to_ccm: need at least 2 ambient coordinates");
  if (!z.allFinite()) throw GeometryError("project_to_ccm: non-finite input");
  switch (kappa.geometry()) {
    case Geometry::flat:
      return CcmPoint(kappa, z);
    case Geometry::spherical: {
      const double n = z.norm();
      if (n == 0.0) throw GeometryError("project_to_ccm: zero vector has no radial projection");
      return CcmPoint(kappa, z / (kappa.sqrt_abs() * n));
    }
    case Geometry::hyperbolic: {
      const Eigen::Index d = z.size() - 1;
      if (rule == HyperbolicProjection::sheet_lift) {
        Vector out = z;
        out[d] = std::sqrt(1.0 / std::abs(kappa.value()) + z.head(d).squaredNorm());
        return CcmPoint(kappa, std::move(out));
      }
      const double q = inner_product(kappa, z, z);
      if (!(q < 0.0) || z[d] <= 0.0) {
        throw GeometryError("project_to_ccm: vector lies outside the future light cone");
      }
      return CcmPoint(kappa, z / std::sqrt(kappa.value() * q));
    }
  }
  return CcmPoint(kappa, z);
}

struct FrechetOptions {
  std::size_t max_iterations = 1000;
  double tolerance = 1e-9;
};

struct FrechetMean {
  CcmPoint point;
  std::size_t iterations;
  double gradient_norm;  // norm of the mean log-map at `point`
};

/// Karcher-mean fixed point: mu <- Exp_mu(mean_i Log_mu(z_i)), started from
/// the projected arithmetic mean. Flat CCMs return the arithmetic mean.
inline FrechetMean frechet_mean(std::span<const CcmPoint> points, const FrechetOptions& opts = {}) {
  if (points.empty()) throw ConfigError("frechet_mean: empty point set");
  const Manifold m = points.front().manifold();
  for (const auto& p : points) {
    if (!(p.manifold() == m)) throw GeometryError("frechet_mean: points live on different manifolds");
  }
  const double count = static_cast<double>(points.size());

  Vector mean = Vector::Zero(static_cast<Eigen::Index>(m.ambient_dim()));
  for (const auto& p : points) mean += p.coords();
  mean /= count;
  if (m.curvature.is_flat()) return FrechetMean{CcmPoint(m.curvature, mean), 0, 0.0};
  if (points.size() == 1) return FrechetMean{points.front(), 0, 0.0};

  std::optional<CcmPoint> mu;
  try {
    mu.emplace(project_to_ccm(m.curvature, mean));
  } catch (const GeometryError&) {
    mu.emplace(points.front());
  }

  for (std::size_t it = 0; it < opts.max_iterations; ++it) {
    Vector step = Vector::Zero(mean.size());
    for (const auto& p : points) step += log_map(*mu, p).coords();
    step /= count;
    TangentVector g(*mu, step);
    const double gnorm = tangent_norm(g);
    if (gnorm < opts.tolerance) return FrechetMean{*mu, it, gnorm};
    mu.emplace(exp_map(*mu, g));
  }
  const Vector& last = mu->coords();
  throw ConvergenceError("frechet_mean: no convergence after " + std::to_string(opts.max_iterations) +
                             " iterations",
                         std::vector<double>(last.data(), last.data() + last.size()), opts.max_iterations);
}

/// Push-forward of tangent-plane samples at the manifold origin. Curved CCMs
/// take d coordinates; the flat CCM takes (d+1) and returns them unchanged.
inline CcmPoint push_forward(const Manifold& m, const Eigen::Ref<const Vector>& tangent_sample) {
  const CcmPoint origin = manifold_origin(m);
  if (m.curvature.is_flat()) {
    detail::require_same_size(tangent_sample.size(), static_cast<Eigen::Index>(m.ambient_dim()), "push_forward");
    return CcmPoint(m.curvature, tangent_sample);
  }
  detail::require_same_size(tangent_sample.size(), m.dim, "push_forward");
  Vector v = Vector::Zero(static_cast<Eigen::Index>(m.ambient_dim()));
  v.head(m.dim) = tangent_sample;
  return exp_map(origin, TangentVector(origin, std::move(v)));
}

/// Standard-normal prior pushed onto the manifold through the exp-map at the
/// origin. Draws come from `rng` in order.
inline CcmPoint sample_prior_point(const Manifold& m, Rng& rng) {
  const Eigen::Index n = static_cast<Eigen::Index>(m.tangent_dim());
  Vector t(n);
  for (Eigen::Index i = 0; i < n; ++i) t[i] = standard_normal(rng);
  return push_forward(m, t);
}

inline std::vector<CcmPoint> sample_prior(const Manifold& m, std::size_t count, std::uint64_t seed) {
  if (count < 1) throw ConfigError("sample_prior: count must be >= 1");
  if (m.dim < 1) throw ConfigError("sample_prior: dimension must be positive");
  Rng rng(seed);
  std::vector<CcmPoint> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample_prior_point(m, rng));
  return out;
}

}  // namespace ccmcd
