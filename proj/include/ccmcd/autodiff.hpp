#pragma once

// Tape-based reverse-mode differentiation over dense double matrices.
//
// Forward values are computed row by row wherever a row corresponds to a node,
// an edge or a graph, and every reduction over a set of nodes or edges sums
// its terms in sorted order. Together these make node-level outputs
// bitwise equivariant and graph-level outputs bitwise invariant under node
// relabelling, and make per-graph results independent of batch composition.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ccmcd/errors.hpp"
#include "ccmcd/random.hpp"

namespace ccmcd::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  Var constant(Matrix v) { return push(std::move(v), false, {}); }
  Var variable(Matrix v) { return push(std::move(v), true, {}); }

  Var record(Matrix v, std::initializer_list<Var> parents, Backward backward) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || nodes_[p.id].requires_grad;
    return push(std::move(v), needs, needs ? std::move(backward) : Backward{});
  }
  Var record(Matrix v, std::span<const Var> parents, Backward backward) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || nodes_[p.id].requires_grad;
    return push(std::move(v), needs, needs ? std::move(backward) : Backward{});
  }

  const Matrix& value(int id) const { return nodes_[id].value; }
  const Matrix& grad(int id) const { return nodes_[id].grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  void accumulate(Var v, const Matrix& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void backward(Var loss) {
    if (loss.rows() != 1 || loss.cols() != 1) throw DimensionError("backward: loss must be 1x1");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[loss.id].grad = Matrix::Ones(1, 1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
    }
    // Leaves with no gradient path get explicit zeros.
    for (auto& n : nodes_) {
      if (n.requires_grad && n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Matrix v, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(v), Matrix(), requires_grad, std::move(backward)});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(id); }
inline const Matrix& Var::grad() const { return tape->grad(id); }

namespace detail {

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError(std::string(op) + ": shape mismatch");
}

// Sum in ascending order of value; the result depends only on the multiset.
inline double canonical_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += t;
  return s;
}

}  // namespace detail

// Elementwise and shape ops ----------------------------------------------

inline Var add(Var a, Var b) {
  detail::check_same_shape(a, b, "add");
  return a.tape->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::check_same_shape(a, b, "sub");
  return a.tape->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

inline Var mul(Var a, Var b) {
  detail::check_same_shape(a, b, "mul");
  return a.tape->record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(b.value()));
    t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

inline Var scale(Var a, double s) {
  return a.tape->record(a.value() * s, {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

inline Var add_scalar(Var a, double s) {
  return a.tape->record(a.value().array() + s, {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

inline Var relu(Var a) {
  return a.tape->record(a.value().cwiseMax(0.0), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, (a.value().array() > 0.0).select(g, 0.0));
  });
}

inline Matrix sigmoid_values(const Matrix& x) {
  return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

inline Var sigmoid(Var a) {
  Matrix y = sigmoid_values(a.value());
  return a.tape->record(y, {a}, [a, y](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

inline Var tanh(Var a) {
  Matrix y = a.value().array().tanh();
  return a.tape->record(y, {a}, [a, y](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

inline Var log(Var a) {
  return a.tape->record(a.value().array().log(), {a},
                        [a](Tape& t, const Matrix& g) { t.accumulate(a, g.cwiseQuotient(a.value())); });
}

inline Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->record(out, {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var sum_squares(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().squaredNorm();
  return a.tape->record(out, {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, 2.0 * g(0, 0) * a.value()); });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return parts.front().tape->record(out, std::span<const Var>(parts), [parts](Tape& t, const Matrix& g) {
    Eigen::Index c0 = 0;
    for (const Var& p : parts) {
      t.accumulate(p, g.middleCols(c0, p.cols()));
      c0 += p.cols();
    }
  });
}

inline Var concat_rows(Var a, Var b) {
  if (a.cols() != b.cols()) throw DimensionError("concat_rows: column mismatch");
  Matrix out(a.rows() + b.rows(), a.cols());
  out << a.value(), b.value();
  return a.tape->record(out, {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g.topRows(a.rows()));
    t.accumulate(b, g.bottomRows(b.rows()));
  });
}

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw DimensionError("slice_cols: out of range");
  return a.tape->record(a.value().middleCols(start, count), {a}, [a, start, count](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    full.middleCols(start, count) = g;
    t.accumulate(a, full);
  });
}

// Dense layers ------------------------------------------------------------

/// x (R x K) times w (K x C), one row at a time.
inline Var matmul(Var x, Var w) {
  if (x.cols() != w.rows()) throw DimensionError("matmul: inner dimension mismatch");
  Matrix out(x.rows(), w.cols());
  const Matrix& xv = x.value();
  const Matrix& wv = w.value();
  const Matrix wt = wv.transpose();
  Eigen::VectorXd row(xv.cols());
  Eigen::VectorXd col(wv.cols());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) {
    row = xv.row(i).transpose();
    col.noalias() = wt * row;
    out.row(i) = col.transpose();
  }
  return x.tape->record(std::move(out), {x, w}, [x, w](Tape& t, const Matrix& g) {
    if (t.requires_grad(x)) t.accumulate(x, g * w.value().transpose());
    if (t.requires_grad(w)) t.accumulate(w, x.value().transpose() * g);
  });
}

/// Adds the 1 x C row b to every row of x.
inline Var add_bias(Var x, Var b) {
  if (b.rows() != 1 || b.cols() != x.cols()) throw DimensionError("add_bias: bias shape mismatch");
  Matrix out = x.value().rowwise() + b.value().row(0);
  return x.tape->record(std::move(out), {x, b}, [x, b](Tape& t, const Matrix& g) {
    t.accumulate(x, g);
    t.accumulate(b, g.colwise().sum());
  });
}

inline Var affine(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

// Graph ops ---------------------------------------------------------------

/// Weighted neighbour lists: row i of the output is sum_j weight_ij * x_j.
struct Propagation {
  struct Term {
    Eigen::Index source;
    double weight;
  };
  std::vector<std::vector<Term>> rows;
};

inline Var propagate(Var x, std::shared_ptr<const Propagation> p) {
  const Eigen::Index n = static_cast<Eigen::Index>(p->rows.size());
  if (n != x.rows()) throw DimensionError("propagate: row mismatch");
  const Matrix& xv = x.value();
  Matrix out = Matrix::Zero(n, xv.cols());
  std::vector<double> terms;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = p->rows[static_cast<std::size_t>(i)];
    for (Eigen::Index c = 0; c < xv.cols(); ++c) {
      terms.clear();
      for (const auto& term : row) terms.push_back(term.weight * xv(term.source, c));
      out(i, c) = detail::canonical_sum(terms);
    }
  }
  return x.tape->record(std::move(out), {x}, [x, p](Tape& t, const Matrix& g) {
    Matrix gx = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t i = 0; i < p->rows.size(); ++i) {
      for (const auto& term : p->rows[i]) gx.row(term.source) += term.weight * g.row(static_cast<Eigen::Index>(i));
    }
    t.accumulate(x, gx);
  });
}

/// Edge-conditioned aggregation. Edge e carries a kernel (row e of `kernels`,
/// read as a row-major fin x fout matrix) and contributes
/// weight_e * x_source * K_e to the target row.
struct EdgeList {
  struct Edge {
    Eigen::Index target;
    Eigen::Index source;
    double weight;
  };
  std::vector<Edge> edges;
  Eigen::Index nodes = 0;
};

inline Var ecc_aggregate(Var x, Var kernels, std::shared_ptr<const EdgeList> list, Eigen::Index fout) {
  const Eigen::Index fin = x.cols();
  const auto m = static_cast<Eigen::Index>(list->edges.size());
  if (x.rows() != list->nodes) throw DimensionError("ecc_aggregate: node count mismatch");
  if (kernels.rows() != m || kernels.cols() != fin * fout) throw DimensionError("ecc_aggregate: kernel shape mismatch");
  const Matrix& xv = x.value();
  const Matrix& kv = kernels.value();
  Matrix messages(m, fout);
  for (Eigen::Index e = 0; e < m; ++e) {
    const auto& edge = list->edges[static_cast<std::size_t>(e)];
    for (Eigen::Index b = 0; b < fout; ++b) {
      double s = 0.0;
      for (Eigen::Index a = 0; a < fin; ++a) s += xv(edge.source, a) * kv(e, a * fout + b);
      messages(e, b) = edge.weight * s;
    }
  }
  std::vector<std::vector<Eigen::Index>> incoming(static_cast<std::size_t>(list->nodes));
  for (Eigen::Index e = 0; e < m; ++e) incoming[static_cast<std::size_t>(list->edges[static_cast<std::size_t>(e)].target)].push_back(e);
  Matrix out = Matrix::Zero(list->nodes, fout);
  std::vector<double> terms;
  for (Eigen::Index i = 0; i < list->nodes; ++i) {
    const auto& in = incoming[static_cast<std::size_t>(i)];
    for (Eigen::Index b = 0; b < fout; ++b) {
      terms.clear();
      for (Eigen::Index e : in) terms.push_back(messages(e, b));
      out(i, b) = detail::canonical_sum(terms);
    }
  }
  return x.tape->record(std::move(out), {x, kernels}, [x, kernels, list, fin, fout](Tape& t, const Matrix& g) {
    const Matrix& xv2 = x.value();
    const Matrix& kv2 = kernels.value();
    Matrix gx = Matrix::Zero(xv2.rows(), fin);
    Matrix gk = Matrix::Zero(kv2.rows(), kv2.cols());
    for (std::size_t e = 0; e < list->edges.size(); ++e) {
      const auto& edge = list->edges[e];
      const auto ei = static_cast<Eigen::Index>(e);
      for (Eigen::Index a = 0; a < fin; ++a) {
        for (Eigen::Index b = 0; b < fout; ++b) {
          const double gw = edge.weight * g(edge.target, b);
          gx(edge.source, a) += gw * kv2(ei, a * fout + b);
          gk(ei, a * fout + b) += gw * xv2(edge.source, a);
        }
      }
    }
    t.accumulate(x, gx);
    t.accumulate(kernels, gk);
  });
}

/// Sums the rows of each segment [offsets[s], offsets[s+1]) into output row s.
inline Var segment_sum(Var x, std::shared_ptr<const std::vector<Eigen::Index>> offsets) {
  if (offsets->size() < 2 || offsets->back() != x.rows()) throw DimensionError("segment_sum: bad offsets");
  const auto segments = static_cast<Eigen::Index>(offsets->size() - 1);
  const Matrix& xv = x.value();
  Matrix out(segments, xv.cols());
  std::vector<double> terms;
  for (Eigen::Index s = 0; s < segments; ++s) {
    const Eigen::Index lo = (*offsets)[static_cast<std::size_t>(s)];
    const Eigen::Index hi = (*offsets)[static_cast<std::size_t>(s) + 1];
    for (Eigen::Index c = 0; c < xv.cols(); ++c) {
      terms.assign(xv.col(c).data() + lo, xv.col(c).data() + hi);
      out(s, c) = detail::canonical_sum(terms);
    }
  }
  return x.tape->record(std::move(out), {x}, [x, offsets](Tape& t, const Matrix& g) {
    Matrix gx(x.rows(), x.cols());
    for (std::size_t s = 0; s + 1 < offsets->size(); ++s) {
      for (Eigen::Index r = (*offsets)[s]; r < (*offsets)[s + 1]; ++r) gx.row(r) = g.row(static_cast<Eigen::Index>(s));
    }
    t.accumulate(x, gx);
  });
}

// Regularisation layers ---------------------------------------------------

/// Inverted dropout. The mask is drawn from rng row by row.
inline Var dropout(Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  const double keep = 1.0 - rate;
  Matrix mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.rows(); ++i) {
    for (Eigen::Index j = 0; j < mask.cols(); ++j) mask(i, j) = uniform(rng, 0.0, 1.0) < keep ? 1.0 / keep : 0.0;
  }
  return x.tape->record(x.value().cwiseProduct(mask), {x},
                        [x, mask](Tape& t, const Matrix& g) { t.accumulate(x, g.cwiseProduct(mask)); });
}

struct BatchNormState {
  Eigen::RowVectorXd running_mean;
  Eigen::RowVectorXd running_var;
  double momentum = 0.99;
  double epsilon = 1e-3;
};

/// Batch normalisation over rows. Training mode uses batch statistics and
/// updates the running ones; inference mode uses the running statistics.
inline Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, bool training) {
  const Eigen::Index c = x.cols();
  if (gamma.cols() != c || beta.cols() != c) throw DimensionError("batch_norm: parameter shape mismatch");
  const Matrix& xv = x.value();
  if (!training || xv.rows() < 2) {
    Eigen::RowVectorXd inv = (state.running_var.array() + state.epsilon).rsqrt();
    Matrix xhat = (xv.rowwise() - state.running_mean).array().rowwise() * inv.array();
    Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    return x.tape->record(std::move(out), {x, gamma, beta}, [x, gamma, beta, inv, xhat](Tape& t, const Matrix& g) {
      t.accumulate(x, g.array().rowwise() * (gamma.value().row(0).array() * inv.array()));
      t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
      t.accumulate(beta, g.colwise().sum());
    });
  }
  const double r = static_cast<double>(xv.rows());
  Eigen::RowVectorXd mu = xv.colwise().mean();
  Matrix centred = xv.rowwise() - mu;
  Eigen::RowVectorXd var = centred.array().square().colwise().sum() / r;
  Eigen::RowVectorXd inv = (var.array() + state.epsilon).rsqrt();
  Matrix xhat = centred.array().rowwise() * inv.array();
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * mu;
  state.running_var = state.momentum * state.running_var + (1.0 - state.momentum) * var;
  return x.tape->record(std::move(out), {x, gamma, beta}, [x, gamma, beta, inv, xhat, r](Tape& t, const Matrix& g) {
    Matrix gxhat = g.array().rowwise() * gamma.value().row(0).array();
    Eigen::RowVectorXd m1 = gxhat.colwise().mean();
    Eigen::RowVectorXd m2 = gxhat.cwiseProduct(xhat).colwise().mean();
    Matrix gx = ((gxhat.rowwise() - m1) - (xhat.array().rowwise() * m2.array()).matrix()).array().rowwise() * inv.array();
    (void)r;
    t.accumulate(x, gx);
    t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
    t.accumulate(beta, g.colwise().sum());
  });
}

// Losses ------------------------------------------------------------------

inline constexpr double kProbabilityClamp = 1e-7;

/// sum_ij w_ij * BCE(target_ij, clamp(p_ij, eps, 1 - eps)).
/// Entries at the clamp pass no gradient.
inline Var binary_cross_entropy(Var p, const Matrix& target, const Matrix& weights, double eps = kProbabilityClamp) {
  if (target.rows() != p.rows() || target.cols() != p.cols() || weights.rows() != p.rows() ||
      weights.cols() != p.cols()) {
    throw DimensionError("binary_cross_entropy: shape mismatch");
  }
  const Matrix& pv = p.value();
  Matrix clamped = pv.cwiseMax(eps).cwiseMin(1.0 - eps);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < pv.rows(); ++i) {
    for (Eigen::Index j = 0; j < pv.cols(); ++j) {
      const double w = weights(i, j);
      if (w == 0.0) continue;
      const double q = clamped(i, j);
      const double y = target(i, j);
      loss -= w * (y * std::log(q) + (1.0 - y) * std::log(1.0 - q));
    }
  }
  Matrix out(1, 1);
  out(0, 0) = loss;
  return p.tape->record(out, {p}, [p, target, weights, clamped, eps](Tape& t, const Matrix& g) {
    const Matrix& pv2 = p.value();
    Matrix gp = Matrix::Zero(pv2.rows(), pv2.cols());
    for (Eigen::Index i = 0; i < pv2.rows(); ++i) {
      for (Eigen::Index j = 0; j < pv2.cols(); ++j) {
        if (pv2(i, j) < eps || pv2(i, j) > 1.0 - eps) continue;
        const double q = clamped(i, j);
        const double y = target(i, j);
        gp(i, j) = g(0, 0) * weights(i, j) * (-(y / q) + (1.0 - y) / (1.0 - q));
      }
    }
    t.accumulate(p, gp);
  });
}

/// sum_ij w_ij * (pred_ij - target_ij)^2.
inline Var weighted_squared_error(Var pred, const Matrix& target, const Matrix& weights) {
  if (target.rows() != pred.rows() || target.cols() != pred.cols() || weights.rows() != pred.rows() ||
      weights.cols() != pred.cols()) {
    throw DimensionError("weighted_squared_error: shape mismatch");
  }
  Matrix diff = pred.value() - target;
  Matrix out(1, 1);
  out(0, 0) = weights.cwiseProduct(diff.cwiseAbs2()).sum();
  return pred.tape->record(out, {pred}, [pred, diff, weights](Tape& t, const Matrix& g) {
    t.accumulate(pred, 2.0 * g(0, 0) * weights.cwiseProduct(diff));
  });
}

// Optimiser ---------------------------------------------------------------

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  /// Updates params[i] with grads[i]. Moment buffers are created on first use.
  void step(std::span<Matrix* const> params, std::span<const Matrix* const> grads) {
    if (params.size() != grads.size()) throw DimensionError("Adam: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (Matrix* p : params) {
        m_.push_back(Matrix::Zero(p->rows(), p->cols()));
        v_.push_back(Matrix::Zero(p->rows(), p->cols()));
      }
    }
    if (m_.size() != params.size()) throw DimensionError("Adam: parameter set changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    const double lr = options_.learning_rate * std::sqrt(c2) / c1;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Matrix& g = *grads[i];
      m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * g;
      v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * g.cwiseAbs2();
      params[i]->array() -= lr * m_[i].array() / (v_[i].array().sqrt() + options_.epsilon);
    }
  }

  long steps() const { return t_; }

 private:
  AdamOptions options_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long t_ = 0;
};

}  // namespace ccmcd::ad
