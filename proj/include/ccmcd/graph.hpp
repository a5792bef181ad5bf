#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ccmcd/errors.hpp"

namespace ccmcd {

/// One observation of the stream: binary adjacency A (N x N), node attributes
/// X (N x F) and edge attributes E stored as an (N*N) x S matrix whose row
/// i*N + j holds E_ij. Absent edges carry zero attribute vectors.
struct Graph {
  Eigen::MatrixXd A;
  Eigen::MatrixXd X;
  Eigen::MatrixXd E;

  Graph() = default;
  Graph(Eigen::MatrixXd adjacency, Eigen::MatrixXd nodes, std::size_t edge_features = 0)
      : A(std::move(adjacency)), X(std::move(nodes)), E(Eigen::MatrixXd::Zero(A.rows() * A.rows(),
                                                                               static_cast<Eigen::Index>(edge_features))) {}
  Graph(Eigen::MatrixXd adjacency, Eigen::MatrixXd nodes, Eigen::MatrixXd edges)
      : A(std::move(adjacency)), X(std::move(nodes)), E(std::move(edges)) {}

  std::size_t order() const noexcept { return static_cast<std::size_t>(A.rows()); }
  std::size_t node_features() const noexcept { return static_cast<std::size_t>(X.cols()); }
  std::size_t edge_features() const noexcept { return static_cast<std::size_t>(E.cols()); }

  auto edge(Eigen::Index i, Eigen::Index j) const { return E.row(i * A.rows() + j); }
  auto edge(Eigen::Index i, Eigen::Index j) { return E.row(i * A.rows() + j); }

  /// Throws ConfigError when a structural invariant is broken.
  void validate(bool undirected = true) const {
    const Eigen::Index n = A.rows();
    if (A.cols() != n) throw ConfigError("graph: adjacency matrix is not square");
    if (X.rows() != n) throw ConfigError("graph: node attribute rows differ from N");
    if (E.rows() != n * n) throw ConfigError("graph: edge attribute rows differ from N*N");
    if (!X.allFinite() || !E.allFinite()) throw ConfigError("graph: non-finite attributes");
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        const double a = A(i, j);
        if (a != 0.0 && a != 1.0) throw ConfigError("graph: adjacency entries must be 0 or 1");
        if (undirected && (a != A(j, i) || (i == j && a != 0.0))) {
          throw ConfigError("graph: undirected adjacency must be symmetric with zero diagonal");
        }
        if (a == 0.0 && E.cols() > 0 && !edge(i, j).isZero(0.0)) {
          throw ConfigError("graph: absent edge carries non-zero attributes");
        }
      }
    }
  }

  friend bool operator==(const Graph& a, const Graph& b) {
    return a.A.rows() == b.A.rows() && a.X.cols() == b.X.cols() && a.E.cols() == b.E.cols() && a.A == b.A &&
           a.X == b.X && a.E == b.E;
  }
};

/// Ordered graph sequence plus optional ground truth. When `change` is set,
/// label[t] is 0 (nominal) for t < tau and 1 for t >= tau. A stream without a
/// change may still carry `tau` as a pseudo-boundary for evaluation.
struct GraphStream {
  std::vector<Graph> graphs;
  std::vector<int> labels;
  std::optional<std::size_t> tau;
  bool change = false;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return graphs.size(); }
  bool empty() const noexcept { return graphs.empty(); }
  const Graph& operator[](std::size_t i) const { return graphs.at(i); }

  std::size_t max_order() const noexcept {
    std::size_t n = 0;
    for (const auto& g : graphs) n = std::max(n, g.order());
    return n;
  }

  void validate_labels() const {
    if (labels.empty()) return;
    if (labels.size() != graphs.size()) throw ConfigError("stream: label count differs from graph count");
    for (std::size_t t = 0; t < labels.size(); ++t) {
      const int expected = (change && tau && t >= *tau) ? 1 : 0;
      if (labels[t] != expected) throw ConfigError("stream: labels disagree with the declared change point");
    }
  }

  friend bool operator==(const GraphStream&, const GraphStream&) = default;
};

/// Per-entry mean and scale of the node and edge attributes, estimated on a
/// training stream. Edge moments are taken over present edges only, so that
/// absent edges keep their zero attribute vectors.
struct AttributeMoments {
  Eigen::MatrixXd x_mean;   // N x F
  Eigen::MatrixXd x_scale;  // N x F, 1 where the training variance is zero
  Eigen::MatrixXd e_mean;   // N*N x S
  Eigen::MatrixXd e_scale;  // N*N x S

  Graph apply(const Graph& g) const {
    const Eigen::Index n = g.A.rows();
    if (n > x_mean.rows() || g.X.cols() != x_mean.cols() || g.E.cols() != e_mean.cols()) {
      throw DimensionError("normalize: graph shape does not match the stored moments");
    }
    Graph out = g;
    out.X = (g.X - x_mean.topRows(n)).cwiseQuotient(x_scale.topRows(n));
    const Eigen::Index nmax = x_mean.rows();
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (g.A(i, j) == 0.0 || g.E.cols() == 0) continue;
        const Eigen::Index src = i * nmax + j;
        out.edge(i, j) = (g.edge(i, j) - e_mean.row(src)).cwiseQuotient(e_scale.row(src));
      }
    }
    return out;
  }

  GraphStream apply(const GraphStream& s) const {
    GraphStream out = s;
    for (auto& g : out.graphs) g = apply(g);
    return out;
  }

  friend bool operator==(const AttributeMoments&, const AttributeMoments&) = default;
};

inline AttributeMoments fit_moments(const GraphStream& train) {
  if (train.empty()) throw ConfigError("normalize: training stream is empty");
  const Eigen::Index nmax = static_cast<Eigen::Index>(train.max_order());
  const Eigen::Index f = train[0].X.cols();
  const Eigen::Index s = train[0].E.cols();

  Eigen::MatrixXd x_sum = Eigen::MatrixXd::Zero(nmax, f), x_sq = x_sum, x_cnt = x_sum;
  Eigen::MatrixXd e_sum = Eigen::MatrixXd::Zero(nmax * nmax, s), e_sq = e_sum;
  Eigen::VectorXd e_cnt = Eigen::VectorXd::Zero(nmax * nmax);

  // Two passes (mean, then centred squares) to avoid cancellation.
  for (const auto& g : train.graphs) {
    if (g.X.cols() != f || g.E.cols() != s) throw DimensionError("normalize: inconsistent attribute widths");
    const Eigen::Index n = g.A.rows();
    x_sum.topRows(n) += g.X;
    x_cnt.topRows(n).array() += 1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (g.A(i, j) == 0.0 || s == 0) continue;
        e_sum.row(i * nmax + j) += g.edge(i, j);
        e_cnt[i * nmax + j] += 1.0;
      }
    }
  }
  AttributeMoments m;
  m.x_mean = x_sum.cwiseQuotient(x_cnt.cwiseMax(1.0));
  m.e_mean = e_sum;
  for (Eigen::Index r = 0; r < e_sum.rows(); ++r) m.e_mean.row(r) /= std::max(1.0, e_cnt[r]);

  for (const auto& g : train.graphs) {
    const Eigen::Index n = g.A.rows();
    x_sq.topRows(n) += (g.X - m.x_mean.topRows(n)).cwiseAbs2();
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (g.A(i, j) == 0.0 || s == 0) continue;
        e_sq.row(i * nmax + j) += (g.edge(i, j) - m.e_mean.row(i * nmax + j)).cwiseAbs2();
      }
    }
  }
  auto to_scale = [](double sq, double count) {
    const double var = count > 0 ? sq / count : 0.0;
    return var > 0.0 ? std::sqrt(var) : 1.0;
  };
  m.x_scale = x_sq.binaryExpr(x_cnt, to_scale);
  m.e_scale = Eigen::MatrixXd::Ones(nmax * nmax, s);
  for (Eigen::Index r = 0; r < e_sq.rows(); ++r) {
    for (Eigen::Index c = 0; c < s; ++c) m.e_scale(r, c) = to_scale(e_sq(r, c), e_cnt[r]);
  }
  return m;
}

struct NormalizedStreams {
  GraphStream train;
  GraphStream other;
  AttributeMoments moments;
};

/// Moments come from the training stream only and are applied to both.
inline NormalizedStreams normalize_attributes(const GraphStream& train, const GraphStream& other) {
  AttributeMoments m = fit_moments(train);
  return NormalizedStreams{m.apply(train), m.apply(other), std::move(m)};
}

// ---------------------------------------------------------------------------
// JSON (de)serialisation helpers shared by the checkpoint formats.

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json data = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  }
  return {{"shape", {m.rows(), m.cols()}}, {"data", std::move(data)}};
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("shape").at(0).get<Eigen::Index>();
  const auto cols = j.at("shape").at(1).get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw IoError("matrix payload size mismatch");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)].get<double>();
  }
  return m;
}

inline nlohmann::json moments_to_json(const AttributeMoments& m) {
  return {{"x_mean", matrix_to_json(m.x_mean)},
          {"x_scale", matrix_to_json(m.x_scale)},
          {"e_mean", matrix_to_json(m.e_mean)},
          {"e_scale", matrix_to_json(m.e_scale)}};
}

inline AttributeMoments moments_from_json(const nlohmann::json& j) {
  return AttributeMoments{matrix_from_json(j.at("x_mean")), matrix_from_json(j.at("x_scale")),
                          matrix_from_json(j.at("e_mean")), matrix_from_json(j.at("e_scale"))};
}

// ---------------------------------------------------------------------------
// Stream files: line-delimited JSON. The first line is a header
//   {"format":"ccmcd-stream","version":1,"count":T,"N":..,"F":..,"S":..,
//    "tau":..|null,"change":bool,"seed":..}
// followed by one graph per line
//   {"t":i,"label":0|1,"N":n,"A":[[neighbours of 0],...],"X":[row-major],
//    "E":[[i,j,[attrs]],...]}
// Floats are printed with 17 significant digits.

inline constexpr int kStreamFormatVersion = 1;

namespace detail {

inline void write_double(std::ostream& os, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  os << buf;
}

}  // namespace detail

inline void write_graph_line(std::ostream& os, const Graph& g, std::size_t t, std::optional<int> label) {
  const Eigen::Index n = g.A.rows();
  os << "{\"t\":" << t;
  if (label) os << ",\"label\":" << *label;
  os << ",\"N\":" << n << ",\"A\":[";
  for (Eigen::Index i = 0; i < n; ++i) {
    os << (i ? ",[" : "[");
    bool first = true;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (g.A(i, j) == 0.0) continue;
      os << (first ? "" : ",") << j;
      first = false;
    }
    os << ']';
  }
  os << "],\"X\":[";
  bool first = true;
  for (Eigen::Index i = 0; i < g.X.rows(); ++i) {
    for (Eigen::Index f = 0; f < g.X.cols(); ++f) {
      if (!first) os << ',';
      detail::write_double(os, g.X(i, f));
      first = false;
    }
  }
  os << "],\"E\":[";
  first = true;
  if (g.E.cols() > 0) {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (g.A(i, j) == 0.0) continue;
        os << (first ? "[" : ",[") << i << ',' << j << ",[";
        for (Eigen::Index s = 0; s < g.E.cols(); ++s) {
          if (s) os << ',';
          detail::write_double(os, g.edge(i, j)[s]);
        }
        os << "]]";
        first = false;
      }
    }
  }
  os << "]}\n";
}

inline void write_stream(std::ostream& os, const GraphStream& s) {
  const std::size_t f = s.empty() ? 0 : s[0].node_features();
  const std::size_t e = s.empty() ? 0 : s[0].edge_features();
  nlohmann::json header{{"format", "ccmcd-stream"}, {"version", kStreamFormatVersion},
                        {"count", s.size()},        {"N", s.max_order()},
                        {"F", f},                   {"S", e},
                        {"tau", nullptr},           {"change", s.change},
                        {"seed", s.seed}};
  if (s.tau) header["tau"] = *s.tau;
  os << header.dump() << '\n';
  for (std::size_t t = 0; t < s.size(); ++t) {
    std::optional<int> label;
    if (!s.labels.empty()) label = s.labels[t];
    write_graph_line(os, s[t], t, label);
  }
}

inline void write_stream(const std::string& path, const GraphStream& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_stream(out, s);
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline Graph graph_from_json(const nlohmann::json& j, std::size_t f, std::size_t s) {
  const auto n = j.at("N").get<Eigen::Index>();
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
  const auto& adj = j.at("A");
  if (static_cast<Eigen::Index>(adj.size()) != n) throw IoError("stream: adjacency list length differs from N");
  for (Eigen::Index i = 0; i < n; ++i) {
    for (const auto& nb : adj[static_cast<std::size_t>(i)]) {
      const auto k = nb.get<Eigen::Index>();
      if (k < 0 || k >= n) throw IoError("stream: neighbour index out of range");
      A(i, k) = 1.0;
    }
  }
  const auto& xs = j.at("X");
  if (xs.size() != static_cast<std::size_t>(n) * f) throw IoError("stream: X payload size mismatch");
  Eigen::MatrixXd X(n, static_cast<Eigen::Index>(f));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(f); ++c) {
      X(i, c) = xs[static_cast<std::size_t>(i) * f + static_cast<std::size_t>(c)].get<double>();
    }
  }
  Graph g(std::move(A), std::move(X), s);
  for (const auto& trip : j.at("E")) {
    const auto i = trip.at(0).get<Eigen::Index>();
    const auto k = trip.at(1).get<Eigen::Index>();
    const auto& vals = trip.at(2);
    if (i < 0 || i >= n || k < 0 || k >= n || vals.size() != s) throw IoError("stream: malformed edge triplet");
    for (std::size_t c = 0; c < s; ++c) g.edge(i, k)[static_cast<Eigen::Index>(c)] = vals[c].get<double>();
  }
  return g;
}

inline GraphStream read_stream(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("stream: missing header line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("stream: corrupt header: ") + e.what());
  }
  if (header.value("format", "") != "ccmcd-stream") throw IoError("stream: not a ccmcd stream file");
  if (header.value("version", 0) != kStreamFormatVersion) throw IoError("stream: unsupported format version");

  GraphStream s;
  const auto f = header.at("F").get<std::size_t>();
  const auto e = header.at("S").get<std::size_t>();
  if (!header.at("tau").is_null()) s.tau = header.at("tau").get<std::size_t>();
  s.change = header.value("change", false);
  s.seed = header.value("seed", std::uint64_t{0});
  bool any_label = false;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      s.graphs.push_back(graph_from_json(j, f, e));
      if (j.contains("label")) {
        any_label = true;
        s.labels.push_back(j.at("label").get<int>());
      }
    } catch (const nlohmann::json::exception& ex) {
      throw IoError("stream: corrupt line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  if (any_label && s.labels.size() != s.graphs.size()) throw IoError("stream: labels present on some lines only");
  if (header.contains("count") && header.at("count").get<std::size_t>() != s.size()) {
    throw IoError("stream: header count does not match the number of graphs");
  }
  return s;
}

inline GraphStream read_stream(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open stream file '" + path + "'");
  return read_stream(in);
}

}  // namespace ccmcd
