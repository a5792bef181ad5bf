#pragma once

// Adversarial graph autoencoder with latent ensembles of constant-curvature
// manifolds. Graphs go through a stack of graph convolutions, gated sum
// pooling and one dense head per ensemble member; each head's output is
// projected onto its manifold and the concatenated projections feed a dense
// decoder that reconstructs adjacency, node and edge attributes.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ccmcd/autodiff.hpp"
#include "ccmcd/ensemble.hpp"
#include "ccmcd/errors.hpp"
#include "ccmcd/geometry.hpp"
#include "ccmcd/graph.hpp"
#include "ccmcd/random.hpp"

namespace ccmcd {

using ad::Matrix;
using ad::Tape;
using ad::Var;

enum class ConvKind { ecc, gcn };
enum class DiscriminatorKind { prior, geometric };

inline std::string to_string(ConvKind k) { return k == ConvKind::ecc ? "ecc" : "gcn"; }
inline std::string to_string(DiscriminatorKind k) { return k == DiscriminatorKind::prior ? "prior" : "geom"; }

inline ConvKind parse_conv_kind(std::string_view s) {
  if (s == "ecc" || s == "edge-conditioned") return ConvKind::ecc;
  if (s == "gcn" || s == "node-only") return ConvKind::gcn;
  throw ConfigError("unknown convolution kind '" + std::string(s) + "'");
}

inline DiscriminatorKind parse_discriminator_kind(std::string_view s) {
  if (s == "prior" || s == "probabilistic") return DiscriminatorKind::prior;
  if (s == "geom" || s == "geometric") return DiscriminatorKind::geometric;
  throw ConfigError("unknown discriminator kind '" + std::string(s) + "'");
}

struct EncoderConfig {
  std::vector<int> conv_channels{32, 64};
  int pooling_channels = 128;
  int head_hidden = 128;
  int kernel_hidden = 128;  // width of the two hidden layers of the ECC kernel network
  Ensemble ensemble = parse_ensemble("M*");
  ConvKind conv_kind = ConvKind::ecc;
  double l2_factor = 5e-4;
  bool batch_norm = false;
  double dropout_rate = 0.0;

  void validate() const {
    if (conv_channels.empty()) throw ConfigError("encoder needs at least one convolution layer");
    for (int c : conv_channels) {
      if (c < 1) throw ConfigError("convolution channels must be positive");
    }
    if (pooling_channels < 1 || head_hidden < 1 || kernel_hidden < 1) throw ConfigError("layer widths must be positive");
    if (ensemble.size() == 0) throw ConfigError("encoder needs a latent ensemble");
    if (!(l2_factor >= 0.0)) throw ConfigError("l2 factor must be nonnegative");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout rate must lie in [0,1)");
  }
};

struct ModelConfig {
  EncoderConfig encoder;
  std::vector<int> decoder_hidden{128, 256, 512};
  std::vector<int> discriminator_hidden{128, 128, 128};
  DiscriminatorKind discriminator = DiscriminatorKind::geometric;
  double varsigma = 5.0;
  int max_nodes = 0;
  int node_features = 0;
  int edge_features = 0;
  double learning_rate = 1e-3;

  void validate() const {
    encoder.validate();
    if (max_nodes < 1) throw ConfigError("model needs a positive maximum node count");
    if (node_features < 0 || edge_features < 0) throw ConfigError("feature counts must be nonnegative");
    if (encoder.conv_kind == ConvKind::ecc && edge_features < 1) {
      throw ConfigError("edge-conditioned convolutions need at least one edge attribute channel");
    }
    for (int h : decoder_hidden) {
      if (h < 1) throw ConfigError("decoder widths must be positive");
    }
    for (int h : discriminator_hidden) {
      if (h < 1) throw ConfigError("discriminator widths must be positive");
    }
    if (!(varsigma > 0.0)) throw ConfigError("varsigma must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  }
};

/// Raw head outputs (length c(d+1)) and their per-member projections.
struct Embedding {
  Vector raw;
  std::vector<CcmPoint> projected;
};

enum class ParamGroup { encoder, decoder, discriminator };

struct Parameter {
  std::string name;
  Matrix value;
  ParamGroup group;
  bool regularised = false;
};

// ---------------------------------------------------------------------------
// Differentiable latent-space ops.

/// Projection used inside the model: the sheet lift for hyperbolic blocks,
/// and the manifold origin for an all-zero spherical block, which has no
/// radial image.
inline CcmPoint model_projection(Curvature kappa, const Vector& z) {
  if (kappa.value() > 0.0 && z.allFinite() && z.isZero(0.0)) {
    return manifold_origin(Manifold{kappa, static_cast<int>(z.size()) - 1});
  }
  return project_to_ccm(kappa, z, HyperbolicProjection::sheet_lift);
}

/// Row-wise model projection of z (B x (d+1)). Non-finite rows come out as
/// NaN so that the loss reports the divergence.
inline Var project_rows(Var z, Curvature kappa) {
  if (kappa.is_flat()) return z;
  const Matrix& zv = z.value();
  Matrix out(zv.rows(), zv.cols());
  Vector row(zv.cols());
  for (Eigen::Index i = 0; i < zv.rows(); ++i) {
    row = zv.row(i).transpose();
    if (!row.allFinite()) {
      out.row(i).setConstant(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    out.row(i) = model_projection(kappa, row).coords().transpose();
  }
  const Matrix y = out;
  return z.tape->record(std::move(out), {z}, [z, kappa, y](Tape& t, const Matrix& g) {
    const Matrix& zv2 = z.value();
    Matrix gz = Matrix::Zero(zv2.rows(), zv2.cols());
    const Eigen::Index d = zv2.cols() - 1;
    for (Eigen::Index i = 0; i < zv2.rows(); ++i) {
      if (kappa.value() > 0.0) {
        const double n = zv2.row(i).norm();
        if (n == 0.0) continue;
        const Eigen::RowVectorXd u = zv2.row(i) / n;
        gz.row(i) = (g.row(i) - u * u.dot(g.row(i))) / (kappa.sqrt_abs() * n);
      } else {
        gz.row(i).head(d) = g.row(i).head(d) + g(i, d) * zv2.row(i).head(d) / y(i, d);
      }
    }
    t.accumulate(z, gz);
  });
}

/// Membership degree exp(-(<z,z>_k - 1/k)^2 / (2 s^2)) of each row of z.
/// Returns B x 1; the flat manifold scores 1 everywhere.
inline Var membership_rows(Var z, Curvature kappa, double varsigma) {
  const Matrix& zv = z.value();
  if (kappa.is_flat()) return z.tape->constant(Matrix::Ones(zv.rows(), 1));
  Matrix out(zv.rows(), 1);
  Matrix residual(zv.rows(), 1);
  Vector row(zv.cols());
  for (Eigen::Index i = 0; i < zv.rows(); ++i) {
    row = zv.row(i).transpose();
    residual(i, 0) = inner_product(kappa, row, row) - 1.0 / kappa.value();
    out(i, 0) = std::exp(-residual(i, 0) * residual(i, 0) / (2.0 * varsigma * varsigma));
  }
  const Matrix m = out;
  return z.tape->record(std::move(out), {z}, [z, kappa, varsigma, m, residual](Tape& t, const Matrix& g) {
    Matrix gz = 2.0 * z.value();
    if (kappa.value() < 0.0) gz.col(gz.cols() - 1) *= -1.0;
    for (Eigen::Index i = 0; i < gz.rows(); ++i) {
      gz.row(i) *= g(i, 0) * m(i, 0) * (-residual(i, 0) / (varsigma * varsigma));
    }
    t.accumulate(z, gz);
  });
}

/// Mean membership over the ensemble members, B x 1.
inline Var ensemble_membership(Var z_raw, const Ensemble& ensemble, double varsigma) {
  if (static_cast<std::size_t>(z_raw.cols()) != ensemble.total_dim()) {
    throw DimensionError("membership: latent width differs from c(d+1)");
  }
  std::optional<Var> total;
  for (std::size_t k = 0; k < ensemble.size(); ++k) {
    Var block = ad::slice_cols(z_raw, static_cast<Eigen::Index>(ensemble.offset(k)),
                               static_cast<Eigen::Index>(ensemble[k].ambient_dim()));
    Var m = membership_rows(block, ensemble[k].curvature, varsigma);
    total = total ? ad::add(*total, m) : m;
  }
  return ad::scale(*total, 1.0 / static_cast<double>(ensemble.size()));
}

/// Scalar membership of one raw embedding, in (0, 1].
inline double geometric_membership(const Ensemble& ensemble, const Eigen::Ref<const Vector>& z_raw,
                                   double varsigma = 5.0) {
  Tape tape;
  Var z = tape.constant(z_raw.transpose());
  return ensemble_membership(z, ensemble, varsigma).scalar();
}

// ---------------------------------------------------------------------------
// Batched graph inputs and reconstruction targets.

struct GraphBatch {
  std::size_t size = 0;
  Matrix X;  // stacked node attributes, total_nodes x F
  std::shared_ptr<const std::vector<Eigen::Index>> offsets;
  std::shared_ptr<const ad::Propagation> gcn;
  std::shared_ptr<const ad::EdgeList> edges;
  Matrix edge_attributes;  // one row per directed edge, aligned with `edges`
  Matrix a_target, a_weight;
  Matrix x_target, x_weight;
  Matrix e_target, e_weight;
};

inline void check_graph_shape(const Graph& g, const ModelConfig& c) {
  if (g.order() < 1) throw DimensionError("graph has no nodes");
  if (g.order() > static_cast<std::size_t>(c.max_nodes)) {
    throw DimensionError("graph order " + std::to_string(g.order()) + " exceeds the model maximum " +
                         std::to_string(c.max_nodes));
  }
  if (g.node_features() != static_cast<std::size_t>(c.node_features)) throw DimensionError("node attribute count mismatch");
  if (g.edge_features() != static_cast<std::size_t>(c.edge_features)) throw DimensionError("edge attribute count mismatch");
}

/// Loss weights realise the per-graph normalisation of the reconstruction
/// loss, average it over the batch and mask the padding of smaller graphs.
inline GraphBatch make_batch(std::span<const Graph* const> graphs, const ModelConfig& c) {
  GraphBatch b;
  b.size = graphs.size();
  if (graphs.empty()) throw ConfigError("empty batch");
  const Eigen::Index nmax = c.max_nodes;
  const Eigen::Index f = c.node_features;
  const Eigen::Index s = c.edge_features;
  const auto bsz = static_cast<Eigen::Index>(graphs.size());
  Eigen::Index total = 0;
  auto offsets = std::make_shared<std::vector<Eigen::Index>>(1, 0);
  for (const Graph* g : graphs) {
    check_graph_shape(*g, c);
    total += g->A.rows();
    offsets->push_back(total);
  }
  b.X.resize(total, f);
  auto gcn = std::make_shared<ad::Propagation>();
  gcn->rows.resize(static_cast<std::size_t>(total));
  auto edges = std::make_shared<ad::EdgeList>();
  edges->nodes = total;
  std::vector<Eigen::RowVectorXd> edge_rows;
  b.a_target = Matrix::Zero(bsz, nmax * nmax);
  b.a_weight = Matrix::Zero(bsz, nmax * nmax);
  b.x_target = Matrix::Zero(bsz, nmax * f);
  b.x_weight = Matrix::Zero(bsz, nmax * f);
  b.e_target = Matrix::Zero(bsz, nmax * nmax * s);
  b.e_weight = Matrix::Zero(bsz, nmax * nmax * s);
  const double per_graph = 1.0 / static_cast<double>(bsz);
  std::vector<double> terms;
  for (Eigen::Index k = 0; k < bsz; ++k) {
    const Graph& g = *graphs[static_cast<std::size_t>(k)];
    const Eigen::Index n = g.A.rows();
    const Eigen::Index off = (*offsets)[static_cast<std::size_t>(k)];
    b.X.middleRows(off, n) = g.X;
    std::vector<double> deg(static_cast<std::size_t>(n));
    std::vector<double> rowsum(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      terms.clear();
      for (Eigen::Index j = 0; j < n; ++j) terms.push_back(g.A(i, j));
      rowsum[static_cast<std::size_t>(i)] = ad::detail::canonical_sum(terms);
      deg[static_cast<std::size_t>(i)] = 1.0 + rowsum[static_cast<std::size_t>(i)];
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      auto& row = gcn->rows[static_cast<std::size_t>(off + i)];
      row.push_back({off + i, 1.0 / deg[static_cast<std::size_t>(i)]});
      for (Eigen::Index j = 0; j < n; ++j) {
        const double a = g.A(i, j);
        if (a == 0.0) continue;
        row.push_back({off + j, a / std::sqrt(deg[static_cast<std::size_t>(i)] * deg[static_cast<std::size_t>(j)])});
        edges->edges.push_back({off + i, off + j, a / rowsum[static_cast<std::size_t>(i)]});
        edge_rows.push_back(g.edge(j, i));
      }
    }
    const double inv_n2 = per_graph / static_cast<double>(n * n);
    const double inv_n = per_graph / static_cast<double>(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        b.a_target(k, i * nmax + j) = g.A(i, j);
        b.a_weight(k, i * nmax + j) = inv_n2;
        for (Eigen::Index q = 0; q < s; ++q) {
          b.e_target(k, (i * nmax + j) * s + q) = g.edge(i, j)[q];
          b.e_weight(k, (i * nmax + j) * s + q) = inv_n2;
        }
      }
      for (Eigen::Index q = 0; q < f; ++q) {
        b.x_target(k, i * f + q) = g.X(i, q);
        b.x_weight(k, i * f + q) = inv_n;
      }
    }
  }
  b.edge_attributes.resize(static_cast<Eigen::Index>(edge_rows.size()), s);
  for (std::size_t e = 0; e < edge_rows.size(); ++e) b.edge_attributes.row(static_cast<Eigen::Index>(e)) = edge_rows[e];
  b.offsets = std::move(offsets);
  b.gcn = std::move(gcn);
  b.edges = std::move(edges);
  return b;
}

// ---------------------------------------------------------------------------
// Model.

struct StepLosses {
  double reconstruction = 0.0;
  double discriminator = 0.0;  // zero in geometric mode, where the phase is skipped
  double generator = 0.0;
};

struct Reconstruction {
  Matrix A;  // N x N, entries in (0, 1)
  Matrix X;  // N x F
  Matrix E;  // (N*N) x S, row i*N + j holds E_ij
};

class AutoencoderModel {
 public:
  AutoencoderModel() = default;

  AutoencoderModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
    config_.validate();
    rng_.seed(derive_seed(seed_, "model-rng"));
    build(derive_seed(seed_, "init"));
  }

  const ModelConfig& config() const noexcept { return config_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const Ensemble& ensemble() const noexcept { return config_.encoder.ensemble; }
  std::vector<Parameter>& parameters() noexcept { return params_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }
  std::vector<ad::BatchNormState>& batch_norm_states() noexcept { return bn_; }
  const std::vector<ad::BatchNormState>& batch_norm_states() const noexcept { return bn_; }
  Rng& rng() noexcept { return rng_; }

  std::optional<AttributeMoments> moments;  // normalisation used on the training stream

  /// Binds parameters on a tape; groups listed in `trainable` become variables.
  std::vector<Var> bind(Tape& tape, std::initializer_list<ParamGroup> trainable) const {
    std::vector<Var> vars;
    vars.reserve(params_.size());
    for (const auto& p : params_) {
      const bool train = std::find(trainable.begin(), trainable.end(), p.group) != trainable.end();
      vars.push_back(train ? tape.variable(p.value) : tape.constant(p.value));
    }
    return vars;
  }

  /// Raw latent codes, B x c(d+1).
  Var encode_raw(Tape& tape, const std::vector<Var>& v, const GraphBatch& batch, bool training) {
    Var h = tape.constant(batch.X);
    for (std::size_t l = 0; l < conv_.size(); ++l) {
      const ConvLayer& c = conv_[l];
      if (config_.encoder.conv_kind == ConvKind::gcn) {
        h = ad::add_bias(ad::propagate(ad::matmul(h, v[c.w]), batch.gcn), v[c.b]);
      } else {
        Var e = tape.constant(batch.edge_attributes);
        Var k = ad::relu(ad::affine(e, v[c.k1w], v[c.k1b]));
        k = ad::relu(ad::affine(k, v[c.k2w], v[c.k2b]));
        k = ad::affine(k, v[c.k3w], v[c.k3b]);
        h = ad::add_bias(ad::ecc_aggregate(h, k, batch.edges, c.fout), v[c.b]);
      }
      if (config_.encoder.batch_norm) h = ad::batch_norm(h, v[c.gamma], v[c.beta], bn_[l], training);
      h = ad::relu(h);
      if (training && l + 1 < conv_.size()) h = ad::dropout(h, config_.encoder.dropout_rate, rng_);
    }
    Var gate = ad::sigmoid(ad::affine(h, v[pool_.wg], v[pool_.bg]));
    Var content = ad::tanh(ad::affine(h, v[pool_.wh], v[pool_.bh]));
    Var pooled = ad::segment_sum(ad::mul(gate, content), batch.offsets);
    std::vector<Var> blocks;
    for (const Head& hd : heads_) {
      blocks.push_back(ad::affine(ad::relu(ad::affine(pooled, v[hd.w1], v[hd.b1])), v[hd.w2], v[hd.b2]));
    }
    return blocks.size() == 1 ? blocks.front() : ad::concat_cols(blocks);
  }

  Var project(Var raw) const {
    std::vector<Var> blocks;
    const Ensemble& e = ensemble();
    for (std::size_t k = 0; k < e.size(); ++k) {
      Var block = ad::slice_cols(raw, static_cast<Eigen::Index>(e.offset(k)), static_cast<Eigen::Index>(e[k].ambient_dim()));
      blocks.push_back(project_rows(block, e[k].curvature));
    }
    return blocks.size() == 1 ? blocks.front() : ad::concat_cols(blocks);
  }

  struct DecoderOutput {
    Var a;  // probabilities, B x N^2
    Var x;  // B x N*F
    std::optional<Var> e;  // B x N^2*S
  };

  DecoderOutput decode(const std::vector<Var>& v, Var z_projected) const {
    if (static_cast<std::size_t>(z_projected.cols()) != ensemble().total_dim()) {
      throw DimensionError("decode: latent width differs from c(d+1)");
    }
    Var h = z_projected;
    for (const Dense& d : decoder_) h = ad::relu(ad::affine(h, v[d.w], v[d.b]));
    DecoderOutput out{ad::sigmoid(ad::affine(h, v[out_a_.w], v[out_a_.b])), ad::affine(h, v[out_x_.w], v[out_x_.b]),
                      std::nullopt};
    if (config_.edge_features > 0) out.e = ad::affine(h, v[out_e_.w], v[out_e_.b]);
    return out;
  }

  /// Batch-averaged reconstruction loss.
  Var reconstruction_loss(const DecoderOutput& d, const GraphBatch& batch) const {
    Var loss = ad::binary_cross_entropy(d.a, batch.a_target, batch.a_weight);
    loss = ad::add(loss, ad::weighted_squared_error(d.x, batch.x_target, batch.x_weight));
    if (d.e) loss = ad::add(loss, ad::weighted_squared_error(*d.e, batch.e_target, batch.e_weight));
    return loss;
  }

  Var l2_penalty(const std::vector<Var>& v) const {
    Tape& tape = *v.front().tape;
    Var total = tape.constant(Matrix::Zero(1, 1));
    if (config_.encoder.l2_factor == 0.0) return total;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].regularised) total = ad::add(total, ad::sum_squares(v[i]));
    }
    return ad::scale(total, config_.encoder.l2_factor);
  }

  /// Discriminator probability that each row of z was drawn from the prior.
  Var discriminate(const std::vector<Var>& v, Var z) const {
    Var h = z;
    for (const Dense& d : disc_) h = ad::relu(ad::affine(h, v[d.w], v[d.b]));
    return ad::sigmoid(ad::affine(h, v[disc_out_.w], v[disc_out_.b]));
  }

  /// Concatenated prior samples, one row per requested sample.
  Matrix sample_prior_batch(std::size_t count) {
    const Ensemble& e = ensemble();
    Matrix out(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(e.total_dim()));
    for (std::size_t r = 0; r < count; ++r) {
      for (std::size_t k = 0; k < e.size(); ++k) {
        const CcmPoint p = sample_prior_point(e[k], rng_);
        out.block(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(e.offset(k)), 1, p.coords().size()) =
            p.coords().transpose();
      }
    }
    return out;
  }

  /// Prior-mode discriminator loss: prior samples labelled 1, codes labelled 0.
  Var discriminator_loss(const std::vector<Var>& v, Var z_fake, const Matrix& prior) const {
    Tape& tape = *z_fake.tape;
    Var real = tape.constant(prior);
    Var p = discriminate(v, ad::concat_rows(real, z_fake));
    const Eigen::Index nr = prior.rows();
    const Eigen::Index nf = z_fake.rows();
    Matrix target(nr + nf, 1);
    target.topRows(nr).setOnes();
    target.bottomRows(nf).setZero();
    Matrix w(nr + nf, 1);
    w.topRows(nr).setConstant(0.5 / static_cast<double>(nr));
    w.bottomRows(nf).setConstant(0.5 / static_cast<double>(nf));
    return ad::binary_cross_entropy(p, target, w);
  }

  /// Generator loss: -log D(z) against the discriminator in prior mode,
  /// -log(membership + eps) in geometric mode.
  Var generator_loss(const std::vector<Var>& v, Var z_raw) const {
    const Eigen::Index b = z_raw.rows();
    if (config_.discriminator == DiscriminatorKind::prior) {
      return ad::binary_cross_entropy(discriminate(v, z_raw), Matrix::Ones(b, 1),
                                      Matrix::Constant(b, 1, 1.0 / static_cast<double>(b)));
    }
    Var m = ensemble_membership(z_raw, ensemble(), config_.varsigma);
    return ad::scale(ad::mean(ad::log(ad::add_scalar(m, ad::kProbabilityClamp))), -1.0);
  }

  /// One reconstruction phase plus one regularisation phase on a batch.
  StepLosses adversarial_step(std::span<const Graph* const> graphs, std::size_t step_index) {
    const GraphBatch batch = make_batch(graphs, config_);
    StepLosses out;
    {
      Tape tape;
      auto v = bind(tape, {ParamGroup::encoder, ParamGroup::decoder});
      Var raw = encode_raw(tape, v, batch, true);
      Var loss = reconstruction_loss(decode(v, project(raw)), batch);
      out.reconstruction = loss.scalar();
      check_finite(out.reconstruction, "reconstruction", step_index);
      Var total = ad::add(loss, l2_penalty(v));
      tape.backward(total);
      apply(recon_opt_, v, {ParamGroup::encoder, ParamGroup::decoder});
    }
    if (config_.discriminator == DiscriminatorKind::prior) {
      Tape tape;
      auto v = bind(tape, {ParamGroup::discriminator});
      Var raw = tape.constant(encode_raw(tape, v, batch, true).value());
      Var loss = discriminator_loss(v, raw, sample_prior_batch(graphs.size()));
      out.discriminator = loss.scalar();
      check_finite(out.discriminator, "discriminator", step_index);
      tape.backward(loss);
      apply(disc_opt_, v, {ParamGroup::discriminator});
    }
    {
      Tape tape;
      auto v = bind(tape, {ParamGroup::encoder});
      Var loss = generator_loss(v, encode_raw(tape, v, batch, true));
      out.generator = loss.scalar();
      check_finite(out.generator, "generator", step_index);
      tape.backward(loss);
      apply(gen_opt_, v, {ParamGroup::encoder});
    }
    return out;
  }

  /// Mean reconstruction loss over graphs, inference mode.
  double evaluate_reconstruction(std::span<const Graph* const> graphs, std::size_t batch_size = 256) {
    double total = 0.0;
    for (std::size_t lo = 0; lo < graphs.size(); lo += batch_size) {
      const auto part = graphs.subspan(lo, std::min(batch_size, graphs.size() - lo));
      const GraphBatch batch = make_batch(part, config_);
      Tape tape;
      auto v = bind(tape, {});
      Var loss = reconstruction_loss(decode(v, project(encode_raw(tape, v, batch, false))), batch);
      total += loss.scalar() * static_cast<double>(part.size());
    }
    return total / static_cast<double>(graphs.size());
  }

  /// Inference-mode embeddings; each graph's result is independent of the
  /// other graphs in the batch.
  std::vector<Embedding> encode(std::span<const Graph* const> graphs, std::size_t batch_size = 256) {
    std::vector<Embedding> out;
    out.reserve(graphs.size());
    const Ensemble& e = ensemble();
    for (std::size_t lo = 0; lo < graphs.size(); lo += batch_size) {
      const auto part = graphs.subspan(lo, std::min(batch_size, graphs.size() - lo));
      const GraphBatch batch = make_batch(part, config_);
      Tape tape;
      auto v = bind(tape, {});
      const Matrix raw = encode_raw(tape, v, batch, false).value();
      for (Eigen::Index r = 0; r < raw.rows(); ++r) {
        Embedding emb;
        emb.raw = raw.row(r).transpose();
        for (std::size_t k = 0; k < e.size(); ++k) {
          const Vector block = emb.raw.segment(static_cast<Eigen::Index>(e.offset(k)),
                                               static_cast<Eigen::Index>(e[k].ambient_dim()));
          try {
            if (!block.allFinite()) throw GeometryError("non-finite embedding");
            emb.projected.push_back(model_projection(e[k].curvature, block));
          } catch (const GeometryError& err) {
            throw GeometryError("graph " + std::to_string(lo + static_cast<std::size_t>(r)) + ": " + err.what());
          }
        }
        out.push_back(std::move(emb));
      }
    }
    return out;
  }

  Embedding encode(const Graph& g) {
    const Graph* p = &g;
    return encode(std::span<const Graph* const>(&p, 1)).front();
  }

  std::vector<Embedding> encode(const GraphStream& s, std::size_t batch_size = 256) {
    std::vector<const Graph*> ptrs;
    for (const auto& g : s.graphs) ptrs.push_back(&g);
    return encode(ptrs, batch_size);
  }

  Reconstruction reconstruct(const Embedding& z) {
    Tape tape;
    auto v = bind(tape, {});
    Matrix flat(1, static_cast<Eigen::Index>(ensemble().total_dim()));
    for (std::size_t k = 0; k < z.projected.size(); ++k) {
      flat.block(0, static_cast<Eigen::Index>(ensemble().offset(k)), 1, z.projected[k].coords().size()) =
          z.projected[k].coords().transpose();
    }
    const auto d = decode(v, tape.constant(flat));
    const Eigen::Index n = config_.max_nodes;
    const Eigen::Index f = config_.node_features;
    const Eigen::Index s = config_.edge_features;
    Reconstruction r;
    r.A = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(d.a.value().data(), n, n);
    r.X = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(d.x.value().data(), n, f);
    r.E = Matrix::Zero(n * n, s);
    if (d.e) {
      r.E = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(d.e->value().data(),
                                                                                                    n * n, s);
    }
    return r;
  }

  void reset_optimisers() {
    recon_opt_ = ad::Adam(ad::AdamOptions{config_.learning_rate});
    disc_opt_ = ad::Adam(ad::AdamOptions{config_.learning_rate});
    gen_opt_ = ad::Adam(ad::AdamOptions{config_.learning_rate});
  }

 private:
  struct Dense {
    std::size_t w = 0, b = 0;
  };
  struct ConvLayer {
    std::size_t w = 0, b = 0;
    std::size_t k1w = 0, k1b = 0, k2w = 0, k2b = 0, k3w = 0, k3b = 0;
    std::size_t gamma = 0, beta = 0;
    Eigen::Index fin = 0, fout = 0;
  };
  struct Pool {
    std::size_t wg = 0, bg = 0, wh = 0, bh = 0;
  };
  struct Head {
    std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0;
  };

  static void check_finite(double v, const char* what, std::size_t step) {
    if (!std::isfinite(v)) throw DivergenceError(std::string("non-finite ") + what + " loss", step);
  }

  void apply(ad::Adam& opt, const std::vector<Var>& v, std::initializer_list<ParamGroup> groups) {
    std::vector<Matrix*> ps;
    std::vector<const Matrix*> gs;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (std::find(groups.begin(), groups.end(), params_[i].group) == groups.end()) continue;
      ps.push_back(&params_[i].value);
      gs.push_back(&v[i].grad());
    }
    opt.step(ps, gs);
  }

  std::size_t add_param(std::string name, Matrix value, ParamGroup group, bool regularised = false) {
    params_.push_back(Parameter{std::move(name), std::move(value), group, regularised});
    return params_.size() - 1;
  }

  Matrix glorot(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Matrix m(fan_in, fan_out);
    for (Eigen::Index i = 0; i < fan_in; ++i) {
      for (Eigen::Index j = 0; j < fan_out; ++j) m(i, j) = uniform(rng, -limit, limit);
    }
    return m;
  }

  Dense dense(const std::string& name, Eigen::Index in, Eigen::Index out, ParamGroup group, Rng& rng,
              bool regularised = false) {
    Dense d;
    d.w = add_param(name + ".w", glorot(in, out, rng), group, regularised);
    d.b = add_param(name + ".b", Matrix::Zero(1, out), group);
    return d;
  }

  void build(std::uint64_t init_seed) {
    Rng rng(init_seed);
    const auto& enc = config_.encoder;
    Eigen::Index fin = config_.node_features;
    for (std::size_t l = 0; l < enc.conv_channels.size(); ++l) {
      const Eigen::Index fout = enc.conv_channels[l];
      const std::string name = "conv" + std::to_string(l);
      ConvLayer c;
      c.fin = fin;
      c.fout = fout;
      if (enc.conv_kind == ConvKind::gcn) {
        c.w = add_param(name + ".w", glorot(fin, fout, rng), ParamGroup::encoder, true);
      } else {
        const Eigen::Index kh = enc.kernel_hidden;
        const Dense k1 = dense(name + ".kernel0", config_.edge_features, kh, ParamGroup::encoder, rng, true);
        const Dense k2 = dense(name + ".kernel1", kh, kh, ParamGroup::encoder, rng, true);
        const Dense k3 = dense(name + ".kernel2", kh, fin * fout, ParamGroup::encoder, rng, true);
        c.k1w = k1.w, c.k1b = k1.b, c.k2w = k2.w, c.k2b = k2.b, c.k3w = k3.w, c.k3b = k3.b;
      }
      c.b = add_param(name + ".b", Matrix::Zero(1, fout), ParamGroup::encoder);
      if (enc.batch_norm) {
        c.gamma = add_param(name + ".bn_gamma", Matrix::Ones(1, fout), ParamGroup::encoder);
        c.beta = add_param(name + ".bn_beta", Matrix::Zero(1, fout), ParamGroup::encoder);
      }
      bn_.push_back(ad::BatchNormState{Eigen::RowVectorXd::Zero(fout), Eigen::RowVectorXd::Ones(fout)});
      conv_.push_back(c);
      fin = fout;
    }
    const Dense g = dense("pool.gate", fin, enc.pooling_channels, ParamGroup::encoder, rng);
    const Dense h = dense("pool.content", fin, enc.pooling_channels, ParamGroup::encoder, rng);
    pool_ = Pool{g.w, g.b, h.w, h.b};
    for (std::size_t k = 0; k < enc.ensemble.size(); ++k) {
      const std::string name = "head" + std::to_string(k);
      const Dense h1 = dense(name + ".hidden", enc.pooling_channels, enc.head_hidden, ParamGroup::encoder, rng);
      const Dense h2 = dense(name + ".out", enc.head_hidden,
                             static_cast<Eigen::Index>(enc.ensemble[k].ambient_dim()), ParamGroup::encoder, rng);
      heads_.push_back(Head{h1.w, h1.b, h2.w, h2.b});
    }
    Eigen::Index width = static_cast<Eigen::Index>(enc.ensemble.total_dim());
    for (std::size_t l = 0; l < config_.decoder_hidden.size(); ++l) {
      decoder_.push_back(dense("decoder" + std::to_string(l), width, config_.decoder_hidden[l], ParamGroup::decoder, rng));
      width = config_.decoder_hidden[l];
    }
    const Eigen::Index n = config_.max_nodes;
    out_a_ = dense("decoder.adjacency", width, n * n, ParamGroup::decoder, rng);
    out_x_ = dense("decoder.nodes", width, n * config_.node_features, ParamGroup::decoder, rng);
    if (config_.edge_features > 0) {
      out_e_ = dense("decoder.edges", width, n * n * config_.edge_features, ParamGroup::decoder, rng);
    }
    width = static_cast<Eigen::Index>(enc.ensemble.total_dim());
    for (std::size_t l = 0; l < config_.discriminator_hidden.size(); ++l) {
      disc_.push_back(dense("disc" + std::to_string(l), width, config_.discriminator_hidden[l], ParamGroup::discriminator, rng));
      width = config_.discriminator_hidden[l];
    }
    disc_out_ = dense("disc.out", width, 1, ParamGroup::discriminator, rng);
    reset_optimisers();
  }

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  Rng rng_;
  std::vector<Parameter> params_;
  std::vector<ad::BatchNormState> bn_;
  std::vector<ConvLayer> conv_;
  Pool pool_;
  std::vector<Head> heads_;
  std::vector<Dense> decoder_;
  Dense out_a_, out_x_, out_e_;
  std::vector<Dense> disc_;
  Dense disc_out_;
  ad::Adam recon_opt_, disc_opt_, gen_opt_;
};

// ---------------------------------------------------------------------------
// Training.

struct TrainOptions {
  double val_fraction = 0.1;
  int patience = 20;
  int max_epochs = 200;
  std::size_t batch_size = 128;
};

struct EpochRecord {
  int epoch = 0;
  double reconstruction = 0.0;  // mean over the epoch's batches
  double discriminator = 0.0;
  double generator = 0.0;
  double val_reconstruction = 0.0;
};

struct TrainHistory {
  double initial_val_loss = 0.0;
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t steps = 0;
};

/// Early-stopped adversarial training. The last val_fraction of the stream
/// is held out for validation; the model ends with the parameters of the
/// epoch with the lowest validation reconstruction loss.
inline TrainHistory train(AutoencoderModel& model, const GraphStream& stream, const TrainOptions& opt = {}) {
  if (!(opt.val_fraction > 0.0 && opt.val_fraction < 1.0)) throw ConfigError("validation fraction must lie in (0,1)");
  if (opt.patience < 0 || opt.max_epochs < 1 || opt.batch_size < 1) throw ConfigError("bad training options");
  const std::size_t total = stream.size();
  const auto n_val = static_cast<std::size_t>(std::ceil(opt.val_fraction * static_cast<double>(total)));
  if (n_val < 1 || n_val >= total) throw ConfigError("training stream too small for a validation split");
  const std::size_t n_train = total - n_val;
  std::vector<const Graph*> train_set, val_set;
  for (std::size_t i = 0; i < total; ++i) (i < n_train ? train_set : val_set).push_back(&stream.graphs[i]);

  TrainHistory history;
  history.initial_val_loss = model.evaluate_reconstruction(val_set);
  std::vector<Parameter> best = model.parameters();
  std::vector<ad::BatchNormState> best_bn = model.batch_norm_states();
  int since_best = 0;
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < opt.max_epochs; ++epoch) {
    shuffle(order, model.rng());
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t batches = 0;
    std::vector<const Graph*> batch;
    for (std::size_t lo = 0; lo < n_train; lo += opt.batch_size) {
      batch.clear();
      for (std::size_t i = lo; i < std::min(n_train, lo + opt.batch_size); ++i) batch.push_back(train_set[order[i]]);
      const StepLosses l = model.adversarial_step(batch, history.steps++);
      rec.reconstruction += l.reconstruction;
      rec.discriminator += l.discriminator;
      rec.generator += l.generator;
      ++batches;
    }
    rec.reconstruction /= static_cast<double>(batches);
    rec.discriminator /= static_cast<double>(batches);
    rec.generator /= static_cast<double>(batches);
    rec.val_reconstruction = model.evaluate_reconstruction(val_set);
    if (!std::isfinite(rec.val_reconstruction)) throw DivergenceError("non-finite validation loss", history.steps);
    history.epochs.push_back(rec);
    if (rec.val_reconstruction < history.best_val_loss) {
      history.best_val_loss = rec.val_reconstruction;
      history.best_epoch = epoch;
      best = model.parameters();
      best_bn = model.batch_norm_states();
      since_best = 0;
    } else {
      ++since_best;
    }
    if (since_best >= opt.patience) break;
  }
  model.parameters() = std::move(best);
  model.batch_norm_states() = std::move(best_bn);
  return history;
}

// ---------------------------------------------------------------------------
// Checkpoints.

inline constexpr int kModelFormatVersion = 1;

inline nlohmann::json ensemble_to_json(const Ensemble& e) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& m : e) out.push_back({{"kappa", m.curvature.value()}, {"dim", m.dim}});
  return out;
}

inline Ensemble ensemble_from_json(const nlohmann::json& j) {
  std::vector<Manifold> members;
  for (const auto& m : j) members.push_back(Manifold{Curvature(m.at("kappa").get<double>()), m.at("dim").get<int>()});
  return Ensemble(std::move(members));
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"conv_channels", c.encoder.conv_channels},
          {"pooling_channels", c.encoder.pooling_channels},
          {"head_hidden", c.encoder.head_hidden},
          {"kernel_hidden", c.encoder.kernel_hidden},
          {"ensemble", ensemble_to_json(c.encoder.ensemble)},
          {"conv", to_string(c.encoder.conv_kind)},
          {"l2_factor", c.encoder.l2_factor},
          {"batch_norm", c.encoder.batch_norm},
          {"dropout_rate", c.encoder.dropout_rate},
          {"decoder_hidden", c.decoder_hidden},
          {"discriminator_hidden", c.discriminator_hidden},
          {"discriminator", to_string(c.discriminator)},
          {"varsigma", c.varsigma},
          {"max_nodes", c.max_nodes},
          {"node_features", c.node_features},
          {"edge_features", c.edge_features},
          {"learning_rate", c.learning_rate}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.encoder.conv_channels = j.at("conv_channels").get<std::vector<int>>();
  c.encoder.pooling_channels = j.at("pooling_channels").get<int>();
  c.encoder.head_hidden = j.at("head_hidden").get<int>();
  c.encoder.kernel_hidden = j.at("kernel_hidden").get<int>();
  c.encoder.ensemble = ensemble_from_json(j.at("ensemble"));
  c.encoder.conv_kind = parse_conv_kind(j.at("conv").get<std::string>());
  c.encoder.l2_factor = j.at("l2_factor").get<double>();
  c.encoder.batch_norm = j.at("batch_norm").get<bool>();
  c.encoder.dropout_rate = j.at("dropout_rate").get<double>();
  c.decoder_hidden = j.at("decoder_hidden").get<std::vector<int>>();
  c.discriminator_hidden = j.at("discriminator_hidden").get<std::vector<int>>();
  c.discriminator = parse_discriminator_kind(j.at("discriminator").get<std::string>());
  c.varsigma = j.at("varsigma").get<double>();
  c.max_nodes = j.at("max_nodes").get<int>();
  c.node_features = j.at("node_features").get<int>();
  c.edge_features = j.at("edge_features").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  return c;
}

inline nlohmann::json model_to_json(const AutoencoderModel& m) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : m.parameters()) params.push_back({{"name", p.name}, {"tensor", matrix_to_json(p.value)}});
  nlohmann::json bn = nlohmann::json::array();
  for (const auto& s : m.batch_norm_states()) {
    bn.push_back({{"mean", matrix_to_json(s.running_mean)}, {"var", matrix_to_json(s.running_var)}});
  }
  nlohmann::json j = {{"format", "ccmcd-model"},
                      {"version", kModelFormatVersion},
                      {"seed", m.seed()},
                      {"config", model_config_to_json(m.config())},
                      {"parameters", std::move(params)},
                      {"batch_norm", std::move(bn)}};
  j["moments"] = m.moments ? moments_to_json(*m.moments) : nlohmann::json(nullptr);
  return j;
}

inline AutoencoderModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "ccmcd-model") throw IoError("not a model checkpoint");
    if (j.at("version").get<int>() != kModelFormatVersion) {
      throw IoError("model checkpoint version " + j.at("version").dump() + " is not supported");
    }
    AutoencoderModel m(model_config_from_json(j.at("config")), j.at("seed").get<std::uint64_t>());
    const auto& params = j.at("parameters");
    if (params.size() != m.parameters().size()) throw IoError("model checkpoint parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = m.parameters()[i];
      if (params[i].at("name") != p.name) throw IoError("model checkpoint parameter name mismatch at " + p.name);
      Matrix v = matrix_from_json(params[i].at("tensor"));
      if (v.rows() != p.value.rows() || v.cols() != p.value.cols()) throw IoError("shape mismatch for " + p.name);
      p.value = std::move(v);
    }
    const auto& bn = j.at("batch_norm");
    if (bn.size() != m.batch_norm_states().size()) throw IoError("model checkpoint batch-norm count mismatch");
    for (std::size_t i = 0; i < bn.size(); ++i) {
      m.batch_norm_states()[i].running_mean = matrix_from_json(bn[i].at("mean"));
      m.batch_norm_states()[i].running_var = matrix_from_json(bn[i].at("var"));
    }
    if (!j.at("moments").is_null()) m.moments = moments_from_json(j.at("moments"));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt model checkpoint: ") + e.what());
  }
}

inline void save_model(const std::string& path, const AutoencoderModel& m) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << model_to_json(m).dump() << '\n';
}

inline AutoencoderModel load_model(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt model checkpoint " + path + ": " + e.what());
  }
  return model_from_json(j);
}

}  // namespace ccmcd
