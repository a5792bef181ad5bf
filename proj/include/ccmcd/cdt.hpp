#pragma once

// CUSUM change-detection tests on embedding streams. The stream is cut into
// non-overlapping windows of n embeddings; each window yields u-vectors
// (geodesic distances to the nominal Frechet mean for D-CDT, tangent
// coordinates of the log-map at that mean for R-CDT), a Mahalanobis local
// statistic s_w and a cumulative sum S_w that raises an alarm above h.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <ostream>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <Eigen/Dense>
#include <json.hpp>

#include "ccmcd/ensemble.hpp"
#include "ccmcd/errors.hpp"
#include "ccmcd/geometry.hpp"
#include "ccmcd/graph.hpp"
#include "ccmcd/neural.hpp"
#include "ccmcd/random.hpp"

namespace ccmcd {

enum class CdtVariant { distance, riemannian };
enum class CalibrationMode { chi2, empirical };

inline std::string to_string(CdtVariant v) { return v == CdtVariant::distance ? "D-CDT" : "R-CDT"; }
inline std::string to_string(CalibrationMode m) { return m == CalibrationMode::chi2 ? "chi2" : "empirical"; }

inline CdtVariant parse_cdt_variant(std::string_view s) {
  if (s == "D-CDT" || s == "d-cdt" || s == "dcdt" || s == "distance" || s == "D") return CdtVariant::distance;
  if (s == "R-CDT" || s == "r-cdt" || s == "rcdt" || s == "riemannian" || s == "R") return CdtVariant::riemannian;
  throw ConfigError("unknown CDT variant '" + std::string(s) + "'");
}

inline CalibrationMode parse_calibration_mode(std::string_view s) {
  if (s == "chi2") return CalibrationMode::chi2;
  if (s == "empirical") return CalibrationMode::empirical;
  throw ConfigError("unknown calibration mode '" + std::string(s) + "'");
}

inline constexpr std::size_t kMinTrainingWindows = 30;

struct DetectorConfig {
  double alpha = 0.01;
  std::optional<std::size_t> window_n;  // unset: ceil(0.001 * |train|)
  double q_quantile = 0.75;
  CdtVariant variant = CdtVariant::riemannian;
  CalibrationMode calibration = CalibrationMode::chi2;
  std::size_t mc_runs = 100'000;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0,1)");
    if (window_n && *window_n < 1) throw ConfigError("window size must be at least 1");
    if (!(q_quantile > 0.0 && q_quantile < 1.0)) throw ConfigError("q quantile must lie in (0,1)");
    if (mc_runs < 10'000) throw ConfigError("threshold calibration needs at least 1e4 Monte-Carlo runs");
  }
};

/// Window moments of one monitored u-stream.
struct UMoments {
  Vector mean;
  Matrix cov;      // per-sample covariance including the ridge
  Matrix cov_inv;
};

/// One CUSUM test: the members it monitors, its moments, drift and threshold.
struct CdtMember {
  std::vector<std::size_t> manifolds;  // ensemble members feeding this test
  UMoments moments;
  double q = 0.0;
  double h = 0.0;
  double alpha = 0.0;
  std::size_t dof() const { return static_cast<std::size_t>(moments.mean.size()); }
};

struct TrainedDetector {
  DetectorConfig config;
  Ensemble ensemble;
  std::size_t n = 1;
  std::vector<CcmPoint> mu0;      // Frechet mean per ensemble member
  std::vector<CdtMember> tests;   // one for D-CDT, c for R-CDT
};

// ---------------------------------------------------------------------------
// Scalar pieces.

/// s_w = (E[u] - mean_w)^T Cov[u]^{-1} (E[u] - mean_w).
inline double local_statistic(const UMoments& m, const Vector& window_mean) {
  if (window_mean.size() != m.mean.size()) throw DimensionError("local_statistic: dimension mismatch");
  const Vector diff = m.mean - window_mean;
  return diff.dot(m.cov_inv * diff);
}

/// Mean of a window of u-vectors (one per column) and its statistic.
inline double window_statistic(const UMoments& m, const Matrix& window) {
  if (window.rows() != m.mean.size()) throw DimensionError("local_statistic: dimension mismatch");
  const Vector mean = window.rowwise().mean();
  return local_statistic(m, mean);
}

struct CusumStep {
  double S = 0.0;
  bool alarm = false;
};

/// S_w = max(0, S_{w-1} + s_w - q); alarm iff S_w > h, after which S resets.
inline CusumStep cusum_update(double S, double s_w, double q, double h) {
  const double next = std::max(0.0, S + s_w - q);
  if (next > h) return {0.0, true};
  return {next, false};
}

/// Diagnostic bound h / (E[s_w | H1] - q) on the expected windows to detection.
inline double detection_delay_bound(double h, double expected_s1, double q) {
  if (!(expected_s1 > q)) throw ConfigError("change magnitude does not exceed the drift q; the test cannot detect it");
  return h / (expected_s1 - q);
}

/// n times the index of the first alarming window; windows count from 1.
inline std::optional<std::size_t> estimate_change_point(const std::vector<std::size_t>& alarm_windows, std::size_t n) {
  if (alarm_windows.empty()) return std::nullopt;
  return n * alarm_windows.front();
}

// ---------------------------------------------------------------------------
// Threshold calibration.

namespace detail {

/// Alarm rate per window of a CUSUM chain with reset over the given statistics.
inline double chain_alarm_rate(const std::vector<double>& s, double q, double h) {
  double S = 0.0;
  std::size_t alarms = 0;
  for (double v : s) {
    const CusumStep step = cusum_update(S, v, q, h);
    S = step.S;
    alarms += step.alarm ? 1 : 0;
  }
  return static_cast<double>(alarms) / static_cast<double>(s.size());
}

/// Smallest h on a bisection grid whose simulated alarm rate does not exceed
/// alpha. Common random numbers keep the rate a step function of h.
inline double calibrate_on_draws(const std::vector<double>& s, double q, double alpha) {
  if (chain_alarm_rate(s, q, 0.0) <= alpha) {
    throw CalibrationError("alpha " + std::to_string(alpha) +
                           " is not below the alarm rate at h = 0; no positive threshold reaches it");
  }
  double lo = 0.0;
  double hi = 1.0;
  while (chain_alarm_rate(s, q, hi) > alpha) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e12) throw CalibrationError("threshold search diverged");
  }
  for (int iter = 0; iter < 100 && hi - lo > 1e-12 * std::max(1.0, hi); ++iter) {
    const double mid = 0.5 * (lo + hi);
    (chain_alarm_rate(s, q, mid) > alpha ? lo : hi) = mid;
  }
  return hi;
}

inline double chi2_quantile(std::size_t dof, double p) {
  return boost::math::quantile(boost::math::chi_squared_distribution<double>(static_cast<double>(dof)), p);
}

}  // namespace detail

/// Draws of s_w = chi2_dof / n, generated as sums of squared normals.
inline std::vector<double> simulate_h0_statistics(std::size_t dof, std::size_t n, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> s(count);
  for (auto& v : s) {
    double x = 0.0;
    for (std::size_t k = 0; k < dof; ++k) {
      const double z = standard_normal(rng);
      x += z * z;
    }
    v = x / static_cast<double>(n);
  }
  return s;
}

/// Monte-Carlo threshold for a CUSUM on s_w = chi2_dof / n: the per-window
/// false-alarm rate of the chain with reset matches alpha.
inline double estimate_threshold(std::size_t dof, std::size_t n, double q, double alpha, std::size_t mc_runs,
                                 std::uint64_t seed) {
  if (dof < 1 || n < 1) throw ConfigError("estimate_threshold: dof and n must be positive");
  if (mc_runs < 10'000) throw ConfigError("estimate_threshold: need at least 1e4 Monte-Carlo runs");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("estimate_threshold: alpha must lie in (0,1)");
  return detail::calibrate_on_draws(simulate_h0_statistics(dof, n, mc_runs, seed), q, alpha);
}

/// Threshold calibrated on bootstrap draws of observed statistics.
inline double estimate_threshold_empirical(const std::vector<double>& observed, double q, double alpha,
                                           std::size_t mc_runs, std::uint64_t seed) {
  if (observed.empty()) throw CalibrationError("no training statistics to resample");
  Rng rng(seed);
  std::vector<double> s(mc_runs);
  for (auto& v : s) v = observed[uniform_index(rng, observed.size())];
  return detail::calibrate_on_draws(s, q, alpha);
}

// ---------------------------------------------------------------------------
// u-space.

/// u-vectors for one embedding: one column per test.
inline std::vector<Vector> u_vectors(const TrainedDetector& d, const Embedding& z) {
  if (z.projected.size() != d.ensemble.size()) throw DimensionError("embedding has the wrong number of blocks");
  std::vector<Vector> out;
  if (d.config.variant == CdtVariant::distance) {
    Vector u(static_cast<Eigen::Index>(d.ensemble.size()));
    for (std::size_t k = 0; k < d.ensemble.size(); ++k) u[static_cast<Eigen::Index>(k)] = geodesic_distance(d.mu0[k], z.projected[k]);
    out.push_back(std::move(u));
  } else {
    for (std::size_t k = 0; k < d.ensemble.size(); ++k) {
      out.push_back(tangent_coords(d.mu0[k], log_map(d.mu0[k], z.projected[k])));
    }
  }
  return out;
}

namespace detail {

inline UMoments window_moments(const std::vector<Vector>& window_means, std::size_t n) {
  const auto w = static_cast<Eigen::Index>(window_means.size());
  const Eigen::Index dim = window_means.front().size();
  Matrix m(dim, w);
  for (Eigen::Index i = 0; i < w; ++i) m.col(i) = window_means[static_cast<std::size_t>(i)];
  UMoments out;
  out.mean = m.rowwise().mean();
  const Matrix centred = m.colwise() - out.mean;
  // Window means have covariance Cov[u] / n.
  out.cov = static_cast<double>(n) * (centred * centred.transpose()) / static_cast<double>(w - 1);
  const double trace = out.cov.trace();
  const double ridge = trace > 0.0 ? 1e-6 * trace / static_cast<double>(dim) : 1e-6;
  out.cov += ridge * Matrix::Identity(dim, dim);
  Eigen::LLT<Matrix> llt(out.cov);
  if (llt.info() != Eigen::Success) throw CalibrationError("training covariance is singular even after the ridge");
  out.cov_inv = llt.solve(Matrix::Identity(dim, dim));
  out.cov_inv = 0.5 * (out.cov_inv + out.cov_inv.transpose());
  return out;
}

}  // namespace detail

inline std::size_t default_window(std::size_t train_size) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.001 * static_cast<double>(train_size))));
}

/// Configures the test on nominal training embeddings.
inline TrainedDetector fit_detector(const DetectorConfig& config, const Ensemble& ensemble,
                                    const std::vector<Embedding>& train) {
  config.validate();
  TrainedDetector d;
  d.config = config;
  d.ensemble = ensemble;
  d.n = config.window_n.value_or(default_window(train.size()));
  const std::size_t windows = train.size() / d.n;
  if (windows < kMinTrainingWindows) {
    throw ConfigError("need at least " + std::to_string(kMinTrainingWindows) + " training windows of " +
                      std::to_string(d.n) + " embeddings, got " + std::to_string(windows));
  }
  for (std::size_t k = 0; k < ensemble.size(); ++k) {
    std::vector<CcmPoint> pts;
    pts.reserve(train.size());
    for (const auto& z : train) {
      if (z.projected.size() != ensemble.size()) throw DimensionError("embedding has the wrong number of blocks");
      pts.push_back(z.projected[k]);
    }
    d.mu0.push_back(frechet_mean(pts).point);
  }
  const std::size_t c = ensemble.size();
  if (config.variant == CdtVariant::distance) {
    CdtMember t;
    for (std::size_t k = 0; k < c; ++k) t.manifolds.push_back(k);
    t.alpha = config.alpha;
    d.tests.push_back(std::move(t));
  } else {
    for (std::size_t k = 0; k < c; ++k) {
      CdtMember t;
      t.manifolds.push_back(k);
      t.alpha = config.alpha / static_cast<double>(c);  // Bonferroni
      d.tests.push_back(std::move(t));
    }
  }
  // Window means of the training u-stream, per test.
  std::vector<std::vector<Vector>> means(d.tests.size());
  for (std::size_t w = 0; w < windows; ++w) {
    std::vector<Vector> acc;
    for (std::size_t i = w * d.n; i < (w + 1) * d.n; ++i) {
      auto u = u_vectors(d, train[i]);
      if (acc.empty()) {
        acc = std::move(u);
      } else {
        for (std::size_t t = 0; t < acc.size(); ++t) acc[t] += u[t];
      }
    }
    for (std::size_t t = 0; t < acc.size(); ++t) means[t].push_back(acc[t] / static_cast<double>(d.n));
  }
  for (std::size_t t = 0; t < d.tests.size(); ++t) {
    CdtMember& m = d.tests[t];
    m.moments = detail::window_moments(means[t], d.n);
    const std::uint64_t seed = derive_seed(config.seed, "threshold-" + std::to_string(t));
    if (config.calibration == CalibrationMode::chi2) {
      m.q = detail::chi2_quantile(m.dof(), config.q_quantile) / static_cast<double>(d.n);
      m.h = estimate_threshold(m.dof(), d.n, m.q, m.alpha, config.mc_runs, seed);
    } else {
      std::vector<double> s;
      for (const auto& mean : means[t]) s.push_back(local_statistic(m.moments, mean));
      std::vector<double> sorted = s;
      std::sort(sorted.begin(), sorted.end());
      const auto idx = static_cast<std::size_t>(std::floor(config.q_quantile * static_cast<double>(sorted.size() - 1)));
      m.q = sorted[idx];
      m.h = estimate_threshold_empirical(s, m.q, m.alpha, config.mc_runs, seed);
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Operational phase.

struct TraceRow {
  std::size_t window = 0;  // 1-based
  std::size_t member = 0;
  double s = 0.0;
  double S = 0.0;
  bool alarm = false;
};

struct DetectorState {
  std::vector<double> S;                            // per test
  std::vector<std::vector<std::size_t>> member_alarms;
  std::vector<std::size_t> alarms;                  // windows where any test alarmed
  std::size_t windows = 0;
  std::optional<std::size_t> tau_hat;
};

struct DetectionRun {
  DetectorState state;
  std::vector<TraceRow> trace;
};

inline DetectorState initial_state(const TrainedDetector& d) {
  DetectorState s;
  s.S.assign(d.tests.size(), 0.0);
  s.member_alarms.resize(d.tests.size());
  return s;
}

/// Feeds one complete window of embeddings through every test.
inline void process_window(const TrainedDetector& d, DetectorState& state, std::span<const Embedding> window,
                           std::vector<TraceRow>* trace = nullptr) {
  if (window.size() != d.n) throw DimensionError("window must hold exactly n embeddings");
  const std::size_t w = ++state.windows;
  std::vector<Vector> acc;
  for (std::size_t i = 0; i < window.size(); ++i) {
    std::vector<Vector> u;
    try {
      u = u_vectors(d, window[i]);
    } catch (const GeometryError& e) {
      throw GeometryError("window " + std::to_string(w) + ", position " + std::to_string(i) + ": " + e.what());
    }
    if (acc.empty()) {
      acc = std::move(u);
    } else {
      for (std::size_t t = 0; t < acc.size(); ++t) acc[t] += u[t];
    }
  }
  bool any = false;
  for (std::size_t t = 0; t < d.tests.size(); ++t) {
    const CdtMember& m = d.tests[t];
    const double s = local_statistic(m.moments, Vector(acc[t] / static_cast<double>(d.n)));
    const CusumStep step = cusum_update(state.S[t], s, m.q, m.h);
    const double reported = step.alarm ? std::max(0.0, state.S[t] + s - m.q) : step.S;
    state.S[t] = step.S;
    if (step.alarm) state.member_alarms[t].push_back(w);
    any = any || step.alarm;
    if (trace) trace->push_back(TraceRow{w, t, s, reported, step.alarm});
  }
  if (any) {
    state.alarms.push_back(w);
    if (!state.tau_hat) state.tau_hat = w * d.n;
  }
}

/// Non-overlapping windows of n; a trailing partial window is dropped. The
/// trace reports S_w before the reset on alarming windows.
inline DetectionRun process_stream(const TrainedDetector& d, const std::vector<Embedding>& stream) {
  DetectionRun run;
  run.state = initial_state(d);
  const std::size_t windows = stream.size() / d.n;
  for (std::size_t w = 0; w < windows; ++w) {
    process_window(d, run.state, std::span<const Embedding>(stream.data() + w * d.n, d.n), &run.trace);
  }
  return run;
}

// ---------------------------------------------------------------------------
// Persistence.

inline constexpr int kDetectorFormatVersion = 1;

inline nlohmann::json detector_to_json(const TrainedDetector& d) {
  nlohmann::json mu = nlohmann::json::array();
  for (const auto& p : d.mu0) mu.push_back(std::vector<double>(p.coords().data(), p.coords().data() + p.coords().size()));
  nlohmann::json tests = nlohmann::json::array();
  for (const auto& t : d.tests) {
    tests.push_back({{"manifolds", t.manifolds},
                     {"mean", matrix_to_json(t.moments.mean)},
                     {"cov", matrix_to_json(t.moments.cov)},
                     {"cov_inv", matrix_to_json(t.moments.cov_inv)},
                     {"q", t.q},
                     {"h", t.h},
                     {"alpha", t.alpha}});
  }
  return {{"format", "ccmcd-detector"},
          {"version", kDetectorFormatVersion},
          {"variant", to_string(d.config.variant)},
          {"calibration", to_string(d.config.calibration)},
          {"alpha", d.config.alpha},
          {"q_quantile", d.config.q_quantile},
          {"mc_runs", d.config.mc_runs},
          {"seed", d.config.seed},
          {"n", d.n},
          {"ensemble", ensemble_to_json(d.ensemble)},
          {"mu0", std::move(mu)},
          {"tests", std::move(tests)}};
}

inline TrainedDetector detector_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "ccmcd-detector") throw IoError("not a detector checkpoint");
    if (j.at("version").get<int>() != kDetectorFormatVersion) {
      throw IoError("detector checkpoint version " + j.at("version").dump() + " is not supported");
    }
    TrainedDetector d;
    d.config.variant = parse_cdt_variant(j.at("variant").get<std::string>());
    d.config.calibration = parse_calibration_mode(j.at("calibration").get<std::string>());
    d.config.alpha = j.at("alpha").get<double>();
    d.config.q_quantile = j.at("q_quantile").get<double>();
    d.config.mc_runs = j.at("mc_runs").get<std::size_t>();
    d.config.seed = j.at("seed").get<std::uint64_t>();
    d.n = j.at("n").get<std::size_t>();
    d.config.window_n = d.n;
    d.ensemble = ensemble_from_json(j.at("ensemble"));
    const auto& mu = j.at("mu0");
    if (mu.size() != d.ensemble.size()) throw IoError("detector checkpoint: mean count differs from ensemble size");
    for (std::size_t k = 0; k < mu.size(); ++k) {
      const auto v = mu[k].get<std::vector<double>>();
      d.mu0.emplace_back(d.ensemble[k].curvature, Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    for (const auto& t : j.at("tests")) {
      CdtMember m;
      m.manifolds = t.at("manifolds").get<std::vector<std::size_t>>();
      m.moments.mean = matrix_from_json(t.at("mean"));
      m.moments.cov = matrix_from_json(t.at("cov"));
      m.moments.cov_inv = matrix_from_json(t.at("cov_inv"));
      m.q = t.at("q").get<double>();
      m.h = t.at("h").get<double>();
      m.alpha = t.at("alpha").get<double>();
      d.tests.push_back(std::move(m));
    }
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt detector checkpoint: ") + e.what());
  }
}

inline void save_detector(const std::string& path, const TrainedDetector& d) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << detector_to_json(d).dump(2) << '\n';
}

inline TrainedDetector load_detector(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt detector checkpoint " + path + ": " + e.what());
  }
  return detector_from_json(j);
}

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
  os << "window_index,member,s_w,S_w,alarm\n";
  char buf[64];
  for (const auto& r : trace) {
    os << r.window << ',' << r.member << ',';
    std::snprintf(buf, sizeof buf, "%.17g", r.s);
    os << buf << ',';
    std::snprintf(buf, sizeof buf, "%.17g", r.S);
    os << buf << ',' << (r.alarm ? 1 : 0) << '\n';
  }
}

}  // namespace ccmcd
