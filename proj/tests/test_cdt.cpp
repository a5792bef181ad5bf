#include <cmath>
#include <sstream>

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include "ccmcd/cdt.hpp"
#include "ccmcd/metrics.hpp"

namespace ccmcd {
namespace {

Embedding flat_embedding(const Ensemble& e, const Vector& raw) {
  Embedding z;
  z.raw = raw;
  for (std::size_t k = 0; k < e.size(); ++k) {
    z.projected.emplace_back(e[k].curvature,
                             Vector(raw.segment(static_cast<Eigen::Index>(e.offset(k)), static_cast<Eigen::Index>(e[k].ambient_dim()))));
  }
  return z;
}

// Gaussian embeddings on flat members with a fixed, anisotropic covariance.
std::vector<Embedding> gaussian_stream(const Ensemble& e, std::size_t count, std::uint64_t seed, double shift = 0.0,
                                       double scale = 1.0) {
  Rng rng(seed);
  const auto dim = static_cast<Eigen::Index>(e.total_dim());
  Matrix mix = Matrix::Identity(dim, dim);
  for (Eigen::Index i = 0; i + 1 < dim; ++i) mix(i + 1, i) = 0.5;
  mix.diagonal() = Vector::LinSpaced(dim, 1.0, 2.0);
  std::vector<Embedding> out;
  for (std::size_t t = 0; t < count; ++t) {
    Vector g(dim);
    for (Eigen::Index i = 0; i < dim; ++i) g[i] = standard_normal(rng);
    Vector raw = scale * (mix * g + Vector::Constant(dim, 3.0 + shift));
    out.push_back(flat_embedding(e, raw));
  }
  return out;
}

DetectorConfig config(CdtVariant v, std::size_t n, std::uint64_t seed = 1) {
  DetectorConfig c;
  c.variant = v;
  c.window_n = n;
  c.seed = seed;
  return c;
}

TEST(LocalStatistic, Examples) {
  UMoments one{Vector::Zero(1), Matrix::Identity(1, 1), Matrix::Identity(1, 1)};
  EXPECT_EQ(local_statistic(one, Vector::Constant(1, 2.0)), 4.0);
  EXPECT_EQ(local_statistic(one, Vector::Zero(1)), 0.0);
  UMoments two{Vector::Zero(2), Matrix::Identity(2, 2), Matrix::Identity(2, 2)};
  EXPECT_EQ(local_statistic(two, (Vector(2) << 3.0, 4.0).finished()), 25.0);
  EXPECT_THROW(local_statistic(two, Vector::Zero(3)), DimensionError);
}

TEST(Cusum, Examples) {
  const double q = 0.7;
  auto s = cusum_update(0.0, q, q, 10.0);
  EXPECT_EQ(s.S, 0.0);
  EXPECT_FALSE(s.alarm);
  s = cusum_update(1.0, q + 2.0, q, 10.0);
  EXPECT_NEAR(s.S, 3.0, 1e-15);
  EXPECT_FALSE(s.alarm);
  s = cusum_update(9.0, q + 2.0, q, 10.0);
  EXPECT_TRUE(s.alarm);
  EXPECT_EQ(s.S, 0.0);
  EXPECT_EQ(cusum_update(0.5, 0.0, q, 10.0).S, 0.0);
}

TEST(ChangePoint, Examples) {
  EXPECT_EQ(estimate_change_point({7, 9}, 5), 35u);
  EXPECT_FALSE(estimate_change_point({}, 5).has_value());
  EXPECT_EQ(estimate_change_point({1}, 5), 5u);
}

TEST(DelayBound, Examples) {
  EXPECT_EQ(detection_delay_bound(10.0, 0.5 + 5.0, 0.5), 2.0);
  EXPECT_THROW(detection_delay_bound(10.0, 0.5, 0.5), ConfigError);
  EXPECT_DOUBLE_EQ(detection_delay_bound(10.0, 0.5 + 2.5, 0.5), 2.0 * detection_delay_bound(10.0, 0.5 + 5.0, 0.5));
}

// The chi-square(2) law has CDF 1 - exp(-x/2), so its p-quantile is -2 ln(1-p).
double chi2_2_quantile(double p) { return -2.0 * std::log(1.0 - p); }

TEST(Threshold, MonotoneReproducibleAndCalibrated) {
  const std::size_t n = 5;
  const double q = chi2_2_quantile(0.75) / n;
  const double h01 = estimate_threshold(2, n, q, 0.01, 100'000, 3);
  EXPECT_EQ(h01, estimate_threshold(2, n, q, 0.01, 100'000, 3));
  EXPECT_GT(estimate_threshold(2, n, q, 0.001, 100'000, 3), estimate_threshold(2, n, q, 0.05, 100'000, 3));
  // Independent H0 simulation with the returned threshold.
  const auto s = simulate_h0_statistics(2, n, 100'000, 99);
  double S = 0.0;
  std::size_t alarms = 0;
  for (double v : s) {
    const auto step = cusum_update(S, v, q, h01);
    S = step.S;
    alarms += step.alarm;
  }
  const double rate = static_cast<double>(alarms) / 1e5;
  EXPECT_GE(rate, 0.005);
  EXPECT_LE(rate, 0.02);
  EXPECT_THROW(estimate_threshold(2, n, q, 0.5, 100'000, 3), CalibrationError);
  EXPECT_THROW(estimate_threshold(2, n, q, 0.01, 100, 3), ConfigError);
}

TEST(Fit, RiemannianDriftMatchesChiSquareQuantile) {
  const Ensemble e = parse_ensemble("sphere");
  Rng rng(5);
  std::vector<Embedding> train;
  for (int i = 0; i < 3000; ++i) {
    const Vector t = (Vector(2) << 0.2 * standard_normal(rng), 0.3 * standard_normal(rng)).finished();
    const CcmPoint p = push_forward(e[0], t);
    train.push_back(Embedding{p.coords(), {p}});
  }
  for (std::size_t n : {5u, 100u}) {
    const TrainedDetector d = fit_detector(config(CdtVariant::riemannian, n), e, train);
    ASSERT_EQ(d.tests.size(), 1u);
    EXPECT_EQ(d.tests[0].dof(), 2u);
    EXPECT_NEAR(d.tests[0].q, chi2_2_quantile(0.75) / static_cast<double>(n), 1e-12);
    EXPECT_NEAR(d.tests[0].q * static_cast<double>(n), 2.7726, 1e-4);
    EXPECT_GT(d.tests[0].h, 0.0);
  }
}

TEST(Fit, DegenerateTrainingSetIsStillUsable) {
  const Ensemble e = parse_ensemble("hyperbolic");
  const CcmPoint p = push_forward(e[0], (Vector(2) << 0.3, -0.2).finished());
  std::vector<Embedding> train(200, Embedding{p.coords(), {p}});
  for (CdtVariant v : {CdtVariant::distance, CdtVariant::riemannian}) {
    const TrainedDetector d = fit_detector(config(v, 5), e, train);
    EXPECT_LT((d.mu0[0].coords() - p.coords()).norm(), 1e-6);
    const DetectionRun run = process_stream(d, train);
    EXPECT_EQ(run.trace.size(), 40u);
    for (const auto& r : run.trace) {
      EXPECT_NEAR(r.s, 0.0, 1e-12);
      EXPECT_EQ(r.S, 0.0);
    }
  }
  EXPECT_THROW(fit_detector(config(CdtVariant::distance, 10), e, train), ConfigError);
}

TEST(Process, ShortStreamAndPartialWindows) {
  const Ensemble e = parse_ensemble("flat");
  const auto train = gaussian_stream(e, 500, 1);
  const TrainedDetector d = fit_detector(config(CdtVariant::riemannian, 5), e, train);
  const auto op = gaussian_stream(e, 4, 2);
  const DetectionRun run = process_stream(d, op);
  EXPECT_TRUE(run.trace.empty());
  EXPECT_TRUE(run.state.alarms.empty());
  EXPECT_EQ(process_stream(d, gaussian_stream(e, 23, 2)).trace.size(), 4u);
}

// Direct Euclidean implementation: arithmetic mean, plain differences or
// norms, window moments with the same ridge.
std::vector<double> euclidean_statistics(const std::vector<Embedding>& train, const std::vector<Embedding>& op,
                                         std::size_t n, bool distances) {
  const Eigen::Index dim = train.front().raw.size();
  Vector mu = Vector::Zero(dim);
  for (const auto& z : train) mu += z.raw;
  mu /= static_cast<double>(train.size());
  auto u = [&](const Embedding& z) -> Vector {
    if (distances) return Vector::Constant(1, (z.raw - mu).norm());
    return z.raw - mu;
  };
  const std::size_t w = train.size() / n;
  std::vector<Vector> means;
  for (std::size_t i = 0; i < w; ++i) {
    Vector m = Vector::Zero(u(train[0]).size());
    for (std::size_t j = 0; j < n; ++j) m += u(train[i * n + j]);
    means.push_back(m / static_cast<double>(n));
  }
  const Eigen::Index k = means[0].size();
  Vector e = Vector::Zero(k);
  for (const auto& m : means) e += m;
  e /= static_cast<double>(w);
  Matrix cov = Matrix::Zero(k, k);
  for (const auto& m : means) cov += (m - e) * (m - e).transpose();
  cov *= static_cast<double>(n) / static_cast<double>(w - 1);
  cov += 1e-6 * cov.trace() / static_cast<double>(k) * Matrix::Identity(k, k);
  const Matrix inv = cov.inverse();
  std::vector<double> s;
  for (std::size_t i = 0; i < op.size() / n; ++i) {
    Vector m = Vector::Zero(k);
    for (std::size_t j = 0; j < n; ++j) m += u(op[i * n + j]);
    const Vector diff = e - m / static_cast<double>(n);
    s.push_back(diff.dot(inv * diff));
  }
  return s;
}

TEST(Process, FlatTestsAgreeWithEuclideanImplementation) {
  const Ensemble e = parse_ensemble("flat");
  const auto train = gaussian_stream(e, 1000, 3);
  const auto op = gaussian_stream(e, 300, 4, 0.5);
  for (CdtVariant v : {CdtVariant::distance, CdtVariant::riemannian}) {
    const TrainedDetector d = fit_detector(config(v, 5), e, train);
    const auto expected = euclidean_statistics(train, op, 5, v == CdtVariant::distance);
    const DetectionRun run = process_stream(d, op);
    ASSERT_EQ(run.trace.size(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
      EXPECT_NEAR(run.trace[i].s, expected[i], 1e-12 * std::max(1.0, expected[i])) << to_string(v) << " window " << i;
    }
  }
}

TEST(Process, StatisticIsScaleInvariant) {
  const Ensemble e = parse_ensemble("flat,flat");
  for (CdtVariant v : {CdtVariant::distance, CdtVariant::riemannian}) {
    const auto d1 = fit_detector(config(v, 5), e, gaussian_stream(e, 600, 5));
    const auto d2 = fit_detector(config(v, 5), e, gaussian_stream(e, 600, 5, 0.0, -7.5));
    const auto r1 = process_stream(d1, gaussian_stream(e, 400, 6, 0.8));
    const auto r2 = process_stream(d2, gaussian_stream(e, 400, 6, 0.8, -7.5));
    ASSERT_EQ(r1.trace.size(), r2.trace.size());
    for (std::size_t i = 0; i < r1.trace.size(); ++i) {
      EXPECT_NEAR(r1.trace[i].s, r2.trace[i].s, 1e-9 * std::max(1.0, r1.trace[i].s));
      EXPECT_EQ(r1.trace[i].alarm, r2.trace[i].alarm);
    }
  }
}

// Kolmogorov distribution tail, P(sqrt(m) D > x) for large m.
double kolmogorov_pvalue(double x) {
  double p = 0.0;
  for (int k = 1; k < 100; ++k) p += 2.0 * std::pow(-1.0, k - 1) * std::exp(-2.0 * k * k * x * x);
  return std::clamp(p, 0.0, 1.0);
}

TEST(Process, WindowStatisticFollowsChiSquareUnderH0) {
  Rng rng(8);
  const Eigen::Index dim = 3;
  Matrix a = Matrix::Random(dim, dim);
  UMoments m;
  m.mean = (Vector(dim) << 1.0, -2.0, 0.5).finished();
  m.cov = a * a.transpose() + Matrix::Identity(dim, dim);
  m.cov_inv = m.cov.inverse();
  const Matrix chol = m.cov.llt().matrixL();
  for (std::size_t n : {25u, 50u}) {
    std::vector<double> ns;
    for (int w = 0; w < 2000; ++w) {
      Vector sum = Vector::Zero(dim);
      for (std::size_t i = 0; i < n; ++i) {
        Vector g(dim);
        for (Eigen::Index j = 0; j < dim; ++j) g[j] = standard_normal(rng);
        sum += m.mean + chol * g;
      }
      ns.push_back(static_cast<double>(n) * local_statistic(m, Vector(sum / static_cast<double>(n))));
    }
    std::sort(ns.begin(), ns.end());
    const boost::math::chi_squared_distribution<double> chi(dim);
    double dmax = 0.0;
    for (std::size_t i = 0; i < ns.size(); ++i) {
      const double f = boost::math::cdf(chi, ns[i]);
      dmax = std::max({dmax, f - static_cast<double>(i) / ns.size(), static_cast<double>(i + 1) / ns.size() - f});
    }
    EXPECT_GT(kolmogorov_pvalue(std::sqrt(static_cast<double>(ns.size())) * dmax), 0.01) << "n " << n;
  }
}

TEST(Process, FalseAlarmRateUnderH0AndBonferroni) {
  for (const char* spec : {"flat", "flat,flat,flat"}) {
    const Ensemble e = parse_ensemble(spec, 1);
    const auto train = gaussian_stream(e, 50'000, 10);
    const TrainedDetector d = fit_detector(config(CdtVariant::riemannian, 5), e, train);
    for (const auto& t : d.tests) EXPECT_DOUBLE_EQ(t.alpha, 0.01 / static_cast<double>(e.size()));
    const DetectionRun run = process_stream(d, gaussian_stream(e, 500'000, 11));
    const double rate = static_cast<double>(run.state.alarms.size()) / static_cast<double>(run.state.windows);
    EXPECT_GE(rate, 0.005) << spec;
    EXPECT_LE(rate, e.size() == 1 ? 0.02 : 0.0125) << spec;
  }
}

TEST(Process, AlarmsResetAndChangePoint) {
  const Ensemble e = parse_ensemble("flat,sphere,hyperbolic");
  auto train = gaussian_stream(parse_ensemble("flat"), 600, 12);
  std::vector<Embedding> mixed;
  Rng rng(13);
  auto make = [&](double shift) {
    Embedding z;
    const Vector f = (Vector(3) << standard_normal(rng), standard_normal(rng), standard_normal(rng)).finished();
    z.projected.emplace_back(e[0].curvature, Vector(f.array() + shift));
    z.projected.push_back(push_forward(e[1], (Vector(2) << 0.1 * standard_normal(rng) + shift, 0.1 * standard_normal(rng)).finished()));
    z.projected.push_back(push_forward(e[2], (Vector(2) << 0.1 * standard_normal(rng), 0.1 * standard_normal(rng)).finished()));
    z.raw.resize(9);
    for (std::size_t k = 0; k < 3; ++k) z.raw.segment(3 * static_cast<Eigen::Index>(k), 3) = z.projected[k].coords();
    return z;
  };
  for (int i = 0; i < 600; ++i) mixed.push_back(make(0.0));
  std::vector<Embedding> op;
  for (int i = 0; i < 200; ++i) op.push_back(make(0.0));
  for (int i = 0; i < 200; ++i) op.push_back(make(1.0));
  for (CdtVariant v : {CdtVariant::distance, CdtVariant::riemannian}) {
    const TrainedDetector d = fit_detector(config(v, 5), e, mixed);
    EXPECT_EQ(d.tests.size(), v == CdtVariant::distance ? 1u : 3u);
    const DetectionRun run = process_stream(d, op);
    ASSERT_FALSE(run.state.alarms.empty());
    EXPECT_EQ(run.state.tau_hat, 5 * run.state.alarms.front());
    // Change at graph 200 (window 41); detection within ten windows.
    const bool detected = std::any_of(run.state.alarms.begin(), run.state.alarms.end(),
                                      [](std::size_t w) { return w >= 41 && w <= 50; });
    EXPECT_TRUE(detected) << to_string(v);
    for (const auto& r : run.trace) EXPECT_GE(r.S, 0.0);
    // After each alarm the alarming member restarts from zero.
    std::vector<double> S(d.tests.size(), 0.0);
    for (const auto& r : run.trace) {
      const auto step = cusum_update(S[r.member], r.s, d.tests[r.member].q, d.tests[r.member].h);
      EXPECT_EQ(step.alarm, r.alarm);
      S[r.member] = step.S;
    }
  }
}

TEST(Checkpoint, DetectorRoundTripReproducesTrace) {
  const Ensemble e = parse_ensemble("flat,flat");
  const auto train = gaussian_stream(e, 600, 20);
  const auto op = gaussian_stream(e, 400, 21, 0.4);
  const TrainedDetector d = fit_detector(config(CdtVariant::riemannian, 5), e, train);
  const TrainedDetector back = detector_from_json(nlohmann::json::parse(detector_to_json(d).dump()));
  const auto a = process_stream(d, op);
  const auto b = process_stream(back, op);
  std::ostringstream ca, cb;
  write_trace_csv(ca, a.trace);
  write_trace_csv(cb, b.trace);
  EXPECT_EQ(ca.str(), cb.str());
  EXPECT_EQ(ca.str().substr(0, ca.str().find('\n')), "window_index,member,s_w,S_w,alarm");
  auto j = detector_to_json(d);
  j["version"] = 2;
  EXPECT_THROW(detector_from_json(j), IoError);
}

TEST(Metrics, ArlUnderH0IsInverseAlpha) {
  const std::size_t n = 5;
  const double q = chi2_2_quantile(0.75) / n;
  const double h = estimate_threshold(2, n, q, 0.01, 100'000, 4);
  const auto s = simulate_h0_statistics(2, n, 200'000, 5);
  std::vector<std::size_t> alarms;
  double S = 0.0;
  for (std::size_t w = 0; w < s.size(); ++w) {
    const auto step = cusum_update(S, s[w], q, h);
    S = step.S;
    if (step.alarm) alarms.push_back(w + 1);
  }
  const RunLengthSample rl = run_lengths(alarms, s.size() + 1);
  EXPECT_TRUE(rl.nonnominal.empty());
  EXPECT_NEAR(average_run_length(rl.nominal), 100.0, 25.0);
}

}  // namespace
}  // namespace ccmcd
