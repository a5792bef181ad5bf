#pragma once

// Run lengths between alarms and their separability across the change.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

#include "ccmcd/errors.hpp"

namespace ccmcd {

/// Run lengths in windows, split by the regime of their terminating alarm.
struct RunLengthSample {
  std::vector<double> nominal;
  std::vector<double> nonnominal;
};

/// Gaps between consecutive alarms, the first one measured from the stream
/// start. An alarm at window w is nominal iff w < boundary.
inline RunLengthSample run_lengths(const std::vector<std::size_t>& alarm_windows, std::size_t boundary) {
  RunLengthSample out;
  std::size_t prev = 0;
  for (std::size_t w : alarm_windows) {
    if (w <= prev) throw ConfigError("alarm windows must be strictly increasing and positive");
    (w < boundary ? out.nominal : out.nonnominal).push_back(static_cast<double>(w - prev));
    prev = w;
  }
  return out;
}

/// First window whose alarm counts as non-nominal for a change at graph index
/// tau: window w covers graphs [(w-1)n, wn), so alarms up to n*w <= tau are
/// raised on nominal data only.
inline std::size_t boundary_window(std::size_t tau, std::size_t n) { return tau / n + 1; }

/// Pairs (a, b) with a > b plus half the ties.
inline double mann_whitney_u(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw UndefinedMetricError("Mann-Whitney U needs two nonempty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  // For each a, count b strictly below and b equal via two pointers.
  double u = 0.0;
  std::size_t below = 0;
  std::size_t upto = 0;
  for (double x : a) {
    while (below < b.size() && b[below] < x) ++below;
    upto = std::max(upto, below);
    while (upto < b.size() && b[upto] <= x) ++upto;
    u += static_cast<double>(below) + 0.5 * static_cast<double>(upto - below);
  }
  return u;
}

/// U / (N0 N1): probability that a nominal run length exceeds a non-nominal one.
inline double auc_rl(const RunLengthSample& s) {
  if (s.nominal.empty() || s.nonnominal.empty()) {
    throw UndefinedMetricError("AUC_RL is undefined: a regime has no run lengths");
  }
  return mann_whitney_u(s.nominal, s.nonnominal) /
         (static_cast<double>(s.nominal.size()) * static_cast<double>(s.nonnominal.size()));
}

inline double average_run_length(const std::vector<double>& rls) {
  if (rls.empty()) throw UndefinedMetricError("average run length of an empty sample");
  return std::accumulate(rls.begin(), rls.end(), 0.0) / static_cast<double>(rls.size());
}

}  // namespace ccmcd
