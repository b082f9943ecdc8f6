#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace taillab {

class StatsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One completed request, decomposed. Durations in nanoseconds;
/// completion offset relative to scenario start.
struct LatencySample {
  uint64_t sojourn_ns = 0;
  uint64_t queue_ns = 0;    // service_start - server_recv
  uint64_t service_ns = 0;  // service_end - service_start
  double completion_offset_s = 0;
  uint64_t client_id = 0;
  uint32_t server_id = 0;
};

/// Nearest-rank percentile: the ceil(q*n)-th order statistic, q in (0,1].
template <typename T>
T percentile(std::vector<T> values, double q) {
  if (values.empty()) throw StatsError("percentile of empty sample");
  if (!(q > 0.0) || q > 1.0) {
    throw StatsError("percentile q must be in (0,1], got " + std::to_string(q));
  }
  std::sort(values.begin(), values.end());
  size_t rank = static_cast<size_t>(
      std::ceil(q * static_cast<double>(values.size())));
  if (rank < 1) rank = 1;
  return values[rank - 1];
}

struct LatencySummary {
  size_t n = 0;
  double mean_ms = 0;
  double p95_ms = 0;
  double p99_ms = 0;
  double min_ms = 0;
  double max_ms = 0;
};

struct Window {
  double start_s = 0;
  double end_s = 0;  // half-open [start, end)
};

/// Summary statistics over the samples whose completion offset falls in
/// the window (whole input when no window given). Empty selection yields
/// nullopt, the explicit empty-window marker.
inline std::optional<LatencySummary> summarize(
    std::span<const LatencySample> samples,
    std::optional<Window> window = std::nullopt) {
  std::vector<double> ms;
  ms.reserve(samples.size());
  for (const auto& s : samples) {
    if (window && (s.completion_offset_s < window->start_s ||
                   s.completion_offset_s >= window->end_s)) {
      continue;
    }
    ms.push_back(static_cast<double>(s.sojourn_ns) / 1e6);
  }
  if (ms.empty()) return std::nullopt;
  LatencySummary out;
  out.n = ms.size();
  double sum = 0, mn = ms[0], mx = ms[0];
  for (double v : ms) {
    sum += v;
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  out.mean_ms = sum / static_cast<double>(ms.size());
  out.min_ms = mn;
  out.max_ms = mx;
  out.p95_ms = percentile(ms, 0.95);
  out.p99_ms = percentile(std::move(ms), 0.99);
  // min <= mean <= max and p95 <= p99 <= max hold by construction; keep a
  // cheap runtime check so corrupted inputs surface early.
  if (!(out.min_ms <= out.mean_ms && out.mean_ms <= out.max_ms &&
        out.p95_ms <= out.p99_ms && out.p99_ms <= out.max_ms)) {
    throw StatsError("latency summary ordering violated (NaN input?)");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Student-t machinery. p-values come from the regularized incomplete beta
// function evaluated with the Lentz continued fraction; no external
// statistics dependency.
// ---------------------------------------------------------------------------

namespace detail {

inline double incomplete_beta_cf(double a, double b, double x) {
  // Continued fraction for I_x(a,b), Lentz's method.
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;
  double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; m++) {
    double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1].
inline double regularized_incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                    a * std::log(x) + b * std::log1p(-x);
  double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * detail::incomplete_beta_cf(a, b, x) / a;
  }
  return 1.0 - front * detail::incomplete_beta_cf(b, a, 1.0 - x) / b;
}

/// Two-sided p-value of a t statistic with (possibly fractional) dof.
inline double student_t_two_sided_p(double t, double dof) {
  if (dof <= 0) throw StatsError("t-distribution dof must be > 0");
  double x = dof / (dof + t * t);
  return regularized_incomplete_beta(dof / 2.0, 0.5, x);
}

/// Upper quantile t such that P(T <= t) = prob, for prob in (0.5, 1).
inline double student_t_quantile(double prob, double dof) {
  if (!(prob > 0.5 && prob < 1.0)) {
    throw StatsError("student_t_quantile expects prob in (0.5, 1)");
  }
  // P(T <= t) = 1 - p2(t)/2 with p2 the two-sided p-value.
  double target_p2 = 2.0 * (1.0 - prob);
  double lo = 0.0, hi = 1.0;
  while (student_t_two_sided_p(hi, dof) > target_p2) hi *= 2.0;
  for (int i = 0; i < 200; i++) {
    double mid = 0.5 * (lo + hi);
    if (student_t_two_sided_p(mid, dof) > target_p2) lo = mid;
    else hi = mid;
  }
  return 0.5 * (lo + hi);
}

struct TTestResult {
  double t_statistic = 0;
  double degrees_of_freedom = 0;
  double p_value = 1;
  bool reject_at_0_05 = false;
};

namespace detail {

struct MeanVar {
  double mean = 0;
  double var = 0;  // sample variance, n-1 denominator
  size_t n = 0;
};

inline MeanVar mean_var(std::span<const double> xs) {
  MeanVar mv;
  mv.n = xs.size();
  double sum = 0;
  for (double v : xs) sum += v;
  mv.mean = sum / static_cast<double>(mv.n);
  double ss = 0;
  for (double v : xs) ss += (v - mv.mean) * (v - mv.mean);
  mv.var = mv.n > 1 ? ss / static_cast<double>(mv.n - 1) : 0.0;
  return mv;
}

}  // namespace detail

/// Welch's two-sample t-test (unequal variances), two-sided, with
/// Welch-Satterthwaite degrees of freedom.
inline TTestResult welch_t(std::span<const double> x,
                           std::span<const double> y) {
  if (x.size() < 2 || y.size() < 2) {
    throw StatsError("welch_t requires at least 2 samples per side");
  }
  auto mx = detail::mean_var(x);
  auto my = detail::mean_var(y);
  double vx = mx.var / static_cast<double>(mx.n);
  double vy = my.var / static_cast<double>(my.n);
  TTestResult r;
  if (vx + vy == 0.0) {
    if (mx.mean == my.mean) {
      r.t_statistic = 0.0;
      r.degrees_of_freedom =
          static_cast<double>(mx.n + my.n - 2);
      r.p_value = 1.0;
      r.reject_at_0_05 = false;
      return r;
    }
    throw StatsError("welch_t: zero variance with unequal means");
  }
  r.t_statistic = (mx.mean - my.mean) / std::sqrt(vx + vy);
  r.degrees_of_freedom =
      (vx + vy) * (vx + vy) /
      (vx * vx / static_cast<double>(mx.n - 1) +
       vy * vy / static_cast<double>(my.n - 1));
  r.p_value = student_t_two_sided_p(r.t_statistic, r.degrees_of_freedom);
  r.reject_at_0_05 = r.p_value < 0.05;
  return r;
}

/// Student-t confidence interval for the mean: mean +/- t*(n-1) * s/sqrt(n).
inline std::pair<double, double> confidence_interval(
    std::span<const double> values, double level = 0.95) {
  if (values.size() < 2) {
    throw StatsError("confidence_interval requires n >= 2");
  }
  auto mv = detail::mean_var(values);
  double half = 0.0;
  if (mv.var > 0.0) {
    double tstar = student_t_quantile(0.5 + level / 2.0,
                                      static_cast<double>(mv.n - 1));
    half = tstar * std::sqrt(mv.var / static_cast<double>(mv.n));
  }
  return {mv.mean - half, mv.mean + half};
}

enum class Metric { kMean, kP95, kP99 };

inline const char* metric_name(Metric m) {
  switch (m) {
    case Metric::kMean: return "mean";
    case Metric::kP95: return "p95";
    case Metric::kP99: return "p99";
  }
  return "?";
}

inline double metric_of(const LatencySummary& s, Metric m) {
  switch (m) {
    case Metric::kMean: return s.mean_ms;
    case Metric::kP95: return s.p95_ms;
    case Metric::kP99: return s.p99_ms;
  }
  return 0;
}

struct BoxplotRecord {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};

/// Distribution of one metric across repetitions, quartiles by
/// nearest-rank. Meant for cross-repetition variability plots.
inline BoxplotRecord boxplot_export(std::span<const LatencySummary> runs,
                                    Metric metric) {
  if (runs.size() < 5) {
    throw StatsError(
        "boxplot_export needs >= 5 repetitions (got " +
        std::to_string(runs.size()) + "); rerun with more repetitions");
  }
  std::vector<double> vals;
  vals.reserve(runs.size());
  for (const auto& r : runs) vals.push_back(metric_of(r, metric));
  BoxplotRecord b;
  b.min = *std::min_element(vals.begin(), vals.end());
  b.max = *std::max_element(vals.begin(), vals.end());
  b.q1 = percentile(vals, 0.25);
  b.median = percentile(vals, 0.50);
  b.q3 = percentile(vals, 0.75);
  return b;
}

}  // namespace taillab
