#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "taillab/stats.hpp"

using namespace taillab;
using Catch::Matchers::ContainsSubstring;

namespace {

// ---------------------------------------------------------------------------
// Independent oracles. These deliberately share no code with the library:
// percentile by explicit sort-and-index, and the Student-t tail probability
// by adaptive Simpson integration of the density in long double. The library
// uses the regularized incomplete beta instead, so agreement is meaningful.
// ---------------------------------------------------------------------------

double percentile_oracle(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  auto rank = static_cast<size_t>(std::ceil(q * static_cast<double>(v.size())));
  if (rank < 1) rank = 1;
  if (rank > v.size()) rank = v.size();
  return v[rank - 1];
}

long double t_pdf(long double x, long double dof) {
  long double log_c = std::lgamma((dof + 1.0L) / 2.0L) -
                      std::lgamma(dof / 2.0L) -
                      0.5L * std::log(dof * 3.14159265358979323846264338327950L);
  return std::exp(log_c - (dof + 1.0L) / 2.0L * std::log1p(x * x / dof));
}

long double simpson(long double fa, long double fm, long double fb,
                    long double a, long double b) {
  return (b - a) / 6.0L * (fa + 4.0L * fm + fb);
}

template <typename F>
long double adaptive_simpson(const F& f, long double a, long double b,
                             long double fa, long double fm, long double fb,
                             long double whole, long double tol, int depth) {
  long double m = (a + b) / 2.0L;
  long double lm = (a + m) / 2.0L, rm = (m + b) / 2.0L;
  long double flm = f(lm), frm = f(rm);
  long double left = simpson(fa, flm, fm, a, m);
  long double right = simpson(fm, frm, fb, m, b);
  long double delta = left + right - whole;
  if (depth <= 0 || std::fabs(delta) <= 15.0L * tol) {
    return left + right + delta / 15.0L;
  }
  return adaptive_simpson(f, a, m, fa, flm, fm, left, tol / 2.0L, depth - 1) +
         adaptive_simpson(f, m, b, fm, frm, fb, right, tol / 2.0L, depth - 1);
}

template <typename F>
long double integrate(const F& f, long double a, long double b,
                      long double tol) {
  long double fa = f(a), fb = f(b), fm = f((a + b) / 2.0L);
  long double whole = simpson(fa, fm, fb, a, b);
  return adaptive_simpson(f, a, b, fa, fm, fb, whole, tol, 60);
}

// Two-sided p-value for Student's t: 2 * integral of the density from |t|
// to infinity, mapped onto u in [0,1) via x = |t| + u/(1-u).
double t_two_sided_p_oracle(double t, double dof) {
  long double at = std::fabs(static_cast<long double>(t));
  long double nu = dof;
  auto f = [&](long double u) {
    long double om = 1.0L - u;
    long double x = at + u / om;
    return t_pdf(x, nu) / (om * om);
  };
  long double tail = integrate(f, 0.0L, 1.0L - 1e-8L, 1e-14L);
  long double p = 2.0L * tail;
  if (p > 1.0L) p = 1.0L;
  return static_cast<double>(p);
}

std::vector<LatencySample> samples_ms(std::initializer_list<double> ms) {
  std::vector<LatencySample> out;
  for (double v : ms) {
    LatencySample s;
    s.sojourn_ns = static_cast<uint64_t>(v * 1e6);
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST_CASE("nearest-rank percentile on pinned inputs") {
  std::vector<double> grid;
  for (int i = 1; i <= 100; i++) grid.push_back(i);
  REQUIRE(percentile(grid, 0.95) == 95.0);
  REQUIRE(percentile(grid, 0.99) == 99.0);
  REQUIRE(percentile(grid, 1.0) == 100.0);

  std::vector<double> twenty;
  for (int i = 1; i <= 20; i++) twenty.push_back(i);
  REQUIRE(percentile(twenty, 0.99) == 20.0);  // ceil(19.8) = 20th

  std::vector<double> one{42.5};
  REQUIRE(percentile(one, 0.01) == 42.5);
  REQUIRE(percentile(one, 0.5) == 42.5);
  REQUIRE(percentile(one, 1.0) == 42.5);

  // Order of the input must not matter.
  std::vector<double> shuffled{30.0, 10.0, 20.0};
  REQUIRE(percentile(shuffled, 0.5) == 20.0);

  REQUIRE_THROWS_AS(percentile(std::vector<double>{}, 0.5), StatsError);
  REQUIRE_THROWS_AS(percentile(std::vector<double>{1.0}, 0.0), StatsError);
  REQUIRE_THROWS_AS(percentile(std::vector<double>{1.0}, 1.5), StatsError);
  REQUIRE_THROWS_AS(percentile(std::vector<double>{1.0}, -0.1), StatsError);
}

TEST_CASE("percentile matches brute-force selection on 1000 random inputs") {
  std::mt19937_64 rng(1337);
  std::uniform_int_distribution<size_t> n_dist(1, 400);
  std::uniform_int_distribution<int> q_mille(1, 1000);
  std::uniform_real_distribution<double> val(0.0, 1e6);
  std::uniform_int_distribution<int> small(0, 9);
  for (int c = 0; c < 1000; c++) {
    size_t n = n_dist(rng);
    bool dup_heavy = (c % 3 == 0);  // exercise ties as well as distinct values
    std::vector<double> v(n);
    for (auto& x : v) x = dup_heavy ? static_cast<double>(small(rng)) : val(rng);
    double q = q_mille(rng) / 1000.0;
    REQUIRE(percentile(v, q) == percentile_oracle(v, q));
  }
}

TEST_CASE("summarize computes the documented fields") {
  auto s = summarize(samples_ms({10.0, 20.0, 30.0}));
  REQUIRE(s.has_value());
  CHECK(s->n == 3);
  CHECK_THAT(s->mean_ms, Catch::Matchers::WithinRel(20.0, 1e-12));
  CHECK(s->p95_ms == 30.0);
  CHECK(s->p99_ms == 30.0);
  CHECK(s->min_ms == 10.0);
  CHECK(s->max_ms == 30.0);
}

TEST_CASE("summarize window selection is half-open on completion offset") {
  std::vector<LatencySample> samples;
  for (double off : {0.5, 1.0, 1.5}) {
    LatencySample s;
    s.sojourn_ns = 1'000'000;
    s.completion_offset_s = off;
    samples.push_back(s);
  }
  auto first = summarize(samples, Window{0.0, 1.0});
  REQUIRE(first.has_value());
  CHECK(first->n == 1);  // 1.0 belongs to the next window

  auto second = summarize(samples, Window{1.0, 2.0});
  REQUIRE(second.has_value());
  CHECK(second->n == 2);

  CHECK_FALSE(summarize(samples, Window{10.0, 11.0}).has_value());
  CHECK_FALSE(summarize(std::vector<LatencySample>{}).has_value());
}

TEST_CASE("one-second windows partition the samples") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> off(0.0, 10.0);
  std::uniform_int_distribution<uint64_t> dur(1, 50'000'000);
  std::vector<LatencySample> samples(100);
  for (auto& s : samples) {
    s.sojourn_ns = dur(rng);
    s.completion_offset_s = off(rng);
  }
  size_t total = 0;
  for (int k = 0; k < 10; k++) {
    auto w = summarize(samples, Window{static_cast<double>(k), k + 1.0});
    if (w) total += w->n;
  }
  REQUIRE(total == samples.size());

  auto whole = summarize(samples);
  auto covering = summarize(samples, Window{0.0, 10.0});
  REQUIRE(whole.has_value());
  REQUIRE(covering.has_value());
  CHECK(whole->n == covering->n);
  CHECK(whole->mean_ms == covering->mean_ms);
}

TEST_CASE("summary ordering invariant holds on random inputs") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<size_t> n_dist(1, 200);
  std::uniform_int_distribution<uint64_t> dur(0, 2'000'000'000);
  for (int c = 0; c < 100; c++) {
    std::vector<LatencySample> samples(n_dist(rng));
    for (auto& s : samples) s.sojourn_ns = dur(rng);
    auto out = summarize(samples);
    REQUIRE(out.has_value());
    CHECK(out->min_ms <= out->mean_ms);
    CHECK(out->mean_ms <= out->max_ms);
    CHECK(out->p95_ms <= out->p99_ms);
    CHECK(out->p99_ms <= out->max_ms);
    CHECK(out->n == samples.size());
  }
}

TEST_CASE("welch t on the pinned example") {
  std::vector<double> x{1, 2, 3, 4, 5};
  std::vector<double> y{2, 3, 4, 5, 6};
  auto r = welch_t(x, y);
  // Hand computation: means 3 and 4, both variances 2.5, so
  // t = -1 / sqrt(2.5/5 + 2.5/5) = -1 and Welch-Satterthwaite dof
  // = 1 / (0.25^2/4 + 0.25^2/4)... = 8 exactly.
  CHECK(r.t_statistic == -1.0);
  CHECK(r.degrees_of_freedom == 8.0);
  CHECK_THAT(r.p_value,
             Catch::Matchers::WithinAbs(0.34659350708733416, 1e-9));
  CHECK_FALSE(r.reject_at_0_05);

  // Identical lists: zero numerator.
  auto same = welch_t(x, x);
  CHECK(same.t_statistic == 0.0);
  CHECK(same.p_value == 1.0);
  CHECK_FALSE(same.reject_at_0_05);
}

TEST_CASE("welch t symmetry and scale invariance") {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> nx(10.0, 2.0), ny(11.0, 3.0);
  std::uniform_int_distribution<size_t> n_dist(5, 40);
  for (int c = 0; c < 50; c++) {
    std::vector<double> x(n_dist(rng)), y(n_dist(rng));
    for (auto& v : x) v = nx(rng);
    for (auto& v : y) v = ny(rng);

    auto ab = welch_t(x, y);
    auto ba = welch_t(y, x);
    CHECK(ab.t_statistic == -ba.t_statistic);
    CHECK(ab.degrees_of_freedom == ba.degrees_of_freedom);
    CHECK(ab.p_value == ba.p_value);

    const double scale = 3.75;
    std::vector<double> xs = x, ys = y;
    for (auto& v : xs) v *= scale;
    for (auto& v : ys) v *= scale;
    auto scaled = welch_t(xs, ys);
    CHECK_THAT(scaled.t_statistic,
               Catch::Matchers::WithinRel(ab.t_statistic, 1e-10));
    CHECK_THAT(scaled.p_value, Catch::Matchers::WithinRel(ab.p_value, 1e-10));
  }
}

TEST_CASE("welch t rejects degenerate inputs") {
  std::vector<double> flat5{5, 5, 5};
  std::vector<double> flat7{7, 7, 7};
  auto r = welch_t(flat5, flat5);
  CHECK(r.t_statistic == 0.0);
  CHECK(r.p_value == 1.0);

  REQUIRE_THROWS_AS(welch_t(flat5, flat7), StatsError);
  REQUIRE_THROWS_AS(
      welch_t(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}),
      StatsError);
  REQUIRE_THROWS_AS(
      welch_t(std::vector<double>{1.0, 2.0}, std::vector<double>{3.0}),
      StatsError);
}

TEST_CASE("p-values match numerical integration of the t density") {
  // Validate the integration oracle itself once against the pinned value,
  // then require library p-values to track it to 1e-9 on random pairs.
  REQUIRE_THAT(t_two_sided_p_oracle(-1.0, 8.0),
               Catch::Matchers::WithinAbs(0.34659350708733416, 1e-12));

  std::mt19937_64 rng(31415);
  std::uniform_int_distribution<size_t> n_dist(5, 40);
  std::uniform_real_distribution<double> shift(-4.0, 4.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int c = 0; c < 100; c++) {
    std::vector<double> x(n_dist(rng)), y(n_dist(rng));
    double dy = shift(rng);
    for (auto& v : x) v = 10.0 + noise(rng);
    for (auto& v : y) v = 10.0 + dy + noise(rng);
    auto r = welch_t(x, y);

    // Recompute t and dof from the definitions as a formula cross-check.
    auto mv = [](const std::vector<double>& v) {
      double m = 0;
      for (double a : v) m += a;
      m /= static_cast<double>(v.size());
      double s2 = 0;
      for (double a : v) s2 += (a - m) * (a - m);
      s2 /= static_cast<double>(v.size() - 1);
      return std::pair<double, double>(m, s2);
    };
    auto [mx, vx] = mv(x);
    auto [my, vy] = mv(y);
    double qx = vx / static_cast<double>(x.size());
    double qy = vy / static_cast<double>(y.size());
    double t_ref = (mx - my) / std::sqrt(qx + qy);
    double dof_ref = (qx + qy) * (qx + qy) /
                     (qx * qx / static_cast<double>(x.size() - 1) +
                      qy * qy / static_cast<double>(y.size() - 1));
    CHECK_THAT(r.t_statistic, Catch::Matchers::WithinRel(t_ref, 1e-12));
    CHECK_THAT(r.degrees_of_freedom,
               Catch::Matchers::WithinRel(dof_ref, 1e-12));

    double p_ref = t_two_sided_p_oracle(r.t_statistic, r.degrees_of_freedom);
    CHECK_THAT(r.p_value, Catch::Matchers::WithinAbs(p_ref, 1e-9));
    CHECK(r.reject_at_0_05 == (r.p_value < 0.05));
  }
}

TEST_CASE("confidence interval uses the Student-t multiplier") {
  CHECK_THAT(student_t_quantile(0.975, 12),
             Catch::Matchers::WithinAbs(2.1788128296634177, 1e-9));
  CHECK_THAT(student_t_quantile(0.975, 1),
             Catch::Matchers::WithinAbs(12.706204736432095, 1e-7));

  // {10, 20}: mean 15, s = sqrt(50); half-width = t*(1, .975) * s / sqrt(2)
  // = 12.7062... * 5 = 63.5310...
  std::vector<double> two{10.0, 20.0};
  auto [lo, hi] = confidence_interval(two);
  CHECK_THAT(hi - lo, Catch::Matchers::WithinAbs(2 * 63.531023682160475, 1e-5));
  CHECK_THAT((lo + hi) / 2, Catch::Matchers::WithinAbs(15.0, 1e-9));

  // 13 values 1..13: mean 7, sample variance 182/12.
  std::vector<double> thirteen;
  for (int i = 1; i <= 13; i++) thirteen.push_back(i);
  double s = std::sqrt(182.0 / 12.0);
  double half = 2.1788128296634177 * s / std::sqrt(13.0);
  auto [l13, h13] = confidence_interval(thirteen);
  CHECK_THAT(h13 - l13, Catch::Matchers::WithinAbs(2 * half, 1e-7));
  CHECK_THAT((l13 + h13) / 2, Catch::Matchers::WithinAbs(7.0, 1e-9));

  // All-equal values collapse to a zero-width interval.
  std::vector<double> flat{4.0, 4.0, 4.0, 4.0};
  auto [fl, fh] = confidence_interval(flat);
  CHECK(fl == 4.0);
  CHECK(fh == 4.0);

  REQUIRE_THROWS_AS(confidence_interval(std::vector<double>{1.0}), StatsError);
  REQUIRE_THROWS_AS(confidence_interval(std::vector<double>{}), StatsError);
}

TEST_CASE("boxplot export quartiles by nearest rank") {
  auto run_with = [](double mean_ms, double p99_ms) {
    LatencySummary s;
    s.n = 1;
    s.mean_ms = mean_ms;
    s.p95_ms = p99_ms;
    s.p99_ms = p99_ms;
    s.min_ms = mean_ms;
    s.max_ms = p99_ms;
    return s;
  };

  std::vector<LatencySummary> runs;
  for (int i = 1; i <= 13; i++) runs.push_back(run_with(999.0, i));

  auto b = boxplot_export(runs, Metric::kP99);
  CHECK(b.min == 1.0);
  CHECK(b.q1 == 4.0);    // ceil(0.25 * 13) = 4th
  CHECK(b.median == 7.0);
  CHECK(b.q3 == 10.0);   // ceil(0.75 * 13) = 10th
  CHECK(b.max == 13.0);

  // The metric selector picks the right field.
  auto bm = boxplot_export(runs, Metric::kMean);
  CHECK(bm.min == 999.0);
  CHECK(bm.median == 999.0);
  CHECK(bm.max == 999.0);

  std::vector<LatencySummary> ident(13, run_with(5.0, 5.0));
  auto bi = boxplot_export(ident, Metric::kP99);
  CHECK(bi.min == bi.max);
  CHECK(bi.q1 == bi.median);
  CHECK(bi.median == bi.q3);
  CHECK(bi.min == 5.0);

  std::vector<LatencySummary> few(4, run_with(1.0, 1.0));
  REQUIRE_THROWS_WITH(boxplot_export(few, Metric::kP99),
                      ContainsSubstring("repetitions"));
}

TEST_CASE("metric names match the report column vocabulary") {
  CHECK(std::string(metric_name(Metric::kMean)) == "mean");
  CHECK(std::string(metric_name(Metric::kP95)) == "p95");
  CHECK(std::string(metric_name(Metric::kP99)) == "p99");
}
