#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "taillab/clock.hpp"

namespace taillab {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// How a worker occupies itself for the sampled service time.
///  kSpin  — calibrated busy loop; the worker burns a CPU, so co-located
///           servers contend for cores.
///  kSleep — timed wait with a short spin tail for precision; the worker
///           is occupied but the CPU stays free. Intended for hosts with
///           fewer cores than busy workers.
enum class ExecMode : uint8_t { kSpin, kSleep };

/// Synthetic service-time model. `name` selects the distribution:
/// "fixed", "exponential", "lognormal" (param sigma), or "zipf-items"
/// (params item_count, zipf_exponent).
struct WorkloadSpec {
  std::string name = "fixed";
  double mean_service_us = 1000.0;
  double sigma = 1.0;          // lognormal shape
  uint64_t item_count = 100;   // zipf-items
  double zipf_exponent = 1.0;  // zipf-items
  uint64_t seed = 1;
  ExecMode exec = ExecMode::kSpin;
};

inline void validate_workload(const WorkloadSpec& spec) {
  if (spec.name != "fixed" && spec.name != "exponential" &&
      spec.name != "lognormal" && spec.name != "zipf-items") {
    throw ConfigError("unknown workload distribution '" + spec.name + "'");
  }
  if (!(spec.mean_service_us > 0)) {
    throw ConfigError("mean_service_us must be > 0");
  }
  if (spec.name == "lognormal" && !(spec.sigma > 0)) {
    throw ConfigError("lognormal sigma must be > 0");
  }
  if (spec.name == "zipf-items") {
    if (spec.item_count < 1) throw ConfigError("item_count must be >= 1");
    if (!(spec.zipf_exponent > 0)) {
      throw ConfigError("zipf_exponent must be > 0");
    }
  }
}

namespace detail {

// splitmix64: seed expansion and cheap stream derivation.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t s = seed ^ (stream * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);
  return splitmix64(s);
}

/// xoshiro-free minimal PRNG: 64-bit splitmix chain. One value per draw
/// index, so sequences are reproducible across platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64(state_); }

  /// Uniform in [0, 1).
  double next_unit() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

 private:
  uint64_t state_;
};

/// Popularity table for zipf-items: P(i) proportional to i^-s over
/// i in 1..n. Shared by all connections of one server.
struct ZipfTable {
  std::vector<double> cumulative;  // cumulative[i] = P(item <= i+1)
  std::vector<double> service_ns;  // per-item service time
  ZipfTable(uint64_t n, double s, double mean_service_us) {
    std::vector<double> mass(n);
    double norm = 0;
    for (uint64_t i = 0; i < n; i++) {
      mass[i] = std::pow(static_cast<double>(i + 1), -s);
      norm += mass[i];
    }
    double sum_sq = 0;
    cumulative.resize(n);
    double acc = 0;
    for (uint64_t i = 0; i < n; i++) {
      mass[i] /= norm;
      sum_sq += mass[i] * mass[i];
      acc += mass[i];
      cumulative[i] = acc;
    }
    cumulative[n - 1] = 1.0;
    // Service time proportional to item popularity, scaled so the
    // expectation over draws equals the configured mean.
    service_ns.resize(n);
    for (uint64_t i = 0; i < n; i++) {
      service_ns[i] = mean_service_us * 1000.0 * mass[i] / sum_sq;
    }
  }
};

}  // namespace detail

/// Draws service times from a WorkloadSpec. One sampler per connection;
/// the sequence is a pure function of (spec.seed, stream, draw index).
class ServiceSampler {
 public:
  ServiceSampler(const WorkloadSpec& spec, uint64_t stream = 0)
      : spec_(spec), rng_(detail::mix_seed(spec.seed, stream)) {
    validate_workload(spec);
    if (spec_.name == "fixed") kind_ = Kind::kFixed;
    else if (spec_.name == "exponential") kind_ = Kind::kExponential;
    else if (spec_.name == "lognormal") kind_ = Kind::kLognormal;
    else kind_ = Kind::kZipfItems;
    if (kind_ == Kind::kLognormal) {
      // E[lognormal(mu, sigma)] = exp(mu + sigma^2/2)
      lognormal_mu_ =
          std::log(spec_.mean_service_us * 1000.0) - spec_.sigma * spec_.sigma / 2.0;
    }
    if (kind_ == Kind::kZipfItems) {
      zipf_ = std::make_shared<detail::ZipfTable>(
          spec_.item_count, spec_.zipf_exponent, spec_.mean_service_us);
    }
  }

  /// Next service duration in nanoseconds (always >= 1).
  uint64_t next_service_ns() {
    double ns = 0;
    switch (kind_) {
      case Kind::kFixed:
        ns = spec_.mean_service_us * 1000.0;
        break;
      case Kind::kExponential: {
        double u = rng_.next_unit();
        ns = -spec_.mean_service_us * 1000.0 * std::log1p(-u);
        break;
      }
      case Kind::kLognormal: {
        // Box-Muller; second variate discarded to keep one draw per index.
        double u1 = rng_.next_unit();
        double u2 = rng_.next_unit();
        double z = std::sqrt(-2.0 * std::log1p(-u1)) *
                   std::cos(2.0 * M_PI * u2);
        ns = std::exp(lognormal_mu_ + spec_.sigma * z);
        break;
      }
      case Kind::kZipfItems: {
        ns = zipf_->service_ns[next_item() - 1];
        break;
      }
    }
    if (ns < 1.0) ns = 1.0;
    // Round to the nearest nanosecond: truncation would let a half-ulp of
    // floating-point noise shift exact-by-construction values (e.g. the
    // zipf table's mean-preserving entries) down a full nanosecond.
    return static_cast<uint64_t>(std::llround(ns));
  }

  /// Item rank drawn by the zipf-items popularity law, in 1..item_count.
  uint64_t next_item() {
    double u = rng_.next_unit();
    const auto& cum = zipf_->cumulative;
    size_t lo = 0, hi = cum.size() - 1;
    while (lo < hi) {
      size_t mid = (lo + hi) / 2;
      if (cum[mid] < u) lo = mid + 1;
      else hi = mid;
    }
    return lo + 1;
  }

  const WorkloadSpec& spec() const { return spec_; }

 private:
  enum class Kind { kFixed, kExponential, kLognormal, kZipfItems };

  WorkloadSpec spec_;
  detail::Rng rng_;
  Kind kind_ = Kind::kFixed;
  double lognormal_mu_ = 0;
  std::shared_ptr<detail::ZipfTable> zipf_;
};

/// Occupies the calling worker for a requested duration. kSpin runs a
/// calibrated arithmetic loop checked against the monotonic clock; kSleep
/// parks on the clock and spins only a short guard window before the
/// deadline so wakeup jitter does not inflate the service time.
class ServiceExecutor {
 public:
  ServiceExecutor() { calibrate(); }

  void execute(uint64_t service_ns, ExecMode mode) const {
    if (service_ns == 0) {
      throw std::invalid_argument("service time must be positive");
    }
    uint64_t deadline = now_ns() + service_ns;
    if (mode == ExecMode::kSleep && service_ns > kSleepGuardNs) {
      sleep_until_ns(deadline - kSleepGuardNs);
    }
    spin_until(deadline);
  }

  /// Iterations of the calibration kernel per microsecond.
  double iters_per_us() const { return iters_per_us_; }

 private:
  static constexpr uint64_t kSleepGuardNs = 200 * 1000;

  static uint64_t kernel(uint64_t iters, uint64_t x) {
    volatile uint64_t acc = x;
    for (uint64_t i = 0; i < iters; i++) {
      acc = acc * 6364136223846793005ull + 1442695040888963407ull;
    }
    return acc;
  }

  void calibrate() {
    // Warm up, then time a fixed iteration count a few times and keep
    // the fastest run (least preempted).
    kernel(200000, 1);
    double best_ns_per_iter = 1e9;
    for (int round = 0; round < 5; round++) {
      uint64_t t0 = now_ns();
      kernel(1000000, t0);
      uint64_t dt = now_ns() - t0;
      double per_iter = static_cast<double>(dt) / 1e6;
      if (per_iter < best_ns_per_iter) best_ns_per_iter = per_iter;
    }
    iters_per_us_ = 1000.0 / best_ns_per_iter;
    chunk_iters_ = static_cast<uint64_t>(iters_per_us_ * 2.0);  // ~2us chunks
    if (chunk_iters_ < 16) chunk_iters_ = 16;
  }

  void spin_until(uint64_t deadline_ns) const {
    uint64_t x = deadline_ns;
    while (now_ns() < deadline_ns) {
      x = kernel(chunk_iters_, x);
    }
  }

  double iters_per_us_ = 1.0;
  uint64_t chunk_iters_ = 16;
};

}  // namespace taillab
