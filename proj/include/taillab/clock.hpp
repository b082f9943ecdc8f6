#pragma once

#include <cstdint>
#include <ctime>

#include <sys/prctl.h>

namespace taillab {

/// Monotonic nanoseconds since an arbitrary epoch. Comparable across
/// processes on the same machine (CLOCK_MONOTONIC).
inline uint64_t now_ns() {
  timespec ts;
  clock_gettime(CLOCK_MONOTONIC, &ts);
  return static_cast<uint64_t>(ts.tv_sec) * 1000000000ull +
         static_cast<uint64_t>(ts.tv_nsec);
}

/// Absolute sleep against CLOCK_MONOTONIC. Returns immediately if the
/// deadline already passed.
inline void sleep_until_ns(uint64_t deadline_ns) {
  timespec ts;
  ts.tv_sec = static_cast<time_t>(deadline_ns / 1000000000ull);
  ts.tv_nsec = static_cast<long>(deadline_ns % 1000000000ull);
  while (clock_nanosleep(CLOCK_MONOTONIC, TIMER_ABSTIME, &ts, nullptr) != 0) {
    // retried on EINTR
  }
}

inline void sleep_for_ns(uint64_t dur_ns) { sleep_until_ns(now_ns() + dur_ns); }

/// Shrinks the kernel's timer slack for the calling thread so absolute
/// sleeps wake close to their deadline (default slack is 50us).
inline void tighten_timer_slack() { prctl(PR_SET_TIMERSLACK, 1ul); }

}  // namespace taillab
