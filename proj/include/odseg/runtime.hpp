#pragma once

#include <cstdint>

namespace odseg {

/// Process-wide execution knobs.
///
/// Every kernel partitions its work into chunks whose boundaries depend only
/// on tensor extents, and partial reductions are combined in chunk order, so
/// results are bit-identical for any thread count. `deterministic` is kept for
/// configuration compatibility; when set it also forces single-threaded
/// execution.
struct RuntimeSettings {
  int threads = 1;
  bool deterministic = true;
  /// Scan every op output for NaN/Inf and throw NumericError. On by default
  /// in debug builds, off in release builds.
#ifdef NDEBUG
  bool check_finite = false;
#else
  bool check_finite = true;
#endif
};

RuntimeSettings& runtime();

/// Number of worker threads parallel loops may use right now.
int effective_threads();

/// Runs body(i) for i in [0, n). Iterations must write disjoint memory.
template <typename Body>
void parallel_for(std::int64_t n, Body&& body) {
  const int threads = effective_threads();
  if (threads <= 1 || n <= 1) {
    for (std::int64_t i = 0; i < n; ++i) body(i);
    return;
  }
#pragma omp parallel for schedule(static) num_threads(threads)
  for (std::int64_t i = 0; i < n; ++i) body(i);
}

}  // namespace odseg
