#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

// Reduction kernels used by the estimator and calibration grids.
//
// The parallel variants split the index range into fixed-size chunks and
// combine the per-chunk partials in chunk order, so the result is identical
// for any thread count (including 1). Serial reference loops live in
// dce::serial and are what the unit tests and the benchmark compare against.

namespace dce {

inline constexpr std::size_t kReduceChunk = 4096;

template <class Term>
double det_sum(std::size_t n, Term&& term) {
  if (n == 0) return 0.0;
  const std::size_t n_chunks = (n + kReduceChunk - 1) / kReduceChunk;
  if (n_chunks == 1) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += term(i);
    return s;
  }
  std::vector<double> partial(n_chunks, 0.0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(n_chunks); ++c) {
    const std::size_t lo = static_cast<std::size_t>(c) * kReduceChunk;
    const std::size_t hi = std::min(n, lo + kReduceChunk);
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += term(i);
    partial[static_cast<std::size_t>(c)] = s;
  }
  double total = 0.0;
  for (double s : partial) total += s;
  return total;
}

// Max is order-independent, so a plain reduction is already deterministic.
template <class Term>
double det_max(std::size_t n, Term&& term) {
  double best = -1e308;
#pragma omp parallel for schedule(static) reduction(max : best)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const double v = term(static_cast<std::size_t>(i));
    if (v > best) best = v;
  }
  return best;
}

template <class Body>
void parallel_for(std::size_t n, Body&& body) {
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    body(static_cast<std::size_t>(i));
  }
}

namespace serial {

template <class Term>
double sum(std::size_t n, Term&& term) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += term(i);
  return s;
}

template <class Term>
double max(std::size_t n, Term&& term) {
  double best = -1e308;
  for (std::size_t i = 0; i < n; ++i) best = std::max(best, term(i));
  return best;
}

}  // namespace serial

}  // namespace dce
