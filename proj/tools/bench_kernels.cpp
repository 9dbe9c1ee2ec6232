// Compares the OpenMP reduction kernels against their serial references on
// estimator-sized grids and the mask-enumeration oracle.

#include <chrono>
#include <cstdio>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dce/estimators.hpp"
#include "dce/rng.hpp"

using namespace dce;

namespace {

using Clock = std::chrono::steady_clock;

template <class F>
double time_ms(F&& f, int reps) {
  // one warmup, then best of reps
  f();
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = Clock::now();
    f();
    const auto t1 = Clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

volatile double sink;

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("openmp: %d threads\n", omp_get_max_threads());
#else
  std::printf("openmp: disabled (serial build)\n");
#endif

  const std::size_t n = 4'000'000;
  Rng rng(1);
  std::vector<double> e(n), eh(n), p(n), ph(n);
  std::vector<std::uint8_t> o(n);
  for (std::size_t i = 0; i < n; ++i) {
    e[i] = rng.uniform(0.0, 2.0);
    eh[i] = rng.uniform(0.0, 2.0);
    p[i] = rng.uniform(0.05, 0.95);
    ph[i] = rng.uniform(0.05, 0.95);
    o[i] = rng.bernoulli(p[i]) ? 1 : 0;
  }

  struct Row {
    const char* name;
    double par_ms;
    double ser_ms;
  };
  std::vector<Row> rows;

  rows.push_back({"dr_estimator", time_ms([&] { sink = dr_estimator(e, eh, ph, o); }, 5),
                  time_ms([&] { sink = serial::dr_estimator(e, eh, ph, o); }, 5)});
  rows.push_back({"ips_estimator", time_ms([&] { sink = ips_estimator(e, ph, o); }, 5),
                  time_ms([&] { sink = serial::ips_estimator(e, ph, o); }, 5)});
  rows.push_back(
      {"lemma1_variance", time_ms([&] { sink = lemma1_variance(e, eh, p, ph); }, 5),
       time_ms([&] { sink = serial::lemma1_variance(e, eh, p, ph); }, 5)});

  std::vector<double> se(e.begin(), e.begin() + 16), seh(eh.begin(), eh.begin() + 16),
      sp(p.begin(), p.begin() + 16), sph(ph.begin(), ph.begin() + 16);
  rows.push_back(
      {"brute_force_16", time_ms([&] { sink = brute_force_moments(se, seh, sp, sph).mean; }, 3),
       time_ms([&] { sink = serial::brute_force_moments(se, seh, sp, sph).mean; }, 3)});

  std::printf("%-18s %12s %12s %8s\n", "kernel", "omp (ms)", "serial (ms)", "speedup");
  for (const auto& r : rows)
    std::printf("%-18s %12.3f %12.3f %7.2fx\n", r.name, r.par_ms, r.ser_ms,
                r.ser_ms / r.par_ms);
  return 0;
}
