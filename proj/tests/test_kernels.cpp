#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dce/estimators.hpp"
#include "dce/parallel.hpp"
#include "dce/rng.hpp"

using namespace dce;

TEST_CASE("det_sum matches plain loop under the chunk size exactly") {
  Rng rng(7);
  std::vector<double> v(1000);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  const double a = det_sum(v.size(), [&](std::size_t i) { return v[i]; });
  const double b = serial::sum(v.size(), [&](std::size_t i) { return v[i]; });
  CHECK(a == b);
}

TEST_CASE("det_sum is close to the serial loop on large inputs") {
  Rng rng(11);
  std::vector<double> v(3 * kReduceChunk + 123);
  for (auto& x : v) x = rng.uniform(0.0, 1.0);
  const double a = det_sum(v.size(), [&](std::size_t i) { return v[i]; });
  const double b = serial::sum(v.size(), [&](std::size_t i) { return v[i]; });
  CHECK(std::abs(a - b) <= 1e-9 * std::abs(b));
  // fixed chunking: identical across repeated runs
  const double a2 = det_sum(v.size(), [&](std::size_t i) { return v[i]; });
  CHECK(a == a2);
}

TEST_CASE("det_max agrees with the serial max") {
  Rng rng(3);
  std::vector<double> v(20000);
  for (auto& x : v) x = rng.normal();
  CHECK(det_max(v.size(), [&](std::size_t i) { return v[i]; }) ==
        serial::max(v.size(), [&](std::size_t i) { return v[i]; }));
}

TEST_CASE("parallel estimators match their serial references") {
  Rng rng(19);
  const std::size_t n = 2 * kReduceChunk + 777;
  std::vector<double> e(n), eh(n), p(n), ph(n);
  std::vector<std::uint8_t> o(n);
  for (std::size_t i = 0; i < n; ++i) {
    e[i] = rng.uniform(0.0, 2.0);
    eh[i] = rng.uniform(0.0, 2.0);
    p[i] = rng.uniform(0.05, 0.95);
    ph[i] = rng.uniform(0.05, 0.95);
    o[i] = rng.bernoulli(p[i]) ? 1 : 0;
  }
  const double tol = 1e-11;
  CHECK(std::abs(ideal_loss(e) - serial::ideal_loss(e)) < tol);
  CHECK(std::abs(naive_estimator(e, o) - serial::naive_estimator(e, o)) < tol);
  CHECK(std::abs(eib_estimator(e, eh, o) - serial::eib_estimator(e, eh, o)) < tol);
  CHECK(std::abs(ips_estimator(e, ph, o) - serial::ips_estimator(e, ph, o)) < tol);
  CHECK(std::abs(snips_estimator(e, ph, o) - serial::snips_estimator(e, ph, o)) < tol);
  CHECK(std::abs(dr_estimator(e, eh, ph, o) - serial::dr_estimator(e, eh, ph, o)) < tol);
  CHECK(std::abs(lemma1_bias(e, eh, p, ph) - serial::lemma1_bias(e, eh, p, ph)) < tol);
  CHECK(std::abs(lemma1_variance(e, eh, p, ph) - serial::lemma1_variance(e, eh, p, ph)) <
        tol);
}

TEST_CASE("brute force moments: parallel vs serial") {
  Rng rng(23);
  const std::size_t n = 10;
  std::vector<double> e(n), eh(n), p(n), ph(n);
  for (std::size_t i = 0; i < n; ++i) {
    e[i] = rng.uniform(0.0, 2.0);
    eh[i] = rng.uniform(0.0, 2.0);
    p[i] = rng.uniform(0.1, 0.9);
    ph[i] = rng.uniform(0.1, 0.9);
  }
  const auto a = brute_force_moments(e, eh, p, ph);
  const auto b = serial::brute_force_moments(e, eh, p, ph);
  CHECK(std::abs(a.mean - b.mean) < 1e-12);
  CHECK(std::abs(a.variance - b.variance) < 1e-12);
}
