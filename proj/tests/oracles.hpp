#pragma once

// Independent oracles used by the test suites. These deliberately avoid the
// library's own reduction/ranking code paths.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <vector>

namespace oracle {

// O(n^2) pairwise AUC with ties counted as half wins.
inline double auc_quadratic(const std::vector<double>& scores,
                            const std::vector<double>& labels) {
  double wins = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] <= 0.5) continue;
    ++n_pos;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] > 0.5) continue;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  for (double l : labels) n_neg += l <= 0.5 ? 1 : 0;
  return wins / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// DCG@K of a given ordering of gains.
inline double dcg_at_k(const std::vector<int>& gains, std::size_t k) {
  double s = 0.0;
  for (std::size_t r = 0; r < std::min(k, gains.size()); ++r)
    s += static_cast<double>(gains[r]) / std::log2(static_cast<double>(r) + 2.0);
  return s;
}

// Ideal DCG by exhaustive permutation (n <= 8).
inline double ideal_dcg_by_permutation(std::vector<int> gains, std::size_t k) {
  std::sort(gains.begin(), gains.end());
  double best = 0.0;
  do {
    best = std::max(best, dcg_at_k(gains, k));
  } while (std::next_permutation(gains.begin(), gains.end()));
  return best;
}

// Central finite difference of f with respect to params[i].
inline double finite_diff(std::vector<double>& params, std::size_t i,
                          const std::function<double()>& f, double h = 1e-5) {
  const double keep = params[i];
  params[i] = keep + h;
  const double up = f();
  params[i] = keep - h;
  const double down = f();
  params[i] = keep;
  return (up - down) / (2.0 * h);
}

// Relative error with an absolute floor for near-zero components.
inline double rel_err(double a, double b, double floor_ = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor_});
}

}  // namespace oracle
