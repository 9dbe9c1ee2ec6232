#include "dce/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dce/parallel.hpp"

namespace dce {

double mse(std::span<const double> predictions, std::span<const double> labels) {
  if (predictions.size() != labels.size() || predictions.empty())
    throw std::invalid_argument("mse needs equal non-empty inputs");
  return det_sum(predictions.size(),
                 [&](std::size_t i) {
                   const double d = predictions[i] - labels[i];
                   return d * d;
                 }) /
         static_cast<double>(predictions.size());
}

namespace serial {
double mse(std::span<const double> predictions, std::span<const double> labels) {
  double s = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double d = predictions[i] - labels[i];
    s += d * d;
  }
  return s / static_cast<double>(predictions.size());
}
}  // namespace serial

double auc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw std::invalid_argument("auc needs equal non-empty inputs");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // average ranks within tie groups, then the rank-sum form of Mann-Whitney U
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  std::size_t lo = 0;
  while (lo < order.size()) {
    std::size_t hi = lo;
    while (hi + 1 < order.size() && scores[order[hi + 1]] == scores[order[lo]]) ++hi;
    const double avg_rank = 0.5 * (static_cast<double>(lo + 1) + static_cast<double>(hi + 1));
    for (std::size_t j = lo; j <= hi; ++j) {
      if (labels[order[j]] > 0.5) {
        pos_rank_sum += avg_rank;
        ++n_pos;
      }
    }
    lo = hi + 1;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("auc needs both classes present");
  const double u = pos_rank_sum -
                   static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double ndcg_at_k(const std::vector<std::vector<RankedItem>>& users, std::size_t k) {
  if (k == 0) throw std::invalid_argument("ndcg cutoff must be positive");
  std::vector<double> per_user(users.size(), -1.0);
  parallel_for(users.size(), [&](std::size_t u) {
    const auto& items = users[u];
    std::size_t n_pos = 0;
    for (const auto& it : items) n_pos += it.gain > 0 ? 1 : 0;
    if (n_pos == 0) return;  // excluded, not zeroed

    std::vector<std::size_t> order(items.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return items[a].score > items[b].score;
    });

    double dcg = 0.0;
    const std::size_t depth = std::min(k, items.size());
    for (std::size_t rank = 0; rank < depth; ++rank)
      dcg += static_cast<double>(items[order[rank]].gain) /
             std::log2(static_cast<double>(rank) + 2.0);
    // full-depth ideal normalization, so the value is monotone in k
    double idcg = 0.0;
    for (std::size_t rank = 0; rank < n_pos; ++rank)
      idcg += 1.0 / std::log2(static_cast<double>(rank) + 2.0);
    per_user[u] = dcg / idcg;
  });

  double sum = 0.0;
  std::size_t counted = 0;
  for (double v : per_user) {
    if (v >= 0.0) {
      sum += v;
      ++counted;
    }
  }
  if (counted == 0) throw std::invalid_argument("ndcg needs a user with a positive");
  return sum / static_cast<double>(counted);
}

}  // namespace dce
