#pragma once

#include <map>
#include <span>
#include <vector>

namespace dce {

double mse(std::span<const double> predictions, std::span<const double> labels);

// Mann-Whitney AUC with ties counted as 1/2. Throws on single-class input.
double auc(std::span<const double> scores, std::span<const double> labels);

// One scored candidate in a per-user ranking list.
struct RankedItem {
  double score;
  int gain;  // binary
};

// NDCG@K with log2(rank+1) discounts, averaged over users with at least one
// positive; users without positives are excluded from the average.
double ndcg_at_k(const std::vector<std::vector<RankedItem>>& users, std::size_t k);

struct MetricReport {
  double mse = 0.0;
  double auc = 0.0;
  std::map<std::size_t, double> ndcg;  // cutoff -> value
};

namespace serial {
double mse(std::span<const double> predictions, std::span<const double> labels);
}

}  // namespace dce
