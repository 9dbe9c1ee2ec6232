#include "dce/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dce/parallel.hpp"

namespace dce {

namespace {

void check_sizes(std::size_t a, std::size_t b) {
  if (a != b) throw std::invalid_argument("estimator grid size mismatch");
}

}  // namespace

double ideal_loss(Reals e) {
  if (e.empty()) return 0.0;
  return det_sum(e.size(), [&](std::size_t i) { return e[i]; }) /
         static_cast<double>(e.size());
}

double naive_estimator(Reals e, Mask o) {
  check_sizes(e.size(), o.size());
  const double n_obs = det_sum(o.size(), [&](std::size_t i) { return double(o[i]); });
  if (n_obs == 0.0) throw std::invalid_argument("naive estimator needs observations");
  return det_sum(e.size(), [&](std::size_t i) { return o[i] ? e[i] : 0.0; }) / n_obs;
}

double eib_estimator(Reals e, Reals e_hat, Mask o) {
  check_sizes(e.size(), e_hat.size());
  check_sizes(e.size(), o.size());
  return det_sum(e.size(),
                 [&](std::size_t i) { return o[i] ? e[i] : e_hat[i]; }) /
         static_cast<double>(e.size());
}

double ips_estimator(Reals e, Reals p_hat, Mask o) {
  check_sizes(e.size(), p_hat.size());
  check_sizes(e.size(), o.size());
  return det_sum(e.size(),
                 [&](std::size_t i) { return o[i] ? e[i] / p_hat[i] : 0.0; }) /
         static_cast<double>(e.size());
}

double snips_estimator(Reals e, Reals p_hat, Mask o) {
  check_sizes(e.size(), p_hat.size());
  check_sizes(e.size(), o.size());
  const double num =
      det_sum(e.size(), [&](std::size_t i) { return o[i] ? e[i] / p_hat[i] : 0.0; });
  const double den =
      det_sum(e.size(), [&](std::size_t i) { return o[i] ? 1.0 / p_hat[i] : 0.0; });
  if (den == 0.0) throw std::invalid_argument("snips needs at least one observation");
  return num / den;
}

double dr_estimator(Reals e, Reals e_hat, Reals p_hat, Mask o) {
  check_sizes(e.size(), e_hat.size());
  check_sizes(e.size(), p_hat.size());
  check_sizes(e.size(), o.size());
  return det_sum(e.size(),
                 [&](std::size_t i) {
                   return e_hat[i] + (o[i] ? (e[i] - e_hat[i]) / p_hat[i] : 0.0);
                 }) /
         static_cast<double>(e.size());
}

std::vector<double> clip_propensity(Reals p_hat, double threshold) {
  std::vector<double> out(p_hat.begin(), p_hat.end());
  for (auto& v : out) v = std::max(v, threshold);
  return out;
}

double lemma1_bias(Reals e, Reals e_hat, Reals p, Reals p_hat) {
  check_sizes(e.size(), e_hat.size());
  check_sizes(e.size(), p.size());
  check_sizes(e.size(), p_hat.size());
  const double s = det_sum(e.size(), [&](std::size_t i) {
    return ((p_hat[i] - p[i]) / p_hat[i]) * (e[i] - e_hat[i]);
  });
  return std::abs(s) / static_cast<double>(e.size());
}

double lemma1_variance(Reals e, Reals e_hat, Reals p, Reals p_hat) {
  check_sizes(e.size(), e_hat.size());
  check_sizes(e.size(), p.size());
  check_sizes(e.size(), p_hat.size());
  const double n = static_cast<double>(e.size());
  const double s = det_sum(e.size(), [&](std::size_t i) {
    const double d = e_hat[i] - e[i];
    return p[i] * (1.0 - p[i]) * d * d / (p_hat[i] * p_hat[i]);
  });
  return s / (n * n);
}

Moments brute_force_moments(Reals e, Reals e_hat, Reals p, Reals p_hat) {
  check_sizes(e.size(), e_hat.size());
  check_sizes(e.size(), p.size());
  check_sizes(e.size(), p_hat.size());
  const std::size_t n = e.size();
  if (n == 0 || n > 16)
    throw std::invalid_argument("brute force enumeration supports 1 <= |D| <= 16");
  const std::size_t n_masks = std::size_t{1} << n;
  const double inv_n = 1.0 / static_cast<double>(n);

  auto value_and_weight = [&](std::size_t mask, double& weight) {
    double v = 0.0;
    weight = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool obs = (mask >> i) & 1u;
      weight *= obs ? p[i] : 1.0 - p[i];
      v += e_hat[i] + (obs ? (e[i] - e_hat[i]) / p_hat[i] : 0.0);
    }
    return v * inv_n;
  };

  Moments mom;
  mom.mean = det_sum(n_masks, [&](std::size_t mask) {
    double w;
    const double v = value_and_weight(mask, w);
    return w * v;
  });
  mom.variance = det_sum(n_masks, [&](std::size_t mask) {
    double w;
    const double v = value_and_weight(mask, w);
    const double d = v - mom.mean;
    return w * d * d;
  });
  return mom;
}

EstimatorAudit theorem_bounds(Reals e0, Reals e1, Reals r_tilde, Reals p, Reals p_hat,
                              Reals q) {
  const std::size_t n = e0.size();
  check_sizes(n, e1.size());
  check_sizes(n, r_tilde.size());
  check_sizes(n, p.size());
  check_sizes(n, p_hat.size());
  check_sizes(n, q.size());

  std::vector<double> e(n), e_hat(n);
  parallel_for(n, [&](std::size_t i) {
    e[i] = q[i] * e1[i] + (1.0 - q[i]) * e0[i];
    e_hat[i] = r_tilde[i] * e1[i] + (1.0 - r_tilde[i]) * e0[i];
  });

  EstimatorAudit audit;
  audit.n_pairs = n;
  audit.bias = lemma1_bias(e, e_hat, p, p_hat);
  audit.variance = lemma1_variance(e, e_hat, p, p_hat);

  audit.ece_propensity =
      det_sum(n, [&](std::size_t i) { return std::abs(p[i] - p_hat[i]); }) /
      static_cast<double>(n);
  audit.mce_propensity =
      det_max(n, [&](std::size_t i) { return std::abs(p[i] - p_hat[i]); });
  audit.ece_imputation =
      det_sum(n, [&](std::size_t i) { return std::abs(q[i] - r_tilde[i]); }) /
      static_cast<double>(n);
  audit.mce_imputation =
      det_max(n, [&](std::size_t i) { return std::abs(q[i] - r_tilde[i]); });

  audit.rho_max =
      det_max(n, [&](std::size_t i) { return std::abs((e[i] - e_hat[i]) / p_hat[i]); });
  audit.pi_max = det_max(n, [&](std::size_t i) {
    return std::abs((p_hat[i] - p[i]) * (e1[i] - e0[i]) / p_hat[i]);
  });
  audit.omega_max = det_max(n, [&](std::size_t i) {
    const double d = e1[i] - e0[i];
    return std::abs(p[i] * (1.0 - p[i]) * d * d / (p_hat[i] * p_hat[i]));
  });

  std::vector<double> sorted(p_hat.begin(), p_hat.end());
  std::sort(sorted.begin(), sorted.end());
  audit.propensity_ties =
      n - static_cast<std::size_t>(
              std::unique(sorted.begin(), sorted.end()) - sorted.begin());

  auto make = [](double lhs, double bound) {
    return BoundCheck{lhs, bound, lhs <= bound + kBoundSlack};
  };
  audit.bias_ece_prop = make(audit.bias, audit.rho_max * audit.ece_propensity);
  audit.bias_mce_prop = make(audit.bias, audit.rho_max * audit.mce_propensity);
  audit.bias_ece_imp = make(audit.bias, audit.pi_max * audit.ece_imputation);
  audit.bias_mce_imp = make(audit.bias, audit.pi_max * audit.mce_imputation);
  audit.var_ece_imp =
      make(audit.variance, audit.omega_max * audit.ece_imputation * audit.ece_imputation);
  audit.var_mce_imp =
      make(audit.variance, audit.omega_max / static_cast<double>(n) *
                               audit.mce_imputation * audit.mce_imputation);
  return audit;
}

namespace serial {

double ideal_loss(Reals e) {
  double s = 0.0;
  for (double v : e) s += v;
  return e.empty() ? 0.0 : s / static_cast<double>(e.size());
}

double naive_estimator(Reals e, Mask o) {
  double s = 0.0, n = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i)
    if (o[i]) {
      s += e[i];
      n += 1.0;
    }
  if (n == 0.0) throw std::invalid_argument("naive estimator needs observations");
  return s / n;
}

double eib_estimator(Reals e, Reals e_hat, Mask o) {
  double s = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) s += o[i] ? e[i] : e_hat[i];
  return s / static_cast<double>(e.size());
}

double ips_estimator(Reals e, Reals p_hat, Mask o) {
  double s = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i)
    if (o[i]) s += e[i] / p_hat[i];
  return s / static_cast<double>(e.size());
}

double snips_estimator(Reals e, Reals p_hat, Mask o) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i)
    if (o[i]) {
      num += e[i] / p_hat[i];
      den += 1.0 / p_hat[i];
    }
  if (den == 0.0) throw std::invalid_argument("snips needs at least one observation");
  return num / den;
}

double dr_estimator(Reals e, Reals e_hat, Reals p_hat, Mask o) {
  double s = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i)
    s += e_hat[i] + (o[i] ? (e[i] - e_hat[i]) / p_hat[i] : 0.0);
  return s / static_cast<double>(e.size());
}

double lemma1_bias(Reals e, Reals e_hat, Reals p, Reals p_hat) {
  double s = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i)
    s += ((p_hat[i] - p[i]) / p_hat[i]) * (e[i] - e_hat[i]);
  return std::abs(s) / static_cast<double>(e.size());
}

double lemma1_variance(Reals e, Reals e_hat, Reals p, Reals p_hat) {
  double s = 0.0;
  const double n = static_cast<double>(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) {
    const double d = e_hat[i] - e[i];
    s += p[i] * (1.0 - p[i]) * d * d / (p_hat[i] * p_hat[i]);
  }
  return s / (n * n);
}

Moments brute_force_moments(Reals e, Reals e_hat, Reals p, Reals p_hat) {
  const std::size_t n = e.size();
  if (n == 0 || n > 16)
    throw std::invalid_argument("brute force enumeration supports 1 <= |D| <= 16");
  const std::size_t n_masks = std::size_t{1} << n;
  const double inv_n = 1.0 / static_cast<double>(n);
  auto value_and_weight = [&](std::size_t mask, double& weight) {
    double v = 0.0;
    weight = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool obs = (mask >> i) & 1u;
      weight *= obs ? p[i] : 1.0 - p[i];
      v += e_hat[i] + (obs ? (e[i] - e_hat[i]) / p_hat[i] : 0.0);
    }
    return v * inv_n;
  };
  Moments mom;
  for (std::size_t mask = 0; mask < n_masks; ++mask) {
    double w;
    const double v = value_and_weight(mask, w);
    mom.mean += w * v;
  }
  for (std::size_t mask = 0; mask < n_masks; ++mask) {
    double w;
    const double v = value_and_weight(mask, w);
    const double d = v - mom.mean;
    mom.variance += w * d * d;
  }
  return mom;
}

}  // namespace serial

}  // namespace dce
