#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace dce {

using Mask = std::span<const std::uint8_t>;
using Reals = std::span<const double>;

// Mean prediction error over the full universe D.
double ideal_loss(Reals e);

// Mean error over the observed set only.
double naive_estimator(Reals e, Mask o);

// Error imputation: observed errors plus imputed errors for missing pairs.
double eib_estimator(Reals e, Reals e_hat, Mask o);

// Inverse propensity scoring over D.
double ips_estimator(Reals e, Reals p_hat, Mask o);

// Self-normalized IPS; invariant under global rescaling of p_hat.
double snips_estimator(Reals e, Reals p_hat, Mask o);

// Doubly robust: imputed error plus inverse-weighted residual on observed
// pairs. The calibrated variant is the same form with (e_bar, p_bar).
double dr_estimator(Reals e, Reals e_hat, Reals p_hat, Mask o);

// Elementwise max(p_hat, threshold).
std::vector<double> clip_propensity(Reals p_hat, double threshold);

// Closed forms for the expectation gap and variance of the DR estimate under
// o ~ Bernoulli(p), given the true propensities.
double lemma1_bias(Reals e, Reals e_hat, Reals p, Reals p_hat);
double lemma1_variance(Reals e, Reals e_hat, Reals p, Reals p_hat);

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

// Exact moments of the DR estimate by enumerating all 2^|D| observation
// masks weighted by prod p^o (1-p)^(1-o). |D| <= 16.
Moments brute_force_moments(Reals e, Reals e_hat, Reals p, Reals p_hat);

struct BoundCheck {
  double lhs = 0.0;    // audited quantity (bias or variance)
  double bound = 0.0;  // theorem upper bound
  bool holds = false;  // lhs <= bound + slack tolerance
};

// Full bias/variance audit of one instance against the calibration-error
// bounds. e and e_hat are reconstructed from the label-conditional losses:
// e = q*e1 + (1-q)*e0, e_hat = r_tilde*e1 + (1-r_tilde)*e0.
struct EstimatorAudit {
  std::size_t n_pairs = 0;
  double bias = 0.0;
  double variance = 0.0;
  double ece_propensity = 0.0;  // pairwise |p - p_hat|
  double mce_propensity = 0.0;
  double ece_imputation = 0.0;  // pairwise |q - r_tilde|
  double mce_imputation = 0.0;
  double rho_max = 0.0;
  double pi_max = 0.0;
  double omega_max = 0.0;
  std::size_t propensity_ties = 0;  // exact duplicate p_hat values

  BoundCheck bias_ece_prop;  // bias <= rho_max * ECE(h)
  BoundCheck bias_mce_prop;  // bias <= rho_max * MCE(h)
  BoundCheck bias_ece_imp;   // bias <= pi_max * ECE(g)
  BoundCheck bias_mce_imp;   // bias <= pi_max * MCE(g)
  BoundCheck var_ece_imp;    // var  <= omega_max * ECE(g)^2
  BoundCheck var_mce_imp;    // var  <= omega_max / |D| * MCE(g)^2

  bool all_hold() const {
    return bias_ece_prop.holds && bias_mce_prop.holds && bias_ece_imp.holds &&
           bias_mce_imp.holds && var_ece_imp.holds && var_mce_imp.holds;
  }
};

inline constexpr double kBoundSlack = 1e-12;

EstimatorAudit theorem_bounds(Reals e0, Reals e1, Reals r_tilde, Reals p, Reals p_hat,
                              Reals q);

namespace serial {
double ideal_loss(Reals e);
double naive_estimator(Reals e, Mask o);
double eib_estimator(Reals e, Reals e_hat, Mask o);
double ips_estimator(Reals e, Reals p_hat, Mask o);
double snips_estimator(Reals e, Reals p_hat, Mask o);
double dr_estimator(Reals e, Reals e_hat, Reals p_hat, Mask o);
double lemma1_bias(Reals e, Reals e_hat, Reals p, Reals p_hat);
double lemma1_variance(Reals e, Reals e_hat, Reals p, Reals p_hat);
Moments brute_force_moments(Reals e, Reals e_hat, Reals p, Reals p_hat);
}  // namespace serial

}  // namespace dce
