#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dce/factor_model.hpp"
#include "dce/rng.hpp"

namespace dce {

// One Platt map sigma(a * logit(p) + b). a=1, b=0 is the exact identity.
struct PlattExpert {
  double a = 1.0;
  double b = 0.0;
};

double platt_apply(const PlattExpert& expert, double p);

enum class BankRole : std::uint8_t { imputation, propensity };

// K Platt experts plus a single affine assignment layer with softmax output.
struct ExpertBank {
  BankRole role = BankRole::propensity;
  std::size_t k = 1;
  std::size_t dim = 0;

  std::vector<PlattExpert> experts;       // K
  std::vector<double> assign_weights;     // K x dim
  std::vector<double> assign_offsets;     // K

  static ExpertBank init(BankRole role, std::size_t k, std::size_t dim, Rng& rng,
                         double noise_scale = 0.01);

  std::size_t n_params() const { return 2 * k + k * dim + k; }
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);
};

// Softmax of the affine assignment map; strictly positive, sums to 1.
std::vector<double> assignment_probs(const ExpertBank& bank,
                                     std::span<const double> user_embedding);

// beta_k = exp((log alpha_k + g_k)/tau) / sum_l exp((log alpha_l + g_l)/tau)
std::vector<double> gumbel_softmax(std::span<const double> alpha, double tau, Rng& rng);
// Test hook and frozen-noise path; zero noise reduces to softmax(log alpha / tau).
std::vector<double> gumbel_softmax_with_noise(std::span<const double> alpha, double tau,
                                              std::span<const double> noise);

struct TemperatureSchedule {
  double t0 = 1.0;
  double tq = 1e-3;
  std::size_t total_epochs = 1;

  void validate() const;
};

// Exponential annealing t0 * (tq/t0)^(q/Q); endpoints exact.
double temperature(const TemperatureSchedule& schedule, std::size_t epoch);

// Convex mixture sum_k beta_k * c_k(raw).
double calibrated_mix(const ExpertBank& bank, std::span<const double> beta, double raw);

// Deterministic evaluation-time score: the argmax expert of alpha (lowest
// index on ties) applied to the raw score.
double calibrated_eval(const ExpertBank& bank, std::span<const double> user_embedding,
                       double raw);

// Per-user frozen embeddings feeding the assignment network.
struct EmbeddingTable {
  std::size_t dim = 0;
  std::vector<double> data;  // n_users x dim

  static EmbeddingTable from_model(const FactorModel& model);
  std::span<const double> row(std::size_t u) const { return {&data[u * dim], dim}; }
  std::size_t n_users() const { return dim == 0 ? 0 : data.size() / dim; }
};

// Argmax expert per user, then applied over a raw score grid.
DenseGrid calibrated_grid_eval(const ExpertBank& bank, const EmbeddingTable& emb,
                               const DenseGrid& raw);

// One calibration sample: BCE with coefficient `coeff` on the calibrated
// score of `raw`, the whole point scaled by `weight`. coeff = o for the
// propensity loss, coeff = r / p_bar for the imputation loss; weight carries
// importance corrections (e.g. the holdout-thinning reweight).
struct CalPoint {
  std::uint32_t user;
  double raw;
  double coeff;
  double weight = 1.0;
};

struct BankGrad {
  std::vector<double> a, b, weights, offsets;

  static BankGrad zeros_like(const ExpertBank& bank);
  void clear();
  std::vector<double> flatten() const;
};

struct BankLossResult {
  double loss = 0.0;
  std::size_t coeff_over_one = 0;  // entries with coefficient > 1 (Eq-14 regime)
};

// Mean coefficient-weighted BCE over the batch. beta is pseudo-sampled once
// per distinct user (first-appearance order): from `injected_noise` when
// given, else drawn from `gumbel_rng`, else zero noise. Gradients cover the
// experts and the assignment layer through the Gumbel-Softmax relaxation.
BankLossResult bank_loss_grad(const ExpertBank& bank, std::span<const CalPoint> entries,
                              const EmbeddingTable& emb, double tau, Rng* gumbel_rng,
                              const std::vector<double>* injected_noise, BankGrad* grad);

// Eq-15-style loss: targets are observation indicators over D_val.
BankLossResult loss_propcal(const ExpertBank& bank, std::span<const Split::DvalEntry> batch,
                            const DenseGrid& raw_propensity, const EmbeddingTable& emb,
                            double tau, Rng* gumbel_rng,
                            const std::vector<double>* injected_noise, BankGrad* grad);

// Eq-14-style loss: coefficient r / p_bar on observed validation pairs. The
// coefficient may exceed 1; clamp_coeff caps it at 1 when enabled.
BankLossResult loss_impcal(const ExpertBank& bank, std::span<const Observation> batch,
                           const DenseGrid& raw_pseudo_label, const DenseGrid& pbar,
                           const EmbeddingTable& emb, double tau, bool clamp_coeff,
                           Rng* gumbel_rng, const std::vector<double>* injected_noise,
                           BankGrad* grad);

struct ExpertFitConfig {
  TemperatureSchedule schedule;
  AdamConfig adam{.lr = 0.02, .weight_decay = 0.0};
  std::size_t epochs = 30;
  std::size_t batch_size = 1024;
  std::uint64_t seed = 1;
};

// Optimizes the bank on a fixed calibration set with annealed temperature.
void fit_experts(ExpertBank& bank, const EmbeddingTable& emb,
                 std::span<const CalPoint> points, const ExpertFitConfig& cfg);

// Ground-truth calibration error over the full grid.
double ece_pairwise(std::span<const double> truth, std::span<const double> predicted);
double mce_pairwise(std::span<const double> truth, std::span<const double> predicted);

struct ReliabilityReport {
  struct Bin {
    double lo = 0.0, hi = 0.0;
    std::size_t count = 0;
    double mean_score = 0.0;
    double positive_rate = 0.0;
  };
  std::vector<Bin> bins;
  double ece = 0.0;
  double mce = 0.0;
  std::size_t n_samples = 0;
};

// Equal-width bins over [0,1], right-closed with ties to the lower bin.
ReliabilityReport ece_binned(std::span<const double> scores,
                             std::span<const double> labels, std::size_t m_bins);

void save_bank(const std::string& path, const ExpertBank& bank);
ExpertBank load_bank(const std::string& path);

namespace serial {
double ece_pairwise(std::span<const double> truth, std::span<const double> predicted);
double mce_pairwise(std::span<const double> truth, std::span<const double> predicted);
}  // namespace serial

}  // namespace dce
