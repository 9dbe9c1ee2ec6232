#pragma once

#include <optional>
#include <stdexcept>
#include <string>

#include "dce/calibration.hpp"
#include "dce/data.hpp"
#include "dce/factor_model.hpp"

namespace dce {

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Method { naive, eib, ips, snips, dr_jl, dce_dr };

Method parse_method(const std::string& name);
std::string method_name(Method m);

// RNG stream ids used by the trainers. Fixed so that runs sharing a seed see
// identical batch schedules regardless of which optional components are
// active (the Gumbel and expert streams are separate from the batch streams).
namespace streams {
inline constexpr std::uint64_t theta_init = 61;
inline constexpr std::uint64_t phi_init = 62;
inline constexpr std::uint64_t obs_shuffle = 63;
inline constexpr std::uint64_t domain_batch = 64;
inline constexpr std::uint64_t gumbel = 65;
inline constexpr std::uint64_t val_shuffle = 66;
inline constexpr std::uint64_t prop_bank_init = 67;
inline constexpr std::uint64_t imp_bank_init = 68;
inline constexpr std::uint64_t dval_subsample = 69;
}  // namespace streams

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_obs = 128;
  std::size_t batch_cal = 512;
  std::size_t dim = 16;
  std::size_t prop_dim = 0;  // propensity-model dimension; 0 = same as dim
  std::size_t k_experts = 5;
  ErrorKind kind = ErrorKind::bce;

  AdamConfig adam_pred{.lr = 0.02, .weight_decay = 1e-6};
  AdamConfig adam_imp{.lr = 0.02, .weight_decay = 1e-6};
  AdamConfig adam_expert{.lr = 0.02, .weight_decay = 0.0};

  PropensityTrainConfig propensity;
  std::size_t prop_cal_epochs = 30;
  std::size_t dval_negatives_per_positive = 0;  // 0 = keep every negative

  double t0 = 1.0;
  double tq = 1e-3;
  std::size_t patience = 0;  // 0 = no early stopping
  double clip_threshold = 0.0;  // 0 = clipping off
  bool clamp_impcal_coeff = false;
  // Use r as the BCE target with importance weight 1/p_bar on both terms
  // instead of the r/p_bar coefficient form. The coefficient form's
  // per-level optimum is E[r/p_bar], which exceeds 1 under sparse exposure
  // and saturates the calibrated pseudo labels; the weighted form targets
  // the population positive rate exactly.
  bool impcal_ips_weight = false;
  double assign_init_noise = 0.01;

  // heuristic imputation used by the EIB baseline
  double heuristic_omega = 0.5;
  double heuristic_gamma = 0.5;

  std::uint64_t seed = 1;
};

struct HistoryRecord {
  std::size_t epoch = 0;
  double loss_pred = 0.0;
  double loss_imp = 0.0;
  double loss_cal = 0.0;
  double val_metric = 0.0;
  double tau = 0.0;
};

// Frozen propensity side: classifier psi, its calibration experts, and the
// derived per-pair grids.
struct PropensityStack {
  FactorModel psi;
  ExpertBank bank;
  EmbeddingTable emb;
  DenseGrid raw;         // p_hat over D
  DenseGrid calibrated;  // p_bar over D, argmax-expert evaluation
};

PropensityStack pretrain_propensity_stack(const InteractionTable& table,
                                          const Split& split, const TrainConfig& cfg);

// The expert-fitting half of pretraining: builds the Eq-15 calibration set
// from the split (positives reweighted by |O| / |O_val| so the target is the
// unthinned propensity) and fits stack.bank on top of the frozen stack.psi.
// Expects stack.psi / stack.raw / stack.emb to be filled in.
void fit_propensity_experts(PropensityStack& stack, const InteractionTable& table,
                            const Split& split, const TrainConfig& cfg);

struct TrainedStack {
  Method method = Method::naive;
  FactorModel prediction;
  std::optional<FactorModel> imputation;
  std::optional<FactorModel> propensity;
  std::optional<ExpertBank> imp_bank;
  std::optional<ExpertBank> prop_bank;
  std::vector<HistoryRecord> history;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
};

// Algorithm-1 order per epoch: per observed mini-batch an imputation update
// then a prediction update on a freshly sampled full-domain batch; after the
// batch loop one calibration-expert pass over the validation set.
TrainedStack trilevel_train(const InteractionTable& table, const Split& split,
                            const PropensityStack& prop, const TrainConfig& cfg);

// Same loop with raw propensities and no calibration steps.
TrainedStack train_dr_jl(const InteractionTable& table, const Split& split,
                         const PropensityStack& prop, const TrainConfig& cfg);

// naive / eib / ips / snips. `prop` may be null for naive and eib.
TrainedStack train_baseline(Method method, const InteractionTable& table,
                            const Split& split, const PropensityStack* prop,
                            const TrainConfig& cfg);

// --- losses exposed for the finite-difference suite ---

// Eq-16-style imputation loss over an observed batch: squared gap between
// imputed and true error, inverse-weighted by the (calibrated) propensity,
// normalized by |D|. Gradient flows to the imputation model only.
double loss_imp_cal(const FactorModel& imputation, const FactorModel& prediction,
                    std::span<const Observation> batch, const DenseGrid& pbar,
                    ErrorKind kind, std::size_t n_domain_pairs, ModelGrad* grad);

// One full-domain sample for the prediction update; rbar and pbar are
// constants with respect to the prediction parameters.
struct DrSample {
  std::uint32_t user;
  std::uint32_t item;
  std::uint8_t observed;
  double rating;  // meaningful when observed
  double rbar;
  double pbar;
};

// Eq-17-style prediction loss over a domain batch (mean over the batch).
double loss_pred_dr_cal(const FactorModel& prediction, std::span<const DrSample> batch,
                        ErrorKind kind, ModelGrad* grad);

}  // namespace dce
