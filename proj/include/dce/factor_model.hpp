#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dce/data.hpp"
#include "dce/rng.hpp"

namespace dce {

// Sigmoid outputs are clamped to [kEpsLog, 1-kEpsLog] before any log.
inline constexpr double kEpsLog = 1e-7;

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }
inline double clamp_prob(double p) {
  if (p < kEpsLog) return kEpsLog;
  if (p > 1.0 - kEpsLog) return 1.0 - kEpsLog;
  return p;
}

enum class ErrorKind : std::uint8_t { bce, mse };

// Losses at the two hard labels: e0 = e(r_hat, 0), e1 = e(r_hat, 1).
struct ErrorPair {
  double e0;
  double e1;
};

ErrorPair error_pair(ErrorKind kind, double r_hat);

// Error against a (possibly soft) target t in [0,1], defined as the label
// mixture t*e1 + (1-t)*e0. For BCE this is the usual soft cross entropy; for
// MSE it is the expected squared error under r ~ Bernoulli(t).
double error(ErrorKind kind, double r_hat, double target);

// d error / d z at r_hat = sigmoid(z), same mixture convention.
double error_grad_z(ErrorKind kind, double r_hat, double target);

enum class ModelRole : std::uint8_t { prediction, imputation, propensity };

// Matrix-factorization scorer with per-entity biases and a sigmoid output.
struct FactorModel {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t dim = 0;
  ModelRole role = ModelRole::prediction;

  std::vector<double> user_factors;  // n_users x dim
  std::vector<double> item_factors;  // n_items x dim
  std::vector<double> user_bias;
  std::vector<double> item_bias;
  double global_bias = 0.0;

  static FactorModel init(std::size_t n_users, std::size_t n_items, std::size_t dim,
                          ModelRole role, Rng& rng, double scale = 0.1);

  double raw_score(std::size_t u, std::size_t i) const {
    const double* uf = &user_factors[u * dim];
    const double* vf = &item_factors[i * dim];
    double dot = 0.0;
    for (std::size_t k = 0; k < dim; ++k) dot += uf[k] * vf[k];
    return dot + user_bias[u] + item_bias[i] + global_bias;
  }

  double score(std::size_t u, std::size_t i) const {
    return clamp_prob(sigmoid(raw_score(u, i)));
  }

  std::span<const double> user_embedding(std::size_t u) const {
    return {&user_factors[u * dim], dim};
  }

  // Scores over the whole universe, row-major.
  DenseGrid score_grid() const;

  std::size_t n_params() const {
    return user_factors.size() + item_factors.size() + user_bias.size() +
           item_bias.size() + 1;
  }
};

struct BatchEntry {
  std::uint32_t user;
  std::uint32_t item;
  double target;
  double weight;
};

// Gradient buffer shaped like the model parameters.
struct ModelGrad {
  std::vector<double> user_factors;
  std::vector<double> item_factors;
  std::vector<double> user_bias;
  std::vector<double> item_bias;
  double global_bias = 0.0;

  static ModelGrad zeros_like(const FactorModel& m);
  void clear();
};

// Exact gradient of sum_j weight_j * e(score(u_j,i_j), target_j).
void gradient(const FactorModel& model, std::span<const BatchEntry> batch,
              ErrorKind kind, ModelGrad& out);

struct AdamConfig {
  double lr = 0.01;
  double weight_decay = 0.0;  // decoupled
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Flat-array Adam; reused by factor models and expert banks.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}

  void begin_step() { ++step; }
  void update(std::span<double> params, std::span<const double> grads,
              std::size_t offset, const AdamConfig& cfg);
};

void adam_step(FactorModel& model, AdamState& state, const ModelGrad& grad,
               const AdamConfig& cfg);

struct PropensityTrainConfig {
  std::size_t dim = 16;
  std::size_t epochs = 10;
  std::size_t batch_size = 256;
  double negatives_per_positive = 4.0;
  bool full_complement = false;  // use every pair of D \ O each epoch
  AdamConfig adam{.lr = 0.05, .weight_decay = 1e-6};
  std::uint64_t seed = 1;
};

// Binary classifier between O (label 1) and D \ O (label 0), trained with BCE.
FactorModel train_propensity_classifier(const InteractionTable& table,
                                        const PropensityTrainConfig& cfg);

// Popularity-based heuristic: p_hat(item) = (count_i / max count)^eta,
// identical across users for a fixed item.
DenseGrid heuristic_propensity(const InteractionTable& table, double eta);

inline double heuristic_imputed_error(double r_hat, double omega, double gamma) {
  return omega * std::abs(r_hat - gamma);
}

// Versioned flat checkpoint; round-trips bit-exactly.
void save_checkpoint(const std::string& path, const FactorModel& model);
FactorModel load_checkpoint(const std::string& path);

}  // namespace dce
