#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dce/rng.hpp"

namespace dce {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Observation {
  std::uint32_t user;
  std::uint32_t item;
  std::uint8_t rating;  // binary
};

// The user-item universe D plus the observed set O. The full grid is implicit
// as n_users x n_items; only observed pairs are stored sparsely.
struct InteractionTable {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::vector<Observation> observed;

  std::size_t n_pairs() const { return n_users * n_items; }
  std::size_t index(std::size_t u, std::size_t i) const { return u * n_items + i; }

  // Throws DataError on duplicate pairs, out-of-range indices, non-binary ratings.
  void validate() const;

  // Dense 0/1 mask over D built from `observed`.
  std::vector<std::uint8_t> observed_mask() const;
};

// Dense per-pair grid, row-major by user.
struct DenseGrid {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::vector<double> values;

  DenseGrid() = default;
  DenseGrid(std::size_t nu, std::size_t ni, double fill = 0.0)
      : n_users(nu), n_items(ni), values(nu * ni, fill) {}

  double& at(std::size_t u, std::size_t i) { return values[u * n_items + i]; }
  double at(std::size_t u, std::size_t i) const { return values[u * n_items + i]; }
  std::size_t size() const { return values.size(); }
};

// True propensities p and true relevance probabilities q for synthetic data.
struct GroundTruth {
  DenseGrid p;
  DenseGrid q;
  std::uint64_t seed = 0;

  void validate(const InteractionTable& table) const;
};

struct Split {
  std::vector<Observation> train_obs;
  std::vector<Observation> val_obs;

  // D_val: positives are exactly val_obs, negatives are every pair of D that
  // was never observed at all.
  struct DvalEntry {
    std::uint32_t user;
    std::uint32_t item;
    std::uint8_t observed;
  };
  std::vector<DvalEntry> d_val;
};

struct SynthConfig {
  std::size_t n_users = 100;
  std::size_t n_items = 100;
  std::size_t latent_dim = 8;
  double q_scale = 2.0;          // logit spread of the relevance grid
  double q_noise = 0.0;          // per-pair logit noise beyond the factor structure
  double kappa = 4.0;            // preference->exposure steepness
  double pop_weight = 1.5;       // weight of the item-popularity term
  double pop_skew = 1.0;         // popularity decay exponent
  double group_offset = 0.0;     // +/- exposure offset for the two user halves
  double exposure_offset = 0.0;  // global exposure logit shift (controls sparsity)
  double propensity_floor = 0.05;
  std::uint64_t seed = 1;
};

// MNAR generator: relevance q from random latent factors, exposure p a
// monotone function of q mixed with item popularity, floored from below.
// floor = 1 degenerates to full observation.
std::pair<InteractionTable, GroundTruth> generate_synthetic(const SynthConfig& config);

// Independent o ~ Bernoulli(p) draw per pair.
std::vector<std::uint8_t> sample_observations(const GroundTruth& gt, std::uint64_t rng_seed);

// Uniform random partition of `observed` into train/val; d_val assembled from
// val positives plus all never-observed pairs.
Split split_validation(const InteractionTable& table, double fraction, std::uint64_t seed);

struct TsvLoadResult {
  InteractionTable table;
  std::vector<std::int64_t> user_ids;  // dense index -> original id
  std::vector<std::int64_t> item_ids;
};

// Whitespace-separated (user, item, raw rating) rows; ids re-indexed densely
// in order of first appearance; r = 1 iff raw rating > threshold.
TsvLoadResult load_tsv(const std::string& path, double rating_threshold);

void save_tsv(const std::string& path, const InteractionTable& table);

// Flat CSV grid (one row per user), used for ground-truth reuse by audits.
void save_grid_csv(const std::string& path, const DenseGrid& grid);
DenseGrid load_grid_csv(const std::string& path);

}  // namespace dce
