#include "dce/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "dce/parallel.hpp"

namespace dce {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

void InteractionTable::validate() const {
  std::vector<std::uint8_t> seen(n_pairs(), 0);
  for (const auto& o : observed) {
    if (o.user >= n_users || o.item >= n_items)
      throw DataError("observation index out of range");
    if (o.rating > 1) throw DataError("rating must be 0 or 1");
    auto& s = seen[index(o.user, o.item)];
    if (s) throw DataError("duplicate observed pair");
    s = 1;
  }
}

std::vector<std::uint8_t> InteractionTable::observed_mask() const {
  std::vector<std::uint8_t> mask(n_pairs(), 0);
  for (const auto& o : observed) mask[index(o.user, o.item)] = 1;
  return mask;
}

void GroundTruth::validate(const InteractionTable& table) const {
  if (p.n_users != table.n_users || p.n_items != table.n_items ||
      q.n_users != table.n_users || q.n_items != table.n_items)
    throw DataError("ground truth shape mismatch");
  for (double v : p.values)
    if (!(v > 0.0) || v > 1.0) throw DataError("propensity outside (0,1]");
  for (double v : q.values)
    if (v < 0.0 || v > 1.0) throw DataError("relevance outside [0,1]");
}

std::pair<InteractionTable, GroundTruth> generate_synthetic(const SynthConfig& config) {
  if (config.n_users == 0 || config.n_items == 0)
    throw DataError("synthetic grid must be non-empty");
  if (!(config.propensity_floor > 0.0) || config.propensity_floor > 1.0)
    throw DataError("propensity floor must lie in (0,1]");
  if (config.latent_dim == 0) throw DataError("latent dimension must be positive");

  const std::size_t nu = config.n_users, ni = config.n_items, d = config.latent_dim;

  Rng latent_rng = Rng::stream(config.seed, 11);
  std::vector<double> uf(nu * d), vf(ni * d);
  for (auto& x : uf) x = latent_rng.normal();
  for (auto& x : vf) x = latent_rng.normal();

  // Popularity in [0,1]: decaying in a random item order so popularity is not
  // confounded with the item index.
  Rng pop_rng = Rng::stream(config.seed, 12);
  std::vector<std::uint32_t> order(ni);
  std::iota(order.begin(), order.end(), 0u);
  pop_rng.shuffle(order);
  std::vector<double> popularity(ni);
  for (std::size_t rank = 0; rank < ni; ++rank) {
    const double fr = ni == 1 ? 1.0 : 1.0 - static_cast<double>(rank) / (ni - 1);
    popularity[order[rank]] = std::pow(fr, config.pop_skew);
  }

  GroundTruth gt;
  gt.seed = config.seed;
  gt.p = DenseGrid(nu, ni);
  gt.q = DenseGrid(nu, ni);

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t u = 0; u < nu; ++u) {
    const double grp = (u < nu / 2 ? 1.0 : -1.0) * config.group_offset;
    for (std::size_t i = 0; i < ni; ++i) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += uf[u * d + k] * vf[i * d + k];
      const double q = sigmoid(config.q_scale * dot * inv_sqrt_d +
                               config.q_noise * latent_rng.normal());
      const double expo = config.kappa * (q - 0.5) +
                          config.pop_weight * (popularity[i] - 0.5) + grp +
                          config.exposure_offset;
      gt.q.at(u, i) = q;
      gt.p.at(u, i) = config.propensity_floor +
                      (1.0 - config.propensity_floor) * sigmoid(expo);
    }
  }

  InteractionTable table;
  table.n_users = nu;
  table.n_items = ni;
  Rng obs_rng = Rng::stream(config.seed, 13);
  Rng rating_rng = Rng::stream(config.seed, 14);
  for (std::size_t u = 0; u < nu; ++u)
    for (std::size_t i = 0; i < ni; ++i)
      if (obs_rng.bernoulli(gt.p.at(u, i)))
        table.observed.push_back({static_cast<std::uint32_t>(u),
                                  static_cast<std::uint32_t>(i),
                                  rating_rng.bernoulli(gt.q.at(u, i)) ? std::uint8_t{1}
                                                                      : std::uint8_t{0}});
  return {std::move(table), std::move(gt)};
}

std::vector<std::uint8_t> sample_observations(const GroundTruth& gt, std::uint64_t rng_seed) {
  Rng rng = Rng::stream(rng_seed, 21);
  std::vector<std::uint8_t> mask(gt.p.size());
  for (std::size_t j = 0; j < mask.size(); ++j)
    mask[j] = rng.bernoulli(gt.p.values[j]) ? 1 : 0;
  return mask;
}

Split split_validation(const InteractionTable& table, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0) || !(fraction < 1.0))
    throw DataError("validation fraction must lie in (0,1)");
  const std::size_t n = table.observed.size();
  const std::size_t n_val =
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (n_val == 0) throw DataError("validation fraction rounds to an empty set");
  if (n_val >= n) throw DataError("validation fraction leaves no training data");

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng = Rng::stream(seed, 31);
  rng.shuffle(perm);

  Split split;
  split.val_obs.reserve(n_val);
  split.train_obs.reserve(n - n_val);
  std::vector<std::uint8_t> in_val(n, 0);
  for (std::size_t j = 0; j < n_val; ++j) in_val[perm[j]] = 1;
  for (std::size_t j = 0; j < n; ++j)
    (in_val[j] ? split.val_obs : split.train_obs).push_back(table.observed[j]);

  const auto mask = table.observed_mask();
  for (const auto& o : split.val_obs) split.d_val.push_back({o.user, o.item, 1});
  for (std::size_t u = 0; u < table.n_users; ++u)
    for (std::size_t i = 0; i < table.n_items; ++i)
      if (!mask[table.index(u, i)])
        split.d_val.push_back({static_cast<std::uint32_t>(u),
                               static_cast<std::uint32_t>(i), 0});
  return split;
}

TsvLoadResult load_tsv(const std::string& path, double rating_threshold) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);

  TsvLoadResult res;
  std::unordered_map<std::int64_t, std::uint32_t> umap, imap;
  std::unordered_map<std::uint64_t, std::uint8_t> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::int64_t user_id, item_id;
    double raw;
    if (!(ss >> user_id >> item_id >> raw)) {
      throw DataError("parse error at " + path + ":" + std::to_string(line_no));
    }
    std::string rest;
    if (ss >> rest) {
      throw DataError("trailing fields at " + path + ":" + std::to_string(line_no));
    }

    auto [uit, unew] = umap.try_emplace(user_id, static_cast<std::uint32_t>(res.user_ids.size()));
    if (unew) res.user_ids.push_back(user_id);
    auto [iit, inew] = imap.try_emplace(item_id, static_cast<std::uint32_t>(res.item_ids.size()));
    if (inew) res.item_ids.push_back(item_id);

    const std::uint64_t key =
        (static_cast<std::uint64_t>(uit->second) << 32) | iit->second;
    if (!seen.emplace(key, 1).second)
      throw DataError("duplicate pair at " + path + ":" + std::to_string(line_no));

    res.table.observed.push_back(
        {uit->second, iit->second, raw > rating_threshold ? std::uint8_t{1} : std::uint8_t{0}});
  }
  res.table.n_users = res.user_ids.size();
  res.table.n_items = res.item_ids.size();
  if (res.table.observed.empty()) throw DataError("no rows in " + path);
  return res;
}

void save_tsv(const std::string& path, const InteractionTable& table) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& o : table.observed)
    out << o.user << '\t' << o.item << '\t' << int(o.rating) << '\n';
}

void save_grid_csv(const std::string& path, const DenseGrid& grid) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  char buf[32];
  for (std::size_t u = 0; u < grid.n_users; ++u) {
    for (std::size_t i = 0; i < grid.n_items; ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", grid.at(u, i));
      out << buf << (i + 1 == grid.n_items ? '\n' : ',');
    }
  }
}

DenseGrid load_grid_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (!rows.empty() && row.size() != rows.front().size())
      throw DataError("ragged grid in " + path);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError("empty grid in " + path);
  DenseGrid grid(rows.size(), rows.front().size());
  for (std::size_t u = 0; u < grid.n_users; ++u)
    for (std::size_t i = 0; i < grid.n_items; ++i) grid.at(u, i) = rows[u][i];
  return grid;
}

}  // namespace dce
