#include "dce/factor_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "dce/parallel.hpp"

namespace dce {

ErrorPair error_pair(ErrorKind kind, double r_hat) {
  const double rc = clamp_prob(r_hat);
  if (kind == ErrorKind::bce) return {-std::log(1.0 - rc), -std::log(rc)};
  return {rc * rc, (rc - 1.0) * (rc - 1.0)};
}

double error(ErrorKind kind, double r_hat, double target) {
  if (!std::isfinite(r_hat) || !std::isfinite(target))
    throw std::invalid_argument("non-finite error input");
  const auto [e0, e1] = error_pair(kind, r_hat);
  return target * e1 + (1.0 - target) * e0;
}

double error_grad_z(ErrorKind kind, double r_hat, double target) {
  if (kind == ErrorKind::bce) return r_hat - target;
  // d/dz [t(r-1)^2 + (1-t)r^2] = 2(r - t) r(1-r)
  return 2.0 * (r_hat - target) * r_hat * (1.0 - r_hat);
}

FactorModel FactorModel::init(std::size_t n_users, std::size_t n_items, std::size_t dim,
                              ModelRole role, Rng& rng, double scale) {
  FactorModel m;
  m.n_users = n_users;
  m.n_items = n_items;
  m.dim = dim;
  m.role = role;
  m.user_factors.resize(n_users * dim);
  m.item_factors.resize(n_items * dim);
  m.user_bias.assign(n_users, 0.0);
  m.item_bias.assign(n_items, 0.0);
  for (auto& x : m.user_factors) x = scale * rng.normal();
  for (auto& x : m.item_factors) x = scale * rng.normal();
  return m;
}

DenseGrid FactorModel::score_grid() const {
  DenseGrid grid(n_users, n_items);
  parallel_for(n_users, [&](std::size_t u) {
    for (std::size_t i = 0; i < n_items; ++i) grid.at(u, i) = score(u, i);
  });
  return grid;
}

ModelGrad ModelGrad::zeros_like(const FactorModel& m) {
  ModelGrad g;
  g.user_factors.assign(m.user_factors.size(), 0.0);
  g.item_factors.assign(m.item_factors.size(), 0.0);
  g.user_bias.assign(m.user_bias.size(), 0.0);
  g.item_bias.assign(m.item_bias.size(), 0.0);
  return g;
}

void ModelGrad::clear() {
  std::fill(user_factors.begin(), user_factors.end(), 0.0);
  std::fill(item_factors.begin(), item_factors.end(), 0.0);
  std::fill(user_bias.begin(), user_bias.end(), 0.0);
  std::fill(item_bias.begin(), item_bias.end(), 0.0);
  global_bias = 0.0;
}

void gradient(const FactorModel& model, std::span<const BatchEntry> batch,
              ErrorKind kind, ModelGrad& out) {
  const std::size_t n = batch.size();
  const std::size_t d = model.dim;

  // coefficient pass is data-parallel; the scatter below stays serial so the
  // accumulation order is fixed
  std::vector<double> coef(n);
  parallel_for(n, [&](std::size_t j) {
    const auto& b = batch[j];
    const double r_hat = sigmoid(model.raw_score(b.user, b.item));
    coef[j] = b.weight * error_grad_z(kind, r_hat, b.target);
  });

  for (std::size_t j = 0; j < n; ++j) {
    const auto& b = batch[j];
    const double c = coef[j];
    const double* uf = &model.user_factors[b.user * d];
    const double* vf = &model.item_factors[b.item * d];
    double* gu = &out.user_factors[b.user * d];
    double* gv = &out.item_factors[b.item * d];
    for (std::size_t k = 0; k < d; ++k) {
      gu[k] += c * vf[k];
      gv[k] += c * uf[k];
    }
    out.user_bias[b.user] += c;
    out.item_bias[b.item] += c;
    out.global_bias += c;
  }
}

void AdamState::update(std::span<double> params, std::span<const double> grads,
                       std::size_t offset, const AdamConfig& cfg) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  double* mp = m.data() + offset;
  double* vp = v.data() + offset;
  const double* g = grads.data();
  double* p = params.data();
  const std::size_t n = params.size();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    mp[i] = cfg.beta1 * mp[i] + (1.0 - cfg.beta1) * g[i];
    vp[i] = cfg.beta2 * vp[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mh = mp[i] / bc1;
    const double vh = vp[i] / bc2;
    p[i] -= cfg.lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * p[i]);
  }
}

void adam_step(FactorModel& model, AdamState& state, const ModelGrad& grad,
               const AdamConfig& cfg) {
  state.begin_step();
  std::size_t off = 0;
  auto run = [&](std::vector<double>& p, const std::vector<double>& g) {
    state.update({p.data(), p.size()}, {g.data(), g.size()}, off, cfg);
    off += p.size();
  };
  run(model.user_factors, grad.user_factors);
  run(model.item_factors, grad.item_factors);
  run(model.user_bias, grad.user_bias);
  run(model.item_bias, grad.item_bias);
  double gb[1] = {model.global_bias};
  const double gg[1] = {grad.global_bias};
  state.update({gb, 1}, {gg, 1}, off, cfg);
  model.global_bias = gb[0];
}

FactorModel train_propensity_classifier(const InteractionTable& table,
                                        const PropensityTrainConfig& cfg) {
  if (table.observed.empty()) throw DataError("cannot train propensity model: O is empty");

  Rng init_rng = Rng::stream(cfg.seed, 41);
  Rng neg_rng = Rng::stream(cfg.seed, 42);
  Rng shuffle_rng = Rng::stream(cfg.seed, 43);

  FactorModel psi = FactorModel::init(table.n_users, table.n_items, cfg.dim,
                                      ModelRole::propensity, init_rng);
  AdamState adam(psi.n_params());
  ModelGrad grad = ModelGrad::zeros_like(psi);

  const auto mask = table.observed_mask();
  std::vector<std::uint64_t> complement;
  if (cfg.full_complement) {
    for (std::size_t j = 0; j < mask.size(); ++j)
      if (!mask[j]) complement.push_back(j);
  }

  std::vector<BatchEntry> pool;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    pool.clear();
    for (const auto& o : table.observed) pool.push_back({o.user, o.item, 1.0, 1.0});
    if (cfg.full_complement) {
      for (std::uint64_t j : complement)
        pool.push_back({static_cast<std::uint32_t>(j / table.n_items),
                        static_cast<std::uint32_t>(j % table.n_items), 0.0, 1.0});
    } else {
      const std::size_t n_neg = static_cast<std::size_t>(
          cfg.negatives_per_positive * static_cast<double>(table.observed.size()));
      for (std::size_t j = 0; j < n_neg; ++j) {
        // rejection-sample an unobserved pair; falls through on dense tables
        for (int tries = 0; tries < 64; ++tries) {
          const std::uint64_t idx = neg_rng.uniform_index(table.n_pairs());
          if (!mask[idx]) {
            pool.push_back({static_cast<std::uint32_t>(idx / table.n_items),
                            static_cast<std::uint32_t>(idx % table.n_items), 0.0, 1.0});
            break;
          }
        }
      }
    }
    shuffle_rng.shuffle(pool);
    for (std::size_t lo = 0; lo < pool.size(); lo += cfg.batch_size) {
      const std::size_t hi = std::min(pool.size(), lo + cfg.batch_size);
      std::span<const BatchEntry> batch(pool.data() + lo, hi - lo);
      grad.clear();
      const double inv = 1.0 / static_cast<double>(batch.size());
      std::vector<BatchEntry> scaled(batch.begin(), batch.end());
      for (auto& b : scaled) b.weight = inv;
      gradient(psi, scaled, ErrorKind::bce, grad);
      adam_step(psi, adam, grad, cfg.adam);
    }
  }
  return psi;
}

DenseGrid heuristic_propensity(const InteractionTable& table, double eta) {
  if (table.observed.empty()) throw DataError("heuristic propensity needs observations");
  std::vector<double> counts(table.n_items, 0.0);
  for (const auto& o : table.observed) counts[o.item] += 1.0;
  const double max_count = *std::max_element(counts.begin(), counts.end());
  DenseGrid grid(table.n_users, table.n_items);
  for (std::size_t i = 0; i < table.n_items; ++i) {
    const double v = std::pow(counts[i] / max_count, eta);
    for (std::size_t u = 0; u < table.n_users; ++u) grid.at(u, i) = v;
  }
  return grid;
}

namespace {

constexpr std::uint32_t kModelMagic = 0x4443454d;  // "DCEM"
constexpr std::uint32_t kModelVersion = 1;

template <class T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
void read_pod(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof v);
}

void write_vec(std::ofstream& out, const std::vector<double>& v) {
  const std::uint64_t n = v.size();
  write_pod(out, n);
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
}

std::vector<double> read_vec(std::ifstream& in) {
  std::uint64_t n = 0;
  read_pod(in, n);
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const FactorModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  write_pod(out, kModelMagic);
  write_pod(out, kModelVersion);
  write_pod(out, static_cast<std::uint8_t>(model.role));
  write_pod(out, static_cast<std::uint64_t>(model.n_users));
  write_pod(out, static_cast<std::uint64_t>(model.n_items));
  write_pod(out, static_cast<std::uint64_t>(model.dim));
  write_vec(out, model.user_factors);
  write_vec(out, model.item_factors);
  write_vec(out, model.user_bias);
  write_vec(out, model.item_bias);
  write_pod(out, model.global_bias);
}

FactorModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::uint32_t magic = 0, version = 0;
  read_pod(in, magic);
  read_pod(in, version);
  if (magic != kModelMagic || version != kModelVersion)
    throw DataError("bad model checkpoint: " + path);
  FactorModel m;
  std::uint8_t role = 0;
  std::uint64_t nu = 0, ni = 0, d = 0;
  read_pod(in, role);
  read_pod(in, nu);
  read_pod(in, ni);
  read_pod(in, d);
  m.role = static_cast<ModelRole>(role);
  m.n_users = nu;
  m.n_items = ni;
  m.dim = d;
  m.user_factors = read_vec(in);
  m.item_factors = read_vec(in);
  m.user_bias = read_vec(in);
  m.item_bias = read_vec(in);
  read_pod(in, m.global_bias);
  if (!in) throw DataError("truncated model checkpoint: " + path);
  return m;
}

}  // namespace dce
