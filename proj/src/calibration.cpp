#include "dce/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "dce/parallel.hpp"

namespace dce {

double platt_apply(const PlattExpert& expert, double p) {
  if (expert.a == 1.0 && expert.b == 0.0) return p;  // exact identity
  const double z = logit(clamp_prob(p));
  return clamp_prob(sigmoid(expert.a * z + expert.b));
}

ExpertBank ExpertBank::init(BankRole role, std::size_t k, std::size_t dim, Rng& rng,
                            double noise_scale) {
  if (k == 0) throw std::invalid_argument("expert bank needs K >= 1");
  ExpertBank bank;
  bank.role = role;
  bank.k = k;
  bank.dim = dim;
  bank.experts.assign(k, PlattExpert{});
  bank.assign_weights.resize(k * dim);
  bank.assign_offsets.assign(k, 0.0);
  for (auto& w : bank.assign_weights) w = noise_scale * rng.normal();
  return bank;
}

std::vector<double> ExpertBank::flatten() const {
  std::vector<double> flat;
  flat.reserve(n_params());
  for (const auto& e : experts) flat.push_back(e.a);
  for (const auto& e : experts) flat.push_back(e.b);
  flat.insert(flat.end(), assign_weights.begin(), assign_weights.end());
  flat.insert(flat.end(), assign_offsets.begin(), assign_offsets.end());
  return flat;
}

void ExpertBank::unflatten(std::span<const double> flat) {
  std::size_t off = 0;
  for (auto& e : experts) e.a = flat[off++];
  for (auto& e : experts) e.b = flat[off++];
  for (auto& w : assign_weights) w = flat[off++];
  for (auto& o : assign_offsets) o = flat[off++];
}

namespace {

std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

}  // namespace

std::vector<double> assignment_probs(const ExpertBank& bank,
                                     std::span<const double> user_embedding) {
  if (user_embedding.size() != bank.dim)
    throw std::invalid_argument("embedding dimension mismatch");
  std::vector<double> logits(bank.k, 0.0);
  for (std::size_t l = 0; l < bank.k; ++l) {
    const double* w = &bank.assign_weights[l * bank.dim];
    double z = bank.assign_offsets[l];
    for (std::size_t j = 0; j < bank.dim; ++j) z += w[j] * user_embedding[j];
    logits[l] = z;
  }
  return softmax(logits);
}

std::vector<double> gumbel_softmax_with_noise(std::span<const double> alpha, double tau,
                                              std::span<const double> noise) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel softmax needs tau > 0");
  if (alpha.size() != noise.size()) throw std::invalid_argument("noise size mismatch");
  std::vector<double> y(alpha.size());
  for (std::size_t i = 0; i < alpha.size(); ++i)
    y[i] = (std::log(alpha[i]) + noise[i]) / tau;
  return softmax(y);
}

std::vector<double> gumbel_softmax(std::span<const double> alpha, double tau, Rng& rng) {
  std::vector<double> noise(alpha.size());
  for (auto& g : noise) g = rng.gumbel();
  return gumbel_softmax_with_noise(alpha, tau, noise);
}

void TemperatureSchedule::validate() const {
  if (!(t0 > tq) || !(tq > 0.0)) throw std::invalid_argument("need T0 > TQ > 0");
  if (total_epochs == 0) throw std::invalid_argument("need at least one epoch");
}

double temperature(const TemperatureSchedule& schedule, std::size_t epoch) {
  schedule.validate();
  if (epoch > schedule.total_epochs) throw std::invalid_argument("epoch out of range");
  if (epoch == 0) return schedule.t0;
  if (epoch == schedule.total_epochs) return schedule.tq;
  const double frac = static_cast<double>(epoch) / static_cast<double>(schedule.total_epochs);
  return schedule.t0 * std::pow(schedule.tq / schedule.t0, frac);
}

double calibrated_mix(const ExpertBank& bank, std::span<const double> beta, double raw) {
  double out = 0.0;
  for (std::size_t k = 0; k < bank.k; ++k)
    out += beta[k] * platt_apply(bank.experts[k], raw);
  return out;
}

double calibrated_eval(const ExpertBank& bank, std::span<const double> user_embedding,
                       double raw) {
  const auto alpha = assignment_probs(bank, user_embedding);
  const std::size_t best =
      std::max_element(alpha.begin(), alpha.end()) - alpha.begin();
  return platt_apply(bank.experts[best], raw);
}

EmbeddingTable EmbeddingTable::from_model(const FactorModel& model) {
  EmbeddingTable t;
  t.dim = model.dim;
  t.data = model.user_factors;
  return t;
}

DenseGrid calibrated_grid_eval(const ExpertBank& bank, const EmbeddingTable& emb,
                               const DenseGrid& raw) {
  DenseGrid out(raw.n_users, raw.n_items);
  parallel_for(raw.n_users, [&](std::size_t u) {
    const auto alpha = assignment_probs(bank, emb.row(u));
    const std::size_t best =
        std::max_element(alpha.begin(), alpha.end()) - alpha.begin();
    for (std::size_t i = 0; i < raw.n_items; ++i)
      out.at(u, i) = platt_apply(bank.experts[best], raw.at(u, i));
  });
  return out;
}

BankGrad BankGrad::zeros_like(const ExpertBank& bank) {
  BankGrad g;
  g.a.assign(bank.k, 0.0);
  g.b.assign(bank.k, 0.0);
  g.weights.assign(bank.k * bank.dim, 0.0);
  g.offsets.assign(bank.k, 0.0);
  return g;
}

void BankGrad::clear() {
  std::fill(a.begin(), a.end(), 0.0);
  std::fill(b.begin(), b.end(), 0.0);
  std::fill(weights.begin(), weights.end(), 0.0);
  std::fill(offsets.begin(), offsets.end(), 0.0);
}

std::vector<double> BankGrad::flatten() const {
  std::vector<double> flat;
  flat.reserve(a.size() + b.size() + weights.size() + offsets.size());
  flat.insert(flat.end(), a.begin(), a.end());
  flat.insert(flat.end(), b.begin(), b.end());
  flat.insert(flat.end(), weights.begin(), weights.end());
  flat.insert(flat.end(), offsets.begin(), offsets.end());
  return flat;
}

BankLossResult bank_loss_grad(const ExpertBank& bank, std::span<const CalPoint> entries,
                              const EmbeddingTable& emb, double tau, Rng* gumbel_rng,
                              const std::vector<double>* injected_noise, BankGrad* grad) {
  BankLossResult res;
  if (entries.empty()) return res;
  const std::size_t kk = bank.k;

  // group by user, first-appearance order; one beta draw per user per batch
  std::vector<std::uint32_t> users;
  std::vector<std::vector<std::uint32_t>> member;
  std::unordered_map<std::uint32_t, std::size_t> slot;
  for (std::size_t j = 0; j < entries.size(); ++j) {
    auto [it, fresh] = slot.try_emplace(entries[j].user, users.size());
    if (fresh) {
      users.push_back(entries[j].user);
      member.emplace_back();
    }
    member[it->second].push_back(static_cast<std::uint32_t>(j));
  }

  std::vector<double> noise(users.size() * kk, 0.0);
  if (injected_noise) {
    if (injected_noise->size() != noise.size())
      throw std::invalid_argument("injected noise size mismatch");
    noise = *injected_noise;
  } else if (gumbel_rng) {
    for (auto& g : noise) g = gumbel_rng->gumbel();
  }

  const double inv_n = 1.0 / static_cast<double>(entries.size());
  std::vector<double> ck(kk);
  for (std::size_t g = 0; g < users.size(); ++g) {
    const std::uint32_t u = users[g];
    const auto alpha = assignment_probs(bank, emb.row(u));
    const auto beta =
        gumbel_softmax_with_noise(alpha, tau, {noise.data() + g * kk, kk});

    // assignment-logit gradient accumulators for this user
    std::vector<double> dlogit(kk, 0.0);
    for (std::uint32_t j : member[g]) {
      const CalPoint& pt = entries[j];
      if (pt.coeff > 1.0) ++res.coeff_over_one;
      double m = 0.0;
      for (std::size_t k = 0; k < kk; ++k) {
        ck[k] = platt_apply(bank.experts[k], pt.raw);
        m += beta[k] * ck[k];
      }
      const double mc = clamp_prob(m);
      res.loss += inv_n * pt.weight *
                  (-pt.coeff * std::log(mc) - (1.0 - pt.coeff) * std::log(1.0 - mc));
      if (grad) {
        const double dm =
            inv_n * pt.weight * (-pt.coeff / mc + (1.0 - pt.coeff) / (1.0 - mc));
        const double z = logit(clamp_prob(pt.raw));
        for (std::size_t k = 0; k < kk; ++k) {
          const double dck = beta[k] * ck[k] * (1.0 - ck[k]);
          grad->a[k] += dm * dck * z;
          grad->b[k] += dm * dck;
          dlogit[k] += dm * (beta[k] / tau) * (ck[k] - m);
        }
      }
    }
    if (grad) {
      const auto e = emb.row(u);
      for (std::size_t k = 0; k < kk; ++k) {
        grad->offsets[k] += dlogit[k];
        double* w = &grad->weights[k * bank.dim];
        for (std::size_t j = 0; j < bank.dim; ++j) w[j] += dlogit[k] * e[j];
      }
    }
  }
  return res;
}

BankLossResult loss_propcal(const ExpertBank& bank, std::span<const Split::DvalEntry> batch,
                            const DenseGrid& raw_propensity, const EmbeddingTable& emb,
                            double tau, Rng* gumbel_rng,
                            const std::vector<double>* injected_noise, BankGrad* grad) {
  std::vector<CalPoint> points;
  points.reserve(batch.size());
  for (const auto& e : batch)
    points.push_back({e.user, raw_propensity.at(e.user, e.item),
                      static_cast<double>(e.observed)});
  return bank_loss_grad(bank, points, emb, tau, gumbel_rng, injected_noise, grad);
}

BankLossResult loss_impcal(const ExpertBank& bank, std::span<const Observation> batch,
                           const DenseGrid& raw_pseudo_label, const DenseGrid& pbar,
                           const EmbeddingTable& emb, double tau, bool clamp_coeff,
                           Rng* gumbel_rng, const std::vector<double>* injected_noise,
                           BankGrad* grad) {
  std::vector<CalPoint> points;
  points.reserve(batch.size());
  for (const auto& o : batch) {
    const double pb = std::max(pbar.at(o.user, o.item), kEpsLog);
    double coeff = static_cast<double>(o.rating) / pb;
    if (clamp_coeff) coeff = std::min(coeff, 1.0);
    points.push_back({o.user, raw_pseudo_label.at(o.user, o.item), coeff});
  }
  return bank_loss_grad(bank, points, emb, tau, gumbel_rng, injected_noise, grad);
}

void fit_experts(ExpertBank& bank, const EmbeddingTable& emb,
                 std::span<const CalPoint> points, const ExpertFitConfig& cfg) {
  if (points.empty()) throw DataError("empty calibration set");
  cfg.schedule.validate();

  Rng shuffle_rng = Rng::stream(cfg.seed, 51);
  Rng gumbel_rng = Rng::stream(cfg.seed, 52);

  std::vector<double> flat = bank.flatten();
  AdamState adam(flat.size());
  BankGrad grad = BankGrad::zeros_like(bank);

  std::vector<CalPoint> pool(points.begin(), points.end());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double tau = temperature(cfg.schedule, std::min(epoch, cfg.schedule.total_epochs));
    shuffle_rng.shuffle(pool);
    for (std::size_t lo = 0; lo < pool.size(); lo += cfg.batch_size) {
      const std::size_t hi = std::min(pool.size(), lo + cfg.batch_size);
      grad.clear();
      bank_loss_grad(bank, {pool.data() + lo, hi - lo}, emb, tau, &gumbel_rng, nullptr,
                     &grad);
      const auto gflat = grad.flatten();
      flat = bank.flatten();
      adam.begin_step();
      adam.update({flat.data(), flat.size()}, {gflat.data(), gflat.size()}, 0, cfg.adam);
      bank.unflatten(flat);
    }
  }
}

double ece_pairwise(std::span<const double> truth, std::span<const double> predicted) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("grid size mismatch");
  if (truth.empty()) return 0.0;
  return det_sum(truth.size(),
                 [&](std::size_t i) { return std::abs(truth[i] - predicted[i]); }) /
         static_cast<double>(truth.size());
}

double mce_pairwise(std::span<const double> truth, std::span<const double> predicted) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("grid size mismatch");
  if (truth.empty()) return 0.0;
  return det_max(truth.size(),
                 [&](std::size_t i) { return std::abs(truth[i] - predicted[i]); });
}

namespace serial {

double ece_pairwise(std::span<const double> truth, std::span<const double> predicted) {
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += std::abs(truth[i] - predicted[i]);
  return truth.empty() ? 0.0 : s / static_cast<double>(truth.size());
}

double mce_pairwise(std::span<const double> truth, std::span<const double> predicted) {
  double m = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    m = std::max(m, std::abs(truth[i] - predicted[i]));
  return m;
}

}  // namespace serial

ReliabilityReport ece_binned(std::span<const double> scores,
                             std::span<const double> labels, std::size_t m_bins) {
  if (scores.size() != labels.size()) throw std::invalid_argument("size mismatch");
  if (scores.empty()) throw DataError("no samples to bin");
  if (m_bins == 0) throw std::invalid_argument("need at least one bin");

  ReliabilityReport rep;
  rep.n_samples = scores.size();
  rep.bins.resize(m_bins);
  std::vector<double> conf_sum(m_bins, 0.0), pos_sum(m_bins, 0.0);
  std::vector<std::size_t> count(m_bins, 0);
  const double m = static_cast<double>(m_bins);
  for (std::size_t j = 0; j < scores.size(); ++j) {
    // right-closed bins; exact edge values fall to the lower bin
    std::ptrdiff_t idx =
        static_cast<std::ptrdiff_t>(std::ceil(scores[j] * m)) - 1;
    idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(m_bins) - 1);
    conf_sum[idx] += scores[j];
    pos_sum[idx] += labels[j];
    ++count[idx];
  }
  const double n = static_cast<double>(scores.size());
  for (std::size_t b = 0; b < m_bins; ++b) {
    auto& bin = rep.bins[b];
    bin.lo = static_cast<double>(b) / m;
    bin.hi = static_cast<double>(b + 1) / m;
    bin.count = count[b];
    if (count[b] == 0) continue;
    bin.mean_score = conf_sum[b] / static_cast<double>(count[b]);
    bin.positive_rate = pos_sum[b] / static_cast<double>(count[b]);
    const double gap = std::abs(bin.positive_rate - bin.mean_score);
    rep.ece += (static_cast<double>(count[b]) / n) * gap;
    rep.mce = std::max(rep.mce, gap);
  }
  return rep;
}

namespace {

constexpr std::uint32_t kBankMagic = 0x44434542;  // "DCEB"
constexpr std::uint32_t kBankVersion = 1;

}  // namespace

void save_bank(const std::string& path, const ExpertBank& bank) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  auto put = [&](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
  put(kBankMagic);
  put(kBankVersion);
  const std::uint8_t role = static_cast<std::uint8_t>(bank.role);
  put(role);
  const std::uint64_t k = bank.k, d = bank.dim;
  put(k);
  put(d);
  const auto flat = bank.flatten();
  out.write(reinterpret_cast<const char*>(flat.data()),
            static_cast<std::streamsize>(flat.size() * sizeof(double)));
}

ExpertBank load_bank(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  auto get = [&](auto& v) { in.read(reinterpret_cast<char*>(&v), sizeof v); };
  std::uint32_t magic = 0, version = 0;
  get(magic);
  get(version);
  if (magic != kBankMagic || version != kBankVersion)
    throw DataError("bad bank checkpoint: " + path);
  std::uint8_t role = 0;
  std::uint64_t k = 0, d = 0;
  get(role);
  get(k);
  get(d);
  ExpertBank bank;
  bank.role = static_cast<BankRole>(role);
  bank.k = k;
  bank.dim = d;
  bank.experts.assign(k, PlattExpert{});
  bank.assign_weights.assign(k * d, 0.0);
  bank.assign_offsets.assign(k, 0.0);
  std::vector<double> flat(bank.n_params());
  in.read(reinterpret_cast<char*>(flat.data()),
          static_cast<std::streamsize>(flat.size() * sizeof(double)));
  if (!in) throw DataError("truncated bank checkpoint: " + path);
  bank.unflatten(flat);
  return bank;
}

}  // namespace dce
