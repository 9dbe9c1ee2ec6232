#include "dce/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dce/estimators.hpp"
#include "dce/parallel.hpp"

namespace dce {

Method parse_method(const std::string& name) {
  if (name == "naive") return Method::naive;
  if (name == "eib") return Method::eib;
  if (name == "ips") return Method::ips;
  if (name == "snips") return Method::snips;
  if (name == "dr-jl") return Method::dr_jl;
  if (name == "dce-dr") return Method::dce_dr;
  throw std::invalid_argument("unknown method: " + name);
}

std::string method_name(Method m) {
  switch (m) {
    case Method::naive: return "naive";
    case Method::eib: return "eib";
    case Method::ips: return "ips";
    case Method::snips: return "snips";
    case Method::dr_jl: return "dr-jl";
    case Method::dce_dr: return "dce-dr";
  }
  return "?";
}

namespace {

void add_pair_grad(const FactorModel& m, std::uint32_t u, std::uint32_t i, double c,
                   ModelGrad& g) {
  const std::size_t d = m.dim;
  const double* uf = &m.user_factors[u * d];
  const double* vf = &m.item_factors[i * d];
  double* gu = &g.user_factors[u * d];
  double* gv = &g.item_factors[i * d];
  for (std::size_t k = 0; k < d; ++k) {
    gu[k] += c * vf[k];
    gv[k] += c * uf[k];
  }
  g.user_bias[u] += c;
  g.item_bias[i] += c;
  g.global_bias += c;
}

void check_finite(double loss, const char* what) {
  if (!std::isfinite(loss))
    throw DivergenceError(std::string(what) + " loss became non-finite");
}

}  // namespace

double loss_imp_cal(const FactorModel& imputation, const FactorModel& prediction,
                    std::span<const Observation> batch, const DenseGrid& pbar,
                    ErrorKind kind, std::size_t n_domain_pairs, ModelGrad* grad) {
  const double inv_domain = 1.0 / static_cast<double>(n_domain_pairs);
  double loss = 0.0;
  for (const auto& o : batch) {
    const double r_hat = prediction.score(o.user, o.item);
    const auto [e0, e1] = error_pair(kind, r_hat);
    const double r_tilde = sigmoid(imputation.raw_score(o.user, o.item));
    const double e_imp = r_tilde * e1 + (1.0 - r_tilde) * e0;
    const double e_true = o.rating ? e1 : e0;
    const double pb = std::max(pbar.at(o.user, o.item), kEpsLog);
    const double gap = e_imp - e_true;
    loss += inv_domain * gap * gap / pb;
    if (grad) {
      const double c = inv_domain * 2.0 * gap * (e1 - e0) / pb *
                       r_tilde * (1.0 - r_tilde);
      add_pair_grad(imputation, o.user, o.item, c, *grad);
    }
  }
  return loss;
}

double loss_pred_dr_cal(const FactorModel& prediction, std::span<const DrSample> batch,
                        ErrorKind kind, ModelGrad* grad) {
  if (batch.empty()) return 0.0;
  const double inv = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const auto& s : batch) {
    const double r_hat = sigmoid(prediction.raw_score(s.user, s.item));
    const double e_bar = error(kind, r_hat, s.rbar);
    double term, dz;
    if (s.observed) {
      const double w = 1.0 / std::max(s.pbar, kEpsLog);
      const double e_true = error(kind, r_hat, s.rating);
      term = e_bar + w * (e_true - e_bar);
      dz = (1.0 - w) * error_grad_z(kind, r_hat, s.rbar) +
           w * error_grad_z(kind, r_hat, s.rating);
    } else {
      term = e_bar;
      dz = error_grad_z(kind, r_hat, s.rbar);
    }
    loss += inv * term;
    if (grad) add_pair_grad(prediction, s.user, s.item, inv * dz, *grad);
  }
  return loss;
}

void fit_propensity_experts(PropensityStack& stack, const InteractionTable& table,
                            const Split& split, const TrainConfig& cfg) {
  Rng bank_rng = Rng::stream(cfg.seed, streams::prop_bank_init);
  stack.bank = ExpertBank::init(BankRole::propensity, cfg.k_experts, stack.emb.dim,
                                bank_rng, cfg.assign_init_noise);

  // The D_val positives are only the held-out slice of O, while the negatives
  // are every never-observed pair, so the raw positive rate in D_val is the
  // holdout-thinned observation probability. Weighting positives by
  // |O| / |O_val| makes the loss target the true propensity again (the
  // stationary point works out to exactly P(o=1) for every score level).
  const double f_val = static_cast<double>(split.val_obs.size()) /
                       static_cast<double>(table.observed.size());
  std::vector<CalPoint> points;
  if (cfg.dval_negatives_per_positive == 0) {
    points.reserve(split.d_val.size());
    for (const auto& e : split.d_val)
      points.push_back({e.user, stack.raw.at(e.user, e.item),
                        static_cast<double>(e.observed),
                        e.observed ? 1.0 / f_val : 1.0});
  } else {
    std::vector<std::size_t> neg_idx;
    for (std::size_t j = 0; j < split.d_val.size(); ++j)
      if (!split.d_val[j].observed) neg_idx.push_back(j);
    Rng sub_rng = Rng::stream(cfg.seed, streams::dval_subsample);
    std::size_t n_pos = 0;
    for (const auto& e : split.d_val)
      if (e.observed) ++n_pos;
    const std::size_t want = std::min(neg_idx.size(),
                                      n_pos * cfg.dval_negatives_per_positive);
    const double neg_keep = neg_idx.empty()
                                ? 1.0
                                : static_cast<double>(want) /
                                      static_cast<double>(neg_idx.size());
    for (const auto& e : split.d_val)
      if (e.observed)
        points.push_back(
            {e.user, stack.raw.at(e.user, e.item), 1.0, neg_keep / f_val});
    for (std::size_t j = 0; j < want; ++j) {
      const auto& e = split.d_val[neg_idx[sub_rng.uniform_index(neg_idx.size())]];
      points.push_back({e.user, stack.raw.at(e.user, e.item), 0.0, 1.0});
    }
  }

  ExpertFitConfig fit;
  fit.schedule = {cfg.t0, cfg.tq, std::max<std::size_t>(cfg.prop_cal_epochs, 1)};
  fit.adam = cfg.adam_expert;
  fit.epochs = cfg.prop_cal_epochs;
  fit.batch_size = cfg.batch_cal;
  fit.seed = cfg.seed;
  fit_experts(stack.bank, stack.emb, points, fit);

  stack.calibrated = calibrated_grid_eval(stack.bank, stack.emb, stack.raw);
}

PropensityStack pretrain_propensity_stack(const InteractionTable& table,
                                          const Split& split, const TrainConfig& cfg) {
  PropensityTrainConfig pcfg = cfg.propensity;
  pcfg.dim = cfg.prop_dim ? cfg.prop_dim : cfg.dim;  // bank input is the psi embedding
  pcfg.seed = cfg.seed;

  PropensityStack stack;
  stack.psi = train_propensity_classifier(table, pcfg);
  stack.raw = stack.psi.score_grid();
  stack.emb = EmbeddingTable::from_model(stack.psi);
  fit_propensity_experts(stack, table, split, cfg);
  return stack;
}

namespace {

struct RatingLookup {
  std::vector<std::uint8_t> mask;
  std::vector<std::uint8_t> rating;
};

RatingLookup build_lookup(const InteractionTable& table) {
  RatingLookup lk;
  lk.mask.assign(table.n_pairs(), 0);
  lk.rating.assign(table.n_pairs(), 0);
  for (const auto& o : table.observed) {
    const std::size_t j = table.index(o.user, o.item);
    lk.mask[j] = 1;
    lk.rating[j] = o.rating;
  }
  return lk;
}

struct BestSnapshot {
  FactorModel theta;
  std::optional<FactorModel> phi;
  std::optional<ExpertBank> imp_bank;
};

TrainedStack run_joint(Method method, const InteractionTable& table, const Split& split,
                       const PropensityStack* prop, const TrainConfig& cfg) {
  const bool has_imp = method == Method::dr_jl || method == Method::dce_dr;
  const bool has_domain = has_imp || method == Method::eib;
  const bool uses_prop = method == Method::ips || method == Method::snips || has_imp;
  const bool calibrated = method == Method::dce_dr;
  if (uses_prop && prop == nullptr)
    throw std::invalid_argument(method_name(method) + " needs a propensity stack");
  if (split.train_obs.empty()) throw DataError("empty training split");

  const std::size_t n_pairs = table.n_pairs();
  const auto lookup = build_lookup(table);

  Rng theta_rng = Rng::stream(cfg.seed, streams::theta_init);
  Rng phi_rng = Rng::stream(cfg.seed, streams::phi_init);
  Rng shuffle_rng = Rng::stream(cfg.seed, streams::obs_shuffle);
  Rng domain_rng = Rng::stream(cfg.seed, streams::domain_batch);
  Rng gumbel_rng = Rng::stream(cfg.seed, streams::gumbel);
  Rng val_rng = Rng::stream(cfg.seed, streams::val_shuffle);

  // bias init at the observed base rate shortens the cold start for every method
  double rate_sum = 0.0;
  for (const auto& o : split.train_obs) rate_sum += o.rating;
  const double base_rate =
      std::clamp(rate_sum / static_cast<double>(split.train_obs.size()), 0.05, 0.95);

  FactorModel theta = FactorModel::init(table.n_users, table.n_items, cfg.dim,
                                        ModelRole::prediction, theta_rng);
  theta.global_bias = logit(base_rate);
  AdamState adam_theta(theta.n_params());
  ModelGrad gtheta = ModelGrad::zeros_like(theta);

  std::optional<FactorModel> phi;
  std::optional<AdamState> adam_phi;
  ModelGrad gphi;
  if (has_imp) {
    phi = FactorModel::init(table.n_users, table.n_items, cfg.dim,
                            ModelRole::imputation, phi_rng);
    phi->global_bias = logit(base_rate);
    adam_phi.emplace(phi->n_params());
    gphi = ModelGrad::zeros_like(*phi);
  }

  std::optional<ExpertBank> imp_bank;
  std::optional<AdamState> adam_bank;
  if (calibrated) {
    Rng bank_rng = Rng::stream(cfg.seed, streams::imp_bank_init);
    imp_bank = ExpertBank::init(BankRole::imputation, cfg.k_experts, cfg.dim, bank_rng,
                                cfg.assign_init_noise);
    adam_bank.emplace(imp_bank->n_params());
  }

  // per-pair propensity grid used by the prediction/imputation updates
  DenseGrid pbar_grid;
  if (uses_prop) {
    pbar_grid = calibrated ? prop->calibrated : prop->raw;
    if (cfg.clip_threshold > 0.0)
      for (auto& v : pbar_grid.values) v = std::max(v, cfg.clip_threshold);
  }

  std::vector<Observation> obs(split.train_obs);
  const std::size_t n_domain_batch = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(
             static_cast<double>(cfg.batch_obs) * static_cast<double>(n_pairs) /
             static_cast<double>(obs.size()))));

  const TemperatureSchedule schedule{cfg.t0, cfg.tq, std::max<std::size_t>(cfg.epochs, 1)};
  const double f_val = static_cast<double>(split.val_obs.size()) /
                       static_cast<double>(table.observed.size());

  TrainedStack out;
  out.method = method;
  out.best_val = 1e308;
  std::optional<BestSnapshot> best;

  std::vector<DrSample> dom_batch;
  std::vector<CalPoint> cal_points;
  std::vector<std::uint32_t> batch_users;
  std::vector<std::vector<double>> batch_beta;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double tau = temperature(schedule, epoch);
    shuffle_rng.shuffle(obs);

    double ep_pred = 0.0, ep_imp = 0.0, ep_cal = 0.0;
    std::size_t n_pred = 0, n_imp = 0, n_cal = 0;

    for (std::size_t lo = 0; lo < obs.size(); lo += cfg.batch_obs) {
      const std::size_t hi = std::min(obs.size(), lo + cfg.batch_obs);
      std::span<const Observation> batch(obs.data() + lo, hi - lo);

      if (has_imp) {
        gphi.clear();
        const double l = loss_imp_cal(*phi, theta, batch, pbar_grid, cfg.kind,
                                      n_pairs, &gphi);
        check_finite(l, "imputation");
        adam_step(*phi, *adam_phi, gphi, cfg.adam_imp);
        ep_imp += l;
        ++n_imp;
      }

      double pred_loss = 0.0;
      gtheta.clear();
      if (method == Method::naive) {
        const double inv = 1.0 / static_cast<double>(batch.size());
        for (const auto& o : batch) {
          const double r_hat = sigmoid(theta.raw_score(o.user, o.item));
          pred_loss += inv * error(cfg.kind, r_hat, o.rating);
          add_pair_grad(theta, o.user, o.item,
                        inv * error_grad_z(cfg.kind, r_hat, o.rating), gtheta);
        }
      } else if (method == Method::ips) {
        const double scale = static_cast<double>(obs.size()) /
                             (static_cast<double>(n_pairs) *
                              static_cast<double>(batch.size()));
        for (const auto& o : batch) {
          const double w = scale / std::max(pbar_grid.at(o.user, o.item), kEpsLog);
          const double r_hat = sigmoid(theta.raw_score(o.user, o.item));
          pred_loss += w * error(cfg.kind, r_hat, o.rating);
          add_pair_grad(theta, o.user, o.item,
                        w * error_grad_z(cfg.kind, r_hat, o.rating), gtheta);
        }
      } else if (method == Method::snips) {
        double den = 0.0;
        for (const auto& o : batch)
          den += 1.0 / std::max(pbar_grid.at(o.user, o.item), kEpsLog);
        for (const auto& o : batch) {
          const double w =
              1.0 / std::max(pbar_grid.at(o.user, o.item), kEpsLog) / den;
          const double r_hat = sigmoid(theta.raw_score(o.user, o.item));
          pred_loss += w * error(cfg.kind, r_hat, o.rating);
          add_pair_grad(theta, o.user, o.item,
                        w * error_grad_z(cfg.kind, r_hat, o.rating), gtheta);
        }
      } else if (method == Method::eib) {
        const double inv = 1.0 / static_cast<double>(n_domain_batch);
        for (std::size_t s = 0; s < n_domain_batch; ++s) {
          const std::uint64_t idx = domain_rng.uniform_index(n_pairs);
          const auto u = static_cast<std::uint32_t>(idx / table.n_items);
          const auto i = static_cast<std::uint32_t>(idx % table.n_items);
          const double r_hat = sigmoid(theta.raw_score(u, i));
          if (lookup.mask[idx]) {
            pred_loss += inv * error(cfg.kind, r_hat, lookup.rating[idx]);
            add_pair_grad(theta, u, i,
                          inv * error_grad_z(cfg.kind, r_hat, lookup.rating[idx]),
                          gtheta);
          } else {
            pred_loss += inv * heuristic_imputed_error(r_hat, cfg.heuristic_omega,
                                                       cfg.heuristic_gamma);
            const double sign = r_hat >= cfg.heuristic_gamma ? 1.0 : -1.0;
            add_pair_grad(theta, u, i,
                          inv * cfg.heuristic_omega * sign * r_hat * (1.0 - r_hat),
                          gtheta);
          }
        }
      } else {  // dr_jl, dce_dr
        dom_batch.clear();
        batch_users.clear();
        batch_beta.clear();
        for (std::size_t s = 0; s < n_domain_batch; ++s) {
          const std::uint64_t idx = domain_rng.uniform_index(n_pairs);
          DrSample ds;
          ds.user = static_cast<std::uint32_t>(idx / table.n_items);
          ds.item = static_cast<std::uint32_t>(idx % table.n_items);
          ds.observed = lookup.mask[idx];
          ds.rating = lookup.rating[idx];
          ds.pbar = pbar_grid.values[idx];
          ds.rbar = 0.0;  // filled below
          dom_batch.push_back(ds);
        }
        if (calibrated) {
          // one beta draw per distinct user per batch
          std::vector<std::ptrdiff_t> user_slot(table.n_users, -1);
          for (auto& s : dom_batch) {
            if (user_slot[s.user] < 0) {
              user_slot[s.user] = static_cast<std::ptrdiff_t>(batch_users.size());
              batch_users.push_back(s.user);
              const auto alpha =
                  assignment_probs(*imp_bank, phi->user_embedding(s.user));
              batch_beta.push_back(gumbel_softmax(alpha, tau, gumbel_rng));
            }
            const double r_tilde = sigmoid(phi->raw_score(s.user, s.item));
            s.rbar = calibrated_mix(*imp_bank, batch_beta[user_slot[s.user]], r_tilde);
          }
        } else {
          for (auto& s : dom_batch)
            s.rbar = sigmoid(phi->raw_score(s.user, s.item));
        }
        pred_loss = loss_pred_dr_cal(theta, dom_batch, cfg.kind, &gtheta);
      }
      check_finite(pred_loss, "prediction");
      adam_step(theta, adam_theta, gtheta, cfg.adam_pred);
      ep_pred += pred_loss;
      ++n_pred;
    }

    if (calibrated && !split.val_obs.empty()) {
      std::vector<Observation> val(split.val_obs);
      val_rng.shuffle(val);
      BankGrad bgrad = BankGrad::zeros_like(*imp_bank);
      EmbeddingTable phi_emb = EmbeddingTable::from_model(*phi);
      for (std::size_t lo = 0; lo < val.size(); lo += cfg.batch_cal) {
        const std::size_t hi = std::min(val.size(), lo + cfg.batch_cal);
        cal_points.clear();
        for (std::size_t j = lo; j < hi; ++j) {
          const auto& o = val[j];
          const double pb = std::max(pbar_grid.at(o.user, o.item), kEpsLog);
          const double r_tilde = sigmoid(phi->raw_score(o.user, o.item));
          if (cfg.impcal_ips_weight) {
            cal_points.push_back(
                {o.user, r_tilde, static_cast<double>(o.rating), 1.0 / pb});
          } else {
            double coeff = static_cast<double>(o.rating) / pb;
            if (cfg.clamp_impcal_coeff) coeff = std::min(coeff, 1.0);
            cal_points.push_back({o.user, r_tilde, coeff});
          }
        }
        bgrad.clear();
        const auto res = bank_loss_grad(*imp_bank, cal_points, phi_emb, tau,
                                        &gumbel_rng, nullptr, &bgrad);
        check_finite(res.loss, "expert calibration");
        auto flat = imp_bank->flatten();
        const auto gflat = bgrad.flatten();
        adam_bank->begin_step();
        adam_bank->update({flat.data(), flat.size()}, {gflat.data(), gflat.size()}, 0,
                          cfg.adam_expert);
        imp_bank->unflatten(flat);
        ep_cal += res.loss;
        ++n_cal;
      }
    }

    // validation metric for stopping
    double val_metric = 0.0;
    if (method == Method::naive) {
      double s = 0.0;
      for (const auto& o : split.val_obs)
        s += error(cfg.kind, theta.score(o.user, o.item), o.rating);
      val_metric = s / std::max<std::size_t>(split.val_obs.size(), 1);
    } else if (method == Method::ips) {
      double s = 0.0;
      for (const auto& o : split.val_obs)
        s += error(cfg.kind, theta.score(o.user, o.item), o.rating) /
             (std::max(pbar_grid.at(o.user, o.item), kEpsLog) * f_val);
      val_metric = s / static_cast<double>(n_pairs);
    } else if (method == Method::snips) {
      double num = 0.0, den = 0.0;
      for (const auto& o : split.val_obs) {
        const double w = 1.0 / std::max(pbar_grid.at(o.user, o.item), kEpsLog);
        num += w * error(cfg.kind, theta.score(o.user, o.item), o.rating);
        den += w;
      }
      val_metric = den > 0.0 ? num / den : 0.0;
    } else {
      const DenseGrid theta_grid = theta.score_grid();
      if (method == Method::eib) {
        double s = det_sum(n_pairs, [&](std::size_t j) {
          return heuristic_imputed_error(theta_grid.values[j], cfg.heuristic_omega,
                                         cfg.heuristic_gamma);
        });
        for (const auto& o : split.val_obs) {
          const double r_hat = theta_grid.at(o.user, o.item);
          s += error(cfg.kind, r_hat, o.rating) -
               heuristic_imputed_error(r_hat, cfg.heuristic_omega, cfg.heuristic_gamma);
        }
        val_metric = s / static_cast<double>(n_pairs);
      } else {
        // Self-normalized inverse-propensity risk on the held-out pairs, with
        // the same propensity grid the updates use. A DR-style metric would
        // feed the co-trained imputation back into its own stopping signal.
        double num = 0.0, den = 0.0;
        for (const auto& o : split.val_obs) {
          const double w = 1.0 / std::max(pbar_grid.at(o.user, o.item), kEpsLog);
          num += w * error(cfg.kind, theta_grid.at(o.user, o.item), o.rating);
          den += w;
        }
        val_metric = den > 0.0 ? num / den : 0.0;
      }
    }
    check_finite(val_metric, "validation");

    HistoryRecord rec;
    rec.epoch = epoch;
    rec.loss_pred = n_pred ? ep_pred / static_cast<double>(n_pred) : 0.0;
    rec.loss_imp = n_imp ? ep_imp / static_cast<double>(n_imp) : 0.0;
    rec.loss_cal = n_cal ? ep_cal / static_cast<double>(n_cal) : 0.0;
    rec.val_metric = val_metric;
    rec.tau = tau;
    out.history.push_back(rec);

    if (val_metric < out.best_val) {
      out.best_val = val_metric;
      out.best_epoch = epoch;
      if (cfg.patience > 0) best = BestSnapshot{theta, phi, imp_bank};
    } else if (cfg.patience > 0 && epoch - out.best_epoch >= cfg.patience) {
      break;
    }
  }

  if (cfg.patience > 0 && best) {
    out.prediction = std::move(best->theta);
    out.imputation = std::move(best->phi);
    out.imp_bank = std::move(best->imp_bank);
  } else {
    out.prediction = std::move(theta);
    out.imputation = std::move(phi);
    out.imp_bank = std::move(imp_bank);
  }
  if (uses_prop) {
    out.propensity = prop->psi;
    if (calibrated) out.prop_bank = prop->bank;
  }
  return out;
}

}  // namespace

TrainedStack trilevel_train(const InteractionTable& table, const Split& split,
                            const PropensityStack& prop, const TrainConfig& cfg) {
  return run_joint(Method::dce_dr, table, split, &prop, cfg);
}

TrainedStack train_dr_jl(const InteractionTable& table, const Split& split,
                         const PropensityStack& prop, const TrainConfig& cfg) {
  return run_joint(Method::dr_jl, table, split, &prop, cfg);
}

TrainedStack train_baseline(Method method, const InteractionTable& table,
                            const Split& split, const PropensityStack* prop,
                            const TrainConfig& cfg) {
  if (method == Method::dr_jl || method == Method::dce_dr)
    throw std::invalid_argument("use trilevel_train / train_dr_jl");
  return run_joint(method, table, split, prop, cfg);
}

}  // namespace dce
