#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dce/calibration.hpp"
#include "dce/estimators.hpp"
#include "dce/evaluation.hpp"
#include "dce/training.hpp"
#include "oracles.hpp"

using namespace dce;

namespace {

// propensity stack with fixed grids and identity experts, for controlled runs
PropensityStack manual_stack(const InteractionTable& table, std::size_t dim,
                             double p_value, std::uint64_t seed) {
  PropensityStack st;
  Rng rng(seed);
  st.psi = FactorModel::init(table.n_users, table.n_items, dim, ModelRole::propensity, rng);
  st.emb = EmbeddingTable::from_model(st.psi);
  Rng brng(seed + 1);
  st.bank = ExpertBank::init(BankRole::propensity, 1, dim, brng, 0.0);
  st.raw = DenseGrid(table.n_users, table.n_items, p_value);
  st.calibrated = st.raw;
  return st;
}

InteractionTable full_observation_table(std::size_t nu, std::size_t ni,
                                        std::uint64_t seed) {
  SynthConfig cfg;
  cfg.n_users = nu;
  cfg.n_items = ni;
  cfg.propensity_floor = 1.0;
  cfg.seed = seed;
  return generate_synthetic(cfg).first;
}

}  // namespace

TEST_CASE("imputation loss: worked single-pair value") {
  Rng rng(1);
  auto pred = FactorModel::init(3, 3, 2, ModelRole::prediction, rng);
  pred.global_bias = logit(0.6);
  for (auto& v : pred.user_factors) v = 0.0;
  for (auto& v : pred.item_factors) v = 0.0;

  const double r_hat = pred.score(0, 0);
  const auto [e0, e1] = error_pair(ErrorKind::bce, r_hat);
  // choose the pseudo label so that e(r_hat, r_tilde) - e(r_hat, 1) = 0.2
  const double r_tilde = 1.0 + 0.2 / (e1 - e0);
  auto imp = pred;
  imp.role = ModelRole::imputation;
  imp.global_bias = logit(r_tilde);

  std::vector<Observation> batch = {{0, 0, 1}};
  DenseGrid pbar(3, 3, 0.5);
  const std::size_t n_domain = 9;
  const double loss =
      loss_imp_cal(imp, pred, batch, pbar, ErrorKind::bce, n_domain, nullptr);
  CHECK(loss == doctest::Approx(0.04 / 0.5 / 9.0).epsilon(1e-9));

  // zero when the imputed error equals the true error
  imp.global_bias = logit(1.0 - kEpsLog);
  const double zero =
      loss_imp_cal(imp, pred, batch, pbar, ErrorKind::bce, n_domain, nullptr);
  CHECK(zero <= 1e-10);
}

TEST_CASE("imputation loss gradient matches finite differences") {
  Rng rng(2);
  auto pred = FactorModel::init(5, 6, 3, ModelRole::prediction, rng, 0.4);
  auto imp = FactorModel::init(5, 6, 3, ModelRole::imputation, rng, 0.4);
  DenseGrid pbar(5, 6);
  for (auto& v : pbar.values) v = rng.uniform(0.2, 0.9);
  std::vector<Observation> batch;
  for (int j = 0; j < 14; ++j)
    batch.push_back({static_cast<std::uint32_t>(rng.uniform_index(5)),
                     static_cast<std::uint32_t>(rng.uniform_index(6)),
                     rng.bernoulli(0.5) ? std::uint8_t{1} : std::uint8_t{0}});

  for (ErrorKind kind : {ErrorKind::bce, ErrorKind::mse}) {
    ModelGrad grad = ModelGrad::zeros_like(imp);
    loss_imp_cal(imp, pred, batch, pbar, kind, 30, &grad);

    auto check_block = [&](std::vector<double>& params, const std::vector<double>& g) {
      for (std::size_t j = 0; j < params.size(); ++j) {
        const double fd = oracle::finite_diff(params, j, [&] {
          return loss_imp_cal(imp, pred, batch, pbar, kind, 30, nullptr);
        });
        CHECK(oracle::rel_err(g[j], fd) <= 1e-4);
      }
    };
    check_block(imp.user_factors, grad.user_factors);
    check_block(imp.item_factors, grad.item_factors);
    check_block(imp.user_bias, grad.user_bias);
    check_block(imp.item_bias, grad.item_bias);
  }
}

TEST_CASE("prediction loss limits") {
  Rng rng(3);
  auto theta = FactorModel::init(4, 4, 2, ModelRole::prediction, rng, 0.3);

  // fully observed with rbar = rating: reduces to the supervised mean error
  std::vector<DrSample> observed;
  std::vector<BatchEntry> plain;
  for (int j = 0; j < 8; ++j) {
    const auto u = static_cast<std::uint32_t>(rng.uniform_index(4));
    const auto i = static_cast<std::uint32_t>(rng.uniform_index(4));
    const double r = rng.bernoulli(0.5) ? 1.0 : 0.0;
    observed.push_back({u, i, 1, r, r, 1.0});
    plain.push_back({u, i, r, 1.0 / 8.0});
  }
  ModelGrad g1 = ModelGrad::zeros_like(theta);
  const double l1 = loss_pred_dr_cal(theta, observed, ErrorKind::bce, &g1);
  double supervised = 0.0;
  for (const auto& s : observed)
    supervised += error(ErrorKind::bce, theta.score(s.user, s.item), s.rating) / 8.0;
  CHECK(l1 == doctest::Approx(supervised).epsilon(1e-12));
  ModelGrad g2 = ModelGrad::zeros_like(theta);
  gradient(theta, plain, ErrorKind::bce, g2);
  for (std::size_t j = 0; j < g1.user_factors.size(); ++j)
    CHECK(g1.user_factors[j] == doctest::Approx(g2.user_factors[j]).epsilon(1e-12));

  // fully unobserved: mean imputed error with pseudo labels
  std::vector<DrSample> unobserved;
  for (int j = 0; j < 8; ++j)
    unobserved.push_back({static_cast<std::uint32_t>(rng.uniform_index(4)),
                          static_cast<std::uint32_t>(rng.uniform_index(4)), 0, 0.0,
                          rng.uniform(0.2, 0.8), rng.uniform(0.3, 0.9)});
  const double l2 = loss_pred_dr_cal(theta, unobserved, ErrorKind::bce, nullptr);
  double pseudo = 0.0;
  for (const auto& s : unobserved)
    pseudo += error(ErrorKind::bce, theta.score(s.user, s.item), s.rbar) / 8.0;
  CHECK(l2 == doctest::Approx(pseudo).epsilon(1e-12));
}

TEST_CASE("prediction loss gradient matches finite differences") {
  Rng rng(4);
  auto theta = FactorModel::init(5, 5, 3, ModelRole::prediction, rng, 0.4);
  std::vector<DrSample> batch;
  for (int j = 0; j < 16; ++j) {
    DrSample s;
    s.user = static_cast<std::uint32_t>(rng.uniform_index(5));
    s.item = static_cast<std::uint32_t>(rng.uniform_index(5));
    s.observed = rng.bernoulli(0.5) ? 1 : 0;
    s.rating = rng.bernoulli(0.5) ? 1.0 : 0.0;
    s.rbar = rng.uniform(0.1, 0.9);
    s.pbar = rng.uniform(0.25, 0.95);
    batch.push_back(s);
  }
  for (ErrorKind kind : {ErrorKind::bce, ErrorKind::mse}) {
    ModelGrad grad = ModelGrad::zeros_like(theta);
    loss_pred_dr_cal(theta, batch, kind, &grad);
    auto check_block = [&](std::vector<double>& params, const std::vector<double>& g) {
      for (std::size_t j = 0; j < params.size(); ++j) {
        const double fd = oracle::finite_diff(params, j, [&] {
          return loss_pred_dr_cal(theta, batch, kind, nullptr);
        });
        CHECK(oracle::rel_err(g[j], fd) <= 1e-4);
      }
    };
    check_block(theta.user_factors, grad.user_factors);
    check_block(theta.item_factors, grad.item_factors);
    check_block(theta.user_bias, grad.user_bias);
    check_block(theta.item_bias, grad.item_bias);
  }
}

TEST_CASE("propensity pretraining is deterministic; model beats the heuristic") {
  SynthConfig scfg;
  scfg.n_users = 120;
  scfg.n_items = 90;
  scfg.propensity_floor = 0.03;
  scfg.kappa = 4.0;
  scfg.seed = 11;
  auto [table, gt] = generate_synthetic(scfg);
  const Split split = split_validation(table, 0.1, 11);

  TrainConfig cfg;
  cfg.dim = 8;
  cfg.k_experts = 2;
  cfg.seed = 5;
  cfg.propensity.epochs = 6;
  cfg.prop_cal_epochs = 15;
  cfg.batch_cal = 2048;

  const PropensityStack a = pretrain_propensity_stack(table, split, cfg);
  const PropensityStack b = pretrain_propensity_stack(table, split, cfg);
  CHECK(a.bank.flatten() == b.bank.flatten());
  CHECK(a.psi.user_factors == b.psi.user_factors);

  // model-based propensities beat the popularity heuristic on ground truth
  const double ece_raw = ece_pairwise(gt.p.values, a.raw.values);
  const DenseGrid heur = heuristic_propensity(table, 0.5);
  CHECK(ece_raw < ece_pairwise(gt.p.values, heur.values));
}

namespace {

// table + split drawn from a propensity grid, for injected-psi fitting tests
std::pair<InteractionTable, Split> draw_from_grid(const DenseGrid& p,
                                                  std::uint64_t seed) {
  InteractionTable table;
  table.n_users = p.n_users;
  table.n_items = p.n_items;
  Rng rng(seed);
  for (std::size_t u = 0; u < p.n_users; ++u)
    for (std::size_t i = 0; i < p.n_items; ++i)
      if (rng.bernoulli(p.at(u, i)))
        table.observed.push_back({static_cast<std::uint32_t>(u),
                                  static_cast<std::uint32_t>(i),
                                  rng.bernoulli(0.5) ? std::uint8_t{1}
                                                     : std::uint8_t{0}});
  Split split = split_validation(table, 0.1, seed);
  return {std::move(table), std::move(split)};
}

}  // namespace

TEST_CASE("expert fit leaves an already-calibrated psi nearly unchanged") {
  Rng mrng(31);
  PropensityStack stack;
  stack.psi = FactorModel::init(80, 60, 6, ModelRole::propensity, mrng, 0.7);
  stack.psi.global_bias = -0.6;
  stack.raw = stack.psi.score_grid();
  stack.emb = EmbeddingTable::from_model(stack.psi);

  // true propensity = psi score plus conditional logit noise, so psi is
  // calibrated up to pointwise noise no post-hoc map can remove
  DenseGrid p_true(80, 60);
  Rng nrng(32);
  for (std::size_t j = 0; j < p_true.size(); ++j)
    p_true.values[j] = sigmoid(logit(stack.raw.values[j]) + 0.3 * nrng.normal());
  auto [table, split] = draw_from_grid(p_true, 33);

  TrainConfig cfg;
  cfg.dim = 6;
  cfg.k_experts = 2;
  cfg.prop_cal_epochs = 20;
  cfg.batch_cal = 2048;
  cfg.adam_expert.lr = 0.02;
  cfg.seed = 9;
  fit_propensity_experts(stack, table, split, cfg);

  const double pre = ece_pairwise(p_true.values, stack.raw.values);
  const double post = ece_pairwise(p_true.values, stack.calibrated.values);
  CHECK(post <= 1.10 * pre);
}

TEST_CASE("expert fit repairs an overconfident psi") {
  SynthConfig scfg;
  scfg.n_users = 100;
  scfg.n_items = 80;
  scfg.propensity_floor = 0.05;
  scfg.seed = 41;
  auto [table, gt] = generate_synthetic(scfg);
  const Split split = split_validation(table, 0.1, 41);

  TrainConfig cfg;
  cfg.dim = 6;
  cfg.k_experts = 2;
  cfg.propensity.epochs = 6;
  cfg.prop_cal_epochs = 25;
  cfg.batch_cal = 2048;
  cfg.adam_expert.lr = 0.05;
  cfg.seed = 13;

  PropensityTrainConfig pcfg = cfg.propensity;
  pcfg.dim = cfg.dim;
  pcfg.seed = cfg.seed;
  PropensityStack stack;
  stack.psi = train_propensity_classifier(table, pcfg);
  // push the classifier toward {0,1}: triple every logit
  for (auto& v : stack.psi.user_factors) v *= std::sqrt(3.0);
  for (auto& v : stack.psi.item_factors) v *= std::sqrt(3.0);
  for (auto& v : stack.psi.user_bias) v *= 3.0;
  for (auto& v : stack.psi.item_bias) v *= 3.0;
  stack.psi.global_bias *= 3.0;
  stack.raw = stack.psi.score_grid();
  stack.emb = EmbeddingTable::from_model(stack.psi);
  fit_propensity_experts(stack, table, split, cfg);

  const double pre = ece_pairwise(gt.p.values, stack.raw.values);
  const double post = ece_pairwise(gt.p.values, stack.calibrated.values);
  CHECK(post < pre);
}

TEST_CASE("propensity stack is frozen through tri-level training") {
  SynthConfig scfg;
  scfg.n_users = 40;
  scfg.n_items = 30;
  scfg.propensity_floor = 0.1;
  scfg.seed = 3;
  auto [table, gt] = generate_synthetic(scfg);
  const Split split = split_validation(table, 0.15, 3);

  TrainConfig cfg;
  cfg.dim = 4;
  cfg.k_experts = 2;
  cfg.epochs = 3;
  cfg.propensity.epochs = 2;
  cfg.prop_cal_epochs = 5;
  cfg.seed = 7;

  const PropensityStack prop = pretrain_propensity_stack(table, split, cfg);
  const auto psi_before = prop.psi.user_factors;
  const auto bank_before = prop.bank.flatten();
  const TrainedStack stack = trilevel_train(table, split, prop, cfg);
  CHECK(prop.psi.user_factors == psi_before);
  CHECK(prop.bank.flatten() == bank_before);
  REQUIRE(stack.prop_bank.has_value());
  CHECK(stack.prop_bank->flatten() == bank_before);
  CHECK(stack.history.size() == 3);
  for (const auto& h : stack.history) {
    CHECK(std::isfinite(h.loss_pred));
    CHECK(std::isfinite(h.loss_imp));
    CHECK(std::isfinite(h.val_metric));
  }
}

TEST_CASE("tri-level with one frozen identity expert reproduces dr-jl exactly") {
  SynthConfig scfg;
  scfg.n_users = 50;
  scfg.n_items = 40;
  scfg.propensity_floor = 0.08;
  scfg.seed = 13;
  auto [table, gt] = generate_synthetic(scfg);
  const Split split = split_validation(table, 0.1, 13);

  TrainConfig cfg;
  cfg.dim = 6;
  cfg.epochs = 4;
  cfg.k_experts = 1;
  cfg.assign_init_noise = 0.0;
  cfg.adam_expert.lr = 0.0;  // freeze the experts at identity
  cfg.seed = 17;

  const PropensityStack prop = manual_stack(table, cfg.dim, 0.4, 99);
  const TrainedStack cal = trilevel_train(table, split, prop, cfg);
  const TrainedStack raw = train_dr_jl(table, split, prop, cfg);

  REQUIRE(cal.prediction.user_factors.size() == raw.prediction.user_factors.size());
  for (std::size_t j = 0; j < cal.prediction.user_factors.size(); ++j)
    CHECK(std::abs(cal.prediction.user_factors[j] - raw.prediction.user_factors[j]) <=
          1e-10);
  for (std::size_t j = 0; j < cal.prediction.item_factors.size(); ++j)
    CHECK(std::abs(cal.prediction.item_factors[j] - raw.prediction.item_factors[j]) <=
          1e-10);
  CHECK(std::abs(cal.prediction.global_bias - raw.prediction.global_bias) <= 1e-10);
  for (std::size_t j = 0; j < cal.imputation->user_factors.size(); ++j)
    CHECK(std::abs(cal.imputation->user_factors[j] - raw.imputation->user_factors[j]) <=
          1e-10);
  for (std::size_t e = 0; e < cal.history.size(); ++e)
    CHECK(cal.history[e].val_metric == raw.history[e].val_metric);
}

TEST_CASE("dr-jl with unit propensities on full observation is plain supervised MF") {
  const auto table = full_observation_table(24, 18, 21);
  const Split split = split_validation(table, 0.1, 21);

  TrainConfig cfg;
  cfg.dim = 4;
  cfg.epochs = 3;
  cfg.batch_obs = 64;
  cfg.seed = 31;

  const PropensityStack prop = manual_stack(table, cfg.dim, 1.0, 5);
  const TrainedStack stack = train_dr_jl(table, split, prop, cfg);

  // mirror loop: supervised training on the same domain-batch schedule,
  // including the trainer's base-rate bias init
  Rng theta_rng = Rng::stream(cfg.seed, streams::theta_init);
  FactorModel theta = FactorModel::init(table.n_users, table.n_items, cfg.dim,
                                        ModelRole::prediction, theta_rng);
  double rate = 0.0;
  for (const auto& o : split.train_obs) rate += o.rating;
  rate = std::clamp(rate / static_cast<double>(split.train_obs.size()), 0.05, 0.95);
  theta.global_bias = logit(rate);
  AdamState adam(theta.n_params());
  ModelGrad grad = ModelGrad::zeros_like(theta);
  Rng shuffle_rng = Rng::stream(cfg.seed, streams::obs_shuffle);
  Rng domain_rng = Rng::stream(cfg.seed, streams::domain_batch);

  std::vector<std::uint8_t> rating(table.n_pairs(), 0);
  for (const auto& o : table.observed) rating[table.index(o.user, o.item)] = o.rating;

  std::vector<Observation> obs(split.train_obs);
  const std::size_t n_dom = static_cast<std::size_t>(std::llround(
      static_cast<double>(cfg.batch_obs) * static_cast<double>(table.n_pairs()) /
      static_cast<double>(obs.size())));
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(obs);
    for (std::size_t lo = 0; lo < obs.size(); lo += cfg.batch_obs) {
      grad.clear();
      std::vector<BatchEntry> batch;
      for (std::size_t s = 0; s < n_dom; ++s) {
        const std::uint64_t idx = domain_rng.uniform_index(table.n_pairs());
        batch.push_back({static_cast<std::uint32_t>(idx / table.n_items),
                         static_cast<std::uint32_t>(idx % table.n_items),
                         static_cast<double>(rating[idx]),
                         1.0 / static_cast<double>(n_dom)});
      }
      gradient(theta, batch, cfg.kind, grad);
      adam_step(theta, adam, grad, cfg.adam_pred);
    }
  }
  for (std::size_t j = 0; j < theta.user_factors.size(); ++j)
    CHECK(std::abs(stack.prediction.user_factors[j] - theta.user_factors[j]) <= 1e-12);
  CHECK(std::abs(stack.prediction.global_bias - theta.global_bias) <= 1e-12);
}

TEST_CASE("early stopping keeps the best validation epoch") {
  SynthConfig scfg;
  scfg.n_users = 40;
  scfg.n_items = 30;
  scfg.propensity_floor = 0.15;
  scfg.seed = 41;
  auto [table, gt] = generate_synthetic(scfg);
  const Split split = split_validation(table, 0.15, 41);

  TrainConfig cfg;
  cfg.dim = 4;
  cfg.epochs = 12;
  cfg.patience = 3;
  cfg.seed = 2;
  const TrainedStack stack = train_baseline(Method::naive, table, split, nullptr, cfg);
  REQUIRE(!stack.history.empty());
  double best = 1e308;
  for (const auto& h : stack.history) best = std::min(best, h.val_metric);
  CHECK(stack.best_val == best);
  CHECK(stack.best_epoch < stack.history.size());
  // no component models for the naive method
  CHECK(!stack.imputation.has_value());
  CHECK(!stack.propensity.has_value());
}

TEST_CASE("baseline trainers run and are seed-deterministic") {
  SynthConfig scfg;
  scfg.n_users = 30;
  scfg.n_items = 30;
  scfg.propensity_floor = 0.12;
  scfg.seed = 51;
  auto [table, gt] = generate_synthetic(scfg);
  const Split split = split_validation(table, 0.1, 51);

  TrainConfig cfg;
  cfg.dim = 4;
  cfg.epochs = 2;
  cfg.propensity.epochs = 2;
  cfg.prop_cal_epochs = 3;
  cfg.seed = 8;
  const PropensityStack prop = pretrain_propensity_stack(table, split, cfg);

  for (Method m : {Method::eib, Method::ips, Method::snips}) {
    const TrainedStack a = train_baseline(m, table, split, &prop, cfg);
    const TrainedStack b = train_baseline(m, table, split, &prop, cfg);
    CHECK(a.prediction.user_factors == b.prediction.user_factors);
    CHECK(a.history.size() == 2);
  }
  CHECK_THROWS(train_baseline(Method::ips, table, split, nullptr, cfg));
}
