#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "dce/data.hpp"
#include "dce/evaluation.hpp"
#include "dce/factor_model.hpp"
#include "oracles.hpp"

using namespace dce;

namespace {

FactorModel small_model(std::uint64_t seed, std::size_t nu = 4, std::size_t ni = 5,
                        std::size_t d = 3) {
  Rng rng(seed);
  auto m = FactorModel::init(nu, ni, d, ModelRole::prediction, rng, 0.4);
  for (auto& b : m.user_bias) b = 0.2 * rng.normal();
  for (auto& b : m.item_bias) b = 0.2 * rng.normal();
  m.global_bias = 0.1 * rng.normal();
  return m;
}

double batch_loss(const FactorModel& m, const std::vector<BatchEntry>& batch,
                  ErrorKind kind) {
  double s = 0.0;
  for (const auto& b : batch)
    s += b.weight * error(kind, sigmoid(m.raw_score(b.user, b.item)), b.target);
  return s;
}

}  // namespace

TEST_CASE("predict spot values") {
  Rng rng(1);
  auto m = FactorModel::init(2, 2, 2, ModelRole::prediction, rng, 0.0);
  CHECK(m.score(0, 0) == doctest::Approx(0.5));

  m.global_bias = 1e9;  // saturated
  CHECK(m.score(0, 0) == 1.0 - kEpsLog);
  m.global_bias = -1e9;
  CHECK(m.score(0, 0) == kEpsLog);

  m.global_bias = 0.0;
  m.user_factors = {1.0, 0.0, 0.0, 0.0};
  m.item_factors = {2.0, 0.0, 0.0, 0.0};
  CHECK(m.score(0, 0) == doctest::Approx(0.8807970779778823).epsilon(1e-10));
}

TEST_CASE("error spot values") {
  CHECK(error(ErrorKind::bce, 0.5, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(error(ErrorKind::mse, 0.3, 0.0) == doctest::Approx(0.09).epsilon(1e-12));
  CHECK_THROWS(error(ErrorKind::bce, std::nan(""), 1.0));
}

TEST_CASE("soft labels are the exact mixture of hard-label losses") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const double r_hat = rng.uniform(0.01, 0.99);
    const double t = rng.uniform(0.0, 1.0);
    for (ErrorKind kind : {ErrorKind::bce, ErrorKind::mse}) {
      const auto [e0, e1] = error_pair(kind, r_hat);
      CHECK(std::abs(error(kind, r_hat, t) - (t * e1 + (1.0 - t) * e0)) <= 1e-12);
    }
  }
  // the spec's worked example
  const auto [e0, e1] = error_pair(ErrorKind::bce, 0.4);
  CHECK(std::abs(error(ErrorKind::bce, 0.4, 0.25) - (0.25 * e1 + 0.75 * e0)) <= 1e-12);
}

TEST_CASE("zero weights give a zero gradient; weights scale linearly") {
  auto m = small_model(2);
  std::vector<BatchEntry> batch = {{0, 1, 1.0, 0.0}, {2, 3, 0.0, 0.0}};
  ModelGrad g = ModelGrad::zeros_like(m);
  gradient(m, batch, ErrorKind::bce, g);
  for (double v : g.user_factors) CHECK(v == 0.0);
  CHECK(g.global_bias == 0.0);

  for (auto& b : batch) b.weight = 0.7;
  ModelGrad g1 = ModelGrad::zeros_like(m);
  gradient(m, batch, ErrorKind::bce, g1);
  for (auto& b : batch) b.weight = 1.4;
  ModelGrad g2 = ModelGrad::zeros_like(m);
  gradient(m, batch, ErrorKind::bce, g2);
  for (std::size_t j = 0; j < g1.item_factors.size(); ++j)
    CHECK(g2.item_factors[j] == doctest::Approx(2.0 * g1.item_factors[j]).epsilon(1e-12));
  CHECK(g2.global_bias == doctest::Approx(2.0 * g1.global_bias).epsilon(1e-12));
}

TEST_CASE("analytic gradients match central finite differences") {
  Rng rng(31);
  for (ErrorKind kind : {ErrorKind::bce, ErrorKind::mse}) {
    auto m = small_model(40 + static_cast<int>(kind));
    std::vector<BatchEntry> batch;
    for (int j = 0; j < 12; ++j)
      batch.push_back({static_cast<std::uint32_t>(rng.uniform_index(4)),
                       static_cast<std::uint32_t>(rng.uniform_index(5)),
                       rng.uniform(0.0, 1.0), rng.uniform(0.2, 2.0)});
    ModelGrad g = ModelGrad::zeros_like(m);
    gradient(m, batch, kind, g);

    auto f = [&] { return batch_loss(m, batch, kind); };
    auto check_block = [&](std::vector<double>& params, const std::vector<double>& grads) {
      for (std::size_t j = 0; j < params.size(); ++j) {
        const double fd = oracle::finite_diff(params, j, f);
        CHECK(oracle::rel_err(grads[j], fd) <= 1e-4);
      }
    };
    check_block(m.user_factors, g.user_factors);
    check_block(m.item_factors, g.item_factors);
    check_block(m.user_bias, g.user_bias);
    check_block(m.item_bias, g.item_bias);
    std::vector<double> gb = {m.global_bias};
    auto fg = [&] {
      m.global_bias = gb[0];
      const double v = batch_loss(m, batch, kind);
      return v;
    };
    const double fd = oracle::finite_diff(gb, 0, fg);
    m.global_bias = gb[0];
    CHECK(oracle::rel_err(g.global_bias, fd) <= 1e-4);
  }
}

TEST_CASE("adam with zero gradient and zero decay is the identity") {
  auto m = small_model(8);
  const auto before = m;
  AdamState st(m.n_params());
  ModelGrad g = ModelGrad::zeros_like(m);
  AdamConfig cfg{.lr = 0.1, .weight_decay = 0.0};
  for (int it = 0; it < 3; ++it) adam_step(m, st, g, cfg);
  CHECK(m.user_factors == before.user_factors);
  CHECK(m.item_factors == before.item_factors);
  CHECK(m.global_bias == before.global_bias);
}

TEST_CASE("first adam step moves each coordinate by about lr * sign(g)") {
  auto m = small_model(9);
  const auto before = m;
  AdamState st(m.n_params());
  ModelGrad g = ModelGrad::zeros_like(m);
  Rng rng(10);
  for (auto& v : g.user_factors) v = rng.normal();
  AdamConfig cfg{.lr = 0.01, .weight_decay = 0.0};
  adam_step(m, st, g, cfg);
  for (std::size_t j = 0; j < g.user_factors.size(); ++j) {
    const double step = before.user_factors[j] - m.user_factors[j];
    // bias-corrected first step: lr * g / (|g| + eps)
    const double expect = cfg.lr * g.user_factors[j] /
                          (std::abs(g.user_factors[j]) + cfg.eps);
    CHECK(step == doctest::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("propensity classifier drifts toward 1 under full observation") {
  InteractionTable table;
  table.n_users = 12;
  table.n_items = 12;
  for (std::uint32_t u = 0; u < 12; ++u)
    for (std::uint32_t i = 0; i < 12; ++i) table.observed.push_back({u, i, 1});

  PropensityTrainConfig cfg;
  cfg.dim = 4;
  cfg.seed = 3;
  double prev = 1e9;
  for (std::size_t epochs : {1u, 2u, 3u, 4u}) {
    cfg.epochs = epochs;
    const auto psi = train_propensity_classifier(table, cfg);
    double bce = 0.0;
    for (std::size_t j = 0; j < table.n_pairs(); ++j)
      bce += error(ErrorKind::bce, psi.score(j / 12, j % 12), 1.0);
    bce /= static_cast<double>(table.n_pairs());
    CHECK(bce < prev);
    prev = bce;
  }
}

TEST_CASE("propensity classifier beats chance on a skewed grid") {
  SynthConfig scfg;
  scfg.n_users = 200;
  scfg.n_items = 200;
  scfg.propensity_floor = 0.05;
  scfg.seed = 21;
  auto [table, gt] = generate_synthetic(scfg);

  PropensityTrainConfig cfg;
  cfg.dim = 8;
  cfg.epochs = 5;
  cfg.seed = 4;
  const auto psi = train_propensity_classifier(table, cfg);
  const auto grid = psi.score_grid();

  const auto holdout = sample_observations(gt, 777);
  std::vector<double> labels(holdout.begin(), holdout.end());
  CHECK(auc(grid.values, labels) > 0.5);

  // determinism
  const auto psi2 = train_propensity_classifier(table, cfg);
  CHECK(psi.user_factors == psi2.user_factors);
  CHECK(psi.global_bias == psi2.global_bias);
}

TEST_CASE("heuristic propensity follows the popularity-ratio rule") {
  InteractionTable table;
  table.n_users = 4;
  table.n_items = 2;
  // item 0 observed once, item 1 observed four times
  table.observed = {{0, 0, 1}, {0, 1, 1}, {1, 1, 0}, {2, 1, 1}, {3, 1, 0}};
  const auto h1 = heuristic_propensity(table, 1.0);
  CHECK(h1.at(0, 0) == doctest::Approx(0.25));
  CHECK(h1.at(0, 1) == doctest::Approx(1.0));
  const auto h05 = heuristic_propensity(table, 0.5);
  CHECK(h05.at(2, 0) == doctest::Approx(0.5));
  // item-constant across users
  for (std::size_t u = 0; u < 4; ++u) CHECK(h05.at(u, 1) == h05.at(0, 1));
}

TEST_CASE("heuristic imputed error") {
  CHECK(heuristic_imputed_error(0.1, 0.5, 0.1) == 0.0);
  CHECK(heuristic_imputed_error(0.9, 0.5, 0.1) == doctest::Approx(0.4));
  const double up = heuristic_imputed_error(0.3 + 0.05, 1.0, 0.3);
  const double down = heuristic_imputed_error(0.3 - 0.05, 1.0, 0.3);
  CHECK(up == doctest::Approx(down).epsilon(1e-12));
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  auto m = small_model(77);
  m.role = ModelRole::imputation;
  const std::string path = "/tmp/dce_test_model.bin";
  save_checkpoint(path, m);
  const auto back = load_checkpoint(path);
  CHECK(back.role == ModelRole::imputation);
  CHECK(back.user_factors == m.user_factors);
  CHECK(back.item_factors == m.item_factors);
  CHECK(back.user_bias == m.user_bias);
  CHECK(back.item_bias == m.item_bias);
  CHECK(back.global_bias == m.global_bias);
  std::remove(path.c_str());
}
