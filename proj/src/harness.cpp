#include "dce/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "dce/estimators.hpp"
#include "dce/reports.hpp"

namespace dce {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << content;
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  json j;
  in >> j;
  return j;
}

// Stamp carried by every output JSON payload.
json stamp(const Config& cfg, std::uint64_t seed) {
  return json{{"config_hash", cfg.hash_hex()}, {"seed", seed}};
}

std::string csv_stamp(const Config& cfg, std::uint64_t seed) {
  std::ostringstream out;
  out << "# config_hash=" << cfg.hash_hex() << " seed=" << seed << "\n";
  return out.str();
}

}  // namespace

Dataset load_dataset(const Config& cfg) {
  Dataset ds;
  const bool has_dir = cfg.has("data_dir");
  const bool has_tsv = cfg.has("train_tsv");
  if (has_dir == has_tsv)
    throw ConfigError("exactly one of data_dir / train_tsv must be set");

  if (has_tsv) {
    const auto res = load_tsv(cfg.require("train_tsv"), cfg.get_double("rating_threshold", 3.0));
    ds.table = res.table;
    return ds;
  }

  ds.dir = cfg.require("data_dir");
  const json manifest = read_json(ds.dir + "/manifest.json");
  ds.table.n_users = manifest.at("n_users").get<std::size_t>();
  ds.table.n_items = manifest.at("n_items").get<std::size_t>();

  // direct indices, no remapping: rows were written by gen-data
  std::ifstream in(ds.dir + "/train.tsv");
  if (!in) throw DataError("cannot open " + ds.dir + "/train.tsv");
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::uint32_t u, i;
    int r;
    if (!(ss >> u >> i >> r)) throw DataError("bad row in " + ds.dir + "/train.tsv");
    ds.table.observed.push_back({u, i, static_cast<std::uint8_t>(r)});
  }
  if (fs::exists(ds.dir + "/gt_p.csv")) {
    ds.has_ground_truth = true;
    ds.gt.p = load_grid_csv(ds.dir + "/gt_p.csv");
    ds.gt.q = load_grid_csv(ds.dir + "/gt_q.csv");
    ds.gt.seed = manifest.value("seed", std::uint64_t{0});
  }
  ds.table.validate();
  return ds;
}

std::vector<TestPair> load_test_pairs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<TestPair> pairs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    TestPair p;
    if (!(ss >> p.user >> p.item >> p.label)) throw DataError("bad row in " + path);
    pairs.push_back(p);
  }
  if (pairs.empty()) throw DataError("empty test set: " + path);
  return pairs;
}

TrainConfig train_config_from(const Config& cfg, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = cfg.get_uint("train.epochs", 30);
  t.batch_obs = cfg.get_uint("train.batch_obs", 128);
  t.batch_cal = cfg.get_uint("train.batch_cal", 512);
  t.dim = cfg.get_uint("train.dim", 16);
  t.prop_dim = cfg.get_uint("train.prop_dim", 0);
  t.k_experts = cfg.get_uint("train.k_experts", 5);
  const std::string kind = cfg.get("train.error", "bce");
  if (kind == "bce") t.kind = ErrorKind::bce;
  else if (kind == "mse") t.kind = ErrorKind::mse;
  else throw ConfigError("train.error must be bce or mse");

  t.adam_pred.lr = cfg.get_double("train.lr_pred", 0.02);
  t.adam_pred.weight_decay = cfg.get_double("train.wd_pred", 1e-6);
  t.adam_imp.lr = cfg.get_double("train.lr_imp", 0.02);
  t.adam_imp.weight_decay = cfg.get_double("train.wd_imp", 1e-6);
  t.adam_expert.lr = cfg.get_double("train.lr_expert", 0.02);
  t.adam_expert.weight_decay = cfg.get_double("train.wd_expert", 0.0);

  t.propensity.epochs = cfg.get_uint("train.prop_epochs", 10);
  t.propensity.batch_size = cfg.get_uint("train.prop_batch", 256);
  t.propensity.adam.lr = cfg.get_double("train.lr_prop", 0.05);
  t.propensity.adam.weight_decay = cfg.get_double("train.wd_prop", 1e-6);
  t.propensity.negatives_per_positive = cfg.get_double("train.prop_negatives", 4.0);
  t.propensity.full_complement = cfg.get_bool("train.prop_full_complement", false);
  t.prop_cal_epochs = cfg.get_uint("train.prop_cal_epochs", 30);
  t.dval_negatives_per_positive = cfg.get_uint("train.dval_negatives", 0);

  t.t0 = cfg.get_double("train.t0", 1.0);
  t.tq = cfg.get_double("train.tq", 1e-3);
  t.patience = cfg.get_uint("train.patience", 0);
  t.clip_threshold = cfg.get_double("train.clip_threshold", 0.0);
  t.clamp_impcal_coeff = cfg.get_bool("train.clamp_impcal_coeff", false);
  t.impcal_ips_weight = cfg.get_bool("train.impcal_ips_weight", false);
  t.assign_init_noise = cfg.get_double("train.assign_init_noise", 0.01);
  t.heuristic_omega = cfg.get_double("train.omega", 0.5);
  t.heuristic_gamma = cfg.get_double("train.gamma", 0.5);
  t.seed = seed;
  return t;
}

MetricReport evaluate_predictions(const FactorModel& model,
                                  const std::vector<TestPair>& pairs,
                                  const std::vector<std::size_t>& ndcg_cutoffs) {
  std::vector<double> scores(pairs.size()), labels(pairs.size());
  for (std::size_t j = 0; j < pairs.size(); ++j) {
    scores[j] = model.score(pairs[j].user, pairs[j].item);
    labels[j] = pairs[j].label;
  }
  MetricReport rep;
  rep.mse = mse(scores, labels);
  rep.auc = auc(scores, labels);

  std::map<std::uint32_t, std::vector<RankedItem>> by_user;
  for (std::size_t j = 0; j < pairs.size(); ++j)
    by_user[pairs[j].user].push_back({scores[j], pairs[j].label > 0.5 ? 1 : 0});
  std::vector<std::vector<RankedItem>> lists;
  lists.reserve(by_user.size());
  for (auto& [u, v] : by_user) lists.push_back(std::move(v));
  for (std::size_t k : ndcg_cutoffs) rep.ndcg[k] = ndcg_at_k(lists, k);
  return rep;
}

TrainedStack run_training(Method method, const InteractionTable& table,
                          const Split& split, const TrainConfig& tcfg) {
  const bool needs_prop = method == Method::ips || method == Method::snips ||
                          method == Method::dr_jl || method == Method::dce_dr;
  if (!needs_prop) return train_baseline(method, table, split, nullptr, tcfg);
  const PropensityStack prop = pretrain_propensity_stack(table, split, tcfg);
  if (method == Method::dce_dr) return trilevel_train(table, split, prop, tcfg);
  if (method == Method::dr_jl) return train_dr_jl(table, split, prop, tcfg);
  return train_baseline(method, table, split, &prop, tcfg);
}

void cmd_gen_data(const Config& cfg, bool force) {
  const std::string out_dir = cfg.require("out_dir");
  if (fs::exists(out_dir + "/manifest.json") && !force)
    throw ConfigError(out_dir + " already holds a dataset (use --force to overwrite)");
  fs::create_directories(out_dir);

  SynthConfig s;
  s.n_users = cfg.get_uint("synth.n_users", 100);
  s.n_items = cfg.get_uint("synth.n_items", 100);
  s.latent_dim = cfg.get_uint("synth.latent_dim", 8);
  s.q_scale = cfg.get_double("synth.q_scale", 2.0);
  s.q_noise = cfg.get_double("synth.q_noise", 0.0);
  s.kappa = cfg.get_double("synth.kappa", 4.0);
  s.pop_weight = cfg.get_double("synth.pop_weight", 1.5);
  s.pop_skew = cfg.get_double("synth.pop_skew", 1.0);
  s.group_offset = cfg.get_double("synth.group_offset", 0.0);
  s.exposure_offset = cfg.get_double("synth.exposure_offset", 0.0);
  s.propensity_floor = cfg.get_double("synth.floor", 0.05);
  s.seed = cfg.get_uint("synth.seed", 1);

  auto [table, gt] = generate_synthetic(s);

  // unbiased test set: fresh Bernoulli(q) labels on uniformly sampled items
  const std::size_t test_per_user = cfg.get_uint("synth.test_items_per_user", 30);
  Rng test_rng = Rng::stream(s.seed, 91);
  std::ostringstream test_out;
  test_out << csv_stamp(cfg, s.seed);
  for (std::size_t u = 0; u < s.n_users; ++u) {
    for (std::size_t t = 0; t < std::min(test_per_user, s.n_items); ++t) {
      const std::size_t i = test_rng.uniform_index(s.n_items);
      const int r = test_rng.bernoulli(gt.q.at(u, i)) ? 1 : 0;
      test_out << u << '\t' << i << '\t' << r << '\n';
    }
  }
  write_text(out_dir + "/test.tsv", test_out.str());

  std::ostringstream train_out;
  train_out << csv_stamp(cfg, s.seed);
  for (const auto& o : table.observed)
    train_out << o.user << '\t' << o.item << '\t' << int(o.rating) << '\n';
  write_text(out_dir + "/train.tsv", train_out.str());

  save_grid_csv(out_dir + "/gt_p.csv", gt.p);
  save_grid_csv(out_dir + "/gt_q.csv", gt.q);

  json manifest = stamp(cfg, s.seed);
  manifest["type"] = "synthetic";
  manifest["n_users"] = s.n_users;
  manifest["n_items"] = s.n_items;
  manifest["n_pairs"] = table.n_pairs();
  manifest["n_observed"] = table.observed.size();
  manifest["observation_rate"] =
      static_cast<double>(table.observed.size()) / static_cast<double>(table.n_pairs());
  manifest["full_observation"] = table.observed.size() == table.n_pairs();
  manifest["files"] = json{{"train", "train.tsv"},
                           {"test", "test.tsv"},
                           {"gt_p", "gt_p.csv"},
                           {"gt_q", "gt_q.csv"}};
  write_text(out_dir + "/manifest.json", manifest.dump(2) + "\n");
}

namespace {

void save_stack(const std::string& dir, const TrainedStack& stack) {
  fs::create_directories(dir);
  save_checkpoint(dir + "/theta.bin", stack.prediction);
  if (stack.imputation) save_checkpoint(dir + "/phi.bin", *stack.imputation);
  if (stack.propensity) save_checkpoint(dir + "/psi.bin", *stack.propensity);
  if (stack.imp_bank) save_bank(dir + "/imp_bank.bin", *stack.imp_bank);
  if (stack.prop_bank) save_bank(dir + "/prop_bank.bin", *stack.prop_bank);
}

}  // namespace

void cmd_train(const Config& cfg) {
  const std::string out_dir = cfg.require("out_dir");
  fs::create_directories(out_dir);
  const Method method = parse_method(cfg.get("method", "dce-dr"));
  const auto seeds = cfg.get_uint_list("seeds", {1, 2, 3, 4, 5});
  const double val_fraction = cfg.get_double("train.val_fraction", 0.1);
  const auto cutoffs = cfg.get_size_list("eval.ndcg_cutoffs", {5, 10});

  const Dataset ds = load_dataset(cfg);
  std::vector<TestPair> test;
  if (cfg.has("test_tsv")) test = load_test_pairs(cfg.require("test_tsv"));
  else if (!ds.dir.empty() && fs::exists(ds.dir + "/test.tsv"))
    test = load_test_pairs(ds.dir + "/test.tsv");

  std::vector<std::pair<std::uint64_t, MetricReport>> per_seed;
  for (const std::uint64_t seed : seeds) {
    const TrainConfig tcfg = train_config_from(cfg, seed);
    const Split split = split_validation(ds.table, val_fraction, seed);
    const TrainedStack stack = run_training(method, ds.table, split, tcfg);

    const std::string run_dir =
        out_dir + "/" + method_name(method) + "_seed" + std::to_string(seed);
    save_stack(run_dir, stack);
    write_text(run_dir + "/history.jsonl", history_to_jsonl(stack.history));

    json info = stamp(cfg, seed);
    info["method"] = method_name(method);
    info["val_fraction"] = val_fraction;
    info["best_epoch"] = stack.best_epoch;
    info["best_val"] = stack.best_val;
    write_text(run_dir + "/run_info.json", info.dump(2) + "\n");

    if (!test.empty()) {
      const MetricReport rep = evaluate_predictions(stack.prediction, test, cutoffs);
      json mj = stamp(cfg, seed);
      mj["metrics"] = json::parse(metrics_to_json(rep));
      write_text(run_dir + "/metrics.json", mj.dump(2) + "\n");
      per_seed.emplace_back(seed, rep);
    }
  }

  if (per_seed.empty()) return;

  // per-seed table for this method
  std::ostringstream table_out;
  table_out << csv_stamp(cfg, seeds.front());
  table_out << "seed," << metrics_csv_header(per_seed.front().second) << "\n";
  for (const auto& [seed, rep] : per_seed)
    table_out << seed << ',' << metrics_csv_row(rep) << "\n";
  const std::string per_seed_path =
      out_dir + "/" + method_name(method) + "_per_seed.csv";
  write_text(per_seed_path, table_out.str());

  // mean +/- std summary
  auto mean_std = [&](auto getter) {
    double m = 0.0, s = 0.0;
    for (const auto& [seed, rep] : per_seed) m += getter(rep);
    m /= static_cast<double>(per_seed.size());
    for (const auto& [seed, rep] : per_seed) {
      const double d = getter(rep) - m;
      s += d * d;
    }
    s = per_seed.size() > 1 ? std::sqrt(s / static_cast<double>(per_seed.size() - 1)) : 0.0;
    return std::pair<double, double>{m, s};
  };
  std::ostringstream summary;
  summary << csv_stamp(cfg, seeds.front());
  summary << "method,metric,mean,std,n_seeds\n";
  summary.precision(10);
  const auto [mse_m, mse_s] = mean_std([](const MetricReport& r) { return r.mse; });
  const auto [auc_m, auc_s] = mean_std([](const MetricReport& r) { return r.auc; });
  summary << method_name(method) << ",mse," << mse_m << ',' << mse_s << ','
          << per_seed.size() << "\n";
  summary << method_name(method) << ",auc," << auc_m << ',' << auc_s << ','
          << per_seed.size() << "\n";
  for (std::size_t k : cutoffs) {
    const auto [m, s] =
        mean_std([k](const MetricReport& r) { return r.ndcg.at(k); });
    summary << method_name(method) << ",ndcg@" << k << ',' << m << ',' << s << ','
            << per_seed.size() << "\n";
  }
  write_text(out_dir + "/" + method_name(method) + "_summary.csv", summary.str());

  // paired per-seed table across every method trained into this out_dir
  std::vector<std::string> methods;
  std::map<std::string, std::map<std::string, std::string>> rows;  // seed -> method -> csv
  std::string header;
  for (const auto& entry : fs::directory_iterator(out_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() <= 13 || name.substr(name.size() - 13) != "_per_seed.csv") continue;
    const std::string m = name.substr(0, name.size() - 13);
    std::ifstream in(entry.path());
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      if (line.rfind("seed,", 0) == 0) {
        header = line.substr(5);
        continue;
      }
      const auto comma = line.find(',');
      rows[line.substr(0, comma)][m] = line.substr(comma + 1);
    }
    methods.push_back(m);
  }
  if (methods.size() > 1) {
    std::sort(methods.begin(), methods.end());
    std::ostringstream paired;
    paired << csv_stamp(cfg, seeds.front());
    paired << "seed,method," << header << "\n";
    for (const auto& [seed, by_method] : rows)
      for (const auto& m : methods)
        if (by_method.count(m)) paired << seed << ',' << m << ',' << by_method.at(m) << "\n";
    write_text(out_dir + "/paired.csv", paired.str());
  }
}

void cmd_eval(const Config& cfg) {
  const std::string stack_dir = cfg.require("stack_dir");
  const FactorModel theta = load_checkpoint(stack_dir + "/theta.bin");
  std::vector<TestPair> test;
  if (cfg.has("test_tsv")) {
    test = load_test_pairs(cfg.require("test_tsv"));
  } else {
    const std::string dir = cfg.require("data_dir");
    test = load_test_pairs(dir + "/test.tsv");
  }
  const auto cutoffs = cfg.get_size_list("eval.ndcg_cutoffs", {5, 10});
  const MetricReport rep = evaluate_predictions(theta, test, cutoffs);
  json j = stamp(cfg, cfg.get_uint("seed", 0));
  j["metrics"] = json::parse(metrics_to_json(rep));
  const std::string out = j.dump(2) + "\n";
  write_text(stack_dir + "/metrics_eval.json", out);
  std::printf("%s", out.c_str());
}

namespace {

struct AuditInstance {
  std::vector<double> e0, e1, r_tilde, p, p_hat, q;
};

AuditInstance random_audit_instance(Rng& rng, std::size_t n) {
  AuditInstance a;
  a.e0.resize(n);
  a.e1.resize(n);
  a.r_tilde.resize(n);
  a.p.resize(n);
  a.p_hat.resize(n);
  a.q.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r_hat = rng.uniform(0.05, 0.95);
    const auto [e0, e1] = error_pair(ErrorKind::bce, r_hat);
    a.e0[i] = e0;
    a.e1[i] = e1;
    a.r_tilde[i] = rng.uniform(0.02, 0.98);
    a.p[i] = rng.uniform(0.05, 0.95);
    a.p_hat[i] = rng.uniform(0.05, 0.95);
    a.q[i] = rng.uniform(0.02, 0.98);
  }
  return a;
}

json stack_audit_json(const Config& cfg, const Dataset& ds) {
  const std::string dir = cfg.require("stack_dir");
  const FactorModel theta = load_checkpoint(dir + "/theta.bin");
  const FactorModel phi = load_checkpoint(dir + "/phi.bin");
  const FactorModel psi = load_checkpoint(dir + "/psi.bin");

  const DenseGrid rhat = theta.score_grid();
  const DenseGrid rtilde = phi.score_grid();
  const DenseGrid phat = psi.score_grid();
  const std::size_t n = rhat.size();

  std::vector<double> e0(n), e1(n);
  for (std::size_t j = 0; j < n; ++j) {
    const auto pair = error_pair(ErrorKind::bce, rhat.values[j]);
    e0[j] = pair.e0;
    e1[j] = pair.e1;
  }

  const auto raw = theorem_bounds(e0, e1, rtilde.values, ds.gt.p.values, phat.values,
                                  ds.gt.q.values);
  json out;
  out["raw"] = json::parse(audit_to_json(raw));

  if (fs::exists(dir + "/imp_bank.bin") && fs::exists(dir + "/prop_bank.bin")) {
    const ExpertBank imp_bank = load_bank(dir + "/imp_bank.bin");
    const ExpertBank prop_bank = load_bank(dir + "/prop_bank.bin");
    const EmbeddingTable imp_emb = EmbeddingTable::from_model(phi);
    const EmbeddingTable prop_emb = EmbeddingTable::from_model(psi);
    const DenseGrid rbar = calibrated_grid_eval(imp_bank, imp_emb, rtilde);
    const DenseGrid pbar = calibrated_grid_eval(prop_bank, prop_emb, phat);
    const auto cal = theorem_bounds(e0, e1, rbar.values, ds.gt.p.values, pbar.values,
                                    ds.gt.q.values);
    out["calibrated"] = json::parse(audit_to_json(cal));
  }
  return out;
}

}  // namespace

void cmd_audit(const Config& cfg) {
  const std::string out_dir = cfg.require("out_dir");
  fs::create_directories(out_dir);
  const std::uint64_t seed = cfg.get_uint("audit.seed", 1);
  const std::size_t instances = cfg.get_uint("audit.instances", 1000);
  const std::size_t max_pairs = cfg.get_uint("audit.max_pairs", 100);
  const std::size_t oracle_pairs = cfg.get_uint("audit.oracle_pairs", 12);
  const std::size_t oracle_cases = cfg.get_uint("audit.oracle_cases", 100);

  json report = stamp(cfg, seed);

  // randomized theorem audit
  Rng rng = Rng::stream(seed, 81);
  std::size_t violations = 0;
  double min_slack = 1e308;
  for (std::size_t c = 0; c < instances; ++c) {
    const std::size_t n = 1 + rng.uniform_index(max_pairs);
    const auto a = random_audit_instance(rng, n);
    const auto audit = theorem_bounds(a.e0, a.e1, a.r_tilde, a.p, a.p_hat, a.q);
    if (!audit.all_hold()) ++violations;
    for (const auto* b : {&audit.bias_ece_prop, &audit.bias_mce_prop, &audit.bias_ece_imp,
                          &audit.bias_mce_imp, &audit.var_ece_imp, &audit.var_mce_imp})
      min_slack = std::min(min_slack, b->bound - b->lhs);
  }
  report["randomized"] = json{
      {"instances", instances}, {"violations", violations}, {"min_slack", min_slack}};

  // closed form vs exhaustive enumeration on small instances
  Rng orng = Rng::stream(seed, 82);
  double max_mean_delta = 0.0, max_var_delta = 0.0;
  for (std::size_t c = 0; c < oracle_cases; ++c) {
    const std::size_t n = 1 + orng.uniform_index(oracle_pairs);
    std::vector<double> e(n), eh(n), p(n), ph(n);
    for (std::size_t i = 0; i < n; ++i) {
      e[i] = orng.uniform(0.0, 2.0);
      eh[i] = orng.uniform(0.0, 2.0);
      p[i] = orng.uniform(0.05, 0.95);
      ph[i] = orng.uniform(0.05, 0.95);
    }
    const auto mom = brute_force_moments(e, eh, p, ph);
    const double ideal = ideal_loss(e);
    const double bias_cf = lemma1_bias(e, eh, p, ph);
    const double var_cf = lemma1_variance(e, eh, p, ph);
    max_mean_delta = std::max(max_mean_delta, std::abs(std::abs(mom.mean - ideal) - bias_cf));
    max_var_delta = std::max(max_var_delta, std::abs(mom.variance - var_cf));
  }
  report["oracle"] = json{{"cases", oracle_cases},
                          {"max_pairs", oracle_pairs},
                          {"max_bias_delta", max_mean_delta},
                          {"max_variance_delta", max_var_delta}};

  // audit of a concrete trained stack (needs ground truth)
  if (cfg.has("stack_dir")) {
    if (!cfg.has("data_dir"))
      throw DataError("stack audit requires data_dir with ground-truth grids");
    const Dataset ds = load_dataset(cfg);
    if (!ds.has_ground_truth)
      throw DataError("audit refused: dataset has no ground-truth grids");
    report["stack"] = stack_audit_json(cfg, ds);
  }

  write_text(out_dir + "/audit.json", report.dump(2) + "\n");
}

void cmd_calib_report(const Config& cfg) {
  const std::string out_dir = cfg.require("out_dir");
  fs::create_directories(out_dir);
  const std::string stack_dir = cfg.require("stack_dir");
  const std::size_t m_bins = cfg.get_uint("calib.bins", 15);
  const double val_fraction = cfg.get_double("train.val_fraction", 0.1);

  const Dataset ds = load_dataset(cfg);
  const json run_info = read_json(stack_dir + "/run_info.json");
  const std::uint64_t seed = run_info.at("seed").get<std::uint64_t>();
  const Split split = split_validation(ds.table, val_fraction, seed);

  if (!fs::exists(stack_dir + "/phi.bin") || !fs::exists(stack_dir + "/psi.bin"))
    throw DataError("calibration report needs an imputation and a propensity checkpoint");
  const FactorModel phi = load_checkpoint(stack_dir + "/phi.bin");
  const FactorModel psi = load_checkpoint(stack_dir + "/psi.bin");
  const DenseGrid rtilde = phi.score_grid();
  const DenseGrid phat = psi.score_grid();

  DenseGrid rbar = rtilde, pbar = phat;
  if (fs::exists(stack_dir + "/imp_bank.bin")) {
    const ExpertBank imp_bank = load_bank(stack_dir + "/imp_bank.bin");
    rbar = calibrated_grid_eval(imp_bank, EmbeddingTable::from_model(phi), rtilde);
  }
  if (fs::exists(stack_dir + "/prop_bank.bin")) {
    const ExpertBank prop_bank = load_bank(stack_dir + "/prop_bank.bin");
    pbar = calibrated_grid_eval(prop_bank, EmbeddingTable::from_model(psi), phat);
  }

  auto emit = [&](const std::string& name, const ReliabilityReport& rep,
                  double pairwise_ece) {
    json j = stamp(cfg, seed);
    j["report"] = json::parse(reliability_to_json(rep));
    if (pairwise_ece >= 0.0) j["pairwise_ece"] = pairwise_ece;
    write_text(out_dir + "/" + name + ".json", j.dump(2) + "\n");
    write_text(out_dir + "/" + name + ".csv", csv_stamp(cfg, seed) + reliability_to_csv(rep));
  };

  // propensity reliability over D_val (labels are observation indicators)
  std::vector<double> prop_scores_raw, prop_scores_cal, prop_labels;
  for (const auto& e : split.d_val) {
    prop_scores_raw.push_back(phat.at(e.user, e.item));
    prop_scores_cal.push_back(pbar.at(e.user, e.item));
    prop_labels.push_back(e.observed);
  }
  const double prop_ece_raw =
      ds.has_ground_truth ? ece_pairwise(ds.gt.p.values, phat.values) : -1.0;
  const double prop_ece_cal =
      ds.has_ground_truth ? ece_pairwise(ds.gt.p.values, pbar.values) : -1.0;
  emit("calib_prop_before", ece_binned(prop_scores_raw, prop_labels, m_bins), prop_ece_raw);
  emit("calib_prop_after", ece_binned(prop_scores_cal, prop_labels, m_bins), prop_ece_cal);

  // imputation reliability over observed validation pairs (labels are ratings)
  std::vector<double> imp_scores_raw, imp_scores_cal, imp_labels;
  for (const auto& o : split.val_obs) {
    imp_scores_raw.push_back(rtilde.at(o.user, o.item));
    imp_scores_cal.push_back(rbar.at(o.user, o.item));
    imp_labels.push_back(o.rating);
  }
  const double imp_ece_raw =
      ds.has_ground_truth ? ece_pairwise(ds.gt.q.values, rtilde.values) : -1.0;
  const double imp_ece_cal =
      ds.has_ground_truth ? ece_pairwise(ds.gt.q.values, rbar.values) : -1.0;
  emit("calib_imp_before", ece_binned(imp_scores_raw, imp_labels, m_bins), imp_ece_raw);
  emit("calib_imp_after", ece_binned(imp_scores_cal, imp_labels, m_bins), imp_ece_cal);

  // optional heuristic-propensity comparison
  if (cfg.get_bool("calib.heuristic", false)) {
    const DenseGrid heur = heuristic_propensity(ds.table, cfg.get_double("calib.eta", 0.5));
    std::vector<double> scores;
    for (const auto& e : split.d_val) scores.push_back(heur.at(e.user, e.item));
    const double pe =
        ds.has_ground_truth ? ece_pairwise(ds.gt.p.values, heur.values) : -1.0;
    emit("calib_prop_heuristic", ece_binned(scores, prop_labels, m_bins), pe);
  }
}

}  // namespace dce
