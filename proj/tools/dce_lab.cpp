// Experiment runner: data generation, training, evaluation, theorem audits,
// and calibration reports, driven by a key=value config file.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dce/harness.hpp"

namespace {

dce::Config build_config(const std::string& config_path,
                         const std::vector<std::string>& overrides) {
  dce::Config cfg = config_path.empty() ? dce::Config{}
                                        : dce::Config::from_file(config_path);
  for (const auto& o : overrides) cfg.apply_override(o);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"doubly calibrated estimator lab"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  bool force = false;
  app.add_option("-c,--config", config_path, "key=value config file");
  app.add_option("-s,--set", overrides, "override a config key (key=value)");

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic MNAR dataset");
  gen->add_flag("--force", force, "overwrite an existing dataset");
  auto* train = app.add_subcommand("train", "train one method across seeds");
  auto* eval = app.add_subcommand("eval", "evaluate a stored checkpoint");
  auto* audit = app.add_subcommand("audit", "run the estimator/theorem audits");
  auto* calib = app.add_subcommand("calib-report", "emit reliability reports");

  CLI11_PARSE(app, argc, argv);

  try {
    const dce::Config cfg = build_config(config_path, overrides);
    if (gen->parsed()) dce::cmd_gen_data(cfg, force);
    else if (train->parsed()) dce::cmd_train(cfg);
    else if (eval->parsed()) dce::cmd_eval(cfg);
    else if (audit->parsed()) dce::cmd_audit(cfg);
    else if (calib->parsed()) dce::cmd_calib_report(cfg);
    return 0;
  } catch (const dce::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const dce::DivergenceError& e) {
    std::fprintf(stderr, "numerical divergence: %s\n", e.what());
    return 3;
  } catch (const dce::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
