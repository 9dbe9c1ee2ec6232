#pragma once

#include <string>

#include "dce/config.hpp"
#include "dce/data.hpp"
#include "dce/evaluation.hpp"
#include "dce/training.hpp"

namespace dce {

// Experiment drivers behind the CLI subcommands. Each throws ConfigError,
// DataError, or DivergenceError; the CLI maps those to exit codes.
void cmd_gen_data(const Config& cfg, bool force);
void cmd_train(const Config& cfg);
void cmd_eval(const Config& cfg);
void cmd_audit(const Config& cfg);
void cmd_calib_report(const Config& cfg);

// --- pieces shared with the test suites ---

struct Dataset {
  InteractionTable table;
  bool has_ground_truth = false;
  GroundTruth gt;
  std::string dir;  // data_dir when loaded from a generated manifest
};

Dataset load_dataset(const Config& cfg);

struct TestPair {
  std::uint32_t user;
  std::uint32_t item;
  double label;
};

std::vector<TestPair> load_test_pairs(const std::string& path);

TrainConfig train_config_from(const Config& cfg, std::uint64_t seed);

MetricReport evaluate_predictions(const FactorModel& model,
                                  const std::vector<TestPair>& pairs,
                                  const std::vector<std::size_t>& ndcg_cutoffs);

TrainedStack run_training(Method method, const InteractionTable& table,
                          const Split& split, const TrainConfig& tcfg);

}  // namespace dce
