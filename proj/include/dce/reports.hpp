#pragma once

#include <string>

#include "dce/calibration.hpp"
#include "dce/estimators.hpp"
#include "dce/evaluation.hpp"
#include "dce/training.hpp"

namespace dce {

std::string audit_to_json(const EstimatorAudit& audit);
std::string metrics_to_json(const MetricReport& report);
std::string metrics_csv_header(const MetricReport& report);
std::string metrics_csv_row(const MetricReport& report);
std::string reliability_to_json(const ReliabilityReport& report);
std::string reliability_to_csv(const ReliabilityReport& report);
std::string history_to_jsonl(const std::vector<HistoryRecord>& history);

}  // namespace dce
