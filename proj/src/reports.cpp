#include "dce/reports.hpp"

#include <sstream>

#include <json.hpp>

namespace dce {

using nlohmann::json;

namespace {

json bound_to_json(const char* name, const BoundCheck& b) {
  return json{{"name", name}, {"value", b.lhs}, {"bound", b.bound},
              {"slack", b.bound - b.lhs}, {"holds", b.holds}};
}

}  // namespace

std::string audit_to_json(const EstimatorAudit& a) {
  json j{
      {"n_pairs", a.n_pairs},
      {"bias", a.bias},
      {"variance", a.variance},
      {"ece_propensity", a.ece_propensity},
      {"mce_propensity", a.mce_propensity},
      {"ece_imputation", a.ece_imputation},
      {"mce_imputation", a.mce_imputation},
      {"rho_max", a.rho_max},
      {"pi_max", a.pi_max},
      {"omega_max", a.omega_max},
      {"propensity_ties", a.propensity_ties},
      {"bounds",
       json::array({bound_to_json("bias<=rho_max*ece_prop", a.bias_ece_prop),
                    bound_to_json("bias<=rho_max*mce_prop", a.bias_mce_prop),
                    bound_to_json("bias<=pi_max*ece_imp", a.bias_ece_imp),
                    bound_to_json("bias<=pi_max*mce_imp", a.bias_mce_imp),
                    bound_to_json("var<=omega_max*ece_imp^2", a.var_ece_imp),
                    bound_to_json("var<=omega_max/n*mce_imp^2", a.var_mce_imp)})},
      {"all_hold", a.all_hold()},
  };
  return j.dump(2);
}

std::string metrics_to_json(const MetricReport& report) {
  json nd = json::object();
  for (const auto& [k, v] : report.ndcg) nd[std::to_string(k)] = v;
  json j{{"mse", report.mse}, {"auc", report.auc}, {"ndcg", nd}};
  return j.dump(2);
}

std::string metrics_csv_header(const MetricReport& report) {
  std::ostringstream out;
  out << "mse,auc";
  for (const auto& [k, v] : report.ndcg) out << ",ndcg@" << k;
  return out.str();
}

std::string metrics_csv_row(const MetricReport& report) {
  std::ostringstream out;
  out.precision(10);
  out << report.mse << ',' << report.auc;
  for (const auto& [k, v] : report.ndcg) out << ',' << v;
  return out.str();
}

std::string reliability_to_json(const ReliabilityReport& report) {
  json bins = json::array();
  for (const auto& b : report.bins)
    bins.push_back(json{{"lo", b.lo},
                        {"hi", b.hi},
                        {"count", b.count},
                        {"mean_score", b.mean_score},
                        {"positive_rate", b.positive_rate}});
  json j{{"m_bins", report.bins.size()},
         {"n_samples", report.n_samples},
         {"ece", report.ece},
         {"mce", report.mce},
         {"bins", bins}};
  return j.dump(2);
}

std::string reliability_to_csv(const ReliabilityReport& report) {
  std::ostringstream out;
  out.precision(10);
  out << "bin_lo,bin_hi,count,mean_score,positive_rate\n";
  for (const auto& b : report.bins)
    out << b.lo << ',' << b.hi << ',' << b.count << ',' << b.mean_score << ','
        << b.positive_rate << '\n';
  return out.str();
}

std::string history_to_jsonl(const std::vector<HistoryRecord>& history) {
  std::ostringstream out;
  for (const auto& h : history) {
    json j{{"epoch", h.epoch},       {"loss_pred", h.loss_pred},
           {"loss_imp", h.loss_imp}, {"loss_cal", h.loss_cal},
           {"val", h.val_metric},    {"tau", h.tau}};
    out << j.dump() << '\n';
  }
  return out.str();
}

}  // namespace dce
