// Experiment runner: a DGP spec plus a stage list, executed in dependency
// order, with a machine-readable report and CSV artifacts per stage.
#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "demandlab/causal.hpp"
#include "demandlab/dgp.hpp"
#include "demandlab/index_recovery.hpp"
#include "demandlab/nested_logit.hpp"
#include "demandlab/shock_recovery.hpp"

namespace dlab {

using Json = nlohmann::ordered_json;

enum class Stage { Simulate, RecoverIndex, RecoverShocks, NestedLogit };

std::string stage_name(Stage s);

struct Tolerances {
  double ghat_sup = 5e-2;
  double min_coverage = 0.8;
  double tree_agreement = 1e-2;
  double xi_rmse = 5e-2;
  double xi_corr = 0.98;
  double theta_tol = 1e-6;
  double alpha_tol = 1e-2;
  double plugback_tol = 1e-3;
};

struct ExperimentConfig {
  DgpSpec dgp;
  std::vector<Stage> stages;
  bool sample_mode = false;
  long n_consumers = 0;  // per grid node in sample mode
  bool expect_ccp_holds = true;
  double theta_true = -1.0;  // nested-logit truth echo for the report (from dgp)
  std::string out_dir;
  Tolerances tol;

  void validate() const;  // stage dependency rules
};

ExperimentConfig config_from_json(const Json& j);
ExperimentConfig load_config(const std::string& path);
Json config_to_json(const ExperimentConfig& config);

struct ExperimentReport {
  Json data;       // config echo + per-stage metrics
  bool pass = false;
  double wall_clock_seconds = 0.0;

  Json to_json() const;
};

// Runs the configured stages; writes report.json and tables/*.csv under
// out_dir when set. Stage-level tolerance checks decide `pass`.
ExperimentReport run_experiment(const ExperimentConfig& config);

}  // namespace dlab
