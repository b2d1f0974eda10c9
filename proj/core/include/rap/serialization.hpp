#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rap/averaging.hpp"
#include "rap/fixed_point.hpp"
#include "rap/green.hpp"
#include "rap/signal.hpp"

namespace rap {

struct BrusselatorSpec;
struct BrusselatorRun;

// All document helpers speak UTF-8 JSON text; `*_from_file` variants report
// malformed input as ParseError with line and column. Schema documents carry
// "schema_version": 1.

// --- signals -----------------------------------------------------------
std::string signal_to_json(const Signal& s);
Signal signal_from_json_text(const std::string& text);

// --- command configs ----------------------------------------------------
struct SignalScanConfig {
  Signal signal;
  double epsilon = 0.1;
  double search_range = 50.0;
  double tail = 100.0;
  double horizon = 1000.0;
  double scan_step = 0.05;
  double grid_dt = 0.01;
};

struct DichotomyConfig {
  MatrixFunction A;
  std::optional<Eigen::MatrixXd> projection;
  TimeGrid grid{-20.0, 1e-2, 4001};
  std::size_t sample_pairs = 4000;
  std::size_t verification_pairs = 2000;
  double integrator_tol = 1e-10;
};

struct SolveConfig {
  PerturbedProblem problem;
  SolverOptions options;
  std::vector<double> nu_list;  // empty: just problem.nu
};

struct DelayConfig {
  DelayProblem problem;
  SolverOptions options;
  std::vector<double> nu_list;
};

struct AverageConfig {
  ParamField field;
  double r0 = 0.5;
  std::vector<double> nu_list{0.1};
  AveragedSolveOptions options;
};

SignalScanConfig signal_scan_config_from_file(const std::string& path);
DichotomyConfig dichotomy_config_from_file(const std::string& path);
SolveConfig solve_config_from_file(const std::string& path);
DelayConfig delay_config_from_file(const std::string& path);
AverageConfig average_config_from_file(const std::string& path);
BrusselatorSpec brusselator_spec_from_file(const std::string& path);

// --- reports -------------------------------------------------------------
std::string hypothesis_to_json(const HypothesisReport& rep);
std::string scan_report_json(const TranslationScan& scan, double epsilon);
std::string dichotomy_report_json(const DichotomyEstimate& est, const DichotomyVerification& ver);
std::string solve_report_json(const SolveResult& result);

struct AveragingRunRow {
  double nu = 0.0;
  double sup_F = 0.0;
  NearIdentityMap::Diagnostics diag;
  double residual = 0.0;
  double sup_deviation = 0.0;
};
std::string averaging_report_json(const EquilibriumReport& eq,
                                  const std::vector<AveragingRunRow>& rows);
std::string brusselator_report_json(const BrusselatorRun& run);

/// Failure report written by the CLI before exiting with a nonzero status.
std::string failure_report_json(const std::string& command, const std::string& error);

// --- CSV -----------------------------------------------------------------
/// Header t,xi_1..xi_d,psi_1..psi_d (grids must match).
void write_xi_psi_csv(const GridFunction& xi, const GridFunction& psi, const std::string& path);
/// Header nu,sup_F,sup_nuU,sup_nudU,sup_G,sup_dG.
void write_reduced_trace_csv(const std::vector<AveragingRunRow>& rows, const std::string& path);

}  // namespace rap
