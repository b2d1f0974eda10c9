#pragma once

#include <optional>
#include <string>

#include "rap/fixed_point.hpp"

namespace rap {

/// Planar Brusselator with time-dependent coefficients,
///   u' = a(t) - (b(t) + 1) u + u^2 v,
///   v' = b(t) u - u^2 v,
/// recast about the reference point (a_mean, b_mean/a_mean) of the mean
/// coefficients as x' = A x + f(t, x) + g_nu(t, x).
struct BrusselatorSpec {
  Signal a;  // scalar, positive on the working grid
  Signal b;  // scalar, positive on the working grid
  double nu = 0.02;
  std::optional<ParamMap> g;  // perturbation; a default almost periodic mix when absent
  double r = 0.3;
  TimeGrid core{-40.0, 2e-2, 4001};
  double tol = 1e-7;
  double tail_tol = 1e-8;
  double mean_T = 2000.0;  // ergodic-mean horizon for the reference point
};

struct BrusselatorBuild {
  PerturbedProblem problem;  // shifted coordinates x = (u, v) - reference
  Eigen::Vector2d reference;
  Eigen::Matrix2d A;  // constant linearization at the reference
  Eigen::VectorXcd eigenvalues;
  double a_mean = 0.0;
  double b_mean = 0.0;
};

/// Assembles the shifted perturbed problem. Fails when sampled coefficients
/// are not positive or the reference linearization is not hyperbolic.
BrusselatorBuild build_brusselator(const BrusselatorSpec& spec);

struct BrusselatorRun {
  BrusselatorBuild build;
  SolveResult solve;        // in shifted coordinates
  GridFunction trajectory;  // (u, v) = reference + psi on the core grid
  bool components_positive = true;
  std::string csv_path;
  std::string report_path;
  std::string svg_path;  // empty unless requested
};

/// End-to-end demo: solve, export brusselator.csv (t,u,v), the JSON report,
/// and optionally an SVG chart.
BrusselatorRun run_demo(const BrusselatorSpec& spec, const std::string& out_dir, bool svg);

}  // namespace rap
