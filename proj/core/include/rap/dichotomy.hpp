#pragma once

#include <Eigen/Dense>
#include <string>

#include "rap/fundamental.hpp"

namespace rap {

/// Certificate of an exponential dichotomy: projection P, constant K >= 1
/// and rate alpha > 0 such that
///   ||Phi(t) P Phi^{-1}(s)||     <= K e^{-alpha (t-s)}  for t >= s,
///   ||Phi(t) (I-P) Phi^{-1}(s)|| <= K e^{-alpha (s-t)}  for s >  t.
struct DichotomyData {
  Eigen::MatrixXd P;
  double K = 1.0;
  double alpha = 0.0;
  /// Set by roughness_apply: the projection of the perturbed system shares
  /// only the null space of P and must be re-fit numerically before the
  /// kernel of the perturbed system is evaluated.
  bool projection_stale = false;

  /// ||P*P - P||, small for a true projection.
  double projection_defect() const { return (P * P - P).norm(); }
};

/// Diagnostics of the (K, alpha) envelope fit.
struct DichotomyFitReport {
  bool found = false;
  double alpha_forward = 0.0;   // decay rate of the range-of-P part
  double alpha_backward = 0.0;  // decay rate of the complementary part
  double K = 0.0;
  std::size_t samples_forward = 0;
  std::size_t samples_backward = 0;
  std::string message;
};

struct DichotomyEstimate {
  DichotomyData data;
  DichotomyFitReport report;
};

/// Fits the tightest (K, alpha) over sampled node pairs by a least-squares
/// line on log||G|| versus |t-s|, lifting the intercept to an upper envelope
/// and inflating K by 5% (a sampled sup underestimates the true sup).
/// Reports failure when no positive alpha fits.
DichotomyEstimate estimate_dichotomy(const FundamentalSolution& fund, const Eigen::MatrixXd& P,
                                     std::size_t sample_pairs);

/// Roughness transform: for a bounded perturbation of size
/// delta < alpha/(4K^2), the perturbed system keeps an exponential
/// dichotomy with constants (alpha - 2 K delta, 5K^2/2) and a projection
/// with the same null space as P. The returned data carries the guaranteed
/// constants and is marked projection_stale.
DichotomyData roughness_apply(const DichotomyData& d, double delta);

/// Numeric projection for a perturbed system: range = stable subspace of
/// `fund` (backward subspace iteration with re-orthonormalization), null
/// space = null space of P_reference, rank = rank of P_reference.
Eigen::MatrixXd refit_projection(const FundamentalSolution& fund,
                                 const Eigen::MatrixXd& P_reference);

/// Spectral projection of a constant matrix onto the span of eigenvectors
/// with negative real part. Throws when an eigenvalue sits on the imaginary
/// axis (within tol).
Eigen::MatrixXd spectral_projection(const Eigen::MatrixXd& A, double tol = 1e-9);

}  // namespace rap
