#pragma once

#include <Eigen/Dense>
#include <vector>

#include "rap/matrix_function.hpp"
#include "rap/time_grid.hpp"

namespace rap {

enum class InterpOrder { Linear, Cubic };

/// Dense-output fundamental matrix Phi(t) with Phi(0) = I, together with its
/// inverse. The inverse comes from integrating the adjoint system
/// Psi' = -Psi A rather than from per-node inversion, which would lose
/// precision at e^{|alpha t|} scales.
struct FundamentalSolution {
  TimeGrid grid;
  std::vector<Eigen::MatrixXd> phi;       // per node
  std::vector<Eigen::MatrixXd> phi_inv;   // per node
  std::vector<Eigen::MatrixXd> dphi;      // A(t_k) phi_k, for Hermite dense output
  std::vector<Eigen::MatrixXd> dphi_inv;  // -phi_inv_k A(t_k)
  InterpOrder interp = InterpOrder::Cubic;
  double integrator_tol = 1e-10;

  Eigen::Index dimension() const { return phi.empty() ? 0 : phi.front().rows(); }

  Eigen::MatrixXd eval(double t) const;
  Eigen::MatrixXd eval_inv(double t) const;

  /// max over nodes of ||Phi(t) PhiInv(t) - I||; should stay within a small
  /// multiple of the integrator tolerance.
  double inverse_defect() const;

private:
  Eigen::MatrixXd interpolate(const std::vector<Eigen::MatrixXd>& v,
                              const std::vector<Eigen::MatrixXd>& dv, double t) const;
};

/// Integrates Phi' = A(t) Phi (and the adjoint for the inverse) from 0 in
/// both directions, landing exactly on every grid node. The grid span must
/// contain 0.
FundamentalSolution integrate_fundamental(const MatrixFunction& A, const TimeGrid& grid,
                                          double tol, InterpOrder interp = InterpOrder::Cubic);

}  // namespace rap
