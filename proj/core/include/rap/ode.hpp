#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

namespace rap {

/// Right-hand side of a matrix ODE M' = rhs(t, M); writes into `out`.
using MatrixRhs = std::function<void(double, const Eigen::MatrixXd&, Eigen::MatrixXd&)>;

/// Adaptive Dormand-Prince 5(4) integration of a matrix ODE from t0 through
/// an ordered list of target times (strictly monotone, increasing or
/// decreasing away from t0). Invokes on_target(index, t, M) at every target.
/// Local error per step is controlled to atol = rtol = tol. Throws
/// StiffnessError when step control underflows.
void integrate_matrix_path(const MatrixRhs& rhs, const Eigen::MatrixXd& m0, double t0,
                           const std::vector<double>& targets, double tol,
                           const std::function<void(std::size_t, double, const Eigen::MatrixXd&)>& on_target);

}  // namespace rap
