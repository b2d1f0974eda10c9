#include "rap/fundamental.hpp"

#include <cmath>
#include <limits>

#include "rap/errors.hpp"
#include "rap/ode.hpp"

namespace rap {

// ---------------------------------------------------------------------------
// Dormand-Prince 5(4)
// ---------------------------------------------------------------------------

namespace {

constexpr double kA21 = 1.0 / 5.0;
constexpr double kA31 = 3.0 / 40.0, kA32 = 9.0 / 40.0;
constexpr double kA41 = 44.0 / 45.0, kA42 = -56.0 / 15.0, kA43 = 32.0 / 9.0;
constexpr double kA51 = 19372.0 / 6561.0, kA52 = -25360.0 / 2187.0, kA53 = 64448.0 / 6561.0,
                 kA54 = -212.0 / 729.0;
constexpr double kA61 = 9017.0 / 3168.0, kA62 = -355.0 / 33.0, kA63 = 46732.0 / 5247.0,
                 kA64 = 49.0 / 176.0, kA65 = -5103.0 / 18656.0;
constexpr double kB1 = 35.0 / 384.0, kB3 = 500.0 / 1113.0, kB4 = 125.0 / 192.0,
                 kB5 = -2187.0 / 6784.0, kB6 = 11.0 / 84.0;
// Difference between the 5th and embedded 4th order weights.
constexpr double kE1 = 71.0 / 57600.0, kE3 = -71.0 / 16695.0, kE4 = 71.0 / 1920.0,
                 kE5 = -17253.0 / 339200.0, kE6 = 22.0 / 525.0, kE7 = -1.0 / 40.0;
constexpr double kC2 = 1.0 / 5.0, kC3 = 3.0 / 10.0, kC4 = 4.0 / 5.0, kC5 = 8.0 / 9.0;

struct DormandPrince {
  const MatrixRhs& rhs;
  Eigen::MatrixXd k1, k2, k3, k4, k5, k6, k7, ytmp, ynew, err;

  explicit DormandPrince(const MatrixRhs& f, const Eigen::MatrixXd& proto) : rhs(f) {
    k1 = k2 = k3 = k4 = k5 = k6 = k7 = ytmp = ynew = err = proto;
  }

  // One trial step from (t, y) with signed step h; k1 must hold rhs(t, y).
  // Returns the scaled error norm.
  double attempt(double t, const Eigen::MatrixXd& y, double h) {
    ytmp = y + h * kA21 * k1;
    rhs(t + kC2 * h, ytmp, k2);
    ytmp = y + h * (kA31 * k1 + kA32 * k2);
    rhs(t + kC3 * h, ytmp, k3);
    ytmp = y + h * (kA41 * k1 + kA42 * k2 + kA43 * k3);
    rhs(t + kC4 * h, ytmp, k4);
    ytmp = y + h * (kA51 * k1 + kA52 * k2 + kA53 * k3 + kA54 * k4);
    rhs(t + kC5 * h, ytmp, k5);
    ytmp = y + h * (kA61 * k1 + kA62 * k2 + kA63 * k3 + kA64 * k4 + kA65 * k5);
    rhs(t + h, ytmp, k6);
    ynew = y + h * (kB1 * k1 + kB3 * k3 + kB4 * k4 + kB5 * k5 + kB6 * k6);
    rhs(t + h, ynew, k7);
    err = h * (kE1 * k1 + kE3 * k3 + kE4 * k4 + kE5 * k5 + kE6 * k6 + kE7 * k7);
    return err.norm();
  }
};

}  // namespace

void integrate_matrix_path(const MatrixRhs& rhs, const Eigen::MatrixXd& m0, double t0,
                           const std::vector<double>& targets, double tol,
                           const std::function<void(std::size_t, double, const Eigen::MatrixXd&)>& on_target) {
  if (targets.empty()) return;
  const double dir = targets.front() >= t0 ? 1.0 : -1.0;

  DormandPrince dp(rhs, m0);
  Eigen::MatrixXd y = m0;
  double t = t0;
  // Controller step; the step actually taken is clamped to the next goal so
  // targets are hit exactly, without feeding the clamp back into control.
  double h_ctrl = std::max(std::abs(targets.front() - t0), 1e-4);
  h_ctrl = std::min(h_ctrl, 0.1);
  rhs(t, y, dp.k1);
  constexpr double eps = std::numeric_limits<double>::epsilon();

  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double goal = targets[i];
    while (dir * (goal - t) > 4.0 * eps * std::max(1.0, std::abs(goal))) {
      if (!std::isfinite(h_ctrl) || h_ctrl < 16.0 * eps * std::max(1.0, std::abs(t)))
        throw StiffnessError(
            "integrate_matrix_path: step size underflow at t = " + std::to_string(t), t);
      const bool clamped = std::abs(goal - t) < h_ctrl;
      const double h = dir * std::min(h_ctrl, std::abs(goal - t));
      const double scale = tol * (1.0 + y.norm());
      const double errn = dp.attempt(t, y, h) / scale;
      if (std::isfinite(errn) && errn <= 1.0) {
        t += h;
        y.swap(dp.ynew);
        dp.k1.swap(dp.k7);  // FSAL
        const double grow = errn > 1e-12 ? 0.9 * std::pow(errn, -0.2) : 5.0;
        const double next = std::abs(h) * std::min(5.0, std::max(0.2, grow));
        // A step clamped to the goal says nothing against the controller
        // step; never let it shrink the controller.
        h_ctrl = clamped ? std::max(h_ctrl, next) : next;
      } else {
        const double shrink = std::isfinite(errn) ? std::max(0.2, 0.9 * std::pow(errn, -0.2)) : 0.2;
        h_ctrl = std::abs(h) * shrink;
      }
    }
    on_target(i, goal, y);
  }
}

// ---------------------------------------------------------------------------
// Fundamental solution
// ---------------------------------------------------------------------------

FundamentalSolution integrate_fundamental(const MatrixFunction& A, const TimeGrid& grid,
                                          double tol, InterpOrder interp) {
  if (!(tol > 0.0)) throw PreconditionError("integrate_fundamental: tol must be positive");
  if (!(grid.t_start <= 0.0 && grid.t_end() >= 0.0))
    throw PreconditionError("integrate_fundamental: grid span must contain t = 0");

  const Eigen::Index d = A.dimension();
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);

  FundamentalSolution fund;
  fund.grid = grid;
  fund.interp = interp;
  fund.integrator_tol = tol;
  fund.phi.assign(grid.count, eye);
  fund.phi_inv.assign(grid.count, eye);
  fund.dphi.assign(grid.count, Eigen::MatrixXd::Zero(d, d));
  fund.dphi_inv.assign(grid.count, Eigen::MatrixXd::Zero(d, d));

  MatrixRhs forward = [&A](double t, const Eigen::MatrixXd& m, Eigen::MatrixXd& out) {
    out.noalias() = A(t) * m;
  };
  MatrixRhs adjoint = [&A](double t, const Eigen::MatrixXd& m, Eigen::MatrixXd& out) {
    out.noalias() = -m * A(t);
  };

  // Split nodes by sign relative to 0.
  std::vector<double> right, left;
  std::vector<std::size_t> right_idx, left_idx;
  for (std::size_t k = 0; k < grid.count; ++k) {
    const double t = grid.node(k);
    if (t >= 0.0) {
      right.push_back(t);
      right_idx.push_back(k);
    } else {
      left.push_back(t);
      left_idx.push_back(k);
    }
  }
  std::reverse(left.begin(), left.end());
  std::reverse(left_idx.begin(), left_idx.end());

  auto run = [&](const MatrixRhs& rhs, const std::vector<double>& tg,
                 const std::vector<std::size_t>& idx, std::vector<Eigen::MatrixXd>& dst) {
    integrate_matrix_path(rhs, eye, 0.0, tg,
                          tol, [&](std::size_t i, double, const Eigen::MatrixXd& m) { dst[idx[i]] = m; });
  };
  run(forward, right, right_idx, fund.phi);
  run(forward, left, left_idx, fund.phi);
  run(adjoint, right, right_idx, fund.phi_inv);
  run(adjoint, left, left_idx, fund.phi_inv);

  for (std::size_t k = 0; k < grid.count; ++k) {
    const Eigen::MatrixXd At = A(grid.node(k));
    fund.dphi[k].noalias() = At * fund.phi[k];
    fund.dphi_inv[k].noalias() = -fund.phi_inv[k] * At;
  }
  return fund;
}

Eigen::MatrixXd FundamentalSolution::interpolate(const std::vector<Eigen::MatrixXd>& v,
                                                 const std::vector<Eigen::MatrixXd>& dv,
                                                 double t) const {
  if (!grid.contains(t))
    throw SpanError("FundamentalSolution: t = " + std::to_string(t) + " outside grid span [" +
                    std::to_string(grid.t_start) + ", " + std::to_string(grid.t_end()) + "]");
  double x = (t - grid.t_start) / grid.dt;
  const auto last = static_cast<double>(grid.count - 1);
  if (x < 0.0) x = 0.0;
  if (x > last) x = last;
  auto i = static_cast<std::size_t>(std::floor(x));
  if (i >= grid.count - 1) i = grid.count - 2;
  const double u = x - static_cast<double>(i);
  if (u == 0.0) return v[i];
  if (interp == InterpOrder::Linear) return (1.0 - u) * v[i] + u * v[i + 1];
  // Cubic Hermite with exact node derivatives.
  const double h = grid.dt;
  const double u2 = u * u, u3 = u2 * u;
  const double h00 = 2 * u3 - 3 * u2 + 1, h10 = u3 - 2 * u2 + u;
  const double h01 = -2 * u3 + 3 * u2, h11 = u3 - u2;
  return h00 * v[i] + (h10 * h) * dv[i] + h01 * v[i + 1] + (h11 * h) * dv[i + 1];
}

Eigen::MatrixXd FundamentalSolution::eval(double t) const { return interpolate(phi, dphi, t); }

Eigen::MatrixXd FundamentalSolution::eval_inv(double t) const {
  return interpolate(phi_inv, dphi_inv, t);
}

double FundamentalSolution::inverse_defect() const {
  const Eigen::Index d = dimension();
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);
  double worst = 0.0;
  for (std::size_t k = 0; k < grid.count; ++k) {
    // Relative defect: products reach e^{|2t|} scales where absolute defect
    // is meaningless.
    const double scale = std::max(1.0, phi[k].norm() * phi_inv[k].norm());
    worst = std::max(worst, (phi[k] * phi_inv[k] - eye).norm() / scale);
  }
  return worst;
}

}  // namespace rap
