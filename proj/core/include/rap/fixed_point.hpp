#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rap/green.hpp"
#include "rap/signal.hpp"

namespace rap {

/// Nonlinear term f(t, x) with its state derivatives. The hessian evaluator
/// returns one d x d matrix per output component, ∂²f_k/∂x_i∂x_j; when it is
/// absent, moduli estimation falls back to finite differences of the
/// jacobian.
struct StateMap {
  Eigen::Index dim = 1;
  std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)> value;
  std::function<Eigen::MatrixXd(double, const Eigen::VectorXd&)> jacobian;
  std::function<std::vector<Eigen::MatrixXd>(double, const Eigen::VectorXd&)> hessian;

  static StateMap zero(Eigen::Index d);
  static StateMap forcing(const Signal& s);                      // f(t,x) = s(t)
  static StateMap linear(const Eigen::MatrixXd& B);              // f(t,x) = B x
  static StateMap scalar_quadratic(double c);                    // f(t,x) = c x^2 (dim 1)
  /// f(t,x) - A(t) x, the nonlinear remainder of a linear split.
  static StateMap minus_linear(const StateMap& f, const MatrixFunction& A);
  StateMap operator+(const StateMap& other) const;
};

/// Second derivative of f, analytic when available, else centered finite
/// differences of the jacobian.
std::vector<Eigen::MatrixXd> state_hessian(const StateMap& f, double t, const Eigen::VectorXd& x);

/// Parametrized perturbation g(t, x, nu) with g(.,.,0) = 0.
struct ParamMap {
  std::function<Eigen::VectorXd(double, const Eigen::VectorXd&, double)> value;

  static ParamMap zero(Eigen::Index d);
  static ParamMap nu_signal(const Signal& s);                    // g = nu * s(t)
  static ParamMap nu_linear(const Eigen::MatrixXd& B);           // g = nu * B x
};

/// Deterministic sampling configuration for Lipschitz-modulus estimation.
struct ModuliOptions {
  std::uint64_t seed = 12345;
  std::size_t probe_pairs = 1000;  // state pairs per radius
  std::size_t time_samples = 33;   // grid nodes sampled per modulus
};

struct PerturbedProblem {
  MatrixFunction A;
  std::optional<DichotomyData> dichotomy;     // supplied, else fit from A
  std::optional<Eigen::MatrixXd> projection;  // hint for the fit
  StateMap f;
  ParamMap g;
  double nu = 0.0;
  double r = 1.0;
};

/// Quantified hypothesis report. contraction_q follows
/// 5 K^2 L* / (alpha - 2 K delta) whenever delta < alpha/(4K^2); otherwise it
/// is +inf and h3 is marked failed. nu0 is the problem's nu when every check
/// passed (a witnessed admissible parameter), 0 otherwise; delay solvers
/// overwrite it with their explicit formula.
struct HypothesisReport {
  double K = 0.0, alpha = 0.0;
  double M_r = 0.0;
  double delta = 0.0;
  double N1 = 0.0, N2 = 0.0;
  double M1 = 0.0;
  double g_sup = 0.0;
  double g0_defect = 0.0;
  double Lstar = 0.0;
  double contraction_q = std::numeric_limits<double>::infinity();
  double nu0 = 0.0;
  double r = 0.0, r_tilde = 0.0, nu = 0.0;

  bool h1_dichotomy = false;   // envelope fit found (or certificate supplied)
  bool h2_lipschitz = false;   // M(r) < alpha / (2K)
  bool h3_delta = false;       // delta < alpha / (4K^2)
  bool h4_g_vanishes = false;  // g(.,.,0) = 0 on sampled probes
  bool ball_condition = false; // r^2 N1 + ||g||_rt < (alpha - 2K delta) r / (5K^2)
  bool q_contractive = false;  // contraction_q < 1

  bool all_pass() const {
    return h1_dichotomy && h2_lipschitz && h3_delta && h4_g_vanishes && ball_condition &&
           q_contractive;
  }
  /// One line per failed inequality, both sides echoed.
  std::string summary() const;
};

struct SolverOptions {
  TimeGrid core{-20.0, 1e-2, 4001};
  double tail_tol = 1e-8;
  double tol = 1e-8;
  double residual_factor = 10.0;
  std::size_t max_iterations = 200;
  double integrator_tol = 1e-10;
  std::size_t dichotomy_pairs = 4000;
  /// Hard-fail (HypothesisError) when a quantified hypothesis fails; when
  /// false the solve proceeds on numerically fitted constants and the report
  /// records the failures.
  bool enforce_hypotheses = false;
  ModuliOptions moduli;
  /// Initial Picard iterate for the perturbed stage; zero when absent.
  std::function<Eigen::VectorXd(double)> initial_iterate;
};

struct SemilinearResult {
  GridFunction xi;       // on the core grid
  GridFunction xi_work;  // on the padded working grid
  std::vector<double> iterate_norms;
  double residual_sup = 0.0;
  DichotomyData dichotomy;
  std::shared_ptr<const FundamentalSolution> fundamental;
};

/// Unique bounded solution of x' = A(t)x + f(t,x) by Picard iteration on the
/// Green kernel, phi -> int G(t,s) f(s, phi(s)) ds.
SemilinearResult solve_semilinear(const MatrixFunction& A,
                                  const std::optional<DichotomyData>& dichotomy, const StateMap& f,
                                  double r, const SolverOptions& opts);

/// Second-order Taylor remainder of f about xi(t):
/// f(t, u + xi(t)) - f(t, xi(t)) - (df/dx)(t, xi(t)) u.
Eigen::VectorXd taylor_remainder(const StateMap& f,
                                 const std::function<Eigen::VectorXd(double)>& xi, double t,
                                 const Eigen::VectorXd& u);

HypothesisReport check_hypotheses(const PerturbedProblem& problem, const DichotomyData& dichotomy,
                                  const GridFunction& xi, const SolverOptions& opts);

struct SolveResult {
  GridFunction xi;
  GridFunction psi;
  std::vector<double> iterate_norms;
  double residual_sup = 0.0;
  HypothesisReport hypothesis;
  DichotomyData base_dichotomy;
  DichotomyData perturbed_fitted;      // numeric re-fit of the variational kernel
  DichotomyData perturbed_guaranteed;  // roughness-lemma constants (valid iff roughness_valid)
  bool roughness_valid = false;
  std::size_t iterations = 0;
};

SolveResult solve_perturbed(const PerturbedProblem& problem, const SolverOptions& opts);

struct NuLimitBound {
  double bound = 0.0;
  double observed = 0.0;
};

/// Theorem tail bound: observed ||psi - xi||_inf against
/// (1 - 2 K M(r)/alpha)^{-1} (2K/alpha) ||g_nu||_rt.
NuLimitBound nu_limit_bound(const HypothesisReport& report, const GridFunction& xi,
                            const GridFunction& psi);

struct FamilyProblem {
  PerturbedProblem base;  // base.A plays the role of the nu -> 0 limit system
  std::function<Eigen::MatrixXd(double, double)> A_family;  // A(t, nu)
};

/// Perturbed solve for x' = A_nu(t) x + f + g_nu: the forcing gains the term
/// [A_nu(t) - A_0(t)] (u + xi(t)) and the Lipschitz budget gains
/// ||A_nu - A_0||_inf. Precondition (sampled): sup_t ||A_nu - A_0|| shrinks
/// along nu, nu/2, nu/4.
SolveResult solve_family(const FamilyProblem& problem, const SolverOptions& opts);

struct DelayProblem {
  MatrixFunction A;
  std::optional<DichotomyData> dichotomy;
  std::optional<Eigen::MatrixXd> projection;
  Signal h;  // forcing of the generator system x' = A x + h
  std::function<Eigen::VectorXd(double, const Eigen::VectorXd&, const Eigen::VectorXd&)> g;
  double lag = 1.0;
  double nu = 0.0;
  double r = 1.0;
  std::optional<double> g_sup;  // analytic override of sup||g||
  std::optional<double> M1;     // analytic override of the joint Lipschitz modulus
};

struct DelayGate {
  double nu0 = 0.0;
  double ball_branch = 0.0;         // r alpha / (2 K ||g||)
  double contraction_branch = 0.0;  // alpha / (4 K M1)
  int binding = 0;                  // 0: ball branch, 1: contraction branch
  double g_sup = 0.0;
  double M1 = 0.0;
  double K = 0.0, alpha = 0.0;
};

/// Admissible-parameter threshold nu0 = min{ r alpha / (2K ||g||),
/// alpha / (4 K M1) } with sampled moduli unless overridden.
DelayGate delay_nu_limit(const DelayProblem& problem, const SolverOptions& opts);

/// Delayed perturbation of a forced linear generator:
/// y' = A(t) y + h(t) + nu g(t, y(t), y(t - lag)). Rejects nu > nu0 naming
/// the binding branch.
SolveResult solve_delay(const DelayProblem& problem, const SolverOptions& opts);

struct NonlinearDelayProblem {
  StateMap f;             // full right-hand side of the generator z' = f(t, z)
  MatrixFunction A_split; // linear split used to compute xi; must carry a dichotomy
  std::optional<DichotomyData> split_dichotomy;
  std::optional<DichotomyData> variational_dichotomy;  // supplied certificate, else re-fit
  std::function<Eigen::VectorXd(double, const Eigen::VectorXd&, const Eigen::VectorXd&)> g;
  double lag = 1.0;
  double nu = 0.0;
  double r = 1.0;
  std::optional<double> g_sup;
  std::optional<double> M1;
};

/// Fully nonlinear delayed perturbation: reduction u = y - xi against the
/// variational kernel of z' = (df/dx)(t, xi(t)) z, with the Taylor remainder
/// folded into the Picard forcing.
SolveResult solve_nonlinear_delay(const NonlinearDelayProblem& problem, const SolverOptions& opts);

/// sup over interior nodes of ||centered-difference y' - rhs(t, y)||.
double residual_sup_norm(const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)>& rhs,
                         const GridFunction& y);

/// Delay variant; the delayed value is interpolated from the same grid.
double residual_sup_norm_delayed(
    const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&, const Eigen::VectorXd&)>& rhs,
    const GridFunction& y, double lag);

}  // namespace rap
