#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "rap/dichotomy.hpp"
#include "rap/grid_function.hpp"
#include "rap/time_grid.hpp"

namespace rap {

/// Parametrized field f(t, x, nu) on a compact ball W = B[0, W_radius],
/// driving the small-parameter system x' = nu f(t, x, nu).
struct ParamField {
  Eigen::Index dim = 1;
  std::function<Eigen::VectorXd(double, const Eigen::VectorXd&, double)> value;
  std::function<Eigen::MatrixXd(double, const Eigen::VectorXd&, double)> jacobian;
  double sup_bound = 1.0;  // declared sup on W x [0, nu0]
  double W_radius = 1.0;
  double nu_ref = 0.0;  // parameter slot used by the standalone time average
};

/// Sampled check of the vanishing contract f(.,.,nu) -> 0 and
/// df/dx(.,.,nu) -> 0 along a decreasing nu grid.
struct VanishingReport {
  std::vector<double> nus;
  std::vector<double> f_sup;
  std::vector<double> df_sup;
  bool vanishing = false;  // both sequences shrink along the grid
};
VanishingReport check_vanishing(const ParamField& field, const std::vector<double>& nus,
                                double t_span = 100.0);

/// Symmetric time average (1/2T) int_{-T}^{T} f(t, x, nu_ref) dt.
Eigen::VectorXd time_average(const ParamField& field, const Eigen::VectorXd& x, double T,
                             double dt = 0.01);

/// Averaged autonomous field f0 with jacobian, both by symmetric means at a
/// fixed parameter slot.
struct AveragedField {
  Eigen::Index dim = 1;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> value;
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> jacobian;
};
AveragedField averaged_field(const ParamField& field, double nu_slot, double T, double dt = 0.01);

/// Exponential smoothing F(t,x,nu) = int_{-inf}^t e^{-nu(t-s)} H(s,x) ds,
/// truncated at window (1/nu) ln(||H||_sup / (nu tail_tol)) and integrated by
/// composite Simpson with step du.
Eigen::VectorXd exp_smooth(const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)>& H,
                           const Eigen::VectorXd& x, double nu, double t, double tail_tol,
                           double H_sup = 1.0, double du = 1e-3);

/// Smoothing defect: h(u,x) = sup over sampled translates t of
/// ||(1/u) int_0^u H(t-s, x) ds||, then xi(x,nu) = nu^2 int_0^inf h u e^{-nu u} du.
/// The sup runs over the translation variable (the inner integration bound
/// carries the same symbol in the defining display; the translate reading is
/// the one the smoothing estimates use).
double smoothing_defect_xi(const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)>& H,
                           const Eigen::VectorXd& x, double nu, double t_window = 200.0,
                           double dt = 0.01);

/// Compactly supported polynomial bump d_a (1 - |x|^2/a^2)^{2q} on |x| <= a,
/// normalized to unit integral.
struct Mollifier {
  double a = 1.0;
  int q = 1;
  int dim = 1;
  double d_a = 0.0;

  double operator()(const Eigen::VectorXd& x) const;
  Eigen::VectorXd grad(const Eigen::VectorXd& x) const;
};

/// d_a by adaptive quadrature of the radial reduction of
/// int_{|x|<=a} (1 - |x|^2/a^2)^{2q} dx; dimensions 1..3.
Mollifier mollifier_build(double a, int q, int dim);

/// Independent check value: the full-ball integral of Delta_a by adaptive
/// tensor quadrature (used to verify normalization).
double mollifier_mass(const Mollifier& m, double tol = 1e-10);

struct AveragingOptions {
  double tail_tol = 1e-8;     // smoothing truncation
  double table_dt = 0.01;     // t resolution of the smoothed-field table
  double table_t_lo = -300.0;  // time span covered by the table
  double table_t_hi = 300.0;
  std::size_t x_probes = 65;  // per-axis probes of the table
  std::size_t ball_nodes = 64;  // mollification nodes per axis
  double T_average = 2000.0;
  double dt_average = 0.01;
};

/// Dense table of Hbar(t,x,nu) = int_{-inf}^t e^{-nu(t-s)} H(s,x) ds over a
/// time grid and a tensor x grid, filled by the stable exponential-window
/// recurrence and interpolated cubically.
class SmoothedField {
public:
  SmoothedField(std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)> H, Eigen::Index dim,
                double nu, const TimeGrid& tgrid, const Eigen::VectorXd& x_lo,
                const Eigen::VectorXd& x_hi, std::size_t probes_per_axis, double tail_tol,
                double H_sup);

  Eigen::VectorXd eval(double t, const Eigen::VectorXd& x) const;
  /// d/dt via the defining identity dF/dt = H - nu F (no differencing).
  Eigen::VectorXd ddt(double t, const Eigen::VectorXd& x) const;

  double nu() const { return nu_; }
  const TimeGrid& tgrid() const { return tgrid_; }

private:
  std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)> H_;
  Eigen::Index dim_;
  double nu_;
  TimeGrid tgrid_;
  Eigen::VectorXd x_lo_, hx_;
  std::size_t nx_ = 1;      // probes per axis
  std::size_t xcells_ = 1;  // nx^dim
  std::vector<double> data_;  // [t][x-multi-index][component]

  double read(std::size_t ti, std::size_t cell, Eigen::Index comp) const {
    return data_[(ti * xcells_ + cell) * static_cast<std::size_t>(dim_) + static_cast<std::size_t>(comp)];
  }
  Eigen::VectorXd read_cell_interp_x(std::size_t ti, const Eigen::VectorXd& x) const;
};

/// Near-identity change of variables x = y + nu U(t, y, nu) with
/// U(t,x) = int Delta_a(x - y) Hbar(t, y, nu) dy over the mollification ball.
class NearIdentityMap {
public:
  struct Diagnostics {
    double sup_nu_U = 0.0;
    double sup_nu_dU = 0.0;
    double sup_G = 0.0;
    double sup_dG = 0.0;
  };

  Eigen::VectorXd U(double t, const Eigen::VectorXd& x) const;
  Eigen::MatrixXd dU_dx(double t, const Eigen::VectorXd& x) const;
  Eigen::VectorXd dU_dt(double t, const Eigen::VectorXd& x) const;
  /// G = dU/dt - f_nu + f0 = dU/dt - H.
  Eigen::VectorXd G(double t, const Eigen::VectorXd& x) const;
  /// U, dU/dx and dU/dt in one sweep over the mollification ball.
  void eval_all(double t, const Eigen::VectorXd& x, Eigen::VectorXd& u, Eigen::MatrixXd& du_dx,
                Eigen::VectorXd& du_dt) const;

  double nu() const { return nu_; }
  double ball_radius() const { return mollifier_.a; }
  const Diagnostics& diagnostics() const { return diag_; }

private:
  friend NearIdentityMap build_change_of_variable(const ParamField&, double, double,
                                                  const std::function<double(double)>&, int,
                                                  const AveragingOptions&);
  double nu_ = 0.0;
  Mollifier mollifier_;
  std::shared_ptr<const SmoothedField> smoothed_;
  std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)> H_;
  std::vector<Eigen::VectorXd> offsets_;  // ball quadrature nodes
  std::vector<double> weights_;           // normalized so constants map to themselves
  std::vector<Eigen::VectorXd> grad_weights_;
  Diagnostics diag_;
};

/// Builds U for the field at parameter nu on the ball B[0, r], with
/// mollification radius a_schedule(nu) (default sqrt(nu)) and exponent q.
/// Fails when the mollification ball leaves the field's domain W.
NearIdentityMap build_change_of_variable(
    const ParamField& field, double nu, double r,
    const std::function<double(double)>& a_schedule = nullptr, int q = 2,
    const AveragingOptions& opts = {});

/// Reduced right-hand side after the change of variables:
/// R(t,y) = (I + nu dU/dy)^{-1} [ f_nu(t, y + nu U) - dU/dt ], the per-nu-unit
/// field of y' = nu R(t,y); F_nu = R - f0 vanishes with nu.
class ReducedField {
public:
  ReducedField(const ParamField& field, double nu, std::shared_ptr<const NearIdentityMap> map,
               AveragedField f0);
  Eigen::VectorXd eval(double t, const Eigen::VectorXd& y) const;
  Eigen::VectorXd F(double t, const Eigen::VectorXd& y) const;
  double nu() const { return nu_; }

private:
  ParamField field_;
  double nu_;
  std::shared_ptr<const NearIdentityMap> map_;
  AveragedField f0_;
};

ReducedField reduce_averaged(const ParamField& field, double nu,
                             std::shared_ptr<const NearIdentityMap> map, AveragedField f0);

struct EquilibriumReport {
  Eigen::VectorXd x0;
  Eigen::VectorXcd eigenvalues;
  double min_abs_re = 0.0;
  bool hyperbolic = false;
  std::size_t newton_iterations = 0;
};

/// Newton iteration to ||f0(x0)|| <= 1e-10 plus the spectrum of the jacobian
/// at the root.
EquilibriumReport find_equilibrium(const AveragedField& f0, const Eigen::VectorXd& x_init,
                                   std::size_t max_iterations = 50);

struct AveragedSolveOptions {
  TimeGrid core{-25.0, 5e-3, 10001};  // original-time output grid
  double tol = 1e-8;
  double z_tail_tol = 1e-6;  // kernel truncation in rescaled time
  std::size_t max_iterations = 60;
  int mollifier_q = 2;
  std::function<double(double)> a_schedule;  // default sqrt(nu)
  Eigen::VectorXd x_init;                    // Newton start (zero when empty)
  AveragingOptions averaging;
  std::size_t dichotomy_pairs = 2000;
};

struct AveragedSolveResult {
  GridFunction phi;  // solution of x' = nu f_nu(t, x) in original time
  EquilibriumReport equilibrium;
  NearIdentityMap::Diagnostics diagnostics;
  std::vector<double> iterate_norms;
  double residual_sup = 0.0;
  double sup_deviation = 0.0;  // sup_t |phi - x0|
  double sup_F = 0.0;          // sampled sup of the reduced defect F_nu = R - f0
  double nu = 0.0;
};

/// Full averaging pipeline: averaged field, hyperbolic equilibrium,
/// change of variables, constant-coefficient Green kernel from the spectral
/// splitting of df0/dx(x0), Picard solve in rescaled time s = nu t, and the
/// unwinding of both changes of variables.
AveragedSolveResult solve_averaged(const ParamField& field, double nu, double r0,
                                   const AveragedSolveOptions& opts);

}  // namespace rap
