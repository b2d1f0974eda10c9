#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <variant>
#include <vector>

#include "rap/grid_function.hpp"
#include "rap/time_grid.hpp"

namespace rap {

/// cos/sin pair at a single frequency: c*cos(omega t) + s*sin(omega t).
struct TrigTerm {
  double omega = 0.0;
  Eigen::VectorXd cos_coef;
  Eigen::VectorXd sin_coef;
};

/// Catalog of slowly oscillating primitives: bounded functions whose
/// translates f(t+a)-f(t) vanish as |t| -> infinity.
enum class SlowKind {
  Arctan,           // arctan(t)
  Tanh,             // tanh(t)
  TOverOnePlusAbsT, // t/(1+|t|)
  SinSqrtOnePlusT2, // sin(sqrt(1+t^2))
};

struct SlowTerm {
  SlowKind kind = SlowKind::Arctan;
  Eigen::VectorXd scale;
};

struct ConstTerm {
  Eigen::VectorXd value;
};

/// Escape hatch for arbitrary evaluable terms. Excluded from the analytic
/// certificates the built-in catalog supports; the declared sup bound must
/// dominate the sampled values.
struct CustomTerm {
  std::function<Eigen::VectorXd(double)> eval;
  double sup_bound = 0.0;
};

using SignalTerm = std::variant<TrigTerm, SlowTerm, ConstTerm, CustomTerm>;

double slow_eval(SlowKind kind, double t);
double slow_sup(SlowKind kind);
bool slow_is_odd(SlowKind kind);

/// Vector-valued function of time assembled from closed-form terms. A
/// TrigTerm-only signal is Bohr almost periodic; SlowTerms are slowly
/// oscillating by construction; sums of the two are remotely almost
/// periodic.
class Signal {
public:
  Signal() = default;
  explicit Signal(Eigen::Index dimension) : dim_(dimension) {}

  Eigen::Index dimension() const { return dim_; }
  const std::vector<SignalTerm>& terms() const { return terms_; }

  Signal& add(TrigTerm t);
  Signal& add(SlowTerm t);
  Signal& add(ConstTerm t);
  Signal& add(CustomTerm t);

  Eigen::VectorXd eval(double t) const;
  double eval_scalar(double t) const;  // dimension-1 convenience

  /// Componentwise-derived bound on sup_t ||s(t)|| (sum of term bounds).
  double sup_bound() const;

  GridFunction sample(const TimeGrid& grid) const;

  // Convenience builders for scalar signals.
  static Signal scalar_sin(double omega = 1.0, double amplitude = 1.0);
  static Signal scalar_cos(double omega = 1.0, double amplitude = 1.0);
  static Signal constant(const Eigen::VectorXd& c);

private:
  Eigen::Index dim_ = 1;
  std::vector<SignalTerm> terms_;
  void check_dim(Eigen::Index d) const;
};

/// Finite-window surrogate for limsup_{|t|->inf} ||s(t+tau)-s(t)||: the sup
/// is taken over sampled |t| in [tail, horizon] on both half lines.
double remote_translation_defect(const Signal& s, double tau, double tail, double horizon,
                                 double grid_dt);

struct TranslationScan {
  std::vector<std::pair<double, double>> accepted;  // (tau, defect)
  double scan_step = 0.0;
  /// Largest gap between consecutive accepted tau. Undefined (unset) when
  /// fewer than two tau are accepted.
  std::optional<double> max_gap;
};

/// Scans tau over a uniform grid in [-search_range, search_range] and keeps
/// those with remote_translation_defect below epsilon. An empty accepted
/// list is a valid outcome, not an error.
TranslationScan epsilon_translation_scan(const Signal& s, double epsilon, double search_range,
                                         double tail, double horizon,
                                         double scan_step = 0.05, double grid_dt = 0.01);

/// Symmetric ergodic mean (1/2T) int_{-T}^{T} s(t) dt by composite trapezoid.
Eigen::VectorXd ergodic_mean(const Signal& s, double T, double dt = 0.01);

}  // namespace rap
