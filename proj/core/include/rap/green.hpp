#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>

#include "rap/dichotomy.hpp"
#include "rap/fundamental.hpp"
#include "rap/grid_function.hpp"

namespace rap {

/// Piecewise kernel G(t,s) = Phi(t) P Phi^{-1}(s) for t >= s and
/// -Phi(t) (I-P) Phi^{-1}(s) for t < s. Its convolution against a bounded
/// forcing yields the unique bounded solution of the inhomogeneous linear
/// system. Immutable and cheap to copy.
class GreenKernel {
public:
  GreenKernel() = default;
  GreenKernel(std::shared_ptr<const FundamentalSolution> fund, DichotomyData dichotomy);

  const FundamentalSolution& fundamental() const { return *fund_; }
  std::shared_ptr<const FundamentalSolution> fundamental_ptr() const { return fund_; }
  const DichotomyData& dichotomy() const { return dich_; }
  Eigen::Index dimension() const { return fund_->dimension(); }

  /// G(t,s); both arguments must lie in the fundamental grid span.
  Eigen::MatrixXd eval(double t, double s) const;

private:
  std::shared_ptr<const FundamentalSolution> fund_;
  DichotomyData dich_;
};

struct DichotomyVerification {
  double worst_ratio = 0.0;
  double worst_t = 0.0;
  double worst_s = 0.0;
  std::size_t samples = 0;
  bool pass() const { return worst_ratio <= 1.0; }
};

/// max over sampled (t,s) of ||G(t,s)|| / (K e^{-alpha |t-s|}).
DichotomyVerification verify_dichotomy(const GreenKernel& kernel, std::size_t verification_pairs);

/// CSV rows t,s,norm_G,bound over the verification sample set.
void export_kernel_diagnostics(const GreenKernel& kernel, std::size_t pairs,
                               const std::string& path);

/// Convolution y(t) = int G(t,s) h(s) ds by composite trapezoid over the
/// truncation window |t-s| <= L, with L chosen from the decay certificate so
/// the discarded tail is below tail_tol:
///   L = ceil((1/alpha) ln(2 K ||h||_inf / (alpha tail_tol))).
/// Output nodes must lie on the lattice of h's grid. In strict mode the
/// window [t-L, t+L] must fit inside h's span for every output node; with
/// clamp_window the window is cut at the span ends (edge error decays like
/// e^{-alpha d} with the distance d into the interior).
GridFunction green_convolve(const GreenKernel& kernel, const GridFunction& h, double tail_tol,
                            const TimeGrid& out_grid, bool clamp_window = false);

/// Convenience overload: output on the largest centered subgrid of h.grid
/// whose windows fit (errors if none does).
GridFunction green_convolve(const GreenKernel& kernel, const GridFunction& h, double tail_tol);

/// Trapezoid value of int ||G(t,s)|| ds over the truncation window; the
/// operational surrogate for the integrable bi-RAP kernel bound 2K/alpha.
double green_l1_norm(const GreenKernel& kernel, double t, double tail_tol, double h_sup = 1.0);

/// Truncation half-width used by green_convolve for a forcing of sup norm
/// h_sup.
double green_window(const DichotomyData& d, double h_sup, double tail_tol);

}  // namespace rap
