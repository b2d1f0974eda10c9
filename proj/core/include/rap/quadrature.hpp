#pragma once

#include <cstddef>
#include <functional>

namespace rap {

/// Composite trapezoid of f over [a, b] with n panels (n >= 1).
double trapezoid(const std::function<double(double)>& f, double a, double b, std::size_t panels);

/// Composite Simpson of f over [a, b]; panel count is rounded up to even.
double simpson(const std::function<double(double)>& f, double a, double b, std::size_t panels);

/// Adaptive Simpson to absolute tolerance tol.
double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol,
                        int max_depth = 40);

/// Symmetric trapezoid mean (1/2T) * int_{-T}^{T} f. Summation pairs f(t)
/// with f(-t) so odd integrands cancel to rounding error.
double symmetric_mean(const std::function<double(double)>& f, double T, double dt_request);

}  // namespace rap
