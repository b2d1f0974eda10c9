#include "rap/quadrature.hpp"

#include <cmath>

#include "rap/errors.hpp"

namespace rap {

double trapezoid(const std::function<double(double)>& f, double a, double b, std::size_t panels) {
  if (panels < 1) panels = 1;
  const double h = (b - a) / static_cast<double>(panels);
  double sum = 0.5 * (f(a) + f(b));
  for (std::size_t k = 1; k < panels; ++k) sum += f(a + static_cast<double>(k) * h);
  return sum * h;
}

double simpson(const std::function<double(double)>& f, double a, double b, std::size_t panels) {
  if (panels < 2) panels = 2;
  if (panels % 2 != 0) ++panels;
  const double h = (b - a) / static_cast<double>(panels);
  double sum = f(a) + f(b);
  for (std::size_t k = 1; k < panels; ++k)
    sum += f(a + static_cast<double>(k) * h) * ((k % 2 != 0) ? 4.0 : 2.0);
  return sum * h / 3.0;
}

namespace {

double adaptive_simpson_rec(const std::function<double(double)>& f, double a, double b, double fa,
                            double fm, double fb, double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m);
  const double rm = 0.5 * (m + b);
  const double flm = f(lm);
  const double frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
  return adaptive_simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         adaptive_simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

}  // namespace

double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol,
                        int max_depth) {
  const double fa = f(a);
  const double fb = f(b);
  const double fm = f(0.5 * (a + b));
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return adaptive_simpson_rec(f, a, b, fa, fm, fb, whole, tol, max_depth);
}

double symmetric_mean(const std::function<double(double)>& f, double T, double dt_request) {
  if (!(T > 0.0)) throw PreconditionError("symmetric_mean: T must be positive");
  auto half = static_cast<std::size_t>(std::ceil(T / dt_request - 1e-12));
  if (half < 1) half = 1;
  const double dt = T / static_cast<double>(half);
  // Trapezoid over [-T, T] written as a sum of symmetric pairs.
  double sum = f(0.0);
  for (std::size_t k = 1; k < half; ++k) {
    const double t = static_cast<double>(k) * dt;
    sum += f(t) + f(-t);
  }
  sum += 0.5 * (f(T) + f(-T));
  return sum * dt / (2.0 * T);
}

}  // namespace rap
