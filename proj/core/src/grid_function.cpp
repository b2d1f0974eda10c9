#include "rap/grid_function.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "rap/errors.hpp"

namespace rap {

double GridFunction::sup_norm() const {
  double m = 0.0;
  for (Eigen::Index i = 0; i < values.rows(); ++i) m = std::max(m, values.row(i).norm());
  return m;
}

double GridFunction::sup_diff(const GridFunction& other) const {
  if (other.values.rows() != values.rows() || other.values.cols() != values.cols())
    throw PreconditionError("GridFunction::sup_diff: shape mismatch");
  return (values - other.values).rowwise().norm().maxCoeff();
}

Eigen::VectorXd GridFunction::eval(double t) const {
  const auto n = static_cast<Eigen::Index>(grid.count);
  double x = (t - grid.t_start) / grid.dt;
  if (x <= 0.0) return values.row(0).transpose();
  if (x >= static_cast<double>(n - 1)) return values.row(n - 1).transpose();
  const auto i = static_cast<Eigen::Index>(std::floor(x));
  const double u = x - static_cast<double>(i);
  if (u == 0.0) return values.row(i).transpose();
  if (i == 0 || i >= n - 2) {
    return ((1.0 - u) * values.row(i) + u * values.row(i + 1)).transpose();
  }
  // Catmull-Rom through the four surrounding nodes.
  const auto p0 = values.row(i - 1);
  const auto p1 = values.row(i);
  const auto p2 = values.row(i + 1);
  const auto p3 = values.row(i + 2);
  const double u2 = u * u;
  const double u3 = u2 * u;
  return (0.5 * ((2.0 * p1) + (-p0 + p2) * u + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u2 +
                 (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u3))
      .transpose();
}

GridFunction GridFunction::restrict_to(const TimeGrid& sub) const {
  if (!grid.aligned_subgrid(sub))
    throw SpanError("GridFunction::restrict_to: target grid is not an aligned subgrid");
  const std::size_t off = grid.offset_of(sub);
  GridFunction out(sub, dimension());
  out.values = values.middleRows(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(sub.count));
  return out;
}

void GridFunction::write_csv(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw Error("cannot open for writing: " + path);
  os << "t";
  for (Eigen::Index j = 0; j < dimension(); ++j) os << ",x" << (j + 1);
  os << "\n";
  char buf[32];
  for (std::size_t k = 0; k < size(); ++k) {
    std::snprintf(buf, sizeof(buf), "%.17g", grid.node(k));
    os << buf;
    for (Eigen::Index j = 0; j < dimension(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", values(static_cast<Eigen::Index>(k), j));
      os << "," << buf;
    }
    os << "\n";
  }
}

GridFunction sample_function(const TimeGrid& grid,
                             const std::function<Eigen::VectorXd(double)>& f) {
  Eigen::VectorXd v0 = f(grid.t_start);
  GridFunction out(grid, v0.size());
  out.set(0, v0);
  for (std::size_t k = 1; k < grid.count; ++k) out.set(k, f(grid.node(k)));
  return out;
}

}  // namespace rap
