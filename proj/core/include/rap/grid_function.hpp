#pragma once

#include <Eigen/Dense>
#include <string>

#include "rap/time_grid.hpp"

namespace rap {

/// Sampled vector-valued function of time: one row per grid node.
struct GridFunction {
  TimeGrid grid;
  Eigen::MatrixXd values;  // count x dimension

  GridFunction() = default;
  GridFunction(const TimeGrid& g, Eigen::Index dimension)
      : grid(g), values(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(g.count), dimension)) {}

  Eigen::Index dimension() const { return values.cols(); }
  std::size_t size() const { return grid.count; }

  Eigen::VectorXd at(std::size_t k) const { return values.row(static_cast<Eigen::Index>(k)).transpose(); }
  void set(std::size_t k, const Eigen::VectorXd& v) { values.row(static_cast<Eigen::Index>(k)) = v.transpose(); }

  /// sup over nodes of the euclidean norm of the value.
  double sup_norm() const;

  /// sup over nodes of ||this - other|| (grids must match).
  double sup_diff(const GridFunction& other) const;

  /// Value at arbitrary t inside the span, cubic Catmull-Rom in time
  /// (linear on the first/last panel). Arguments outside the span are
  /// clamped to the end values.
  Eigen::VectorXd eval(double t) const;

  /// Restriction to an aligned subgrid.
  GridFunction restrict_to(const TimeGrid& sub) const;

  /// CSV export with header t,x1,...,xd (RFC 4180 line endings are plain
  /// newlines; values printed with 17 significant digits).
  void write_csv(const std::string& path) const;
};

/// Samples a callable time -> vector on a grid.
GridFunction sample_function(const TimeGrid& grid,
                             const std::function<Eigen::VectorXd(double)>& f);

}  // namespace rap
