#pragma once

#include <Eigen/Dense>
#include <functional>
#include <utility>
#include <vector>

#include "rap/signal.hpp"

namespace rap {

/// Time-dependent square matrix A(t) with a declared bound on its operator
/// norm. Holds the coefficient matrix of linear systems x' = A(t)x and the
/// bounded perturbations of the roughness lemma.
class MatrixFunction {
public:
  MatrixFunction() = default;
  MatrixFunction(Eigen::Index dim, std::function<Eigen::MatrixXd(double)> eval, double sup_bound)
      : dim_(dim), eval_(std::move(eval)), sup_bound_(sup_bound) {}

  static MatrixFunction constant(const Eigen::MatrixXd& m);

  /// base + sum_k s_k(t) * M_k with scalar signals s_k.
  static MatrixFunction from_terms(const Eigen::MatrixXd& base,
                                   std::vector<std::pair<Signal, Eigen::MatrixXd>> terms);

  Eigen::Index dimension() const { return dim_; }
  double sup_bound() const { return sup_bound_; }
  Eigen::MatrixXd operator()(double t) const { return eval_(t); }

  /// Pointwise sum (dimensions must agree).
  MatrixFunction operator+(const MatrixFunction& other) const;

private:
  Eigen::Index dim_ = 0;
  std::function<Eigen::MatrixXd(double)> eval_;
  double sup_bound_ = 0.0;
};

}  // namespace rap
