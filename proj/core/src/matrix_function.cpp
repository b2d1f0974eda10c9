#include "rap/matrix_function.hpp"

#include <memory>

#include "rap/errors.hpp"

namespace rap {

MatrixFunction MatrixFunction::constant(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw PreconditionError("MatrixFunction: matrix must be square");
  const double bound = m.operatorNorm();
  return MatrixFunction(m.rows(), [m](double) { return m; }, bound);
}

MatrixFunction MatrixFunction::from_terms(const Eigen::MatrixXd& base,
                                          std::vector<std::pair<Signal, Eigen::MatrixXd>> terms) {
  if (base.rows() != base.cols()) throw PreconditionError("MatrixFunction: matrix must be square");
  double bound = base.operatorNorm();
  for (const auto& [sig, mat] : terms) {
    if (sig.dimension() != 1)
      throw PreconditionError("MatrixFunction::from_terms: coefficient signals must be scalar");
    if (mat.rows() != base.rows() || mat.cols() != base.cols())
      throw PreconditionError("MatrixFunction::from_terms: term shape mismatch");
    bound += sig.sup_bound() * mat.operatorNorm();
  }
  auto data = std::make_shared<std::vector<std::pair<Signal, Eigen::MatrixXd>>>(std::move(terms));
  auto eval = [base, data](double t) {
    Eigen::MatrixXd m = base;
    for (const auto& [sig, mat] : *data) m += sig.eval_scalar(t) * mat;
    return m;
  };
  return MatrixFunction(base.rows(), eval, bound);
}

MatrixFunction MatrixFunction::operator+(const MatrixFunction& other) const {
  if (other.dim_ != dim_) throw PreconditionError("MatrixFunction: dimension mismatch in sum");
  auto lhs = eval_;
  auto rhs = other.eval_;
  return MatrixFunction(dim_, [lhs, rhs](double t) { return lhs(t) + rhs(t); },
                        sup_bound_ + other.sup_bound_);
}

}  // namespace rap
