#include "rap/dichotomy.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "rap/errors.hpp"

namespace rap {

namespace {

// Gathers (separation, log norm) samples for one side of the dichotomy.
// side = +1 collects Phi(t) P Phi^{-1}(s) over t >= s, side = -1 collects
// the complementary part over s > t.
void collect_samples(const FundamentalSolution& fund, const Eigen::MatrixXd& proj, int side,
                     std::size_t want, std::vector<std::pair<double, double>>& out) {
  const std::size_t n = fund.grid.count;
  const auto base_count = static_cast<std::size_t>(std::sqrt(static_cast<double>(want))) + 1;
  const std::size_t gap_count = base_count;
  const std::size_t max_gap_steps = n - 1;

  for (std::size_t bi = 0; bi < base_count; ++bi) {
    const std::size_t s_idx = (bi * (n - 1)) / std::max<std::size_t>(base_count - 1, 1);
    for (std::size_t gi = 0; gi < gap_count; ++gi) {
      // Geometric spread of separations: short transients and long tails
      // both constrain the envelope.
      const double frac = static_cast<double>(gi + 1) / static_cast<double>(gap_count);
      const auto steps = static_cast<std::size_t>(std::pow(static_cast<double>(max_gap_steps), frac));
      if (steps == 0) continue;
      std::size_t i_from = s_idx, i_to;
      if (side > 0) {
        if (s_idx + steps >= n) continue;
        i_to = s_idx + steps;
      } else {
        if (s_idx < steps) continue;
        i_to = s_idx - steps;
      }
      const Eigen::MatrixXd g = fund.phi[i_to] * (proj * fund.phi_inv[i_from]);
      const double norm = g.operatorNorm();
      if (!(norm > 1e-280) || !std::isfinite(norm)) continue;
      const double sep = std::abs(fund.grid.node(i_to) - fund.grid.node(i_from));
      out.emplace_back(sep, std::log(norm));
    }
  }
  // Zero-separation samples pin K from below via ||proj||.
  const double pn = proj.operatorNorm();
  if (pn > 1e-280) out.emplace_back(0.0, std::log(pn));
}

// Least-squares slope/intercept of y against x.
bool ls_line(const std::vector<std::pair<double, double>>& pts, double& slope, double& intercept) {
  const auto n = static_cast<double>(pts.size());
  if (pts.size() < 2) return false;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& [x, y] : pts) {
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double det = n * sxx - sx * sx;
  if (std::abs(det) < 1e-12) return false;
  slope = (n * sxy - sx * sy) / det;
  intercept = (sy * sxx - sx * sxy) / det;
  return true;
}

}  // namespace

DichotomyEstimate estimate_dichotomy(const FundamentalSolution& fund, const Eigen::MatrixXd& P,
                                     std::size_t sample_pairs) {
  DichotomyEstimate est;
  est.data.P = P;
  if (P.rows() != fund.dimension() || P.cols() != fund.dimension())
    throw PreconditionError("estimate_dichotomy: projection dimension mismatch");
  const double pdefect = (P * P - P).norm();
  if (pdefect > 1e-6 * std::max(1.0, P.norm()))
    throw PreconditionError("estimate_dichotomy: P*P != P (defect " + std::to_string(pdefect) + ")");

  const Eigen::Index d = fund.dimension();
  const Eigen::MatrixXd Q = Eigen::MatrixXd::Identity(d, d) - P;
  const bool has_forward = P.norm() > 1e-12;
  const bool has_backward = Q.norm() > 1e-12;

  std::vector<std::pair<double, double>> fwd, bwd;
  if (has_forward) collect_samples(fund, P, +1, sample_pairs / 2, fwd);
  if (has_backward) collect_samples(fund, Q, -1, sample_pairs / 2, bwd);
  est.report.samples_forward = fwd.size();
  est.report.samples_backward = bwd.size();

  double alpha = std::numeric_limits<double>::infinity();
  bool any_side = false;
  for (int side = 0; side < 2; ++side) {
    const auto& pts = side == 0 ? fwd : bwd;
    if (pts.empty()) continue;
    double slope = 0.0, intercept = 0.0;
    if (!ls_line(pts, slope, intercept)) continue;
    const double a = -slope;
    (side == 0 ? est.report.alpha_forward : est.report.alpha_backward) = a;
    if (!(a > 0.0)) {
      est.report.found = false;
      est.report.message = std::string("no positive decay rate on the ") +
                           (side == 0 ? "range-of-P" : "complementary") +
                           " side (fitted rate " + std::to_string(a) + ")";
      return est;
    }
    alpha = std::min(alpha, a);
    any_side = true;
  }
  if (!any_side) {
    est.report.message = "no usable samples (projection trivial on both sides?)";
    return est;
  }

  double logK = -std::numeric_limits<double>::infinity();
  for (const auto& pts : {fwd, bwd})
    for (const auto& [sep, logn] : pts) logK = std::max(logK, logn + alpha * sep);
  double K = std::exp(logK);
  K = std::max(K, 1.0) * 1.05;  // sampled sup underestimates the true sup

  est.data.K = K;
  est.data.alpha = alpha;
  est.report.found = true;
  est.report.K = K;
  est.report.message = "ok";
  return est;
}

DichotomyData roughness_apply(const DichotomyData& d, double delta) {
  if (!(delta >= 0.0)) throw PreconditionError("roughness_apply: delta must be non-negative");
  const double limit = d.alpha / (4.0 * d.K * d.K);
  if (!(delta < limit))
    throw PreconditionError("roughness_apply: delta = " + std::to_string(delta) +
                            " must be strictly below alpha/(4K^2) = " + std::to_string(limit));
  DichotomyData out;
  out.P = d.P;  // placeholder: same null space, range must be re-fit
  out.alpha = d.alpha - 2.0 * d.K * delta;
  out.K = 2.5 * d.K * d.K;
  out.projection_stale = true;
  return out;
}

Eigen::MatrixXd refit_projection(const FundamentalSolution& fund,
                                 const Eigen::MatrixXd& P_reference) {
  const Eigen::Index d = fund.dimension();
  const auto rank = static_cast<Eigen::Index>(std::llround(P_reference.trace()));
  if (rank <= 0) return Eigen::MatrixXd::Zero(d, d);
  if (rank >= d) return Eigen::MatrixXd::Identity(d, d);

  // Backward subspace iteration: transporting a generic rank-`rank` frame
  // from the right end of the grid to 0 aligns it with the forward-stable
  // subspace at 0 at rate e^{-(alpha+beta) T}.
  const std::size_t n = fund.grid.count;
  std::size_t hi = n - 1;
  // Start no further than ~40 time units out; beyond that the iteration is
  // converged and the transfer products only add roundoff.
  while (hi > 0 && fund.grid.node(hi) > 40.0) --hi;
  std::size_t zero_idx = fund.grid.nearest_index(0.0);
  if (hi <= zero_idx) hi = n - 1;

  const auto stride = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.5 / fund.grid.dt)));
  Eigen::MatrixXd basis = Eigen::MatrixXd::Identity(d, d).leftCols(rank);
  // Seed with the reference range so degenerate alignments cannot occur.
  {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(P_reference.leftCols(rank) +
                                             1e-3 * Eigen::MatrixXd::Identity(d, d).leftCols(rank));
    basis = qr.householderQ() * Eigen::MatrixXd::Identity(d, rank);
  }
  std::size_t j = hi;
  while (j > zero_idx) {
    const std::size_t jprev = j > zero_idx + stride ? j - stride : zero_idx;
    // State transfer from t_j back to t_jprev.
    Eigen::MatrixXd step = fund.phi[jprev] * (fund.phi_inv[j] * basis);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(step);
    basis = qr.householderQ() * Eigen::MatrixXd::Identity(d, rank);
    j = jprev;
  }
  // Stable frame is now expressed at the node nearest 0; pull it to exactly 0.
  if (std::abs(fund.grid.node(zero_idx)) > 1e-14) {
    Eigen::MatrixXd step = fund.eval(0.0) * (fund.phi_inv[zero_idx] * basis);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(step);
    basis = qr.householderQ() * Eigen::MatrixXd::Identity(d, rank);
  }

  // Null space of the reference projection (orthonormal columns).
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(P_reference, Eigen::ComputeFullV);
  Eigen::MatrixXd null_basis = svd.matrixV().rightCols(d - rank);

  Eigen::MatrixXd frame(d, d);
  frame << basis, null_basis;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(frame);
  if (!lu.isInvertible())
    throw Error("refit_projection: stable subspace and reference null space are not transversal");
  Eigen::MatrixXd selector = Eigen::MatrixXd::Zero(d, d);
  selector.topLeftCorner(rank, rank).setIdentity();
  return frame * selector * lu.inverse();
}

Eigen::MatrixXd spectral_projection(const Eigen::MatrixXd& A, double tol) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(A);
  if (es.info() != Eigen::Success) throw Error("spectral_projection: eigensolver failed");
  const auto d = A.rows();
  const double scale = std::max(1.0, A.operatorNorm());
  Eigen::MatrixXcd V = es.eigenvectors();
  Eigen::VectorXcd lam = es.eigenvalues();
  Eigen::MatrixXcd sel = Eigen::MatrixXcd::Zero(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    if (std::abs(lam(i).real()) <= tol * scale)
      throw PreconditionError("spectral_projection: eigenvalue " + std::to_string(lam(i).real()) +
                              (lam(i).imag() >= 0 ? "+" : "") + std::to_string(lam(i).imag()) +
                              "i on the imaginary axis, no hyperbolic splitting");
    if (lam(i).real() < 0.0) sel(i, i) = 1.0;
  }
  Eigen::MatrixXcd P = V * sel * V.inverse();
  if (P.imag().norm() > 1e-8 * std::max(1.0, P.real().norm()))
    throw Error("spectral_projection: projection has a non-real part (defective matrix?)");
  return P.real();
}

}  // namespace rap
