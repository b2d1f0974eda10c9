#include "rap/green.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "rap/errors.hpp"
#include "rap/parallel.hpp"

namespace rap {

GreenKernel::GreenKernel(std::shared_ptr<const FundamentalSolution> fund, DichotomyData dichotomy)
    : fund_(std::move(fund)), dich_(std::move(dichotomy)) {
  if (!fund_) throw PreconditionError("GreenKernel: null fundamental solution");
  if (dich_.P.rows() != fund_->dimension())
    throw PreconditionError("GreenKernel: projection dimension mismatch");
  if (dich_.projection_stale)
    throw PreconditionError(
        "GreenKernel: dichotomy projection is stale after a roughness transform; "
        "re-fit it (refit_projection) before building the kernel");
}

Eigen::MatrixXd GreenKernel::eval(double t, double s) const {
  const Eigen::MatrixXd phi_t = fund_->eval(t);
  const Eigen::MatrixXd inv_s = fund_->eval_inv(s);
  const Eigen::Index d = dimension();
  if (t >= s) return phi_t * (dich_.P * inv_s);
  return -phi_t * ((Eigen::MatrixXd::Identity(d, d) - dich_.P) * inv_s);
}

DichotomyVerification verify_dichotomy(const GreenKernel& kernel, std::size_t verification_pairs) {
  const auto& fund = kernel.fundamental();
  const auto& d = kernel.dichotomy();
  const std::size_t n = fund.grid.count;
  const auto base_count = static_cast<std::size_t>(std::sqrt(static_cast<double>(verification_pairs))) + 1;

  DichotomyVerification v;
  for (std::size_t bi = 0; bi < base_count; ++bi) {
    const std::size_t i = (bi * (n - 1)) / std::max<std::size_t>(base_count - 1, 1);
    const double s = fund.grid.node(i);
    for (std::size_t gi = 0; gi < base_count; ++gi) {
      const double frac = static_cast<double>(gi + 1) / static_cast<double>(base_count);
      for (const double sign : {1.0, -1.0}) {
        const double sep = sign * frac * 0.9 * fund.grid.span();
        const double t = s + sep;
        if (!fund.grid.contains(t)) continue;
        const double bound = d.K * std::exp(-d.alpha * std::abs(sep));
        if (bound < 1e-290) continue;
        const double ratio = kernel.eval(t, s).operatorNorm() / bound;
        ++v.samples;
        if (ratio > v.worst_ratio) {
          v.worst_ratio = ratio;
          v.worst_t = t;
          v.worst_s = s;
        }
      }
    }
  }
  return v;
}

void export_kernel_diagnostics(const GreenKernel& kernel, std::size_t pairs,
                               const std::string& path) {
  const auto& fund = kernel.fundamental();
  const auto& d = kernel.dichotomy();
  const std::size_t n = fund.grid.count;
  const auto base = static_cast<std::size_t>(std::sqrt(static_cast<double>(pairs))) + 1;
  std::ofstream os(path);
  if (!os) throw Error("cannot open for writing: " + path);
  os << "t,s,norm_G,bound\n";
  char buf[160];
  for (std::size_t bi = 0; bi < base; ++bi) {
    const std::size_t i = (bi * (n - 1)) / std::max<std::size_t>(base - 1, 1);
    const double s = fund.grid.node(i);
    for (std::size_t gi = 0; gi < base; ++gi) {
      const double frac = static_cast<double>(gi + 1) / static_cast<double>(base);
      for (const double sign : {1.0, -1.0}) {
        const double t = s + sign * frac * 0.9 * fund.grid.span();
        if (!fund.grid.contains(t)) continue;
        const double norm = kernel.eval(t, s).operatorNorm();
        const double bound = d.K * std::exp(-d.alpha * std::abs(t - s));
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g\n", t, s, norm, bound);
        os << buf;
      }
    }
  }
}

double green_window(const DichotomyData& d, double h_sup, double tail_tol) {
  if (!(tail_tol > 0.0)) throw PreconditionError("green_window: tail_tol must be positive");
  if (!(d.alpha > 0.0)) throw PreconditionError("green_window: dichotomy rate must be positive");
  const double arg = 2.0 * d.K * h_sup / (d.alpha * tail_tol);
  if (!(arg > 1.0)) return 0.0;
  return std::ceil(std::log(arg) / d.alpha);
}

namespace {

struct ConvolvePlan {
  std::size_t stride = 1;   // h-steps per output step
  std::size_t offset = 0;   // h-index of the first output node
  std::size_t window = 0;   // window half-width in h-steps
  bool clamp = false;
  std::size_t n_h = 0;

  std::size_t h_index(std::size_t k) const { return offset + k * stride; }
  std::size_t lo(std::size_t k) const {
    const std::size_t i = h_index(k);
    return i >= window ? i - window : (clamp ? 0 : throw_span(i));
  }
  std::size_t hi(std::size_t k) const {
    const std::size_t i = h_index(k);
    if (i + window < n_h) return i + window;
    if (clamp) return n_h - 1;
    throw_span(i);
    return 0;
  }
  static std::size_t throw_span(std::size_t i) {
    throw SpanError("green_convolve: integration window [t-L, t+L] does not fit in the forcing "
                    "grid at output node index " + std::to_string(i) +
                    "; extend the grid or enable window clamping");
  }
};

}  // namespace

GridFunction green_convolve(const GreenKernel& kernel, const GridFunction& h, double tail_tol,
                            const TimeGrid& out_grid, bool clamp_window) {
  const auto& fund = kernel.fundamental();
  const auto& dich = kernel.dichotomy();
  const Eigen::Index d = kernel.dimension();
  if (h.dimension() != d) throw PreconditionError("green_convolve: forcing dimension mismatch");
  if (!fund.grid.aligned_subgrid(h.grid))
    throw SpanError("green_convolve: forcing grid must be an aligned subgrid of the fundamental "
                    "solution grid");

  const double h_sup = h.sup_norm();
  GridFunction out(out_grid, d);
  if (h_sup == 0.0) return out;

  // Output nodes must sit on the lattice of the forcing grid (the sliding
  // trapezoid below reuses the forcing nodes directly).
  const double ratio = out_grid.dt / h.grid.dt;
  const auto stride = static_cast<std::size_t>(std::llround(ratio));
  if (stride < 1 || std::abs(ratio - static_cast<double>(stride)) > 1e-9)
    throw PreconditionError("green_convolve: output dt must be an integer multiple of forcing dt");
  const double off_real = (out_grid.t_start - h.grid.t_start) / h.grid.dt;
  const auto off = static_cast<long long>(std::llround(off_real));
  if (off < 0 || std::abs(off_real - static_cast<double>(off)) > 1e-9 ||
      static_cast<std::size_t>(off) + (out_grid.count - 1) * stride >= h.grid.count)
    throw SpanError("green_convolve: output grid is not a sublattice of the forcing grid");

  const double L = green_window(dich, h_sup, tail_tol);
  ConvolvePlan plan;
  plan.stride = stride;
  plan.offset = static_cast<std::size_t>(off);
  plan.window = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(L / h.grid.dt - 1e-9)));
  plan.clamp = clamp_window;
  plan.n_h = h.grid.count;
  if (!clamp_window) {
    plan.lo(0);
    plan.hi(out_grid.count - 1);  // throws when the extreme windows do not fit
  }

  // Split the integrand at the kernel jump: w(s) = Phi^{-1}(s) h(s),
  // p = P w decays backward (stable directions), q = (I-P) w decays forward.
  // Summing p ascending and q descending keeps every rounding error small
  // relative to the local scale of the running sum.
  const Eigen::MatrixXd& P = dich.P;
  const Eigen::MatrixXd Q = Eigen::MatrixXd::Identity(d, d) - P;
  const std::size_t fund_off = fund.grid.offset_of(h.grid);
  Eigen::MatrixXd p(h.grid.count, d), q(h.grid.count, d);
  parallel_for_chunks(h.grid.count, 8192, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const Eigen::VectorXd w = fund.phi_inv[fund_off + i] * h.at(i);
      p.row(static_cast<Eigen::Index>(i)) = (P * w).transpose();
      q.row(static_cast<Eigen::Index>(i)) = (Q * w).transpose();
    }
  });

  const double dt = h.grid.dt;
  const std::size_t n_out = out_grid.count;
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_out), d);

  auto panel = [dt](const Eigen::MatrixXd& rows, std::size_t a) {
    return (0.5 * dt) * (rows.row(static_cast<Eigen::Index>(a)) + rows.row(static_cast<Eigen::Index>(a + 1)));
  };

  // Fixed-size chunks keep results byte-identical for any worker count.
  const std::size_t chunk = 16384;
  parallel_for_chunks(n_out, chunk, [&](std::size_t k0, std::size_t k1) {
    // Forward-decaying part: window [lo(k), i(k)], ascending slide.
    Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(d);
    std::size_t cur_lo = plan.lo(k0), cur_i = plan.h_index(k0);
    for (std::size_t a = cur_lo; a < cur_i; ++a) sum += panel(p, a);
    acc.row(static_cast<Eigen::Index>(k0)) += sum;
    for (std::size_t k = k0 + 1; k < k1; ++k) {
      const std::size_t nlo = plan.lo(k), ni = plan.h_index(k);
      for (std::size_t a = cur_i; a < ni; ++a) sum += panel(p, a);
      for (std::size_t a = cur_lo; a < nlo; ++a) sum -= panel(p, a);
      cur_lo = nlo;
      cur_i = ni;
      acc.row(static_cast<Eigen::Index>(k)) += sum;
    }
  });
  parallel_for_chunks(n_out, chunk, [&](std::size_t k0, std::size_t k1) {
    // Backward-decaying part: window [i(k), hi(k)], descending slide.
    const std::size_t klast = k1 - 1;
    Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(d);
    std::size_t cur_hi = plan.hi(klast), cur_i = plan.h_index(klast);
    for (std::size_t a = cur_i; a < cur_hi; ++a) sum += panel(q, a);
    acc.row(static_cast<Eigen::Index>(klast)) -= sum;
    for (std::size_t k = klast; k-- > k0;) {
      const std::size_t nhi = plan.hi(k), ni = plan.h_index(k);
      for (std::size_t a = ni; a < cur_i; ++a) sum += panel(q, a);
      for (std::size_t a = nhi; a < cur_hi; ++a) sum -= panel(q, a);
      cur_hi = nhi;
      cur_i = ni;
      acc.row(static_cast<Eigen::Index>(k)) -= sum;
    }
  });

  parallel_for_chunks(n_out, 8192, [&](std::size_t b, std::size_t e) {
    for (std::size_t k = b; k < e; ++k) {
      const std::size_t i = fund_off + plan.h_index(k);
      out.values.row(static_cast<Eigen::Index>(k)) =
          (fund.phi[i] * acc.row(static_cast<Eigen::Index>(k)).transpose()).transpose();
    }
  });
  return out;
}

GridFunction green_convolve(const GreenKernel& kernel, const GridFunction& h, double tail_tol) {
  const double L = green_window(kernel.dichotomy(), std::max(h.sup_norm(), 1e-300), tail_tol);
  const auto margin = static_cast<std::size_t>(std::ceil(L / h.grid.dt - 1e-9));
  if (2 * margin + 2 > h.grid.count)
    throw SpanError("green_convolve: forcing grid shorter than one truncation window (need " +
                    std::to_string(2 * margin + 2) + " nodes, have " + std::to_string(h.grid.count) + ")");
  TimeGrid sub(h.grid.node(margin), h.grid.dt, h.grid.count - 2 * margin);
  return green_convolve(kernel, h, tail_tol, sub, false);
}

double green_l1_norm(const GreenKernel& kernel, double t, double tail_tol, double h_sup) {
  const auto& dich = kernel.dichotomy();
  const double L = green_window(dich, h_sup, tail_tol);
  const auto& grid = kernel.fundamental().grid;
  const double lo = std::max(grid.t_start, t - L);
  const double hi = std::min(grid.t_end(), t + L);
  const auto n = static_cast<std::size_t>(std::ceil((hi - lo) / grid.dt));
  double acc = 0.0;
  double prev = kernel.eval(t, lo).operatorNorm();
  for (std::size_t k = 1; k <= n; ++k) {
    const double s = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(n);
    const double cur = kernel.eval(t, s).operatorNorm();
    acc += 0.5 * (prev + cur) * ((hi - lo) / static_cast<double>(n));
    prev = cur;
  }
  return acc;
}

}  // namespace rap
