#include "rap/fixed_point.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "rap/errors.hpp"
#include "rap/parallel.hpp"

namespace rap {

// ---------------------------------------------------------------------------
// StateMap / ParamMap builders
// ---------------------------------------------------------------------------

StateMap StateMap::zero(Eigen::Index d) {
  StateMap m;
  m.dim = d;
  m.value = [d](double, const Eigen::VectorXd&) { return Eigen::VectorXd::Zero(d); };
  m.jacobian = [d](double, const Eigen::VectorXd&) { return Eigen::MatrixXd::Zero(d, d); };
  m.hessian = [d](double, const Eigen::VectorXd&) {
    return std::vector<Eigen::MatrixXd>(d, Eigen::MatrixXd::Zero(d, d));
  };
  return m;
}

StateMap StateMap::forcing(const Signal& s) {
  StateMap m = zero(s.dimension());
  m.value = [s](double t, const Eigen::VectorXd&) { return s.eval(t); };
  return m;
}

StateMap StateMap::linear(const Eigen::MatrixXd& B) {
  StateMap m = zero(B.rows());
  m.value = [B](double, const Eigen::VectorXd& x) -> Eigen::VectorXd { return B * x; };
  m.jacobian = [B](double, const Eigen::VectorXd&) { return B; };
  return m;
}

StateMap StateMap::scalar_quadratic(double c) {
  StateMap m;
  m.dim = 1;
  m.value = [c](double, const Eigen::VectorXd& x) {
    return Eigen::VectorXd::Constant(1, c * x(0) * x(0));
  };
  m.jacobian = [c](double, const Eigen::VectorXd& x) {
    return Eigen::MatrixXd::Constant(1, 1, 2.0 * c * x(0));
  };
  m.hessian = [c](double, const Eigen::VectorXd&) {
    return std::vector<Eigen::MatrixXd>{Eigen::MatrixXd::Constant(1, 1, 2.0 * c)};
  };
  return m;
}

StateMap StateMap::minus_linear(const StateMap& f, const MatrixFunction& A) {
  StateMap m;
  m.dim = f.dim;
  auto fv = f.value;
  auto fj = f.jacobian;
  m.value = [fv, A](double t, const Eigen::VectorXd& x) -> Eigen::VectorXd {
    return fv(t, x) - A(t) * x;
  };
  m.jacobian = [fj, A](double t, const Eigen::VectorXd& x) -> Eigen::MatrixXd {
    return fj(t, x) - A(t);
  };
  m.hessian = f.hessian;  // linear part has none
  return m;
}

StateMap StateMap::operator+(const StateMap& other) const {
  if (other.dim != dim) throw PreconditionError("StateMap: dimension mismatch in sum");
  StateMap m;
  m.dim = dim;
  auto v1 = value, v2 = other.value;
  auto j1 = jacobian, j2 = other.jacobian;
  m.value = [v1, v2](double t, const Eigen::VectorXd& x) -> Eigen::VectorXd {
    return v1(t, x) + v2(t, x);
  };
  m.jacobian = [j1, j2](double t, const Eigen::VectorXd& x) -> Eigen::MatrixXd {
    return j1(t, x) + j2(t, x);
  };
  if (hessian && other.hessian) {
    auto h1 = hessian, h2 = other.hessian;
    m.hessian = [h1, h2](double t, const Eigen::VectorXd& x) {
      auto a = h1(t, x);
      const auto b = h2(t, x);
      for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
      return a;
    };
  }
  return m;
}

std::vector<Eigen::MatrixXd> state_hessian(const StateMap& f, double t, const Eigen::VectorXd& x) {
  if (f.hessian) return f.hessian(t, x);
  const Eigen::Index d = f.dim;
  const double h = 1e-5 * std::max(1.0, x.norm());
  std::vector<Eigen::MatrixXd> out(d, Eigen::MatrixXd::Zero(d, d));
  for (Eigen::Index j = 0; j < d; ++j) {
    Eigen::VectorXd xp = x, xm = x;
    xp(j) += h;
    xm(j) -= h;
    const Eigen::MatrixXd dj = (f.jacobian(t, xp) - f.jacobian(t, xm)) / (2.0 * h);
    for (Eigen::Index k = 0; k < d; ++k)
      for (Eigen::Index i = 0; i < d; ++i) out[k](i, j) = dj(k, i);
  }
  return out;
}

ParamMap ParamMap::zero(Eigen::Index d) {
  return {[d](double, const Eigen::VectorXd&, double) { return Eigen::VectorXd::Zero(d); }};
}

ParamMap ParamMap::nu_signal(const Signal& s) {
  return {[s](double t, const Eigen::VectorXd&, double nu) -> Eigen::VectorXd {
    return nu * s.eval(t);
  }};
}

ParamMap ParamMap::nu_linear(const Eigen::MatrixXd& B) {
  return {[B](double, const Eigen::VectorXd& x, double nu) -> Eigen::VectorXd {
    return nu * (B * x);
  }};
}

// ---------------------------------------------------------------------------
// Sampled moduli
// ---------------------------------------------------------------------------

namespace {

std::vector<Eigen::VectorXd> ball_probes(Eigen::Index d, double radius, std::size_t count,
                                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<Eigen::VectorXd> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Eigen::VectorXd v(d);
    for (Eigen::Index j = 0; j < d; ++j) v(j) = gauss(rng);
    const double n = v.norm();
    if (n < 1e-14) {
      out.push_back(Eigen::VectorXd::Zero(d));
      continue;
    }
    const double scale = radius * std::pow(unif(rng), 1.0 / static_cast<double>(d));
    out.push_back(v * (scale / n));
  }
  return out;
}

std::vector<double> time_samples(const TimeGrid& grid, std::size_t count) {
  std::vector<double> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(grid.t_start + grid.span() * static_cast<double>(i) /
                                     static_cast<double>(std::max<std::size_t>(count - 1, 1)));
  return out;
}

// max over sampled t and probe pairs of the difference quotient of f.
double sampled_lipschitz(const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)>& f,
                         Eigen::Index d, const TimeGrid& grid, double radius,
                         const ModuliOptions& m) {
  const auto xs = ball_probes(d, radius, 2 * m.probe_pairs, m.seed);
  const auto ts = time_samples(grid, m.time_samples);
  double worst = 0.0;
  for (const double t : ts) {
    for (std::size_t i = 0; i + 1 < xs.size(); i += 2) {
      const double dist = (xs[i] - xs[i + 1]).norm();
      if (dist < 1e-12) continue;
      worst = std::max(worst, (f(t, xs[i]) - f(t, xs[i + 1])).norm() / dist);
    }
  }
  return worst;
}

double sampled_sup(const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)>& f,
                   Eigen::Index d, const TimeGrid& grid, double radius, const ModuliOptions& m) {
  // Sup estimates need a dense time sweep; a sparse one clips oscillatory
  // peaks.
  const auto xs = ball_probes(d, radius, std::max<std::size_t>(m.probe_pairs / 8, 16), m.seed + 1);
  const auto ts = time_samples(grid, 8 * m.time_samples + 1);
  double worst = 0.0;
  for (const double t : ts)
    for (const auto& x : xs) worst = std::max(worst, f(t, x).norm());
  return worst;
}

// N1: max over probes of max_{i,j} || (d^2 f_k / dx_i dx_j)_k ||;
// N2: Lipschitz modulus of the same quantity between probe pairs.
void sampled_hessian_moduli(const StateMap& f, const GridFunction& xi, double r,
                            const ModuliOptions& m, double& N1, double& N2) {
  const Eigen::Index d = f.dim;
  const auto us = ball_probes(d, r, std::max<std::size_t>(m.probe_pairs / 4, 8), m.seed + 2);
  const auto ts = time_samples(xi.grid, std::max<std::size_t>(m.time_samples / 2, 5));
  N1 = 0.0;
  N2 = 0.0;
  auto entry_norms = [d](const std::vector<Eigen::MatrixXd>& H) {
    Eigen::MatrixXd norms = Eigen::MatrixXd::Zero(d, d);
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j < d; ++j) {
        double s = 0.0;
        for (Eigen::Index k = 0; k < d; ++k) s += H[static_cast<std::size_t>(k)](i, j) * H[static_cast<std::size_t>(k)](i, j);
        norms(i, j) = std::sqrt(s);
      }
    return norms;
  };
  for (const double t : ts) {
    const Eigen::VectorXd base = xi.eval(t);
    std::vector<std::pair<Eigen::VectorXd, Eigen::MatrixXd>> evals;
    for (const auto& u : us) {
      const auto H = state_hessian(f, t, base + u);
      const Eigen::MatrixXd norms = entry_norms(H);
      N1 = std::max(N1, norms.maxCoeff());
      evals.emplace_back(u, norms);
    }
    for (std::size_t i = 0; i + 1 < evals.size(); i += 2) {
      const double dist = (evals[i].first - evals[i + 1].first).norm();
      if (dist < 1e-12) continue;
      N2 = std::max(N2, (evals[i].second - evals[i + 1].second).cwiseAbs().maxCoeff() / dist);
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Hypothesis report
// ---------------------------------------------------------------------------

std::string HypothesisReport::summary() const {
  std::ostringstream os;
  auto line = [&os](bool ok, const std::string& name, double lhs, double rhs) {
    os << (ok ? "[pass] " : "[FAIL] ") << name << ": " << lhs << (ok ? " < " : " >= ") << rhs
       << "\n";
  };
  os << "dichotomy: K = " << K << ", alpha = " << alpha
     << (h1_dichotomy ? " (ok)" : " (NO DICHOTOMY)") << "\n";
  line(h2_lipschitz, "M(r) < alpha/(2K)", M_r, alpha / (2.0 * K));
  line(h3_delta, "delta < alpha/(4K^2)", delta, alpha / (4.0 * K * K));
  os << (h4_g_vanishes ? "[pass] " : "[FAIL] ") << "g(.,.,0) = 0: sampled defect " << g0_defect
     << "\n";
  if (h3_delta) {
    line(ball_condition, "r^2 N1 + ||g||_rt < (alpha-2Kdelta) r/(5K^2)", r * r * N1 + g_sup,
         (alpha - 2.0 * K * delta) * r / (5.0 * K * K));
    line(q_contractive, "q = 5K^2 L*/(alpha-2Kdelta) < 1", contraction_q, 1.0);
  } else {
    os << "[FAIL] contraction bound invalid: delta >= alpha/(4K^2)\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Grid planning and dichotomy fitting
// ---------------------------------------------------------------------------

namespace {

struct DichotomyBundle {
  DichotomyData data;
  std::shared_ptr<const FundamentalSolution> fund;
};

Eigen::MatrixXd mean_matrix(const MatrixFunction& A, const TimeGrid& grid) {
  const std::size_t samples = 65;
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(A.dimension(), A.dimension());
  for (std::size_t i = 0; i < samples; ++i)
    acc += A(grid.t_start + grid.span() * static_cast<double>(i) / static_cast<double>(samples - 1));
  return acc / static_cast<double>(samples);
}

DichotomyBundle fit_dichotomy(const MatrixFunction& A, const TimeGrid& grid,
                              const std::optional<DichotomyData>& supplied,
                              const std::optional<Eigen::MatrixXd>& projection_hint,
                              const SolverOptions& opts) {
  DichotomyBundle out;
  out.fund = std::make_shared<FundamentalSolution>(
      integrate_fundamental(A, grid, opts.integrator_tol));
  if (supplied) {
    out.data = *supplied;
    return out;
  }
  Eigen::MatrixXd P;
  if (projection_hint) {
    P = *projection_hint;
  } else {
    P = spectral_projection(mean_matrix(A, grid));
  }
  auto est = estimate_dichotomy(*out.fund, P, opts.dichotomy_pairs);
  if (!est.report.found)
    throw HypothesisError("no exponential dichotomy detected for the linear part: " +
                          est.report.message);
  out.data = est.data;
  return out;
}

struct PicardTrace {
  std::vector<double> norms;
  std::size_t iterations = 0;
};

// Fixed-point loop phi -> conv(G, w(phi)) with divergence and ball guards.
// `forcing` fills a GridFunction on the working grid from the current
// iterate. Returns the converged iterate on the working grid.
GridFunction picard_iterate(const GreenKernel& kernel, const TimeGrid& work,
                            const std::function<void(const GridFunction&, GridFunction&)>& forcing,
                            double tail_tol, double tol, std::size_t max_iterations,
                            double ball_radius,  // <= 0: no ball guard
                            const std::function<double(const GridFunction&)>& residual_of,
                            double residual_target, PicardTrace& trace,
                            const std::function<Eigen::VectorXd(double)>& initial) {
  const Eigen::Index d = kernel.dimension();
  GridFunction phi(work, d);
  if (initial)
    for (std::size_t k = 0; k < work.count; ++k) phi.set(k, initial(work.node(k)));
  GridFunction w(work, d);
  std::size_t bad_ratio_streak = 0;
  std::size_t residual_stall = 0;
  double prev_norm = -1.0;

  for (std::size_t it = 0; it < max_iterations; ++it) {
    forcing(phi, w);
    GridFunction next = green_convolve(kernel, w, tail_tol, work, /*clamp_window=*/true);
    const double diff = next.sup_diff(phi);
    trace.norms.push_back(diff);
    trace.iterations = it + 1;
    if (ball_radius > 0.0) {
      const double amp = next.sup_norm();
      if (amp > ball_radius + 10.0 * tol) {
        std::ostringstream os;
        os << "picard iterate escaped the ball: ||phi||_inf = " << amp << " > r = " << ball_radius
           << " (r too small or nu too large)";
        throw ConvergenceError(os.str());
      }
    }
    if (prev_norm >= 0.0 && prev_norm > 0.0) {
      const double ratio = diff / prev_norm;
      bad_ratio_streak = ratio >= 1.0 ? bad_ratio_streak + 1 : 0;
      if (bad_ratio_streak >= 3) {
        std::ostringstream os;
        os << "contraction failed: successive-difference ratio >= 1 for 3 iterations (last ratio "
           << ratio << ")";
        throw ConvergenceError(os.str());
      }
    }
    prev_norm = diff;
    phi = std::move(next);
    if (diff < tol) {
      if (!residual_of) return phi;
      const double res = residual_of(phi);
      if (res < residual_target) return phi;
      if (++residual_stall >= 5) {
        std::ostringstream os;
        os << "fixed point converged (diff " << diff << " < " << tol
           << ") but the residual floor " << res << " exceeds the target " << residual_target
           << "; refine dt or relax the residual tolerance";
        throw ConvergenceError(os.str());
      }
    }
  }
  std::ostringstream os;
  os << "no convergence in " << max_iterations << " iterations; last successive difference "
     << (trace.norms.empty() ? 0.0 : trace.norms.back());
  if (trace.norms.size() >= 2)
    os << ", last ratio " << trace.norms.back() / trace.norms[trace.norms.size() - 2];
  throw ConvergenceError(os.str());
}

double forcing_scale_guess(const StateMap& f, const TimeGrid& core, double r) {
  double s0 = 0.0;
  const auto ts = time_samples(core, 65);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(f.dim);
  for (const double t : ts) s0 = std::max(s0, f.value(t, zero).norm());
  return 2.0 * (s0 + r) + 1e-9;
}

}  // namespace

// ---------------------------------------------------------------------------
// Semilinear solve
// ---------------------------------------------------------------------------

SemilinearResult solve_semilinear(const MatrixFunction& A,
                                  const std::optional<DichotomyData>& dichotomy, const StateMap& f,
                                  double r, const SolverOptions& opts) {
  if (f.dim != A.dimension()) throw PreconditionError("solve_semilinear: dimension mismatch");
  // Working grid: pad the requested core by one truncation window so that the
  // clamped-window edge error has decayed below tail_tol on the core.
  DichotomyData guess;  // provisional constants just for window planning
  if (dichotomy) {
    guess = *dichotomy;
  } else {
    guess.K = 2.0;
    guess.alpha = 0.5;
  }
  const double scale = forcing_scale_guess(f, opts.core, r);
  double pad = green_window(guess, scale, opts.tail_tol);
  TimeGrid work = opts.core.padded(pad, pad);

  auto bundle = fit_dichotomy(A, work, dichotomy, std::nullopt, opts);
  if (!dichotomy) {
    // Re-plan the pad with the fitted constants when they are weaker than the
    // provisional guess.
    const double pad2 = green_window(bundle.data, scale, opts.tail_tol);
    if (pad2 > pad) {
      pad = pad2;
      work = opts.core.padded(pad, pad);
      bundle = fit_dichotomy(A, work, dichotomy, std::nullopt, opts);
    }
  }

  const double contraction_budget =
      2.0 * bundle.data.K / bundle.data.alpha *
      sampled_lipschitz(f.value, f.dim, work, r, opts.moduli);
  if (opts.enforce_hypotheses && contraction_budget >= 1.0) {
    std::ostringstream os;
    os << "solve_semilinear: 2K M(r)/alpha = " << contraction_budget << " >= 1";
    throw HypothesisError(os.str());
  }

  GreenKernel kernel(bundle.fund, bundle.data);
  auto rhs = [&](double t, const Eigen::VectorXd& x) -> Eigen::VectorXd {
    return A(t) * x + f.value(t, x);
  };
  auto residual_of = [&](const GridFunction& phi) {
    return residual_sup_norm(rhs, phi.restrict_to(opts.core));
  };
  auto forcing = [&](const GridFunction& phi, GridFunction& w) {
    for (std::size_t k = 0; k < phi.size(); ++k)
      w.set(k, f.value(phi.grid.node(k), phi.at(k)));
  };

  PicardTrace trace;
  GridFunction phi = picard_iterate(kernel, work, forcing, opts.tail_tol, opts.tol,
                                    opts.max_iterations, /*ball_radius=*/-1.0, residual_of,
                                    opts.residual_factor * opts.tol, trace, nullptr);

  SemilinearResult out;
  out.xi_work = phi;
  out.xi = phi.restrict_to(opts.core);
  out.iterate_norms = std::move(trace.norms);
  out.residual_sup = residual_of(phi);
  out.dichotomy = bundle.data;
  out.fundamental = bundle.fund;
  return out;
}

Eigen::VectorXd taylor_remainder(const StateMap& f,
                                 const std::function<Eigen::VectorXd(double)>& xi, double t,
                                 const Eigen::VectorXd& u) {
  const Eigen::VectorXd base = xi(t);
  return f.value(t, base + u) - f.value(t, base) - f.jacobian(t, base) * u;
}

// ---------------------------------------------------------------------------
// Hypothesis check
// ---------------------------------------------------------------------------

HypothesisReport check_hypotheses(const PerturbedProblem& problem, const DichotomyData& dichotomy,
                                  const GridFunction& xi, const SolverOptions& opts) {
  HypothesisReport rep;
  rep.K = dichotomy.K;
  rep.alpha = dichotomy.alpha;
  rep.r = problem.r;
  rep.nu = problem.nu;
  rep.r_tilde = problem.r + xi.sup_norm();
  rep.h1_dichotomy = dichotomy.alpha > 0.0 && dichotomy.K >= 1.0;

  const Eigen::Index d = problem.f.dim;
  rep.M_r = sampled_lipschitz(problem.f.value, d, xi.grid, problem.r, opts.moduli);
  rep.h2_lipschitz = rep.M_r < rep.alpha / (2.0 * rep.K);

  double delta = 0.0;
  for (std::size_t k = 0; k < xi.size(); ++k)
    delta = std::max(delta, problem.f.jacobian(xi.grid.node(k), xi.at(k)).operatorNorm());
  rep.delta = delta;
  rep.h3_delta = delta < rep.alpha / (4.0 * rep.K * rep.K);

  sampled_hessian_moduli(problem.f, xi, problem.r, opts.moduli, rep.N1, rep.N2);

  auto g_at_nu = [&](double t, const Eigen::VectorXd& x) {
    return problem.g.value(t, x, problem.nu);
  };
  rep.M1 = sampled_lipschitz(g_at_nu, d, xi.grid, rep.r_tilde, opts.moduli);
  rep.g_sup = sampled_sup(g_at_nu, d, xi.grid, rep.r_tilde, opts.moduli);
  auto g_at_zero = [&](double t, const Eigen::VectorXd& x) { return problem.g.value(t, x, 0.0); };
  rep.g0_defect = sampled_sup(g_at_zero, d, xi.grid, rep.r_tilde, opts.moduli);
  rep.h4_g_vanishes = rep.g0_defect <= 1e-10 * std::max(1.0, rep.g_sup);

  const double n = static_cast<double>(d);
  rep.Lstar = n * problem.r * rep.N1 + n * problem.r * problem.r * rep.N2 + rep.M1;
  if (rep.h3_delta) {
    const double denom = rep.alpha - 2.0 * rep.K * rep.delta;
    rep.contraction_q = 5.0 * rep.K * rep.K * rep.Lstar / denom;
    rep.q_contractive = rep.contraction_q < 1.0;
    rep.ball_condition =
        problem.r * problem.r * rep.N1 + rep.g_sup < denom * problem.r / (5.0 * rep.K * rep.K);
  } else {
    rep.contraction_q = std::numeric_limits<double>::infinity();
    rep.q_contractive = false;
    rep.ball_condition = false;
  }
  rep.nu0 = rep.all_pass() ? problem.nu : 0.0;
  return rep;
}

// ---------------------------------------------------------------------------
// Perturbed solve (shared engine for the plain and family variants)
// ---------------------------------------------------------------------------

namespace {

struct PerturbedEngineInput {
  const PerturbedProblem& problem;
  // Extra forcing folded into H_nu, used by the family variant for the term
  // [A_nu(t) - A_0(t)] (u + xi(t)). Evaluated at (t, u + xi(t)).
  std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)> extra;
};

SolveResult run_perturbed(const PerturbedEngineInput& in, const SolverOptions& opts) {
  const PerturbedProblem& p = in.problem;
  if (p.f.dim != p.A.dimension()) throw PreconditionError("solve_perturbed: dimension mismatch");

  // Stage 1: reference solution xi of the semilinear system, on a grid padded
  // far enough that the downstream stage sees clean values.
  SolverOptions base_opts = opts;
  DichotomyData guess = p.dichotomy ? *p.dichotomy : DichotomyData{Eigen::MatrixXd(), 2.0, 0.5, false};
  const double scale = forcing_scale_guess(p.f, opts.core, p.r) + 1.0;
  const double pad_psi = green_window(guess, scale, opts.tail_tol);
  base_opts.core = opts.core.padded(pad_psi, pad_psi);

  SemilinearResult semi = solve_semilinear(p.A, p.dichotomy, p.f, p.r, base_opts);
  const TimeGrid work = semi.xi.grid;  // core padded once
  const GridFunction& xi_w = semi.xi;

  SolveResult out;
  out.base_dichotomy = semi.dichotomy;
  out.xi = xi_w.restrict_to(opts.core);

  // Stage 2: hypotheses along xi.
  out.hypothesis = check_hypotheses(p, semi.dichotomy, xi_w, opts);
  if (opts.enforce_hypotheses && !out.hypothesis.all_pass())
    throw HypothesisError("hypothesis check failed:\n" + out.hypothesis.summary());

  // Stage 3: variational system A + df/dx(t, xi(t)) and its kernel. The
  // roughness transform provides guaranteed constants when delta admits it;
  // the projection and the working constants are always re-fit numerically.
  auto xi_eval = std::make_shared<GridFunction>(xi_w);
  const StateMap f = p.f;
  MatrixFunction variational(
      p.A.dimension(),
      [A = p.A, f, xi_eval](double t) -> Eigen::MatrixXd {
        return A(t) + f.jacobian(t, xi_eval->eval(t));
      },
      p.A.sup_bound() + out.hypothesis.delta);

  if (out.hypothesis.h3_delta) {
    out.perturbed_guaranteed = roughness_apply(semi.dichotomy, out.hypothesis.delta);
    out.roughness_valid = true;
  }

  auto fund_var = std::make_shared<FundamentalSolution>(
      integrate_fundamental(variational, work, opts.integrator_tol));
  const Eigen::MatrixXd Q = refit_projection(*fund_var, semi.dichotomy.P);
  auto est = estimate_dichotomy(*fund_var, Q, opts.dichotomy_pairs);
  if (!est.report.found)
    throw HypothesisError("variational system lost the exponential dichotomy: " +
                          est.report.message);
  out.perturbed_fitted = est.data;
  GreenKernel kernel(fund_var, est.data);

  // Stage 4: Picard iteration for u = psi - xi with forcing
  // H_nu(t, u) = f2(t, u) + g(t, u + xi(t), nu) [+ extra].
  auto xi_fn = [xi_eval](double t) { return xi_eval->eval(t); };
  auto forcing = [&](const GridFunction& phi, GridFunction& w) {
    const auto n = phi.size();
    for (std::size_t k = 0; k < n; ++k) {
      const double t = phi.grid.node(k);
      const Eigen::VectorXd u = phi.at(k);
      const Eigen::VectorXd base = xi_w.at(k);
      Eigen::VectorXd h = taylor_remainder(f, xi_fn, t, u) + p.g.value(t, u + base, p.nu);
      if (in.extra) h += in.extra(t, u + base);
      w.set(k, h);
    }
  };
  auto full_rhs = [&](double t, const Eigen::VectorXd& x) -> Eigen::VectorXd {
    Eigen::VectorXd v = p.A(t) * x + f.value(t, x) + p.g.value(t, x, p.nu);
    if (in.extra) v += in.extra(t, x);
    return v;
  };
  auto residual_of = [&](const GridFunction& phi) {
    GridFunction psi = phi.restrict_to(opts.core);
    psi.values += out.xi.values;
    return residual_sup_norm(full_rhs, psi);
  };

  PicardTrace trace;
  GridFunction phi =
      picard_iterate(kernel, work, forcing, opts.tail_tol, opts.tol, opts.max_iterations, p.r,
                     residual_of, opts.residual_factor * opts.tol, trace, opts.initial_iterate);

  out.iterate_norms = std::move(trace.norms);
  out.iterations = trace.iterations;
  out.psi = phi.restrict_to(opts.core);
  out.psi.values += out.xi.values;
  out.residual_sup = residual_sup_norm(full_rhs, out.psi);
  return out;
}

}  // namespace

SolveResult solve_perturbed(const PerturbedProblem& problem, const SolverOptions& opts) {
  return run_perturbed({problem, nullptr}, opts);
}

NuLimitBound nu_limit_bound(const HypothesisReport& report, const GridFunction& xi,
                            const GridFunction& psi) {
  NuLimitBound out;
  const double damping = 1.0 - 2.0 * report.K * report.M_r / report.alpha;
  if (damping <= 0.0) {
    out.bound = std::numeric_limits<double>::infinity();
  } else {
    out.bound = (1.0 / damping) * (2.0 * report.K / report.alpha) * report.g_sup;
  }
  out.observed = psi.sup_diff(xi);
  return out;
}

SolveResult solve_family(const FamilyProblem& problem, const SolverOptions& opts) {
  const MatrixFunction& A0 = problem.base.A;
  const auto& Af = problem.A_family;
  const double nu = problem.base.nu;

  // Sampled uniform-convergence check: sup||A_nu - A_0|| must shrink along a
  // decreasing nu sequence.
  const auto ts = time_samples(opts.core, 65);
  auto family_gap = [&](double nu_k) {
    double worst = 0.0;
    for (const double t : ts) worst = std::max(worst, (Af(t, nu_k) - A0(t)).operatorNorm());
    return worst;
  };
  const double gap1 = family_gap(nu);
  const double gap2 = family_gap(nu / 2.0);
  const double gap3 = family_gap(nu / 4.0);
  if (!std::isfinite(gap1) || gap3 > gap1 + 1e-12)
    throw PreconditionError("solve_family: sampled sup||A_nu - A_0|| does not shrink along nu (" +
                            std::to_string(gap1) + ", " + std::to_string(gap2) + ", " +
                            std::to_string(gap3) + ")");

  PerturbedEngineInput in{problem.base,
                          [&Af, &A0, nu](double t, const Eigen::VectorXd& y) -> Eigen::VectorXd {
                            return (Af(t, nu) - A0(t)) * y;
                          }};
  return run_perturbed(in, opts);
}

// ---------------------------------------------------------------------------
// Delay solves
// ---------------------------------------------------------------------------

namespace {

struct DelayCommon {
  DichotomyBundle bundle;
  TimeGrid work;
  GridFunction xi_work;
  double g_sup = 0.0;
  double M1 = 0.0;
};

double sampled_delay_lipschitz(
    const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&, const Eigen::VectorXd&)>& g,
    const GridFunction& xi, double lag, double r, const ModuliOptions& m) {
  const Eigen::Index d = xi.dimension();
  const auto xs = ball_probes(d, r, 2 * m.probe_pairs, m.seed + 3);
  const auto ts = time_samples(xi.grid, m.time_samples);
  double worst = 0.0;
  for (const double t : ts) {
    const Eigen::VectorXd by = xi.eval(t);
    const Eigen::VectorXd bz = xi.eval(t - lag);
    for (std::size_t i = 0; i + 3 < xs.size(); i += 4) {
      const double dist =
          (xs[i] - xs[i + 1]).norm() + (xs[i + 2] - xs[i + 3]).norm();
      if (dist < 1e-12) continue;
      const double dv =
          (g(t, by + xs[i], bz + xs[i + 2]) - g(t, by + xs[i + 1], bz + xs[i + 3])).norm();
      worst = std::max(worst, dv / dist);
    }
  }
  return worst;
}

double sampled_delay_sup(
    const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&, const Eigen::VectorXd&)>& g,
    const GridFunction& xi, double lag, double r, const ModuliOptions& m) {
  const Eigen::Index d = xi.dimension();
  const auto xs = ball_probes(d, r, m.probe_pairs, m.seed + 4);
  const auto ts = time_samples(xi.grid, m.time_samples);
  double worst = 0.0;
  for (const double t : ts) {
    const Eigen::VectorXd by = xi.eval(t);
    const Eigen::VectorXd bz = xi.eval(t - lag);
    for (std::size_t i = 0; i + 1 < xs.size(); i += 2)
      worst = std::max(worst, g(t, by + xs[i], bz + xs[i + 1]).norm());
  }
  return worst;
}

}  // namespace

DelayGate delay_nu_limit(const DelayProblem& problem, const SolverOptions& opts) {
  if (!(problem.lag > 0.0)) throw PreconditionError("solve_delay: lag must be positive");

  SolverOptions o = opts;
  DichotomyData guess = problem.dichotomy ? *problem.dichotomy
                                          : DichotomyData{Eigen::MatrixXd(), 2.0, 0.5, false};
  const double pad = green_window(guess, problem.h.sup_bound() + problem.r + 1.0, opts.tail_tol);
  const TimeGrid work = opts.core.padded(pad + problem.lag, pad);

  auto bundle = fit_dichotomy(problem.A, work, problem.dichotomy, problem.projection, opts);
  GreenKernel kernel(bundle.fund, bundle.data);
  GridFunction h = problem.h.sample(work);
  GridFunction xi = green_convolve(kernel, h, opts.tail_tol, work, /*clamp_window=*/true);

  DelayGate gate;
  gate.K = bundle.data.K;
  gate.alpha = bundle.data.alpha;
  gate.g_sup = problem.g_sup ? *problem.g_sup
                             : sampled_delay_sup(problem.g, xi, problem.lag, problem.r, opts.moduli);
  gate.M1 = problem.M1 ? *problem.M1
                       : sampled_delay_lipschitz(problem.g, xi, problem.lag, problem.r, opts.moduli);
  gate.ball_branch = gate.g_sup > 0.0
                         ? problem.r * gate.alpha / (2.0 * gate.K * gate.g_sup)
                         : std::numeric_limits<double>::infinity();
  gate.contraction_branch = gate.M1 > 0.0 ? gate.alpha / (4.0 * gate.K * gate.M1)
                                          : std::numeric_limits<double>::infinity();
  gate.binding = gate.ball_branch <= gate.contraction_branch ? 0 : 1;
  gate.nu0 = std::min(gate.ball_branch, gate.contraction_branch);
  return gate;
}

SolveResult solve_delay(const DelayProblem& problem, const SolverOptions& opts) {
  if (!(problem.lag > 0.0)) throw PreconditionError("solve_delay: lag must be positive");

  DichotomyData guess = problem.dichotomy ? *problem.dichotomy
                                          : DichotomyData{Eigen::MatrixXd(), 2.0, 0.5, false};
  const double pad = green_window(guess, problem.h.sup_bound() + problem.r + 1.0, opts.tail_tol);
  const TimeGrid work = opts.core.padded(pad + problem.lag, pad);

  auto bundle = fit_dichotomy(problem.A, work, problem.dichotomy, problem.projection, opts);
  GreenKernel kernel(bundle.fund, bundle.data);
  GridFunction h = problem.h.sample(work);
  GridFunction xi_w = green_convolve(kernel, h, opts.tail_tol, work, /*clamp_window=*/true);

  // Admissible-parameter gate with the fitted constants.
  DelayGate gate;
  {
    gate.K = bundle.data.K;
    gate.alpha = bundle.data.alpha;
    gate.g_sup = problem.g_sup ? *problem.g_sup
                               : sampled_delay_sup(problem.g, xi_w, problem.lag, problem.r, opts.moduli);
    gate.M1 = problem.M1 ? *problem.M1
                         : sampled_delay_lipschitz(problem.g, xi_w, problem.lag, problem.r, opts.moduli);
    gate.ball_branch = gate.g_sup > 0.0
                           ? problem.r * gate.alpha / (2.0 * gate.K * gate.g_sup)
                           : std::numeric_limits<double>::infinity();
    gate.contraction_branch = gate.M1 > 0.0 ? gate.alpha / (4.0 * gate.K * gate.M1)
                                            : std::numeric_limits<double>::infinity();
    gate.binding = gate.ball_branch <= gate.contraction_branch ? 0 : 1;
    gate.nu0 = std::min(gate.ball_branch, gate.contraction_branch);
  }
  if (problem.nu > gate.nu0) {
    std::ostringstream os;
    os << "solve_delay: nu = " << problem.nu << " exceeds nu0 = " << gate.nu0
       << " = min{ r alpha/(2K||g||) = " << gate.ball_branch << ", alpha/(4K M1) = "
       << gate.contraction_branch << " }; binding branch: "
       << (gate.binding == 0 ? "r alpha/(2K||g||)" : "alpha/(4K M1)");
    throw PreconditionError(os.str());
  }

  auto forcing = [&](const GridFunction& phi, GridFunction& w) {
    for (std::size_t k = 0; k < phi.size(); ++k) {
      const double t = phi.grid.node(k);
      const Eigen::VectorXd y = phi.at(k) + xi_w.at(k);
      const Eigen::VectorXd z = phi.eval(t - problem.lag) + xi_w.eval(t - problem.lag);
      w.set(k, problem.nu * problem.g(t, y, z));
    }
  };
  auto delayed_rhs = [&](double t, const Eigen::VectorXd& y,
                         const Eigen::VectorXd& z) -> Eigen::VectorXd {
    return problem.A(t) * y + problem.h.eval(t) + problem.nu * problem.g(t, y, z);
  };
  // Residual over core nodes with delayed values interpolated from the full
  // working grid (the core alone would clamp t - lag at its left edge).
  auto residual_on_core = [&](const GridFunction& psi_w) {
    const std::size_t off = work.offset_of(opts.core);
    const double two_dt = 2.0 * work.dt;
    double worst = 0.0;
    for (std::size_t k = 0; k < opts.core.count; ++k) {
      const std::size_t i = off + k;
      if (i == 0 || i + 1 >= work.count) continue;
      const double t = work.node(i);
      const Eigen::VectorXd dy = (psi_w.at(i + 1) - psi_w.at(i - 1)) / two_dt;
      worst = std::max(worst, (dy - delayed_rhs(t, psi_w.at(i), psi_w.eval(t - problem.lag))).norm());
    }
    return worst;
  };
  auto residual_of = [&](const GridFunction& phi) {
    GridFunction psi = phi;
    psi.values += xi_w.values;
    return residual_on_core(psi);
  };

  SolveResult out;
  out.base_dichotomy = bundle.data;
  out.xi = xi_w.restrict_to(opts.core);
  out.hypothesis.K = gate.K;
  out.hypothesis.alpha = gate.alpha;
  out.hypothesis.M1 = gate.M1;
  out.hypothesis.g_sup = gate.g_sup;
  out.hypothesis.nu0 = gate.nu0;
  out.hypothesis.nu = problem.nu;
  out.hypothesis.r = problem.r;
  out.hypothesis.h1_dichotomy = true;
  out.hypothesis.h2_lipschitz = true;
  out.hypothesis.h3_delta = true;
  out.hypothesis.h4_g_vanishes = true;
  out.hypothesis.ball_condition = problem.nu <= gate.ball_branch;
  out.hypothesis.contraction_q = problem.nu * 4.0 * gate.K * gate.M1 / gate.alpha;
  out.hypothesis.q_contractive = out.hypothesis.contraction_q < 1.0;

  PicardTrace trace;
  GridFunction phi = picard_iterate(kernel, work, forcing, opts.tail_tol, opts.tol,
                                    opts.max_iterations, problem.r, residual_of,
                                    opts.residual_factor * opts.tol, trace, opts.initial_iterate);
  out.iterate_norms = std::move(trace.norms);
  out.iterations = trace.iterations;
  out.psi = phi.restrict_to(opts.core);
  out.psi.values += out.xi.values;
  {
    GridFunction psi_w = phi;
    psi_w.values += xi_w.values;
    out.residual_sup = residual_on_core(psi_w);
  }
  return out;
}

SolveResult solve_nonlinear_delay(const NonlinearDelayProblem& problem, const SolverOptions& opts) {
  if (!(problem.lag > 0.0)) throw PreconditionError("solve_nonlinear_delay: lag must be positive");

  // Reference solution of z' = f(t, z) through the designated linear split.
  SolverOptions semi_opts = opts;
  DichotomyData guess = problem.split_dichotomy
                            ? *problem.split_dichotomy
                            : DichotomyData{Eigen::MatrixXd(), 2.0, 0.5, false};
  const double pad = green_window(guess, forcing_scale_guess(problem.f, opts.core, problem.r),
                                  opts.tail_tol);
  semi_opts.core = opts.core.padded(pad + problem.lag, pad);
  StateMap f_rem = StateMap::minus_linear(problem.f, problem.A_split);
  SemilinearResult semi =
      solve_semilinear(problem.A_split, problem.split_dichotomy, f_rem, problem.r, semi_opts);
  const TimeGrid work = semi.xi.grid;
  const GridFunction& xi_w = semi.xi;

  // Variational kernel of z' = (df/dx)(t, xi(t)) z.
  auto xi_eval = std::make_shared<GridFunction>(xi_w);
  const StateMap f = problem.f;
  MatrixFunction variational(
      f.dim,
      [f, xi_eval](double t) -> Eigen::MatrixXd { return f.jacobian(t, xi_eval->eval(t)); },
      problem.A_split.sup_bound() + 1.0);
  auto fund_var = std::make_shared<FundamentalSolution>(
      integrate_fundamental(variational, work, opts.integrator_tol));
  DichotomyData var_dich;
  if (problem.variational_dichotomy) {
    var_dich = *problem.variational_dichotomy;
  } else {
    const Eigen::MatrixXd Q = refit_projection(*fund_var, semi.dichotomy.P);
    auto est = estimate_dichotomy(*fund_var, Q, opts.dichotomy_pairs);
    if (!est.report.found)
      throw HypothesisError("solve_nonlinear_delay: variational system has no dichotomy: " +
                            est.report.message);
    var_dich = est.data;
  }
  GreenKernel kernel(fund_var, var_dich);

  DelayGate gate;
  gate.K = var_dich.K;
  gate.alpha = var_dich.alpha;
  gate.g_sup = problem.g_sup ? *problem.g_sup
                             : sampled_delay_sup(problem.g, xi_w, problem.lag, problem.r, opts.moduli);
  gate.M1 = problem.M1 ? *problem.M1
                       : sampled_delay_lipschitz(problem.g, xi_w, problem.lag, problem.r, opts.moduli);
  gate.ball_branch = gate.g_sup > 0.0 ? problem.r * gate.alpha / (2.0 * gate.K * gate.g_sup)
                                      : std::numeric_limits<double>::infinity();
  gate.contraction_branch = gate.M1 > 0.0 ? gate.alpha / (4.0 * gate.K * gate.M1)
                                          : std::numeric_limits<double>::infinity();
  gate.binding = gate.ball_branch <= gate.contraction_branch ? 0 : 1;
  gate.nu0 = std::min(gate.ball_branch, gate.contraction_branch);
  if (problem.nu > gate.nu0) {
    std::ostringstream os;
    os << "solve_nonlinear_delay: nu = " << problem.nu << " exceeds nu0 = " << gate.nu0
       << " = min{ r alpha/(2K||g||) = " << gate.ball_branch
       << ", alpha/(4K M1) = " << gate.contraction_branch << " }; binding branch: "
       << (gate.binding == 0 ? "r alpha/(2K||g||)" : "alpha/(4K M1)");
    throw PreconditionError(os.str());
  }

  auto xi_fn = [xi_eval](double t) { return xi_eval->eval(t); };
  auto forcing = [&](const GridFunction& phi, GridFunction& w) {
    for (std::size_t k = 0; k < phi.size(); ++k) {
      const double t = phi.grid.node(k);
      const Eigen::VectorXd u = phi.at(k);
      const Eigen::VectorXd y = u + xi_w.at(k);
      const Eigen::VectorXd z = phi.eval(t - problem.lag) + xi_w.eval(t - problem.lag);
      w.set(k, taylor_remainder(f, xi_fn, t, u) + problem.nu * problem.g(t, y, z));
    }
  };
  auto delayed_rhs = [&](double t, const Eigen::VectorXd& y,
                         const Eigen::VectorXd& z) -> Eigen::VectorXd {
    return f.value(t, y) + problem.nu * problem.g(t, y, z);
  };
  auto residual_on_core = [&](const GridFunction& psi_w) {
    const std::size_t off = work.offset_of(opts.core);
    const double two_dt = 2.0 * work.dt;
    double worst = 0.0;
    for (std::size_t k = 0; k < opts.core.count; ++k) {
      const std::size_t i = off + k;
      if (i == 0 || i + 1 >= work.count) continue;
      const double t = work.node(i);
      const Eigen::VectorXd dy = (psi_w.at(i + 1) - psi_w.at(i - 1)) / two_dt;
      worst = std::max(worst, (dy - delayed_rhs(t, psi_w.at(i), psi_w.eval(t - problem.lag))).norm());
    }
    return worst;
  };
  auto residual_of = [&](const GridFunction& phi) {
    GridFunction psi = phi;
    psi.values += xi_w.values;
    return residual_on_core(psi);
  };

  SolveResult out;
  out.base_dichotomy = semi.dichotomy;
  out.perturbed_fitted = var_dich;
  out.xi = xi_w.restrict_to(opts.core);
  out.hypothesis.K = gate.K;
  out.hypothesis.alpha = gate.alpha;
  out.hypothesis.M1 = gate.M1;
  out.hypothesis.g_sup = gate.g_sup;
  out.hypothesis.nu0 = gate.nu0;
  out.hypothesis.nu = problem.nu;
  out.hypothesis.r = problem.r;
  out.hypothesis.h1_dichotomy = true;
  out.hypothesis.h2_lipschitz = true;
  out.hypothesis.h3_delta = true;
  out.hypothesis.h4_g_vanishes = true;
  out.hypothesis.ball_condition = problem.nu <= gate.ball_branch;
  out.hypothesis.contraction_q = problem.nu * 4.0 * gate.K * gate.M1 / gate.alpha;
  out.hypothesis.q_contractive = out.hypothesis.contraction_q < 1.0;

  PicardTrace trace;
  GridFunction phi = picard_iterate(kernel, work, forcing, opts.tail_tol, opts.tol,
                                    opts.max_iterations, problem.r, residual_of,
                                    opts.residual_factor * opts.tol, trace, opts.initial_iterate);
  out.iterate_norms = std::move(trace.norms);
  out.iterations = trace.iterations;
  out.psi = phi.restrict_to(opts.core);
  out.psi.values += out.xi.values;
  {
    GridFunction psi_w = phi;
    psi_w.values += xi_w.values;
    out.residual_sup = residual_on_core(psi_w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Residuals
// ---------------------------------------------------------------------------

double residual_sup_norm(const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)>& rhs,
                         const GridFunction& y) {
  if (y.size() < 3) throw PreconditionError("residual: grid shorter than 3 nodes");
  double worst = 0.0;
  const double two_dt = 2.0 * y.grid.dt;
  for (std::size_t k = 1; k + 1 < y.size(); ++k) {
    const Eigen::VectorXd dy = (y.at(k + 1) - y.at(k - 1)) / two_dt;
    worst = std::max(worst, (dy - rhs(y.grid.node(k), y.at(k))).norm());
  }
  return worst;
}

double residual_sup_norm_delayed(
    const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&, const Eigen::VectorXd&)>& rhs,
    const GridFunction& y, double lag) {
  if (y.size() < 3) throw PreconditionError("residual: grid shorter than 3 nodes");
  double worst = 0.0;
  const double two_dt = 2.0 * y.grid.dt;
  for (std::size_t k = 1; k + 1 < y.size(); ++k) {
    const double t = y.grid.node(k);
    const Eigen::VectorXd dy = (y.at(k + 1) - y.at(k - 1)) / two_dt;
    worst = std::max(worst, (dy - rhs(t, y.at(k), y.eval(t - lag))).norm());
  }
  return worst;
}

}  // namespace rap
