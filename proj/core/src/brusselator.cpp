#include "rap/brusselator.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "rap/errors.hpp"
#include "rap/serialization.hpp"
#include "rap/svg.hpp"

namespace rap {

namespace {

ParamMap default_perturbation() {
  // State-free almost periodic mix at incommensurate frequencies.
  Signal s(2);
  {
    TrigTerm t;
    t.omega = std::sqrt(2.0);
    t.cos_coef = (Eigen::VectorXd(2) << 0.25, 0.0).finished();
    t.sin_coef = Eigen::VectorXd::Zero(2);
    s.add(std::move(t));
  }
  {
    TrigTerm t;
    t.omega = std::sqrt(3.0);
    t.cos_coef = Eigen::VectorXd::Zero(2);
    t.sin_coef = (Eigen::VectorXd(2) << 0.0, 0.25).finished();
    s.add(std::move(t));
  }
  return ParamMap::nu_signal(s);
}

}  // namespace

BrusselatorBuild build_brusselator(const BrusselatorSpec& spec) {
  if (spec.a.dimension() != 1 || spec.b.dimension() != 1)
    throw PreconditionError("brusselator: coefficient signals must be scalar");
  for (std::size_t k = 0; k < spec.core.count; k += 7) {
    const double t = spec.core.node(k);
    if (!(spec.a.eval_scalar(t) > 0.0) || !(spec.b.eval_scalar(t) > 0.0))
      throw PreconditionError("brusselator: coefficients must stay positive on the grid (t = " +
                              std::to_string(t) + ")");
  }

  BrusselatorBuild out;
  out.a_mean = ergodic_mean(spec.a, spec.mean_T)(0);
  out.b_mean = ergodic_mean(spec.b, spec.mean_T)(0);
  const double ub = out.a_mean;
  const double vb = out.b_mean / out.a_mean;
  out.reference << ub, vb;

  // Jacobian of the planar field at the reference with mean coefficients.
  out.A << out.b_mean - 1.0, ub * ub, -out.b_mean, -ub * ub;

  Eigen::MatrixXd P;
  try {
    P = spectral_projection(out.A);
  } catch (const Error& e) {
    throw PreconditionError(std::string("brusselator: linearization not hyperbolic at the "
                                        "reference point, no dichotomy (") + e.what() + ")");
  }
  {
    Eigen::EigenSolver<Eigen::MatrixXd> es(out.A);
    out.eigenvalues = es.eigenvalues();
  }

  const Signal a = spec.a;
  const Signal b = spec.b;
  const Eigen::Vector2d ref = out.reference;
  const Eigen::Matrix2d A = out.A;

  auto rhs_full = [a, b](double t, double u, double v) {
    const double at = a.eval_scalar(t);
    const double bt = b.eval_scalar(t);
    Eigen::Vector2d out_v;
    out_v << at - (bt + 1.0) * u + u * u * v, bt * u - u * u * v;
    return out_v;
  };

  StateMap f;
  f.dim = 2;
  f.value = [rhs_full, ref, A](double t, const Eigen::VectorXd& x) -> Eigen::VectorXd {
    return rhs_full(t, ref(0) + x(0), ref(1) + x(1)) - A * x;
  };
  f.jacobian = [b, ref, A](double t, const Eigen::VectorXd& x) -> Eigen::MatrixXd {
    const double bt = b.eval_scalar(t);
    const double u = ref(0) + x(0);
    const double v = ref(1) + x(1);
    Eigen::Matrix2d J;
    J << -(bt + 1.0) + 2.0 * u * v, u * u, bt - 2.0 * u * v, -u * u;
    return J - A;
  };
  f.hessian = [ref](double, const Eigen::VectorXd& x) {
    const double u = ref(0) + x(0);
    const double v = ref(1) + x(1);
    Eigen::Matrix2d H1;
    H1 << 2.0 * v, 2.0 * u, 2.0 * u, 0.0;
    return std::vector<Eigen::MatrixXd>{H1, -H1};
  };

  out.problem.A = MatrixFunction::constant(out.A);
  out.problem.projection = P;
  out.problem.f = f;
  out.problem.g = spec.g ? *spec.g : default_perturbation();
  out.problem.nu = spec.nu;
  out.problem.r = spec.r;
  return out;
}

BrusselatorRun run_demo(const BrusselatorSpec& spec, const std::string& out_dir, bool svg) {
  BrusselatorRun run;
  run.build = build_brusselator(spec);

  SolverOptions opts;
  opts.core = spec.core;
  opts.tol = spec.tol;
  opts.tail_tol = spec.tail_tol;
  run.solve = solve_perturbed(run.build.problem, opts);

  run.trajectory = run.solve.psi;
  run.trajectory.values.col(0).array() += run.build.reference(0);
  run.trajectory.values.col(1).array() += run.build.reference(1);
  run.components_positive = run.trajectory.values.minCoeff() > 0.0;

  std::filesystem::create_directories(out_dir);
  run.csv_path = out_dir + "/brusselator.csv";
  {
    // t,u,v columns.
    std::ofstream os(run.csv_path);
    if (!os) throw Error("cannot open for writing: " + run.csv_path);
    os << "t,u,v\n";
    char buf[96];
    for (std::size_t k = 0; k < run.trajectory.size(); ++k) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", run.trajectory.grid.node(k),
                    run.trajectory.values(static_cast<Eigen::Index>(k), 0),
                    run.trajectory.values(static_cast<Eigen::Index>(k), 1));
      os << buf;
    }
  }
  run.report_path = out_dir + "/brusselator_report.json";
  {
    std::ofstream os(run.report_path);
    if (!os) throw Error("cannot open for writing: " + run.report_path);
    os << brusselator_report_json(run);
  }
  if (svg) {
    run.svg_path = out_dir + "/brusselator.svg";
    SvgSeries su, sv;
    su.label = "u";
    sv.label = "v";
    for (std::size_t k = 0; k < run.trajectory.size(); ++k) {
      const double t = run.trajectory.grid.node(k);
      su.x.push_back(t);
      su.y.push_back(run.trajectory.values(static_cast<Eigen::Index>(k), 0));
      sv.x.push_back(t);
      sv.y.push_back(run.trajectory.values(static_cast<Eigen::Index>(k), 1));
    }
    write_svg_chart(run.svg_path, "nonautonomous Brusselator trajectory", {su, sv});
  }
  return run;
}

}  // namespace rap
